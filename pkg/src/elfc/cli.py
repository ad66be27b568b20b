"""Command-line interface: synthesize, run, compare, audit.

Configuration is a flat key-value text format with dotted section names:

    # comment
    sim.profile = desk
    sim.horizon = 150
    sim.seed = 7
    scale.L = 0.015625
    param.q = 288230376151711744

Unknown keys are rejected with their line number.  The only environment
override honored is ELFC_SEED (reproducibility: everything else that
affects a run lives in the config file and is folded into the manifest
digest).

Exit codes: 0 success, 2 validation, 3 protocol error, 4 noise overflow,
5 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import closed_loop_sim as sim
from . import protocols as pr
from .errors import ConfigError, ElfcError
from .quantizer import profile_names, profile_with_overrides, select_profile

_SIM_KEYS = {
    "sim.profile": ("profile", str),
    "sim.plant": ("plant", str),
    "sim.horizon": ("horizon", int),
    "sim.dt": ("dt", float),
    "sim.seed": ("seed", int),
    "sim.mode": ("mode", str),
    "sim.baseline_load_mw": ("baseline_load_mw", float),
    "sim.baseline_price": ("baseline_price", float),
    "sim.system_base_mva": ("system_base_mva", float),
    "sim.load_step_interval": ("load_step_interval", int),
    "sim.load_amplitude_frac": ("load_amplitude_frac", float),
    "sim.noise_amplitude": ("noise_amplitude", float),
    "sim.price_unit": ("price_unit", float),
    "sim.governor_variant": ("governor_variant", str),
    "sim.dare_iterations": ("dare_iterations", int),
}

_PROFILE_OVERRIDE_KEYS = {
    "scale.L", "scale.s1", "scale.s2", "scale.r",
    "param.q", "param.sigma", "param.n_L", "param.nu", "param.d",
}


def parse_config_text(text: str, path: str = "<config>") -> dict:
    """Flat key-value grammar; rejects unknown keys with line positions."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SIM_KEYS and key not in _PROFILE_OVERRIDE_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = (val, lineno)
    return values


def parse_config(path: str) -> sim.SimConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    values = parse_config_text(p.read_text(), path)
    if "sim.dt" not in values:
        raise ConfigError(f"{path}: required key sim.dt is missing")
    kwargs = {}
    for key, (val, lineno) in values.items():
        if key in _SIM_KEYS:
            field_name, conv = _SIM_KEYS[key]
            try:
                kwargs[field_name] = conv(val)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    overrides = {
        k: float(v[0]) for k, v in values.items() if k in _PROFILE_OVERRIDE_KEYS
    }
    try:
        cfg = sim.SimConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if overrides:
        # Validate the overrides now so errors surface with the config file.
        profile_with_overrides(cfg.profile, overrides)
    return cfg


def manifest_for(config: sim.SimConfig, overrides: dict | None = None) -> dict:
    payload = {
        "config": asdict(config),
        "overrides": overrides or {},
        "artifact_version": 1,
    }
    digest = hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()
    ).hexdigest()[:16]
    payload["digest"] = digest
    return payload


def _apply_seed_env(config: sim.SimConfig) -> sim.SimConfig:
    env = os.environ.get("ELFC_SEED")
    if env is not None:
        config = replace(config, seed=int(env))
    return config


def _config_from_args(args) -> sim.SimConfig:
    if args.config:
        cfg = parse_config(args.config)
    else:
        cfg = sim.SimConfig()
    if args.profile:
        select_profile(args.profile)
        cfg = replace(cfg, profile=args.profile)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "mode", None):
        cfg = replace(cfg, mode=args.mode)
    if getattr(args, "paced", False):
        cfg = replace(cfg, paced=True)
    return _apply_seed_env(cfg)


def cmd_synthesize(args) -> int:
    import base64

    cfg = _config_from_args(args)
    profile, plant, types, gains, inputs, amp, synth, parties = sim.synthesize_for_run(cfg)
    out = Path(args.out or "controller.elfc.json")
    if cfg.mode == sim.MODE_ENCRYPTED:
        from . import he_core as he

        artifact = {
            "kind": "encrypted-controller",
            "profile": profile.name,
            "mu": synth.mu,
            "r_int": synth.r_int.tolist(),
            "blobs": {
                name: base64.b64encode(he.serialize_cipher_matrix(cm)).decode()
                for name, cm in (("tb", synth.tb), ("th", synth.th), ("c_int", synth.c_int))
            },
        }
        if args.unsafe_reveal:
            artifact["revealed"] = {
                name: _reveal(parties, cm).tolist()
                for name, cm in (("tb", synth.tb), ("th", synth.th), ("c_int", synth.c_int))
            }
            print("UNSAFE: artifact includes the decrypted controller")
        out.write_text(json.dumps(artifact, indent=1))
        transcript_path = out.with_suffix(".transcript.csv")
        transcript_path.write_text(parties.bus.transcript.to_csv())
        print(f"synthesized encrypted controller -> {out} (+ {transcript_path})")
    else:
        f = synth.integer_form
        out.write_text(json.dumps({
            "kind": "plain-controller",
            "profile": profile.name,
            "mu": f.mu,
            "r_int": f.r_int.tolist(),
            "tb": f.tb.tolist(), "th": f.th.tolist(), "c_int": f.c_int.tolist(),
        }, indent=1))
        print(f"synthesized plaintext controller -> {out}")
    print(json.dumps(manifest_for(cfg), indent=1))
    return 0


def _reveal(parties, cm):
    from . import he_core as he

    return he.dec_matrix(parties.keys.sk, cm) * cm.step


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    manifest = manifest_for(cfg)
    traj = sim.run(cfg)
    out = Path(args.out or f"run-{cfg.profile}-{cfg.mode}-seed{cfg.seed}.csv")
    out.write_text(sim.trajectory_to_csv(traj))
    if args.gnuplot:
        Path(args.gnuplot).write_text(sim.trajectory_to_gnuplot(traj))
    print(f"trajectory ({traj.horizon} steps, {traj.wall_clock:.1f}s) -> {out}")
    print(json.dumps(manifest, indent=1))
    return 0


def _read_traj_csv(path: str) -> np.ndarray:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            rows.append([float(x) for x in line.split(",")])
    return header, np.array(rows)


def cmd_compare(args) -> int:
    header_a, a = _read_traj_csv(args.run_a)
    header_b, b = _read_traj_csv(args.run_b)
    if header_a != header_b or a.shape != b.shape:
        raise ConfigError("runs have mismatched horizons or layouts")
    metrics = {}
    for j, col in enumerate(header_a):
        if col == "t":
            continue
        dev = np.abs(a[:, j] - b[:, j])
        metrics[f"max_{col}_dev"] = float(dev.max())
        metrics[f"mean_{col}_dev"] = float(dev.mean())
    report = {"metrics": metrics}
    if args.tolerance is not None:
        worst = max(v for k, v in metrics.items() if k.startswith("max_p_"))
        report["tolerance"] = args.tolerance
        report["pass"] = bool(worst <= args.tolerance)
    print(json.dumps(report, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1))
    if "pass" in report and not report["pass"]:
        return 1
    return 0


def cmd_audit(args) -> int:
    transcript = pr.Transcript()
    with open(args.transcript) as fh:
        header = fh.readline().strip()
        if header != "seq,sender,receiver,kind,digest,size":
            raise ConfigError("not a transcript CSV")
        for line in fh:
            seq, sender, receiver, kind, digest, size = line.strip().split(",")
            transcript.entries.append(
                pr.TranscriptEntry(
                    seq=int(seq), sender=sender, receiver=receiver,
                    kind=kind, digest=digest, size=int(size),
                )
            )
    report = pr.audit_transcript(transcript)
    print(json.dumps({
        "frames": report.checked_frames,
        "findings": report.findings,
        "ok": report.ok,
    }, indent=1))
    return 0 if report.ok else 3


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="elfc",
        description="Encrypted price-based load-frequency-control market",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key-value config file")
        p.add_argument("--profile", choices=profile_names(), help="scale/crypto profile")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=[sim.MODE_ENCRYPTED, sim.MODE_QUANTIZED, sim.MODE_FLOAT])
        p.add_argument("--out")

    p_syn = sub.add_parser("synthesize", help="off-line phase: build the market controller")
    add_common(p_syn)
    p_syn.add_argument("--unsafe-reveal", action="store_true",
                       help="dump the decrypted controller for debugging (test builds)")
    p_syn.set_defaults(func=cmd_synthesize)

    p_run = sub.add_parser("run", help="off-line synthesis plus the online closed loop")
    add_common(p_run)
    p_run.add_argument("--paced", action="store_true", help="sleep to real time each step")
    p_run.add_argument("--gnuplot", help="also write whitespace-column plot data")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="deviation metrics between two trajectory CSVs")
    p_cmp.add_argument("run_a")
    p_cmp.add_argument("run_b")
    p_cmp.add_argument("--tolerance", type=float)
    p_cmp.add_argument("--out")
    p_cmp.set_defaults(func=cmd_compare)

    p_aud = sub.add_parser("audit", help="leakage audit of a protocol transcript CSV")
    p_aud.add_argument("transcript")
    p_aud.set_defaults(func=cmd_audit)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ElfcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
