"""Online phase: plant stepping, encrypted controller evaluation, price
announcement, and trajectory recording.

Each step is strictly sequential: the plant emits a noisy ACE measurement,
the delegate server encrypts it and produces the encrypted price from the
integer-form controller state, the market operator decrypts and announces
the tick-rounded price and hands back a fresh encryption for re-injection,
the generators apply their local affine laws, and the plant advances under
the control inputs and the current load disturbance.

The crypto-off twin runs the identical loop with identically quantized
signals and coefficients, so run pairs isolate the encryption effects.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import generator_agent as ga
from . import he_core as he
from . import market_synthesis as ms
from . import plant_model as pm
from . import protocols as pr
from . import second_crypto
from .errors import ConfigError, NoiseOverflowError
from .quantizer import Profile, select_profile

PAPER_Q_DIAGS = ([100.0, 50.0, 20.0, 500.0], [200.0, 45.0, 30.0, 400.0])
PAPER_R_COSTS = (100.0, 50.0)
PAPER_Q0_DIAG = [600.0, 50.0, 50.0, 20.0, 400.0, 120.0, 50.0, 30.0]
PAPER_R0 = 25.0

MODE_ENCRYPTED = "encrypted"
MODE_QUANTIZED = "quantized"     # crypto off, identical quantization grids
MODE_FLOAT = "float"             # crypto off, unquantized reference controller


@dataclass(frozen=True)
class SimConfig:
    profile: str = "desk"
    plant: str = "paper-two-area"
    horizon: int = 150
    dt: float = 0.2
    seed: int = 0
    mode: str = MODE_ENCRYPTED
    baseline_load_mw: float = 5000.0
    baseline_price: float = 135.0
    system_base_mva: float = 1000.0
    load_step_interval: int = 25
    load_amplitude_frac: float = 0.01
    noise_amplitude: float = 1e-4
    price_unit: float = 1024.0
    feedforward: bool = False
    governor_variant: str = pm.GOVERNOR_AS_PRINTED
    paced: bool = False
    dare_iterations: int | None = None
    q_diags: tuple = PAPER_Q_DIAGS
    r_costs: tuple = PAPER_R_COSTS
    q0_diag: tuple = tuple(PAPER_Q0_DIAG)
    r0: float = PAPER_R0

    def __post_init__(self):
        if self.mode not in (MODE_ENCRYPTED, MODE_QUANTIZED, MODE_FLOAT):
            raise ConfigError(f"unknown run mode {self.mode!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.load_step_interval < 1:
            raise ConfigError("load_step_interval must be >= 1")
        e = np.log2(self.price_unit)
        if abs(e - round(e)) > 1e-12:
            raise ConfigError("price_unit must be a power of two for exact tick accounting")
        if len(self.q_diags) != len(self.r_costs):
            raise ConfigError("per-generator cost lists must have equal length")


@dataclass
class Trajectory:
    profile: str
    seed: int
    mode: str
    dt: float
    times: np.ndarray        # (T,)
    states: np.ndarray       # (T, 4N) plant state before the step's update
    outputs: np.ndarray      # (T, N) noisy ACE measurements
    prices: np.ndarray       # (T, N) announced prices ($/MW)
    price_devs: np.ndarray   # (T, N) announced deviations (model units)
    controls: np.ndarray     # (T, N)
    loads: np.ndarray        # (T, N) load change disturbance (pu)
    budgets: np.ndarray      # (T,) max controller noise budget
    wall_clock: float = 0.0
    n_areas: int = 2

    @property
    def horizon(self) -> int:
        return len(self.times)


def plant_areas(name: str):
    if name == "paper-two-area":
        return pm.paper_two_area()
    if name == "single-area":
        return [pm.AreaParams(h=0.081, d=0.015, r=3.100, t_g=0.070, t_t=0.393)]
    raise ConfigError(f"unknown plant profile {name!r}")


def build_setup(config: SimConfig):
    """Plant, generator types/gains, and the public synthesis inputs."""
    areas = plant_areas(config.plant)
    n = len(areas)
    plant = pm.build_discrete_plant(areas, config.dt, config.governor_variant)
    if len(config.q_diags) != n:
        raise ConfigError(f"need {n} per-generator cost entries, got {len(config.q_diags)}")
    types, gains = [], []
    for i in range(n):
        s = 4 * i
        theta = ga.GeneratorType(
            a_ii=plant.a[s : s + 4, s : s + 4],
            b_i=plant.b[s : s + 4, i : i + 1],
            b_wi=plant.b_w[s : s + 4, i : i + 1],
            c_i=pm.ace_output(areas[i], i, n),
            q_i=np.diag(np.asarray(config.q_diags[i], dtype=float)),
            r_i=float(config.r_costs[i]),
        )
        types.append(theta)
        gains.append(ga.derive_local_gains(theta))
    coupling = plant.a.copy()
    for i in range(n):
        coupling[4 * i : 4 * i + 4, 4 * i : 4 * i + 4] = 0.0
    amp_pu = config.load_amplitude_frac * config.baseline_load_mw / config.system_base_mva
    q0 = np.diag(np.asarray(config.q0_diag, dtype=float))
    if q0.shape[0] != 4 * n:
        raise ConfigError(f"operator cost diagonal must have {4 * n} entries")
    inputs = ms.SynthesisInputs(
        q0=q0,
        r0=float(config.r0),
        coupling=coupling,
        w=plant.b_w @ np.diag([amp_pu**2 / 3.0 + 1e-9] * n) @ plant.b_w.T + 1e-6 * np.eye(4 * n),
        v=(config.noise_amplitude**2 / 3.0 + 1e-12) * np.eye(n),
    )
    return plant, types, gains, inputs, amp_pu


def _load_schedule(config: SimConfig, amp_pu: float, rng) -> np.ndarray:
    """Piecewise-constant random load steps, one resample per interval."""
    n = len(plant_areas(config.plant))
    n_blocks = -(-config.horizon // config.load_step_interval)
    levels = rng.uniform(-amp_pu, amp_pu, size=(n_blocks, n))
    sched = np.repeat(levels, config.load_step_interval, axis=0)[: config.horizon]
    return sched


class _Parties:
    def __init__(self, profile: Profile, seed_seq: np.random.SeedSequence):
        kid = seed_seq.spawn(4)
        key_seed = kid[0]
        self.keys = he.keygen(profile.params, seed=key_seed)
        self.iso = pr.IsoParty(self.keys, seed=kid[1])
        self.bus = pr.MessageBus()
        self.bus.register(pr.Role.ISO, self.iso.handle)
        sk2_seed = bytes(np.random.default_rng(kid[2]).integers(0, 256, 32, dtype=np.uint8))
        self.second = second_crypto.second_keygen(seed=sk2_seed)
        self.server = pr.DelegateServer(self.keys.pk, self.second, self.bus, seed=kid[3])


def synthesize_for_run(config: SimConfig):
    """Offline phase for the configured run.  Returns everything the online
    loop needs, for either the encrypted path or the plaintext twin."""
    profile = select_profile(config.profile)
    if config.dare_iterations is not None:
        profile = replace(profile, dare_iterations=config.dare_iterations)
    plant, types, gains, inputs, amp_pu = build_setup(config)
    if config.mode == MODE_FLOAT:
        plain = ms.synthesize_plain(types, gains, inputs)
        return profile, plant, types, gains, inputs, amp_pu, plain, None
    if config.mode == MODE_QUANTIZED:
        plain = ms.synthesize_plain(
            types, gains, inputs, profile=profile,
            fixed_iterations=profile.dare_iterations,
        )
        return profile, plant, types, gains, inputs, amp_pu, plain, None
    parties = _Parties(profile, np.random.SeedSequence(entropy=(config.seed, 0xE1FC)))
    rng_rep = np.random.default_rng(np.random.SeedSequence(entropy=(config.seed, 0x9E90)))
    boxes = {}
    for i, (theta, g) in enumerate(zip(types, gains)):
        eph = bytes(rng_rep.integers(0, 256, 32, dtype=np.uint8))
        boxes[i] = ga.report_type(
            theta, g, parties.keys.pk, parties.second.pk2, profile.scale, rng_rep, eph_seed=eph
        )
    enc = pr.run_offline_phase(parties.iso, parties.server, boxes, profile, inputs)
    return profile, plant, types, gains, inputs, amp_pu, enc, parties


def run(config: SimConfig) -> Trajectory:
    """Full off-line synthesis followed by the online closed loop."""
    t_start = time.time()
    profile, plant, types, gains, inputs, amp_pu, synth, parties = synthesize_for_run(config)
    n = plant.n_areas
    dim = 4 * n
    ss = np.random.SeedSequence(entropy=(config.seed, 0x51A1))
    rng_load, rng_noise = (np.random.default_rng(s) for s in ss.spawn(2))
    loads = _load_schedule(config, amp_pu, rng_load)
    noises = rng_noise.uniform(-config.noise_amplitude, config.noise_amplitude,
                               size=(config.horizon, n))
    c_out = plant.output_matrix()
    scale = profile.scale
    tick = scale.L
    r_step = scale.r

    states = np.zeros((config.horizon, dim))
    outputs = np.zeros((config.horizon, n))
    price_devs = np.zeros((config.horizon, n))
    controls = np.zeros((config.horizon, n))
    budgets = np.zeros(config.horizon)

    x = np.zeros(dim)
    unit_exp = int(round(np.log2(config.price_unit)))
    if config.mode == MODE_ENCRYPTED:
        runner = _EncryptedController(synth, parties, profile, unit_exp)
    elif config.mode == MODE_QUANTIZED:
        runner = _PlainController(synth, profile, unit_exp)
    else:
        runner = _FloatController(synth)

    for t in range(config.horizon):
        step_t0 = time.time()
        states[t] = x
        y = c_out @ x + noises[t]
        outputs[t] = y
        try:
            p_dev = runner.step(y)
        except NoiseOverflowError as exc:
            exc.step_index = t
            raise
        price_devs[t] = p_dev
        budgets[t] = runner.budget()
        u = np.array([
            ga.local_control(gains[i], x[4 * i : 4 * i + 4], p_dev) for i in range(n)
        ])
        controls[t] = u
        x = plant.a @ x + plant.b @ u + plant.b_w @ loads[t]
        if config.paced:
            time.sleep(max(0.0, config.dt - (time.time() - step_t0)))
    return Trajectory(
        profile=config.profile, seed=config.seed, mode=config.mode, dt=config.dt,
        times=np.arange(config.horizon) * config.dt,
        states=states, outputs=outputs,
        prices=config.baseline_price + config.price_unit * price_devs,
        price_devs=price_devs, controls=controls, loads=loads, budgets=budgets,
        wall_clock=time.time() - t_start, n_areas=n,
    )


class _EncryptedController:
    """Server-side online evaluation of the integer-form controller."""

    def __init__(self, synth: ms.EncSynthesis, parties: _Parties, profile: Profile,
                 unit_exp: int = 10):
        self.synth = synth
        self.parties = parties
        self.profile = profile
        # The announce tick is the base resolution in dollars; the model-unit
        # tick is finer by the per-unit price conversion.
        self.tick_exp = profile.scale.l_exp - unit_exp
        self.params = parties.keys.params
        self.rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(0x0E11, parties.server.rng.integers(0, 2**31)))
        )
        n_state = synth.r_int.shape[0]
        z_exp = synth.tb.step_exp + profile.scale.r_exp
        self.z = he.enc_matrix(
            parties.keys.pk, np.zeros((n_state, 1), dtype=np.int64), self.rng, step_exp=z_exp
        )
        self.p_fresh = he.enc_matrix(
            parties.keys.pk, np.zeros((synth.c_int.shape[0], 1), dtype=np.int64),
            self.rng, step_exp=profile.scale.r_exp,
        )

    def step(self, y: np.ndarray) -> np.ndarray:
        scale = self.profile.scale
        q = self.params.q
        y_ints = np.round(np.asarray(y).reshape(-1, 1) / scale.r).astype(np.int64)
        y_hat = he.enc_matrix(self.parties.keys.pk, y_ints, self.rng, step_exp=scale.r_exp)
        p_hat = he.enc_matmul(self.synth.c_int, self.z)
        announced, p_fresh = self.parties.server.request_price(
            p_hat, tick_exp=self.tick_exp, reenc_exp=scale.r_exp
        )
        self.p_fresh = p_fresh
        drive = he.enc_matadd(
            he.enc_matmul(self.synth.tb, y_hat), he.enc_matmul(self.synth.th, p_fresh)
        )
        self.z = he.enc_matadd(he.plain_matmul(self.synth.r_int, self.z), drive)
        pr.announce_price(self.parties.bus, announced, self.synth.c_int.shape[0])
        return announced

    def budget(self) -> float:
        return float(self.z.budgets.max())


class _FloatController:
    """Unquantized reference: the float output-feedback realization."""

    def __init__(self, synth: ms.PlainSynthesis):
        r = synth.realization
        self.a_k, self.b_k, self.c_k = r.a_k, r.b_k, r.c_k
        self.x = np.zeros(r.a_k.shape[0])

    def step(self, y: np.ndarray) -> np.ndarray:
        p = self.c_k @ self.x
        self.x = self.a_k @ self.x + self.b_k @ np.asarray(y).reshape(-1)
        return p

    def budget(self) -> float:
        return 0.0


class _PlainController:
    """Crypto-off twin: same integer-form recursion on quantized values."""

    def __init__(self, synth: ms.PlainSynthesis, profile: Profile, unit_exp: int = 10):
        f = synth.integer_form
        s1 = profile.scale.s1
        self.r_int = f.r_int.astype(float)
        self.tb = np.round(f.tb / s1) * s1
        self.th = np.round(f.th / s1) * s1
        self.c_int = np.round(f.c_int / s1) * s1
        self.scale = profile.scale
        self.tick = 2.0 ** (profile.scale.l_exp - unit_exp)
        self.z = np.zeros(f.r_int.shape[0])

    def step(self, y: np.ndarray) -> np.ndarray:
        y_q = np.round(np.asarray(y) / self.scale.r) * self.scale.r
        p = self.c_int @ self.z
        announced = np.round(p / self.tick) * self.tick
        p_q = np.round(announced / self.scale.r) * self.scale.r
        self.z = self.r_int @ self.z + self.tb @ y_q + self.th @ p_q
        return announced

    def budget(self) -> float:
        return 0.0


# ---------------------------------------------------------------------------
# Comparison and export
# ---------------------------------------------------------------------------


def compare_runs(a: Trajectory, b: Trajectory, tolerance: float | None = None) -> dict:
    """Per-signal deviation metrics between two runs of identical shape."""
    if a.horizon != b.horizon:
        raise ConfigError(f"horizons differ: {a.horizon} vs {b.horizon}")
    n = a.n_areas
    metrics = {}
    freq_cols = [4 * i for i in range(n)]
    mech_cols = [4 * i + 2 for i in range(n)]
    for name, xa, xb in (
        ("delta_f", a.states[:, freq_cols], b.states[:, freq_cols]),
        ("dP_m", a.states[:, mech_cols], b.states[:, mech_cols]),
        ("price", a.price_devs, b.price_devs),
        ("control", a.controls, b.controls),
    ):
        dev = np.abs(xa - xb)
        metrics[f"max_{name}_dev"] = float(dev.max())
        metrics[f"mean_{name}_dev"] = float(dev.mean())
    peak = np.abs(a.states[:, freq_cols]).max()
    tail = np.abs(a.states[-max(1, a.horizon // 5):, freq_cols]).max()
    metrics["freq_peak"] = float(peak)
    metrics["freq_tail_over_peak"] = float(tail / peak) if peak > 0 else 0.0
    metrics["max_budget"] = float(max(a.budgets.max(), b.budgets.max()))
    if tolerance is not None:
        metrics["pass"] = metrics["max_price_dev"] <= tolerance
    return metrics


def trajectory_csv_header(n: int) -> str:
    cols = ["t"]
    cols += [f"delta_f_{i+1}" for i in range(n)]
    cols += [f"dP_tie_{i+1}" for i in range(max(0, n - 1))]
    cols += [f"dP_m_{i+1}" for i in range(n)]
    cols += [f"dP_g_{i+1}" for i in range(n)]
    cols += [f"ace_{i+1}" for i in range(n)]
    cols += [f"p_{i+1}" for i in range(n)]
    cols += [f"u_{i+1}" for i in range(n)]
    cols += [f"w_{i+1}" for i in range(n)]
    cols.append("noise_budget")
    return ",".join(cols)


def _trajectory_rows(traj: Trajectory):
    n = traj.n_areas
    for t in range(traj.horizon):
        row = [traj.times[t]]
        row += [traj.states[t, 4 * i] for i in range(n)]
        row += [traj.states[t, 4 * i + 1] for i in range(max(0, n - 1))]
        row += [traj.states[t, 4 * i + 2] for i in range(n)]
        row += [traj.states[t, 4 * i + 3] for i in range(n)]
        row += list(traj.outputs[t])
        row += list(traj.prices[t])
        row += list(traj.controls[t])
        row += list(traj.loads[t])
        row.append(traj.budgets[t])
        yield row


def trajectory_to_csv(traj: Trajectory) -> str:
    lines = [trajectory_csv_header(traj.n_areas)]
    for row in _trajectory_rows(traj):
        lines.append(",".join(f"{v:.12g}" for v in row))
    return "\n".join(lines) + "\n"


def trajectory_to_gnuplot(traj: Trajectory) -> str:
    lines = ["# " + trajectory_csv_header(traj.n_areas).replace(",", " ")]
    for row in _trajectory_rows(traj):
        lines.append(" ".join(f"{v:.12g}" for v in row))
    return "\n".join(lines) + "\n"


def trajectory_digest(traj: Trajectory) -> str:
    return hashlib.sha256(trajectory_to_csv(traj).encode()).hexdigest()[:16]
