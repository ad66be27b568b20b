"""Fixed-point quantization between reals and centered Z_q plaintexts.

All scales are powers of two and are tracked as base-2 exponents so the
effective-step ledger stays exact: multiplying ciphertexts adds exponents,
and decrypted integers are rescaled exactly once at the recorded step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ProfileLookupError, QuantizationOverflowError
from .he_core import LweParams


def _pow2_exp(x: float, name: str) -> int:
    if x <= 0:
        raise ParameterError(f"{name} must be a positive power of two, got {x}")
    e = math.log2(x)
    if abs(e - round(e)) > 1e-12:
        raise ParameterError(f"{name} must be a power of two, got {x}")
    return int(round(e))


@dataclass(frozen=True)
class ScaleParams:
    """Quantization scales (L, s1, s2, r).

    L is the base resolution used during controller synthesis and as the
    announced price tick; s1 scales the realized controller coefficients;
    s2 is a secondary input-coupling scale (1 for the SISO-style price
    loop); r scales online signals (measurements, re-encrypted prices).
    """

    L: float
    s1: float
    s2: float
    r: float

    def __post_init__(self):
        for name in ("L", "s1", "s2", "r"):
            _pow2_exp(getattr(self, name), name)
        if self.L > 1.0:
            raise ParameterError(f"L must lie in (0, 1], got {self.L}")

    @property
    def l_exp(self) -> int:
        return _pow2_exp(self.L, "L")

    @property
    def s1_exp(self) -> int:
        return _pow2_exp(self.s1, "s1")

    @property
    def s2_exp(self) -> int:
        return _pow2_exp(self.s2, "s2")

    @property
    def r_exp(self) -> int:
        return _pow2_exp(self.r, "r")


def quantize(x: float, step: float, q: int | None = None) -> int:
    """Round-half-even of x/step as a centered residue.

    Raises when the result would leave the centered range of the active
    modulus; detection is exact, not approximate.
    """
    m = round(x / step)  # python round() is round-half-to-even
    if q is not None and not (-q // 2 <= m < q // 2):
        raise QuantizationOverflowError(x, step, q)
    return m


def dequantize(m: int, step: float) -> float:
    return m * step


def quantize_array(x: np.ndarray, step: float, q: int | None = None) -> np.ndarray:
    """Entrywise quantization; names the first offending entry on overflow."""
    x = np.asarray(x, dtype=np.float64)
    m = np.round(x / step)  # np.round is round-half-even
    if q is not None:
        bad = (m < -(q // 2)) | (m >= q // 2)
        if np.any(bad):
            idx = tuple(int(k) for k in np.argwhere(bad)[0])
            raise QuantizationOverflowError(float(x[idx]), step, q)
    return m.astype(np.int64)


def dequantize_array(m: np.ndarray, step: float) -> np.ndarray:
    return np.asarray(m, dtype=np.float64) * step


@dataclass(frozen=True)
class Profile:
    """A named (scale, crypto) pairing plus pipeline tuning that rides along."""

    name: str
    scale: ScaleParams
    params: LweParams
    dare_iterations: int = 200
    description: str = ""

    def __iter__(self):
        # Allow tuple-style unpacking: scale, params = select_profile(name)
        return iter((self.scale, self.params))


_PROFILES = {
    # Published evaluation set 1: coarse base resolution, 30-bit modulus.
    "paper-coarse": Profile(
        name="paper-coarse",
        scale=ScaleParams(L=2.0**-6, s1=2.0**-12, s2=1.0, r=2.0**-12),
        params=LweParams(q=2**30, sigma=1, n_l=329, nu=2, d=19),
    ),
    # Published evaluation set 2: fine base resolution, 60-bit modulus.
    "paper-fine": Profile(
        name="paper-fine",
        scale=ScaleParams(L=2.0**-10, s1=2.0**-20, s2=1.0, r=2.0**-20),
        params=LweParams(q=2**60, sigma=1, n_l=648, nu=2, d=35),
    ),
    # Reduced CI profile: small lattice dimension, 5-bit digits, and a modulus
    # wide enough to host the synthesis dynamic range (value bits + guard
    # precision) without per-product overflow.
    "desk": Profile(
        name="desk",
        scale=ScaleParams(L=2.0**-6, s1=2.0**-16, s2=1.0, r=2.0**-16),
        params=LweParams(q=2**58, sigma=1, n_l=8, nu=32, d=12),
        dare_iterations=520,
    ),
    # Deliberately degraded CI twin of "desk" for the coarse-vs-fine contrast.
    "desk-coarse": Profile(
        name="desk-coarse",
        scale=ScaleParams(L=2.0**-3, s1=2.0**-12, s2=1.0, r=2.0**-8),
        params=LweParams(q=2**58, sigma=1, n_l=8, nu=32, d=12),
        dare_iterations=520,
    ),
    # Published scale sets paired with reduced lattice dimensions so the
    # scale-driven contrast reproduces end-to-end in minutes.
    "paper-coarse-sim": Profile(
        name="paper-coarse-sim",
        scale=ScaleParams(L=2.0**-6, s1=2.0**-12, s2=1.0, r=2.0**-12),
        params=LweParams(q=2**58, sigma=1, n_l=8, nu=32, d=12),
        dare_iterations=640,
    ),
    "paper-fine-sim": Profile(
        name="paper-fine-sim",
        scale=ScaleParams(L=2.0**-10, s1=2.0**-20, s2=1.0, r=2.0**-20),
        params=LweParams(q=2**60, sigma=1, n_l=8, nu=32, d=12),
        dare_iterations=640,
    ),
}


def select_profile(name: str) -> Profile:
    try:
        return _PROFILES[name]
    except KeyError:
        raise ProfileLookupError(
            f"unknown profile {name!r}; available: {', '.join(sorted(_PROFILES))}"
        ) from None


def profile_names() -> list[str]:
    return sorted(_PROFILES)


def profile_with_overrides(name: str, overrides: dict) -> Profile:
    """Apply config-file overrides (scale.L, param.q, ...) to a base profile."""
    base = select_profile(name)
    scale_kw = {
        "L": base.scale.L, "s1": base.scale.s1, "s2": base.scale.s2, "r": base.scale.r,
    }
    param_kw = {
        "q": base.params.q, "sigma": base.params.sigma, "n_L": base.params.n_l,
        "nu": base.params.nu, "d": base.params.d,
    }
    iters = base.dare_iterations
    for key, value in overrides.items():
        section, _, field_name = key.partition(".")
        if section == "scale" and field_name in scale_kw:
            scale_kw[field_name] = float(value)
        elif section == "param" and field_name in param_kw:
            param_kw[field_name] = int(value)
        elif key == "dare_iterations":
            iters = int(value)
        else:
            raise ProfileLookupError(f"unknown profile override key {key!r}")
    return Profile(
        name=name,
        scale=ScaleParams(**scale_kw),
        params=LweParams(
            q=param_kw["q"], sigma=param_kw["sigma"], n_l=param_kw["n_L"],
            nu=param_kw["nu"], d=param_kw["d"],
        ),
        dare_iterations=iters,
    )
