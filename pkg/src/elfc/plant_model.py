"""Multi-area swing-equation plant: continuous build, ZOH discretization, ACE.

Per-area state ordering is [delta_f, delta_P_tie, delta_P_m, delta_P_g].
The governor equation is implemented exactly as the source model prints it,
with the valve self-term over the turbine time constant; a config switch
selects the textbook variant (self-term over the governor time constant)
for sensitivity checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

STATES_PER_AREA = 4

GOVERNOR_AS_PRINTED = "as-printed"
GOVERNOR_TEXTBOOK = "textbook"


@dataclass(frozen=True)
class AreaParams:
    """One control area's physical constants.

    tie maps neighbor area index (zero-based) to the tie-line coefficient.
    """

    h: float
    d: float
    r: float
    t_g: float
    t_t: float
    tie: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("h", "t_g", "t_t", "r"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"area parameter {name} must be positive")
        if self.d < 0:
            raise ParameterError("damping coefficient must be nonnegative")
        for j, t in self.tie.items():
            if t < 0:
                raise ParameterError(f"tie coefficient to area {j} must be nonnegative")


def paper_two_area() -> list[AreaParams]:
    """Built-in 'paper-two-area' plant profile."""
    return [
        AreaParams(h=0.081, d=0.015, r=3.100, t_g=0.070, t_t=0.393, tie={1: 0.20}),
        AreaParams(h=0.091, d=0.015, r=2.631, t_g=0.067, t_t=0.387, tie={0: 0.20}),
    ]


def build_area_continuous(p: AreaParams, governor: str = GOVERNOR_AS_PRINTED):
    """Local continuous-time blocks: (A_ii, input column, disturbance column).

    The tie-line row's coupling terms are added by assemble_interconnected;
    here only the local diagonal structure appears.
    """
    if governor not in (GOVERNOR_AS_PRINTED, GOVERNOR_TEXTBOOK):
        raise ParameterError(f"unknown governor variant {governor!r}")
    a = np.zeros((4, 4))
    a[0, 0] = -p.d / (2 * p.h)
    a[0, 1] = -1.0 / (2 * p.h)
    a[0, 2] = 1.0 / (2 * p.h)
    a[2, 2] = -1.0 / p.t_t
    a[2, 3] = 1.0 / p.t_t
    a[3, 0] = -1.0 / (p.t_g * p.r)
    a[3, 3] = -1.0 / (p.t_t if governor == GOVERNOR_AS_PRINTED else p.t_g)
    b = np.zeros((4, 1))
    b[3, 0] = 1.0 / p.t_g
    b_w = np.zeros((4, 1))
    b_w[0, 0] = -1.0 / (2 * p.h)
    return a, b, b_w


@dataclass(frozen=True)
class ContinuousModel:
    a: np.ndarray
    b: np.ndarray
    b_w: np.ndarray
    n_areas: int


def assemble_interconnected(
    areas: list[AreaParams], governor: str = GOVERNOR_AS_PRINTED
) -> ContinuousModel:
    """Stack per-area blocks and wire the antisymmetric tie-line coupling."""
    n = len(areas)
    if n < 1:
        raise ParameterError("need at least one area")
    for i, p in enumerate(areas):
        for j, t_ij in p.tie.items():
            if j < 0 or j >= n or j == i:
                raise ParameterError(f"area {i} has invalid tie neighbor {j}")
            t_ji = areas[j].tie.get(i)
            if t_ji is None or not math.isclose(t_ij, t_ji, rel_tol=1e-12):
                raise ParameterError(
                    f"tie coefficients between areas {i} and {j} are inconsistent"
                )
    dim = STATES_PER_AREA * n
    a = np.zeros((dim, dim))
    b = np.zeros((dim, n))
    b_w = np.zeros((dim, n))
    for i, p in enumerate(areas):
        a_ii, b_i, bw_i = build_area_continuous(p, governor)
        s = i * STATES_PER_AREA
        a[s : s + 4, s : s + 4] = a_ii
        if not p.tie:
            # No neighbors: the tie flow is identically zero, so its influence
            # column is removed; the vestigial state stays fully decoupled.
            a[s, s + 1] = 0.0
        b[s : s + 4, i : i + 1] = b_i
        b_w[s : s + 4, i : i + 1] = bw_i
        for j, t_ij in p.tie.items():
            w = 2.0 * math.pi * t_ij
            a[s + 1, s] += w                         # own frequency drives the flow
            a[s + 1, j * STATES_PER_AREA] -= w       # neighbor frequency opposes it
    return ContinuousModel(a=a, b=b, b_w=b_w, n_areas=n)


@dataclass(frozen=True)
class DiscreteModel:
    a: np.ndarray
    b: np.ndarray
    b_w: np.ndarray
    c_blocks: list  # per-area output maps C_i, each (n_areas, 4)
    dt: float
    n_areas: int

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def output_matrix(self) -> np.ndarray:
        """Stacked C_p = [C_1 ... C_N], shape (n_areas, 4 n_areas)."""
        return np.concatenate(self.c_blocks, axis=1)


def expm_series(m: np.ndarray, rel_tol: float = 1e-12, max_terms: int = 200) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring of a truncated Taylor series."""
    m = np.asarray(m, dtype=np.float64)
    norm = np.linalg.norm(m, ord=np.inf)
    s = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0 else 0
    t = m / (2.0**s)
    acc = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, max_terms + 1):
        term = term @ t / k
        acc = acc + term
        if np.linalg.norm(term, ord=np.inf) <= rel_tol * np.linalg.norm(acc, ord=np.inf):
            break
    else:
        raise ParameterError(
            f"matrix exponential series did not converge within {max_terms} terms "
            f"(input norm {norm:.3e})"
        )
    for _ in range(s):
        acc = acc @ acc
    return acc


def ace_output(p: AreaParams, i: int, n_areas: int) -> np.ndarray:
    """C_i: row i holds [1/R + D, 1, 0, 0]; all other rows are zero."""
    c = np.zeros((n_areas, STATES_PER_AREA))
    c[i, 0] = 1.0 / p.r + p.d
    c[i, 1] = 1.0
    return c


def discretize(cont: ContinuousModel, areas: list[AreaParams], dt: float) -> DiscreteModel:
    """Zero-order-hold discretization via the augmented matrix exponential."""
    if dt <= 0:
        raise ParameterError(f"sampling time must be positive, got {dt}")
    dim = cont.a.shape[0]
    n_in = cont.b.shape[1] + cont.b_w.shape[1]
    aug = np.zeros((dim + n_in, dim + n_in))
    aug[:dim, :dim] = cont.a
    aug[:dim, dim:] = np.concatenate([cont.b, cont.b_w], axis=1)
    e = expm_series(aug * dt)
    a_d = e[:dim, :dim]
    bd_all = e[:dim, dim:]
    b_d = bd_all[:, : cont.b.shape[1]]
    bw_d = bd_all[:, cont.b.shape[1] :]
    c_blocks = [ace_output(p, i, cont.n_areas) for i, p in enumerate(areas)]
    return DiscreteModel(
        a=a_d, b=b_d, b_w=bw_d, c_blocks=c_blocks, dt=dt, n_areas=cont.n_areas
    )


def build_discrete_plant(
    areas: list[AreaParams], dt: float, governor: str = GOVERNOR_AS_PRINTED
) -> DiscreteModel:
    return discretize(assemble_interconnected(areas, governor), areas, dt)
