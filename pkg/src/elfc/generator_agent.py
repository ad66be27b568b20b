"""Generator-side logic: private type, best-response LQ law, encrypted report.

Each generator solves its own infinite-horizon LQ problem against an
announced price held fixed over its optimization horizon.  The resulting
control law is affine in the local state and the price,

    u_i = F_i x_i + M_i p,

with gains obtained from the steady-state of the backward value recursion.
Gains are computed locally in plaintext; only the *report* to the market
(type matrices plus gains) leaves the generator, doubly encrypted.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import he_core as he
from . import second_crypto
from .errors import ConvergenceError, ParameterError, SingularMatrixError
from .quantizer import ScaleParams, quantize_array


@dataclass(frozen=True)
class GeneratorType:
    """Private per-generator data: local dynamics, output map, cost weights."""

    a_ii: np.ndarray   # (4, 4)
    b_i: np.ndarray    # (4, 1)
    b_wi: np.ndarray   # (4, 1)
    c_i: np.ndarray    # (n_areas, 4)
    q_i: np.ndarray    # (4, 4) symmetric PSD
    r_i: float         # > 0

    def __post_init__(self):
        if self.r_i <= 0:
            raise ParameterError("input cost weight must be positive")
        if not np.allclose(self.q_i, self.q_i.T, atol=1e-12):
            raise ParameterError("state cost weight must be symmetric")
        eigs = np.linalg.eigvalsh(self.q_i)
        if eigs.min() < -1e-10:
            raise ParameterError("state cost weight must be positive semidefinite")


@dataclass(frozen=True)
class LocalGains:
    s_bar: np.ndarray    # steady-state value matrix
    g_bar: np.ndarray    # -(R + B'SB)^-1 B'
    f_i: np.ndarray      # state gain (1, 4)
    phi_i: np.ndarray    # price-to-costate map (4, n_areas)
    m_i: np.ndarray      # price gain (1, n_areas)


def riccati_rhs(s, a, b, q, r):
    """One backward step of the value recursion."""
    bs = b.T @ s
    inner = r + (bs @ b).item()
    return q + a.T @ s @ a - (a.T @ s @ b) @ (bs @ a) / inner


def solve_local_riccati(theta: GeneratorType, tol: float = 1e-10, max_iter: int = 100_000):
    """Steady state of the backward recursion started from the terminal cost."""
    s = theta.q_i.copy()
    history = []
    for _ in range(max_iter):
        s_next = riccati_rhs(s, theta.a_ii, theta.b_i, theta.q_i, theta.r_i)
        delta = float(np.max(np.abs(s_next - s)))
        history.append(delta)
        s = s_next
        if delta <= tol:
            return 0.5 * (s + s.T)
    raise ConvergenceError(
        f"local value recursion did not reach tol={tol} in {max_iter} iterations",
        residual_history=history[-20:],
    )


def riccati_residual(s, theta: GeneratorType) -> float:
    return float(np.max(np.abs(s - riccati_rhs(s, theta.a_ii, theta.b_i, theta.q_i, theta.r_i))))


def local_gains(s_bar: np.ndarray, theta: GeneratorType) -> LocalGains:
    a, b, r = theta.a_ii, theta.b_i, theta.r_i
    inner = r + (b.T @ s_bar @ b).item()
    g_bar = -b.T / inner
    f_i = g_bar @ s_bar @ a
    core = np.eye(a.shape[0]) - a.T + (a.T @ s_bar @ b) @ b.T / inner
    try:
        phi_i = -np.linalg.solve(core, theta.c_i.T)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(
            "price-to-costate map undefined: steady-state costate operator is singular"
        ) from exc
    if np.linalg.cond(core) > 1e12:
        raise SingularMatrixError(
            "price-to-costate map undefined: steady-state costate operator is singular"
        )
    return LocalGains(s_bar=s_bar, g_bar=g_bar, f_i=f_i, phi_i=phi_i, m_i=g_bar @ phi_i)


def closed_loop_radius(theta: GeneratorType, gains: LocalGains) -> float:
    return float(max(abs(np.linalg.eigvals(theta.a_ii + theta.b_i @ gains.f_i))))


def local_control(gains: LocalGains, x_i: np.ndarray, p: np.ndarray) -> float:
    """Real-time plaintext control action: u_i = F_i x_i + M_i p."""
    return (gains.f_i @ np.asarray(x_i).reshape(-1) + gains.m_i @ np.asarray(p).reshape(-1)).item()


def finite_horizon_law(theta: GeneratorType, horizon: int):
    """Backward recursion over a finite window: per-step (F_k, G_k) and the
    costate recursion matrices, with terminal value Q and terminal costate 0.

    Returns (f_seq, g_seq, r_maps) where r_maps[k] maps the fixed price to
    the costate r(k), so u_k = f_seq[k] x_k + g_seq[k] @ r_maps[k+1] @ p.
    """
    a, b, q, r = theta.a_ii, theta.b_i, theta.q_i, theta.r_i
    n = a.shape[0]
    s = q.copy()
    f_seq = [None] * horizon
    g_seq = [None] * horizon
    r_maps = [None] * (horizon + 1)
    r_maps[horizon] = np.zeros((n, theta.c_i.shape[0]))
    s_next = q.copy()
    # costate map recursion runs backward alongside the value recursion
    for k in range(horizon - 1, -1, -1):
        inner = r + (b.T @ s_next @ b).item()
        g_k = -b.T / inner
        f_k = g_k @ s_next @ a
        f_seq[k] = f_k
        g_seq[k] = g_k
        closed = a.T @ (np.eye(n) - s_next @ b @ b.T / inner)
        r_maps[k] = -theta.c_i.T + closed @ r_maps[k + 1]
        s_next = riccati_rhs(s_next, a, b, q, r)
    return f_seq, g_seq, r_maps


def finite_horizon_cost(theta: GeneratorType, x0, u_seq, p, horizon: int) -> float:
    """Truncated objective: stage costs minus price revenue, plus the
    terminal value term implied by the recursion's terminal condition."""
    x = np.asarray(x0, dtype=float).reshape(-1)
    p = np.asarray(p, dtype=float).reshape(-1)
    total = 0.0
    for k in range(horizon):
        u = float(u_seq[k])
        y = theta.c_i @ x
        total += 0.5 * float(x @ theta.q_i @ x) + 0.5 * theta.r_i * u * u - float(p @ y)
        x = theta.a_ii @ x + theta.b_i.reshape(-1) * u
    return total + 0.5 * float(x @ theta.q_i @ x)


# ---------------------------------------------------------------------------
# Encrypted type report
# ---------------------------------------------------------------------------

_REPORT_FIELDS = ("a_ii", "b_i", "b_wi", "c_i", "q_i", "r_i", "f_i", "m_i")


def _pack_matrices(mats: dict) -> bytes:
    out = [struct.pack("<I", len(mats))]
    for name, blob in mats.items():
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    return b"".join(out)


def _unpack_matrices(buf: bytes) -> dict:
    (count,) = struct.unpack_from("<I", buf, 0)
    off = 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode()
        off += nlen
        (blen,) = struct.unpack_from("<I", buf, off)
        off += 4
        out[name] = buf[off : off + blen]
        off += blen
    return out


def report_type(
    theta: GeneratorType,
    gains: LocalGains,
    pk1: he.PublicKey,
    pk2: bytes,
    scale: ScaleParams,
    rng,
    eph_seed: bytes | None = None,
) -> bytes:
    """Quantize, HE-encrypt, then seal the report for the delegate server.

    The inner layer is per-matrix HE encryption at the coefficient scale;
    the outer layer is a second-cryptosystem sealed box, so an eavesdropper
    holding only the HE secret key cannot even reach the HE ciphertexts.
    """
    q = pk1.params.q
    step = scale.s1
    step_exp = scale.s1_exp
    payload = {
        "a_ii": theta.a_ii, "b_i": theta.b_i, "b_wi": theta.b_wi, "c_i": theta.c_i,
        "q_i": theta.q_i, "r_i": np.array([[theta.r_i]]),
        "f_i": gains.f_i, "m_i": gains.m_i,
    }
    mats = {}
    for name, mat in payload.items():
        ints = quantize_array(np.asarray(mat, dtype=float), step, q)
        cm = he.enc_matrix(pk1, ints, rng, step_exp=step_exp)
        mats[name] = he.serialize_cipher_matrix(cm)
    return second_crypto.second_encrypt(pk2, _pack_matrices(mats), eph_seed=eph_seed)


def open_report(box: bytes, sk2: bytes, params: he.LweParams) -> dict:
    """Server side: strip the outer layer, deserialize the HE matrices."""
    mats = _unpack_matrices(second_crypto.second_decrypt(sk2, box))
    missing = [f for f in _REPORT_FIELDS if f not in mats]
    if missing:
        raise ParameterError(f"type report missing fields: {missing}")
    return {name: he.deserialize_cipher_matrix(blob, params) for name, blob in mats.items()}


def derive_local_gains(theta: GeneratorType, tol: float = 1e-10) -> LocalGains:
    return local_gains(solve_local_riccati(theta, tol=tol), theta)
