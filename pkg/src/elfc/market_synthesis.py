"""Market controller synthesis: model assembly, Riccati solves, gain
recovery, output-feedback realization, and pole-placement integerization.

Two parallel pipelines live here.  The plaintext pipeline works on float
matrices and serves both as the crypto-off execution path and as the
independent oracle for the encrypted pipeline.  The encrypted pipeline
performs the same algebra over cipher matrices at the delegate server,
sending every matrix inversion, noise refresh, requantization, rank
certificate, and integer rounding through the masked two-party protocols.

Both Riccati equations run a fixed number of backward-recursion steps
decided in advance: convergence testing on ciphertexts would either leak
or cost extra decryption rounds, so the schedule is transcript-shape
oblivious.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import he_core as he
from .errors import (
    ConvergenceError,
    ObservabilityError,
    ParameterError,
    RangeError,
)
from .quantizer import Profile, quantize_array

# Guard bits: Riccati iterates are carried this much finer than their
# declared step so per-iteration rounding stays far below the final grid.
_ITER_GUARD_BITS = 8
# Value-bits margin kept free when auto-choosing a step for a product.
_RANGE_MARGIN_BITS = 4


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass
class MarketModel:
    a_p: np.ndarray
    b_p: np.ndarray
    c_p: np.ndarray
    b_w: np.ndarray
    q: np.ndarray
    r: np.ndarray
    n_cross: np.ndarray
    v: np.ndarray
    w: np.ndarray

    @property
    def dim(self) -> int:
        return self.a_p.shape[0]

    @property
    def n_prices(self) -> int:
        return self.b_p.shape[1]


@dataclass
class ControllerRealization:
    a_k: np.ndarray
    b_k: np.ndarray
    c_k: np.ndarray


@dataclass
class IntegerForm:
    """Controller re-parameterized for real-time encrypted evaluation.

    The recursion z+ = r_int z + tb y + th p runs over ciphertexts with the
    structural integer matrix r_int applied as known 0/1 weights, and
    p = c_int z.  t_mat maps original controller coordinates to z.
    """

    r_int: np.ndarray
    t_mat: np.ndarray
    h: np.ndarray
    tb: np.ndarray
    th: np.ndarray
    c_int: np.ndarray
    mu: list


@dataclass
class PlainSynthesis:
    model: MarketModel
    p1: np.ndarray
    p2: np.ndarray
    k_p: np.ndarray
    l_p: np.ndarray
    realization: ControllerRealization
    integer_form: IntegerForm
    p1_residual: float
    p2_residual: float


@dataclass
class SynthesisInputs:
    """Public market data: operator cost weights, grid coupling, covariances."""

    q0: np.ndarray
    r0: float
    coupling: np.ndarray  # stacked off-diagonal interconnection blocks
    w: np.ndarray
    v: np.ndarray
    cross_completion: bool = True


@dataclass
class EncMarketModel:
    a_p: he.CipherMatrix
    b_p: he.CipherMatrix
    c_p: he.CipherMatrix
    q: he.CipherMatrix
    r: he.CipherMatrix
    n_cross: he.CipherMatrix
    w: he.CipherMatrix
    v: he.CipherMatrix


@dataclass
class EncSynthesis:
    model: EncMarketModel
    p1: he.CipherMatrix
    p2: he.CipherMatrix
    k_p: he.CipherMatrix
    l_p: he.CipherMatrix
    a_k: he.CipherMatrix
    b_k: he.CipherMatrix
    c_k: he.CipherMatrix
    r_int: np.ndarray
    t_mat: he.CipherMatrix
    h_gain: he.CipherMatrix
    tb: he.CipherMatrix
    th: he.CipherMatrix
    c_int: he.CipherMatrix
    mu: list
    profile: Profile


# ---------------------------------------------------------------------------
# Plaintext pipeline
# ---------------------------------------------------------------------------


def assemble_market_model(types, gains, coupling: np.ndarray):
    """Stack the price-driven market dynamics from reported types and gains."""
    n = len(types)
    if n < 1:
        raise ParameterError("need at least one reported type")
    dim = sum(t.a_ii.shape[0] for t in types)
    if coupling.shape != (dim, dim):
        raise ParameterError(
            f"coupling must be {dim}x{dim} with zero diagonal blocks, got {coupling.shape}"
        )
    a_p = coupling.astype(float).copy()
    offs = np.cumsum([0] + [t.a_ii.shape[0] for t in types])
    for i, (t, g) in enumerate(zip(types, gains)):
        s, e = offs[i], offs[i + 1]
        if np.any(coupling[s:e, s:e]):
            raise ParameterError("coupling diagonal blocks must be zero")
        a_p[s:e, s:e] = t.a_ii + t.b_i @ g.f_i
    b_p = np.vstack([t.b_i @ g.m_i for t, g in zip(types, gains)])
    c_p = np.concatenate([t.c_i for t in types], axis=1)
    return a_p, b_p, c_p


def assemble_total_cost(q0: np.ndarray, r0: float, types, gains):
    """Total quadratic cost after substituting each best response."""
    n = len(types)
    dim = sum(t.a_ii.shape[0] for t in types)
    n_p = types[0].c_i.shape[0]
    q = np.asarray(q0, dtype=float).copy()
    if q.shape != (dim, dim):
        raise ParameterError(f"operator state cost must be {dim}x{dim}")
    n_cross = np.zeros((dim, n_p))
    r = float(r0) * np.eye(n_p)
    offs = np.cumsum([0] + [t.a_ii.shape[0] for t in types])
    for i, (t, g) in enumerate(zip(types, gains)):
        s, e = offs[i], offs[i + 1]
        q[s:e, s:e] += t.q_i + g.f_i.T * t.r_i @ g.f_i
        n_cross[s:e] = g.f_i.T * t.r_i @ g.m_i
        r += g.m_i.T * t.r_i @ g.m_i
    if np.linalg.eigvalsh(r).min() <= 0:
        raise ParameterError("assembled price cost is not positive definite")
    return q, r, n_cross


def build_market_model(types, gains, inputs: SynthesisInputs, b_w=None) -> MarketModel:
    a_p, b_p, c_p = assemble_market_model(types, gains, inputs.coupling)
    q, r, n_cross = assemble_total_cost(inputs.q0, inputs.r0, types, gains)
    if not inputs.cross_completion:
        n_cross = np.zeros_like(n_cross)
    if b_w is None:
        b_w = np.vstack([t.b_wi for t in types]) if types[0].b_wi.shape[1] == 1 else None
    return MarketModel(
        a_p=a_p, b_p=b_p, c_p=c_p, b_w=b_w, q=q, r=r, n_cross=n_cross,
        v=np.asarray(inputs.v, dtype=float), w=np.asarray(inputs.w, dtype=float),
    )


def _completed(a, b, q, r, n):
    """Cross-term elimination: fold N into shifted (A, Q) before the recursion."""
    if n is None or not np.any(n):
        return a, q, None
    r_inv = np.linalg.inv(r)
    return a - b @ r_inv @ n.T, q - n @ r_inv @ n.T, r_inv


def dare_rhs(p, a, b, q, r):
    s = r + b.T @ p @ b
    apb = a.T @ p @ b
    out = q + a.T @ p @ a - apb @ np.linalg.solve(s, apb.T)
    return 0.5 * (out + out.T)  # symmetry drift destabilizes small-noise filters


def dare_plain(a, b, q, r, n=None, tol=1e-12, max_iter=40_000, fixed_iterations=None):
    """Backward value recursion from P = Q (shifted for a cross term).

    With fixed_iterations set, runs exactly that many steps (the schedule
    used under encryption); otherwise iterates to the movement tolerance.
    """
    a_bar, q_bar, _ = _completed(a, b, q, r, n)
    p = q_bar.copy()
    if fixed_iterations is not None:
        for _ in range(fixed_iterations):
            p = dare_rhs(p, a_bar, b, q_bar, r)
        return 0.5 * (p + p.T)
    history = []
    for _ in range(max_iter):
        p_next = dare_rhs(p, a_bar, b, q_bar, r)
        delta = float(np.max(np.abs(p_next - p)))
        history.append(delta)
        p = p_next
        if delta <= tol:
            return 0.5 * (p + p.T)
    raise ConvergenceError(
        f"value recursion did not reach tol={tol} in {max_iter} iterations",
        residual_history=history[-20:],
    )


def dare_residual(p, a, b, q, r, n=None) -> float:
    a_bar, q_bar, _ = _completed(a, b, q, r, n)
    return float(np.max(np.abs(p - dare_rhs(p, a_bar, b, q_bar, r))))


def control_gain(p, a, b, r, n=None):
    """Full state-feedback gain, cross-term adjusted."""
    a_bar, _, r_inv = _completed(a, b, np.zeros_like(a), r, n)
    k = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a_bar)
    if r_inv is not None:
        k = k + r_inv @ n.T
    return k


def filter_gain(p2, a, c, v):
    s = v + c @ p2 @ c.T
    return a @ p2 @ c.T @ np.linalg.inv(s)


def _snap(mat, grid):
    return np.round(np.asarray(mat, dtype=float) / grid) * grid if grid else np.asarray(mat, float)


def lqg_plain(model: MarketModel, tol=1e-12, fixed_iterations=None, riccati_grid=None,
              cov_grid=None):
    """LQG gains from the two Riccati equations.

    riccati_grid / cov_grid, when set, round the matrices handed to each
    recursion onto the same power-of-two grids the encrypted pipeline uses,
    so both pipelines iterate the exact same model.
    """
    a_bar, q_bar, r_inv = _completed(model.a_p, model.b_p, model.q, model.r, model.n_cross)
    a_d = _snap(a_bar, riccati_grid)
    q_d = _snap(q_bar, riccati_grid)
    b_d = _snap(model.b_p, riccati_grid)
    r_d = _snap(model.r, riccati_grid)
    p1 = dare_plain(a_d, b_d, q_d, r_d, None, tol=tol, fixed_iterations=fixed_iterations)
    k_p = np.linalg.solve(r_d + b_d.T @ p1 @ b_d, b_d.T @ p1 @ a_d)
    if r_inv is not None:
        k_p = k_p + r_inv @ model.n_cross.T
    a_f = _snap(model.a_p, riccati_grid)
    c_f = model.c_p
    w_d = _snap(model.w, cov_grid)
    v_d = _snap(model.v, cov_grid)
    p2 = dare_plain(a_f.T, c_f.T, w_d, v_d, tol=tol, fixed_iterations=fixed_iterations)
    l_p = filter_gain(p2, a_f, c_f, v_d)
    return p1, p2, k_p, l_p


def realize_controller_plain(model: MarketModel, k_p, l_p) -> ControllerRealization:
    return ControllerRealization(
        a_k=model.a_p - l_p @ model.c_p - model.b_p @ k_p,
        b_k=l_p.copy(),
        c_k=-k_p.copy(),
    )


# ---------------------------------------------------------------------------
# Observability, deadbeat output injection, integerization (plaintext)
# ---------------------------------------------------------------------------


def observability_matrix(a, c) -> np.ndarray:
    n = a.shape[0]
    rows = [c]
    cur = c
    for _ in range(n - 1):
        cur = cur @ a
        rows.append(cur)
    return np.vstack(rows)


def check_observability_plain(a, c):
    n = a.shape[0]
    rank = int(np.linalg.matrix_rank(observability_matrix(a, c)))
    return rank == n, rank


def ackermann_gain(a, c) -> np.ndarray:
    """Single-output deadbeat observer gain: all poles of A - HC at zero."""
    if c.shape[0] != 1:
        raise ParameterError("ackermann_gain handles single-output pairs")
    n = a.shape[0]
    obs = observability_matrix(a, c)
    if np.linalg.matrix_rank(obs) < n:
        raise ObservabilityError("pair is not observable; a minimal realization is required")
    p_a = np.linalg.matrix_power(a, n)
    e_n = np.zeros((n, 1))
    e_n[n - 1, 0] = 1.0
    return p_a @ np.linalg.solve(obs, e_n)


def _select_observability_rows(n: int, m: int, rank_fn):
    """Greedy scan of rows c_i a^k (power-major) keeping rank increases.

    rank_fn(candidate) takes a list of (output index, power) pairs and
    returns the rank of those stacked rows; the encrypted pipeline supplies
    a masked-certificate version.  Once c_i a^k is dependent, every higher
    power for output i is too, so that output drops out of the scan.
    """
    selected: list[tuple[int, int]] = []
    mu = [0] * m
    alive = [True] * m
    for k in range(n):
        for i in range(m):
            if not alive[i] or len(selected) == n:
                continue
            candidate = selected + [(i, k)]
            if rank_fn(candidate) == len(candidate):
                selected.append((i, k))
                mu[i] = k + 1
            else:
                alive[i] = False
        if len(selected) == n:
            break
    if len(selected) < n:
        raise ObservabilityError(
            f"pair is not observable (rank {len(selected)} of {n}); "
            "a minimal realization is required"
        )
    return mu


def deadbeat_ladder_plain(a, c):
    """Multi-output deadbeat output injection via the dual companion form.

    Returns (v, v_inv, h, mu) with v a y v_inv = shift form, h the gain in
    original coordinates, and the canonical integer state matrix
    round(v (a - h c) v_inv) exactly nilpotent.
    """
    n = a.shape[0]
    m = c.shape[0]
    o_full = observability_matrix(a, c)

    def rank_fn(candidate):
        rows = [o_full[k * m + i] for (i, k) in candidate]
        return int(np.linalg.matrix_rank(np.vstack(rows)))

    mu = _select_observability_rows(n, m, rank_fn)
    # Dual basis: controllability columns of (a^T, c^T), input-major order.
    p_basis = np.hstack(list(_input_major_columns(a, c, mu)))
    p_inv = np.linalg.inv(p_basis)
    ends = np.cumsum(mu) - 1
    s_rows = []
    for i in range(m):
        if mu[i] == 0:
            continue
        sigma = p_inv[ends[i] : ends[i] + 1, :]
        cur = sigma
        for _ in range(mu[i]):
            s_rows.append(cur)
            cur = cur @ a.T
    s_mat = np.vstack(s_rows)
    s_inv = np.linalg.inv(s_mat)
    a_o = (s_mat @ a.T @ s_inv).T
    c_o = (s_mat @ c.T).T
    live_ends = np.cumsum([m_i for m_i in mu if m_i > 0]) - 1
    e_mat = c_o[:, live_ends]
    h_o = a_o[:, live_ends] @ np.linalg.inv(e_mat)
    v = s_inv.T
    v_inv = s_mat.T
    h = v_inv @ h_o
    return v, v_inv, h, h_o, mu


def _input_major_columns(a, c, mu):
    for i in range(c.shape[0]):
        vec = c.T[:, i : i + 1]
        for _ in range(mu[i]):
            yield vec
            vec = a.T @ vec


def integerize_plain(realization: ControllerRealization) -> IntegerForm:
    """Deadbeat pole placement plus the similarity that makes the state
    matrix exactly integer (a pure shift pattern)."""
    a_k, b_k, c_k = realization.a_k, realization.b_k, realization.c_k
    n = a_k.shape[0]
    v, v_inv, h, h_o, mu = deadbeat_ladder_plain(a_k, c_k)
    r_real = v @ (a_k - h @ c_k) @ v_inv
    r_int = np.round(r_real).astype(np.int64)
    if np.max(np.abs(r_real - r_int)) > 1e-6:
        raise RangeError(
            "integerized state matrix is not close to integers; "
            "check observability and conditioning"
        )
    if np.any(np.linalg.matrix_power(r_int, n) != 0):
        raise RangeError("integerized state matrix is not nilpotent")
    return IntegerForm(
        r_int=r_int,
        t_mat=v,
        h=h,
        tb=v @ b_k,
        th=h_o,
        c_int=c_k @ v_inv,
        mu=mu,
    )


def synthesize_plain(
    types, gains, inputs: SynthesisInputs, profile=None, fixed_iterations=None, tol=1e-11
) -> PlainSynthesis:
    """Plaintext pipeline.  With a profile, mirrors the quantization grids
    the encrypted pipeline uses (reported values at s1, public inputs at s1,
    Riccati model matrices at s1, covariances at their own grid), so the two
    pipelines run on identical numbers."""
    riccati_grid = cov_grid = None
    if profile is not None:
        s1 = profile.scale.s1
        types, gains = quantized_types(types, gains, s1, profile.params.q)
        inputs = SynthesisInputs(
            q0=_snap(inputs.q0, s1), r0=float(_snap(np.array([[inputs.r0]]), s1)[0, 0]),
            coupling=_snap(inputs.coupling, s1), w=inputs.w, v=inputs.v,
            cross_completion=inputs.cross_completion,
        )
        riccati_grid = s1
        cov_grid = 2.0 ** cov_step_exp(inputs)
    model = build_market_model(types, gains, inputs)
    p1, p2, k_p, l_p = lqg_plain(model, tol=tol, fixed_iterations=fixed_iterations,
                                 riccati_grid=riccati_grid, cov_grid=cov_grid)
    realization = realize_controller_plain(model, k_p, l_p)
    ok, rank = check_observability_plain(realization.a_k, realization.c_k)
    if not ok:
        raise ObservabilityError(f"controller pair not observable (rank {rank})")
    return PlainSynthesis(
        model=model, p1=p1, p2=p2, k_p=k_p, l_p=l_p,
        realization=realization, integer_form=integerize_plain(realization),
        p1_residual=_snapped_residual_control(model, p1, riccati_grid),
        p2_residual=_snapped_residual_filter(model, p2, riccati_grid, cov_grid),
    )


def _snapped_residual_control(model, p1, grid):
    a_bar, q_bar, _ = _completed(model.a_p, model.b_p, model.q, model.r, model.n_cross)
    return dare_residual(p1, _snap(a_bar, grid), _snap(model.b_p, grid),
                         _snap(q_bar, grid), _snap(model.r, grid))


def _snapped_residual_filter(model, p2, grid, cov_grid):
    return dare_residual(p2, _snap(model.a_p, grid).T, model.c_p.T,
                         _snap(model.w, cov_grid), _snap(model.v, cov_grid))


def quantized_types(types, gains, step, q_mod):
    """Snap every reported number to the quantization grid (the market only
    ever sees these values, so oracles must run on them too)."""
    from .generator_agent import GeneratorType, LocalGains

    def snap(mat):
        return quantize_array(np.asarray(mat, dtype=float), step, q_mod) * step

    q_types, q_gains = [], []
    for t, g in zip(types, gains):
        q_types.append(
            GeneratorType(
                a_ii=snap(t.a_ii), b_i=snap(t.b_i), b_wi=snap(t.b_wi),
                c_i=snap(t.c_i), q_i=snap(t.q_i),
                r_i=float(snap(np.array([[t.r_i]]))[0, 0]),
            )
        )
        q_gains.append(
            LocalGains(
                s_bar=g.s_bar, g_bar=g.g_bar, f_i=snap(g.f_i),
                phi_i=g.phi_i, m_i=snap(g.m_i),
            )
        )
    return q_types, q_gains


# ---------------------------------------------------------------------------
# Encrypted pipeline
# ---------------------------------------------------------------------------


def _log2_ceil(x: float) -> int:
    return int(math.ceil(math.log2(max(x, 1e-300))))


def _value_bound(cm: he.CipherMatrix) -> float:
    """Conservative bound on the carried real values."""
    return float(cm.bounds.max()) * cm.step


class EncPipeline:
    """Step/range bookkeeping around the raw homomorphic operations."""

    def __init__(self, server, profile: Profile):
        self.server = server
        self.profile = profile
        self.params = server.params
        self.q_bits = self.params.q_bits

    def encrypt_public(self, mat: np.ndarray, step_exp: int) -> he.CipherMatrix:
        ints = quantize_array(np.asarray(mat, dtype=float), 2.0**step_exp, self.params.q)
        return he.enc_matrix(self.server.pk, ints, self.server.rng, step_exp=step_exp)

    def requant(self, cm: he.CipherMatrix, step_exp: int) -> he.CipherMatrix:
        if cm.step_exp == step_exp and cm.max_budget() < 8 * self.params.fresh_noise_bound:
            return cm
        return self.server.request_requantize(cm, step_exp)

    def requant_rel(self, cm: he.CipherMatrix, rel_bits: int = 20) -> he.CipherMatrix:
        """Requantize to a value-aware step keeping ~rel_bits of relative
        precision under the matrix's measured magnitude."""
        top = _value_bound(cm)
        if top == 0.0:
            return cm
        return self.requant(cm, _log2_ceil(top) - rel_bits)

    def matmul(self, x: he.CipherMatrix, y: he.CipherMatrix, out_exp=None) -> he.CipherMatrix:
        """Product with automatic pre-coarsening so nothing can wrap mod q."""
        x, y = self._fit_product(x, y)
        out = he.enc_matmul(x, y, require_no_wrap=True)
        if out_exp is not None:
            out = self.requant(out, out_exp)
        return out

    def _fit_product(self, x, y):
        """Coarsen operands until the product fits the modulus and the noise
        threshold.  Bounds are in integer units, so coarsening by k bits
        shrinks an operand's integer bound by ~2^k; the operand with the
        larger integer magnitude gives up precision, which preserves both
        sides' relative accuracy."""
        inner = x.shape[1]
        limit_bits = self.q_bits - 1 - _RANGE_MARGIN_BITS
        bound_bits = _log2_ceil(float(x.bounds.max()) * float(y.bounds.max()) * inner + 1)
        excess = bound_bits - limit_bits
        if excess > 0:
            if float(x.bounds.max()) >= float(y.bounds.max()):
                x = self.requant(x, x.step_exp + excess)
            else:
                y = self.requant(y, y.step_exp + excess)
        # Noise: the right operand's integer values scale the left noise.
        thr_bits = self.params.noise_threshold.bit_length() - 2
        noise_bits = _log2_ceil(float(y.bounds.max()) * max(x.budgets.max(), 1.0) * inner + 1)
        if noise_bits > thr_bits:
            y = self.requant(y, y.step_exp + (noise_bits - thr_bits))
        return x, y

    def inverse(self, cm: he.CipherMatrix, out_exp=None) -> he.CipherMatrix:
        """Masked inversion.  The requested output step is a precision floor;
        the decrypting party coarsens it if the inverse is too large to fit,
        and the response carries the step actually used."""
        if out_exp is None:
            out_exp = -(self.q_bits - _RANGE_MARGIN_BITS - 10)
        return self.server.request_inverse(cm, out_exp)

    def add(self, *mats) -> he.CipherMatrix:
        acc = mats[0]
        for m in mats[1:]:
            acc = he.enc_matadd(acc, m)
        return acc

    def sub(self, x, y) -> he.CipherMatrix:
        return he.enc_matadd(x, he.plain_scale(-1, y))


def _assemble_encrypted(pipe: EncPipeline, reports: dict, inputs: SynthesisInputs):
    """Mirror of the plaintext assembly over cipher matrices.

    Everything assembled here stays at the coefficient scale s1 the reports
    arrived at; covariances use their own magnitude-matched step.
    """
    n = len(reports)
    s1_exp = pipe.profile.scale.s1_exp
    rep = [reports[i] for i in range(n)]
    blocks = [r["a_ii"].shape[0] for r in rep]
    offs = np.cumsum([0] + blocks)
    dim = offs[-1]
    # Assembly products are kept at their exact summed steps where they fit
    # (homomorphic products are exact mod q); the cubic cost products are
    # rounded only at a grid fine enough to be invisible downstream.
    a_exp = 2 * s1_exp
    cost_exp = 3 * s1_exp + 16

    a_rows = []
    b_blocks = []
    c_blocks = []
    q_blocks = []
    n_blocks = []
    r_terms = []
    for i, r in enumerate(rep):
        a_ii, b_i, f_i = r["a_ii"], r["b_i"], r["f_i"]
        m_i, q_i, r_i = r["m_i"], r["q_i"], r["r_i"]
        c_blocks.append(r["c_i"])
        bf = pipe.matmul(b_i, f_i)                       # exact at 2*s1
        diag = pipe.add(he.refine_step(a_ii, a_exp), bf)
        row = []
        for j in range(n):
            if j == i:
                row.append(diag)
            else:
                pub = pipe.encrypt_public(
                    inputs.coupling[offs[i]:offs[i + 1], offs[j]:offs[j + 1]], s1_exp
                )
                row.append(he.refine_step(pub, a_exp))
        a_rows.append(row)
        b_blocks.append(pipe.matmul(b_i, m_i))           # exact at 2*s1
        ft = f_i.transpose()
        fr = pipe.matmul(ft, r_i)                        # F^T R at 2*s1
        q_blocks.append(
            pipe.add(he.refine_step(q_i, cost_exp),
                     pipe.matmul(fr, f_i, out_exp=cost_exp))
        )
        n_blocks.append(pipe.matmul(fr, m_i, out_exp=cost_exp))
        mt = m_i.transpose()
        mr = pipe.matmul(mt, r_i)
        r_terms.append(pipe.matmul(mr, m_i, out_exp=cost_exp))

    a_p = he.cm_block(a_rows)
    b_p = he.cm_vstack(b_blocks)
    c_p = he.cm_hstack(c_blocks)

    q0_enc = he.refine_step(pipe.encrypt_public(inputs.q0, s1_exp), cost_exp)
    q_diag_rows = []
    for i in range(n):
        row = []
        for j in range(n):
            if j == i:
                row.append(q_blocks[i])
            else:
                row.append(pipe.encrypt_public(np.zeros((blocks[i], blocks[j])), cost_exp))
        q_diag_rows.append(row)
    q_tot = pipe.add(q0_enc, he.cm_block(q_diag_rows))

    if inputs.cross_completion:
        n_cross = he.cm_vstack(n_blocks)
    else:
        n_cross = pipe.encrypt_public(np.zeros((dim, rep[0]["m_i"].shape[1])), cost_exp)

    r_tot = he.refine_step(
        pipe.encrypt_public(inputs.r0 * np.eye(rep[0]["m_i"].shape[1]), s1_exp), cost_exp
    )
    for t in r_terms:
        r_tot = pipe.add(r_tot, t)

    cov_exp = cov_step_exp(inputs)
    w_enc = pipe.encrypt_public(inputs.w, cov_exp)
    v_enc = pipe.encrypt_public(inputs.v, cov_exp)
    return EncMarketModel(
        a_p=a_p, b_p=b_p, c_p=c_p, q=q_tot, r=r_tot, n_cross=n_cross, w=w_enc, v=v_enc
    )


def cov_step_exp(inputs: SynthesisInputs) -> int:
    """Covariances live at a much smaller magnitude than the cost weights;
    pick a step with ~22 bits of precision under the largest entry."""
    top = max(float(np.abs(inputs.w).max()), float(np.abs(inputs.v).max()), 2.0**-40)
    return _log2_ceil(top) - 22


def enc_dare(pipe: EncPipeline, a, b, q, r, iterations: int, iterate_exp: int):
    """Fixed-schedule backward recursion over ciphertexts.

    One iteration: form the Gram products [A'; B'] P [A | B] (two fused
    products), invert R + B'PB through the masked protocol, assemble the
    quadratic correction, requantize the iterate back to its carried step.
    """
    dim = a.shape[0]
    n_in = b.shape[1]
    # The update is assembled one bit finer, then symmetrized exactly by
    # adding the transpose and relabeling the step (an exact halving).
    # Without per-iteration symmetrization the tiny requantization
    # asymmetries get amplified through the inner inverse and the filter
    # recursion blows up, exactly as a naive float implementation does.
    pre_exp = iterate_exp + 1
    q_it = pipe.requant(q, pre_exp)
    r_it = pipe.requant(r, pre_exp)
    p = _sym_exact(pipe.requant(q, iterate_exp + 1))
    common = min(a.step_exp, b.step_exp)   # refining is exact and free
    ab = he.cm_hstack([he.refine_step(a, common), he.refine_step(b, common)])
    abt = ab.transpose()
    for _ in range(iterations):
        g1 = pipe.matmul(abt, p)
        g1 = pipe.requant_rel(g1, 33)
        g = pipe.matmul(g1, ab)
        g = pipe.requant(g, pre_exp)
        atpa = he.cm_submatrix(g, rows=range(dim), cols=range(dim))
        atpb = he.cm_submatrix(g, rows=range(dim), cols=range(dim, dim + n_in))
        btpb = he.cm_submatrix(g, rows=range(dim, dim + n_in), cols=range(dim, dim + n_in))
        s = pipe.add(r_it, btpb)
        s_inv = pipe.inverse(s)
        t5 = pipe.matmul(s_inv, atpb.transpose())
        t5 = pipe.requant_rel(t5, 30)
        qt = pipe.matmul(atpb, t5, out_exp=pre_exp)
        p = _sym_exact(pipe.add(q_it, pipe.sub(atpa, qt)))
    return p


def _sym_exact(cm: he.CipherMatrix) -> he.CipherMatrix:
    """(P + P^T)/2 with no rounding: the halving is a step relabel."""
    doubled = he.enc_matadd(cm, cm.transpose())
    return he.with_step(doubled, cm.step_exp - 1)


def enc_dare_control(pipe: EncPipeline, model: EncMarketModel, iterations: int):
    """Control Riccati solve with cross-term completion folded in first.

    The completed matrices are published to the recursion at the coefficient
    grid s1; the plaintext pipeline snaps to the same grid, so both iterate
    an identical model.
    """
    l_exp = pipe.profile.scale.l_exp
    s1_exp = pipe.profile.scale.s1_exp
    iterate_exp = l_exp - _ITER_GUARD_BITS
    a_bar, q_bar, r_inv_nt = _enc_completion(pipe, model)
    a_d = pipe.requant(a_bar, s1_exp)
    q_d = pipe.requant(q_bar, s1_exp)
    b_d = pipe.requant(model.b_p, s1_exp)
    r_d = pipe.requant(model.r, s1_exp)
    p1 = enc_dare(pipe, a_d, b_d, q_d, r_d, iterations, iterate_exp)
    return pipe.requant(p1, l_exp), a_d, b_d, r_d, r_inv_nt


def _enc_completion(pipe: EncPipeline, model: EncMarketModel):
    if float(model.n_cross.bounds.max()) == 0.0:
        return model.a_p, model.q, None
    r_inv = pipe.inverse(model.r)
    r_inv_nt = pipe.matmul(r_inv, model.n_cross.transpose())
    r_inv_nt = pipe.requant_rel(r_inv_nt, 30)
    a_shift = pipe.matmul(model.b_p, r_inv_nt, out_exp=model.a_p.step_exp)
    a_bar = pipe.sub(model.a_p, a_shift)
    q_shift = pipe.matmul(model.n_cross, r_inv_nt, out_exp=model.q.step_exp)
    q_bar = pipe.sub(model.q, q_shift)
    return a_bar, q_bar, r_inv_nt


def enc_dare_filter(pipe: EncPipeline, model: EncMarketModel, iterations: int):
    s1_exp = pipe.profile.scale.s1_exp
    cov_exp = model.w.step_exp
    iterate_exp = cov_exp - _ITER_GUARD_BITS
    a_f = pipe.requant(model.a_p, s1_exp)
    p2 = enc_dare(
        pipe, a_f.transpose(), model.c_p.transpose(), model.w, model.v,
        iterations, iterate_exp,
    )
    return pipe.requant(p2, cov_exp), a_f


def recover_gains(pipe: EncPipeline, model: EncMarketModel, p1, p2, a_d, b_d, r_d, a_f,
                  r_inv_nt, gain_exp: int):
    """K and L from the Riccati solutions, every inversion masked."""
    bt = b_d.transpose()
    btp = pipe.matmul(bt, p1)
    btp = pipe.requant_rel(btp, 30)
    btpb = pipe.matmul(btp, b_d)
    btpb = pipe.requant_rel(btpb, 30)
    s = pipe.add(pipe.requant(r_d, btpb.step_exp), btpb)
    s_inv = pipe.inverse(s)
    btpa = pipe.matmul(btp, a_d)
    btpa = pipe.requant_rel(btpa, 30)
    k_p = pipe.matmul(s_inv, btpa)
    k_p = pipe.requant(k_p, gain_exp)
    if r_inv_nt is not None:
        k_p = pipe.add(k_p, pipe.requant(r_inv_nt, gain_exp))

    ct = model.c_p.transpose()
    p2c = pipe.matmul(p2, ct)
    p2c = pipe.requant_rel(p2c, 30)
    cp2c = pipe.matmul(model.c_p, p2c)
    cp2c = pipe.requant_rel(cp2c, 30)
    s_f = pipe.add(pipe.requant(model.v, cp2c.step_exp), cp2c)
    s_f_inv = pipe.inverse(s_f)
    ap2c = pipe.matmul(a_f, p2c)
    ap2c = pipe.requant_rel(ap2c, 30)
    l_p = pipe.matmul(ap2c, s_f_inv)
    l_p = pipe.requant(l_p, gain_exp)
    return k_p, l_p


def realize_controller(pipe: EncPipeline, model: EncMarketModel, k_p, l_p):
    """A_K = A_p - L_p C_p - B_p K_p composed exactly over ciphertexts.

    The three terms are brought to a common step by exact refinement, so the
    realization adds no rounding of its own; a copy requantized at the base
    resolution is published alongside for reporting.
    """
    l_exp = pipe.profile.scale.l_exp
    lc = pipe.matmul(l_p, model.c_p)                    # gain_exp + s1
    bk = pipe.matmul(model.b_p, k_p)                    # 2*s1 + gain_exp
    common = min(model.a_p.step_exp, lc.step_exp, bk.step_exp)
    a_k = pipe.sub(
        pipe.sub(he.refine_step(model.a_p, common), he.refine_step(lc, common)),
        he.refine_step(bk, common),
    )
    a_k_published = pipe.requant(a_k, l_exp)
    b_k = l_p
    c_k = he.plain_scale(-1, k_p)
    return a_k, a_k_published, b_k, c_k


def check_observability(pipe: EncPipeline, a_k, c_k):
    """Full observability certificate through masked rank decryption."""
    n = a_k.shape[0]
    rows = [c_k]
    cur = c_k
    for _ in range(n - 1):
        cur = pipe.requant_rel(pipe.matmul(cur, a_k), 22)
        rows.append(cur)
    rank = pipe.server.request_rank(_vstack_aligned(rows))
    return rank == n, rank


def _vstack_aligned(mats: list) -> he.CipherMatrix:
    """Stack blocks after exact refinement to their finest common step."""
    common = min(m.step_exp for m in mats)
    return he.cm_vstack([he.refine_step(m, common) for m in mats])


def integerize_pole_placement(pipe: EncPipeline, a_k, c_k, b_k):
    """Encrypted deadbeat ladder: select independent observability rows with
    masked rank certificates, build the dual companion transform with masked
    inversions, cancel the coefficient columns, and round the state matrix
    to its exact integer shift pattern."""
    s1_exp = pipe.profile.scale.s1_exp
    n = a_k.shape[0]
    m = c_k.shape[0]

    # Rows c_i a^k, computed once per power.
    power_rows = [c_k]
    cur = c_k
    for _ in range(n - 1):
        cur = pipe.requant_rel(pipe.matmul(cur, a_k), 22)
        power_rows.append(cur)

    def row(i, k):
        return he.cm_submatrix(power_rows[k], rows=[i])

    def rank_fn(candidate):
        return pipe.server.request_rank(
            _vstack_aligned([row(i, k) for (i, k) in candidate])
        )

    mu = _select_observability_rows(n, m, rank_fn)

    # Dual basis (input-major): P = [rows stacked]^T, invert via the protocol.
    sel_rows = []
    for i in range(m):
        for k in range(mu[i]):
            sel_rows.append(row(i, k))
    p_basis = _vstack_aligned(sel_rows).transpose()
    p_inv = pipe.requant_rel(pipe.inverse(p_basis), 24)

    ends = np.cumsum([x for x in mu if x > 0]) - 1
    at = a_k.transpose()
    s_rows = []
    for i, e in enumerate(ends):
        cur = he.cm_submatrix(p_inv, rows=[int(e)])
        for _ in range(mu[i]):
            s_rows.append(cur)
            cur = pipe.requant_rel(pipe.matmul(cur, at), 24)
    s_mat = _vstack_aligned(s_rows)
    s_inv = pipe.requant_rel(pipe.inverse(s_mat), 24)

    v_mat = s_inv.transpose()          # similarity to companion coordinates
    v_inv = s_mat.transpose()
    x1 = pipe.requant_rel(pipe.matmul(v_mat, a_k), 24)
    a_o = pipe.requant_rel(pipe.matmul(x1, v_inv), 24)
    c_o = pipe.requant_rel(pipe.matmul(c_k, v_inv), 24)

    e_mat = he.cm_submatrix(c_o, cols=[int(e) for e in ends])
    e_inv = pipe.inverse(e_mat)
    h_o = pipe.requant_rel(pipe.matmul(he.cm_submatrix(a_o, cols=[int(e) for e in ends]), e_inv), 24)

    hc = pipe.matmul(h_o, c_o, out_exp=a_o.step_exp)
    r_hat = pipe.sub(a_o, hc)
    r_int = pipe.server.request_integer_round(r_hat)
    if np.any(np.linalg.matrix_power(r_int, n) != 0):
        raise RangeError("integerized state matrix is not nilpotent")

    tb = pipe.matmul(v_mat, b_k, out_exp=s1_exp)
    th = pipe.requant(h_o, s1_exp)
    c_int = pipe.requant(c_o, s1_exp)
    h_orig = pipe.matmul(v_inv, h_o, out_exp=s1_exp)
    return r_int, v_mat, h_orig, tb, th, c_int, mu


def synthesize_encrypted(server, profile: Profile, inputs: SynthesisInputs) -> EncSynthesis:
    """The whole offline phase at the delegate server."""
    pipe = EncPipeline(server, profile)
    n = len(server.reports)
    # Reports arrive at the coefficient scale; synthesis runs at the base
    # resolution, so renormalize everything once up front.
    model = _assemble_encrypted(pipe, server.reports, inputs)
    iterations = profile.dare_iterations
    p1, a_d, b_d, r_d, r_inv_nt = enc_dare_control(pipe, model, iterations)
    p2, a_f = enc_dare_filter(pipe, model, iterations)
    gain_exp = profile.scale.l_exp - _ITER_GUARD_BITS
    k_p, l_p = recover_gains(pipe, model, p1, p2, a_d, b_d, r_d, a_f, r_inv_nt, gain_exp)
    a_k, a_k_published, b_k, c_k = realize_controller(pipe, model, k_p, l_p)
    ok, rank = check_observability(pipe, a_k_published, c_k)
    if not ok:
        raise ObservabilityError(f"controller pair not observable (rank {rank})")
    r_int, t_mat, h_gain, tb, th, c_int, mu = integerize_pole_placement(pipe, a_k, c_k, b_k)
    return EncSynthesis(
        model=model, p1=p1, p2=p2, k_p=k_p, l_p=l_p,
        a_k=a_k_published, b_k=b_k, c_k=c_k,
        r_int=r_int, t_mat=t_mat, h_gain=h_gain, tb=tb, th=th, c_int=c_int,
        mu=mu, profile=profile,
    )
