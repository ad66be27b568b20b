"""Leveled homomorphic encryption over Z_q in the GSW-LWE style.

Ciphertexts are integer matrices mod q.  A ciphertext of m is

    C = m * G + Z      (mod q)

where G is the gadget matrix (powers of the decomposition base stacked per
basis direction) and every row of Z is an LWE encryption of zero under the
secret key vector (1, -s).  Decryption reads the first gadget block of
C @ (1, -s) and peels base-nu digits from the top weight down, which recovers
the plaintext exactly as long as every per-row error stays below the
noise threshold.  Homomorphic addition is matrix addition; homomorphic
multiplication is gadget decomposition of the left operand times the right
operand, so the left operand's error is scaled by the right operand's
plaintext value and the right operand's error by the decomposition weight.

Every ciphertext carries a conservative worst-case noise budget and a
conservative plaintext magnitude bound.  Budgets only ever grow under
homomorphic operations; the protocols module refreshes them.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    IncompatibleError,
    NoiseOverflowError,
    ParameterError,
    RangeError,
    ShapeError,
)

MAGIC = b"ELFC"
FORMAT_VERSION = 1

# Blob kind tags for the binary format.
_KIND_PARAMS = 1
_KIND_SECRET_KEY = 2
_KIND_PUBLIC_KEY = 3
_KIND_CIPHERTEXT = 4
_KIND_CIPHER_MATRIX = 5

# Number of public-key rows combined per fresh ciphertext row.  The fresh
# noise bound is _SUBSET_TERMS * sigma.
_SUBSET_TERMS = 8
_PK_ROWS = 64

# Safe magnitude for exact float64 integer arithmetic.
_F64_EXACT = float(1 << 53)


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


@dataclass(frozen=True)
class LweParams:
    """Encryption parameters (q, sigma, n_l, nu, d).

    q and nu must be powers of two: digit decomposition and exact digit
    peeling at decryption both rely on radix alignment with the modulus.
    The published depth d must cover at least half the modulus bits; the
    working gadget is always extended internally to full coverage.
    """

    q: int
    sigma: int
    n_l: int
    nu: int
    d: int
    lam: int = 32

    def __post_init__(self):
        if self.q < 2 or not _is_pow2(self.q):
            raise ParameterError(f"q must be a power of two >= 2, got {self.q}")
        if self.nu < 2 or not _is_pow2(self.nu):
            raise ParameterError(f"nu must be a power of two >= 2, got {self.nu}")
        if self.d < 1:
            raise ParameterError(f"d must be >= 1, got {self.d}")
        if self.n_l < 1:
            raise ParameterError(f"n_l must be >= 1, got {self.n_l}")
        if self.sigma < 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        min_bits = (self.q_bits + 1) // 2
        if self.d * self.beta < min_bits:
            raise ParameterError(
                f"gadget coverage too small: nu^d = 2^{self.d * self.beta} "
                f"must reach at least 2^{min_bits} for q = 2^{self.q_bits}"
            )

    @property
    def q_bits(self) -> int:
        return self.q.bit_length() - 1

    @property
    def beta(self) -> int:
        """Bits per decomposition digit."""
        return self.nu.bit_length() - 1

    @property
    def d_full(self) -> int:
        """Working gadget depth: digits needed to span all of Z_q."""
        return -(-self.q_bits // self.beta)

    @property
    def n1(self) -> int:
        return self.n_l + 1

    @property
    def rows(self) -> int:
        return self.n1 * self.d_full

    @property
    def fresh_noise_bound(self) -> int:
        """Worst-case error magnitude of a public-key encryption (epsilon_1)."""
        return _SUBSET_TERMS * self.sigma

    @property
    def noise_threshold(self) -> int:
        """Decryption fails at or above this error magnitude.

        Digit peeling resolves candidates spaced at least q/nu apart, so the
        threshold is half that spacing: q/4 for nu = 2, q/(2 nu) in general.
        """
        return max(1, self.q >> (self.beta + 1))

    @property
    def mult_noise_factor(self) -> int:
        """Error amplification of the decomposed operand in a product."""
        return (self.nu - 1) * self.rows

    def fingerprint(self) -> bytes:
        blob = struct.pack("<QIIIII", self.q, self.sigma, self.n_l, self.nu, self.d, self.lam)
        return hashlib.sha256(blob).digest()[:8]

    def centered(self, value: int) -> int:
        v = value % self.q
        return v - self.q if v >= self.q // 2 else v

    def gadget_weights(self) -> np.ndarray:
        return np.int64(1) << (self.beta * np.arange(self.d_full, dtype=np.int64))


def _gadget(params: LweParams) -> np.ndarray:
    """G of shape (rows, n1) with G[i*d_full + j, i] = nu^j."""
    g = np.zeros((params.rows, params.n1), dtype=np.int64)
    w = params.gadget_weights()
    for i in range(params.n1):
        g[i * params.d_full : (i + 1) * params.d_full, i] = w
    return g


@dataclass(frozen=True)
class SecretKey:
    s: np.ndarray  # ternary, shape (n_l,)
    params: LweParams

    def key_vector(self) -> np.ndarray:
        """(1, -s): right-multiplying a ciphertext by this exposes m*g + e."""
        return np.concatenate(([np.int64(1)], -self.s.astype(np.int64)))


@dataclass(frozen=True)
class PublicKey:
    body: np.ndarray  # (_PK_ROWS, n1) rows are LWE encryptions of zero
    params: LweParams


@dataclass(frozen=True)
class KeyPair:
    sk: SecretKey
    pk: PublicKey

    @property
    def params(self) -> LweParams:
        return self.sk.params


@dataclass
class Ciphertext:
    """GSW ciphertext of a single scalar mod q."""

    body: np.ndarray  # (rows, n1) int64 canonical residues
    noise_budget: float
    value_bound: float
    level: int
    fp: bytes
    params: LweParams

    def __post_init__(self):
        if self.body.shape != (self.params.rows, self.params.n1):
            raise ShapeError(
                f"ciphertext body {self.body.shape} does not match params "
                f"({self.params.rows}, {self.params.n1})"
            )


def keygen(params: LweParams, seed) -> KeyPair:
    """Deterministic key generation from a seed."""
    rng = np.random.default_rng(seed)
    s = rng.integers(-1, 2, size=params.n_l, dtype=np.int64)
    a = rng.integers(0, params.q, size=(_PK_ROWS, params.n_l), dtype=np.int64)
    e = rng.integers(-params.sigma, params.sigma + 1, size=_PK_ROWS, dtype=np.int64)
    # Row layout (b | a) with b = a.s + e, so row @ (1, -s) = e.
    b = (_ternary_matvec_mod(a, s, params.q) + e) % params.q
    body = np.concatenate([b[:, None], a], axis=1)
    sk = SecretKey(s=s, params=params)
    pk = PublicKey(body=body, params=params)
    return KeyPair(sk=sk, pk=pk)


def _check_plain_range(m: int, params: LweParams):
    if not (-params.q // 2 <= m < params.q // 2):
        raise RangeError(
            f"plaintext {m} outside centered range [-{params.q // 2}, {params.q // 2})"
        )


def _fresh_rows(pk: PublicKey, n_rows: int, rng) -> np.ndarray:
    """Subset-sums of public-key rows: n_rows fresh LWE(0) samples."""
    idx = rng.integers(0, pk.body.shape[0], size=(n_rows, _SUBSET_TERMS))
    acc = pk.body[idx[:, 0]].copy()
    for t in range(1, _SUBSET_TERMS):
        acc += pk.body[idx[:, t]]
        acc %= pk.params.q
    return acc


def encrypt(pk: PublicKey, m: int, rng) -> Ciphertext:
    params = pk.params
    m = int(m)
    _check_plain_range(m, params)
    body = (_fresh_rows(pk, params.rows, rng) + (m % params.q) * _gadget(params)) % params.q
    return Ciphertext(
        body=body,
        noise_budget=float(params.fresh_noise_bound),
        value_bound=float(abs(m)),
        level=0,
        fp=params.fingerprint(),
        params=params,
    )


def _decrypt_gadget_column(body: np.ndarray, sk: SecretKey) -> np.ndarray:
    """body[:d_full] @ (1, -s) mod q: the noisy m * nu^j ladder."""
    params = sk.params
    kvec = sk.key_vector()
    block = body[: params.d_full]
    if params.q_bits + (params.n1 + 1).bit_length() + 1 <= 62:
        return (block @ kvec) % params.q
    # Large q: split into 30-bit limbs; recombine in python ints (few rows).
    lo = (block & ((1 << 30) - 1)) @ kvec
    hi = (block >> 30) @ kvec
    out = [(int(h) * (1 << 30) + int(l)) % params.q for h, l in zip(hi, lo)]
    return np.array(out, dtype=np.int64)


def _peel(v: np.ndarray, params: LweParams) -> int:
    """Recover m exactly from the noisy gadget ladder by digit peeling.

    Stage t takes the ladder row of weight nu^(d-1-t).  With the low k bits
    of m already known, the residual exposes the next w = q_bits - k -
    beta*(d-1-t) bits at spacing 2^(q_bits - w); the spacing never drops
    below q/nu, which sets the noise threshold.
    """
    q = params.q
    q_bits = params.q_bits
    beta = params.beta
    d = params.d_full
    known = 0
    k = 0
    for t in range(d):
        j = d - 1 - t
        w = q_bits - k - beta * j
        if w <= 0:
            continue
        spacing = 1 << (q_bits - w)
        r = (int(v[j]) - known * (1 << (beta * j))) % q
        if r >= q // 2:
            r -= q
        digit = int(round(r / spacing)) % (1 << w)
        known += digit << k
        k += w
    return params.centered(known)


def decrypt(sk: SecretKey, c: Ciphertext) -> int:
    params = sk.params
    if c.fp != params.fingerprint():
        raise IncompatibleError("ciphertext was produced under different parameters")
    if c.noise_budget >= params.noise_threshold:
        raise NoiseOverflowError(
            f"noise budget {c.noise_budget:.0f} at or above threshold "
            f"{params.noise_threshold}; re-encrypt before decrypting",
            budget=c.noise_budget,
            threshold=params.noise_threshold,
        )
    return _peel(_decrypt_gadget_column(c.body, sk), params)


def measure_noise(sk: SecretKey, c: Ciphertext, m_true: int) -> int:
    """Max per-row error on the decryption ladder, given the true plaintext.

    Diagnostic used to validate budget soundness; not part of any protocol.
    """
    params = sk.params
    v = _decrypt_gadget_column(c.body, sk)
    w = params.gadget_weights()
    err = (v - (m_true % params.q) * w) % params.q
    err = np.where(err >= params.q // 2, err - params.q, err)
    return int(np.max(np.abs(err)))


def noise_estimate(c: Ciphertext) -> float:
    return c.noise_budget


def _require_compatible(c1, c2):
    if c1.fp != c2.fp:
        raise IncompatibleError("operands were encrypted under different parameters")


def enc_add(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    _require_compatible(c1, c2)
    params = c1.params
    return Ciphertext(
        body=(c1.body + c2.body) % params.q,
        noise_budget=c1.noise_budget + c2.noise_budget,
        value_bound=min(c1.value_bound + c2.value_bound, params.q / 2),
        level=max(c1.level, c2.level),
        fp=c1.fp,
        params=params,
    )


def _decompose(body: np.ndarray, params: LweParams) -> np.ndarray:
    """Base-nu digits of each entry: (rows, n1) -> (rows, n1 * d_full)."""
    shifts = params.beta * np.arange(params.d_full, dtype=np.int64)
    digits = (body[:, :, None] >> shifts[None, None, :]) & np.int64(params.nu - 1)
    return digits.reshape(body.shape[0], params.n1 * params.d_full)


def _matmul_small_mod(a: np.ndarray, b: np.ndarray, q: int, a_max: int) -> np.ndarray:
    """a @ b mod q for small non-negative a entries, exact via float64 BLAS.

    Falls back to 30-bit limb splitting of b when direct products could
    exceed the float64 exact-integer range.
    """
    k = a.shape[1]
    if a_max * float(q - 1) * k < _F64_EXACT:
        prod = a.astype(np.float64) @ b.astype(np.float64)
        return prod.astype(np.int64) % q
    lo = b & ((1 << 30) - 1)
    hi = b >> 30
    if a_max * float(1 << 30) * k >= _F64_EXACT:
        # Would need more limbs; take the slow exact route.
        return _matmul_object(a, b, q)
    af = a.astype(np.float64)
    hi_part = (af @ hi.astype(np.float64)).astype(np.int64)
    lo_part = (af @ lo.astype(np.float64)).astype(np.int64)
    # (x << 30) mod q == (x mod q/2^30) << 30 because q is a power of two.
    hi_mod = (hi_part % q) & ((q >> 30) - 1)
    return ((hi_mod << 30) + lo_part) % q


def _matmul_object(a: np.ndarray, b: np.ndarray, q: int) -> np.ndarray:
    res = a.astype(object) @ b.astype(object)
    return (res % q).astype(np.int64)


def _matmul_signed_mod(a: np.ndarray, b: np.ndarray, q: int, a_max: int) -> np.ndarray:
    """a @ b mod q where a holds small signed integers."""
    pos = np.maximum(a, 0)
    neg = np.maximum(-a, 0)
    r = _matmul_small_mod(pos, b, q, a_max)
    if np.any(neg):
        r = (r - _matmul_small_mod(neg, b, q, a_max)) % q
    return r


def _ternary_matvec_mod(a: np.ndarray, s: np.ndarray, q: int) -> np.ndarray:
    """a @ s mod q with ternary s, computed as s @ a.T to stay exact."""
    return _matmul_signed_mod(s[None, :], a.T % q, q, 1)[0]


_DECOMP_CHUNK_BUDGET = 30_000_000  # float64 entries held at once during chunked products


def _gsw_product_body(body1: np.ndarray, body2: np.ndarray, params: LweParams) -> np.ndarray:
    """Decompose body1 and multiply into body2, chunked to bound memory."""
    rows = params.rows
    chunk = max(1, _DECOMP_CHUNK_BUDGET // rows)
    if chunk >= rows:
        return _matmul_small_mod(_decompose(body1, params), body2, params.q, params.nu - 1)
    out = np.empty((rows, params.n1), dtype=np.int64)
    for lo_row in range(0, rows, chunk):
        hi_row = min(lo_row + chunk, rows)
        d = _decompose(body1[lo_row:hi_row], params)
        out[lo_row:hi_row] = _matmul_small_mod(d, body2, params.q, params.nu - 1)
    return out


def mult_budget(c1_budget, c1_bound, c2_budget, c2_bound, params: LweParams):
    """Worst-case noise of a product: |m2| * e1 + decomposition * e2."""
    return c2_bound * c1_budget + params.mult_noise_factor * c2_budget


def enc_mult(c1: Ciphertext, c2: Ciphertext) -> Ciphertext:
    _require_compatible(c1, c2)
    params = c1.params
    predicted = mult_budget(c1.noise_budget, c1.value_bound, c2.noise_budget, c2.value_bound, params)
    if predicted >= params.noise_threshold:
        raise NoiseOverflowError(
            f"predicted product noise {predicted:.0f} would reach threshold "
            f"{params.noise_threshold}; refresh operands first",
            budget=predicted,
            threshold=params.noise_threshold,
        )
    body = _gsw_product_body(c1.body, c2.body, params)
    return Ciphertext(
        body=body,
        noise_budget=predicted,
        value_bound=min(c1.value_bound * c2.value_bound, params.q / 2),
        level=max(c1.level, c2.level) + 1,
        fp=c1.fp,
        params=params,
    )


# ---------------------------------------------------------------------------
# Matrices of ciphertexts
# ---------------------------------------------------------------------------


@dataclass
class CipherMatrix:
    """Entrywise GSW encryption of an integer matrix, plus its scale ledger.

    step_exp is the base-2 exponent of the effective quantization step: the
    decrypted integer matrix times 2**step_exp is the carried real value.
    Homomorphic products add step exponents; additions require equal ones.
    """

    body: np.ndarray      # (r, c, rows, n1) int64
    budgets: np.ndarray   # (r, c) float64, conservative error bounds
    bounds: np.ndarray    # (r, c) float64, conservative |plaintext| bounds
    step_exp: int
    level: int
    fp: bytes
    params: LweParams

    @property
    def shape(self):
        return self.body.shape[:2]

    @property
    def step(self) -> float:
        return 2.0 ** self.step_exp

    def entry(self, i: int, j: int) -> Ciphertext:
        return Ciphertext(
            body=self.body[i, j],
            noise_budget=float(self.budgets[i, j]),
            value_bound=float(self.bounds[i, j]),
            level=self.level,
            fp=self.fp,
            params=self.params,
        )

    def transpose(self) -> "CipherMatrix":
        return CipherMatrix(
            body=self.body.transpose(1, 0, 2, 3),
            budgets=self.budgets.T.copy(),
            bounds=self.bounds.T.copy(),
            step_exp=self.step_exp,
            level=self.level,
            fp=self.fp,
            params=self.params,
        )

    def max_budget(self) -> float:
        return float(self.budgets.max())


def enc_matrix(pk: PublicKey, m_ints: np.ndarray, rng, step_exp: int = 0) -> CipherMatrix:
    """Encrypt an integer matrix entrywise at the given effective step."""
    params = pk.params
    m_ints = np.asarray(m_ints, dtype=np.int64)
    if m_ints.ndim != 2:
        raise ShapeError(f"expected a 2-D integer matrix, got shape {m_ints.shape}")
    half = params.q // 2
    bad = np.abs(m_ints) > half - 1
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise RangeError(f"matrix entry ({i},{j}) = {m_ints[i, j]} outside centered range")
    r, c = m_ints.shape
    g = _gadget(params)
    fresh = _fresh_rows(pk, r * c * params.rows, rng).reshape(r, c, params.rows, params.n1)
    body = (fresh + (m_ints[:, :, None, None] % params.q) * g) % params.q
    return CipherMatrix(
        body=body,
        budgets=np.full((r, c), float(params.fresh_noise_bound)),
        bounds=np.abs(m_ints).astype(np.float64),
        step_exp=step_exp,
        level=0,
        fp=params.fingerprint(),
        params=params,
    )


def dec_matrix(sk: SecretKey, cm: CipherMatrix) -> np.ndarray:
    """Decrypt entrywise to centered integers."""
    params = sk.params
    if cm.fp != params.fingerprint():
        raise IncompatibleError("cipher matrix was produced under different parameters")
    if cm.max_budget() >= params.noise_threshold:
        i, j = np.unravel_index(int(cm.budgets.argmax()), cm.budgets.shape)
        raise NoiseOverflowError(
            f"entry ({i},{j}) budget {cm.budgets[i, j]:.0f} at or above threshold",
            budget=float(cm.budgets[i, j]),
            threshold=params.noise_threshold,
            entry=(int(i), int(j)),
        )
    r, c = cm.shape
    out = np.empty((r, c), dtype=np.int64)
    for i in range(r):
        for j in range(c):
            out[i, j] = _peel(_decrypt_gadget_column(cm.body[i, j], sk), params)
    return out


def _require_matrix_compatible(a: CipherMatrix, b: CipherMatrix):
    if a.fp != b.fp:
        raise IncompatibleError("cipher matrices belong to different parameter sets")


def enc_matadd(a: CipherMatrix, b: CipherMatrix) -> CipherMatrix:
    _require_matrix_compatible(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    if a.step_exp != b.step_exp:
        raise IncompatibleError(
            f"effective steps differ (2^{a.step_exp} vs 2^{b.step_exp}); requantize first"
        )
    params = a.params
    return CipherMatrix(
        body=(a.body + b.body) % params.q,
        budgets=a.budgets + b.budgets,
        bounds=np.minimum(a.bounds + b.bounds, params.q / 2),
        step_exp=a.step_exp,
        level=max(a.level, b.level),
        fp=a.fp,
        params=params,
    )


def enc_matmul(a: CipherMatrix, b: CipherMatrix, require_no_wrap: bool = False) -> CipherMatrix:
    """Matrix product over ciphertexts; left operand is gadget-decomposed.

    The left operand's noise is scaled by the right operand's plaintext
    magnitudes, so callers should put the operand with small values (masks,
    structural matrices) on the right when they can.
    """
    _require_matrix_compatible(a, b)
    ra, ca = a.shape
    rb, cb = b.shape
    if ca != rb:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    params = a.params
    budgets = a.budgets @ b.bounds + params.mult_noise_factor * b.budgets.sum(axis=0)[None, :]
    if budgets.max() >= params.noise_threshold:
        i, j = np.unravel_index(int(budgets.argmax()), budgets.shape)
        raise NoiseOverflowError(
            f"product entry ({i},{j}) predicted noise {budgets[i, j]:.0f} would reach "
            f"threshold {params.noise_threshold}; refresh operands first",
            budget=float(budgets[i, j]),
            threshold=params.noise_threshold,
            entry=(int(i), int(j)),
        )
    bounds = a.bounds @ b.bounds
    if require_no_wrap and bounds.max() >= params.q / 2:
        i, j = np.unravel_index(int(bounds.argmax()), bounds.shape)
        raise RangeError(
            f"product entry ({i},{j}) magnitude bound {bounds[i, j]:.3g} may wrap mod q; "
            "requantize operands to coarser steps"
        )
    rows, n1 = params.rows, params.n1
    # Small profiles: one batched BLAS product over a block matrix layout.
    if ra * ca * rows * rows <= _DECOMP_CHUNK_BUDGET:
        digits = _decompose(a.body.reshape(ra * ca * rows, n1), params)
        big_d = (
            digits.reshape(ra, ca, rows, rows).transpose(0, 2, 1, 3).reshape(ra * rows, ca * rows)
        )
        big_b = b.body.transpose(0, 2, 1, 3).reshape(rb * rows, cb * n1)
        big_out = _matmul_small_mod(big_d, big_b, params.q, params.nu - 1)
        out = big_out.reshape(ra, rows, cb, n1).transpose(0, 2, 1, 3).copy()
    else:
        out = np.zeros((ra, cb, rows, n1), dtype=np.int64)
        for i in range(ra):
            for j in range(cb):
                acc = np.zeros((rows, n1), dtype=np.int64)
                for k in range(ca):
                    acc = (acc + _gsw_product_body(a.body[i, k], b.body[k, j], params)) % params.q
                out[i, j] = acc
    return CipherMatrix(
        body=out,
        budgets=budgets,
        bounds=np.minimum(bounds, params.q / 2),
        step_exp=a.step_exp + b.step_exp,
        level=max(a.level, b.level) + 1,
        fp=a.fp,
        params=params,
    )


def plain_matmul(p: np.ndarray, cm: CipherMatrix) -> CipherMatrix:
    """p @ cm for a known integer matrix p (step 0), without gadget noise.

    Used for mask application and for the structural integer state matrix:
    the result's noise is the |p|-weighted combination of input noises.
    """
    params = cm.params
    p = np.asarray(p, dtype=np.int64)
    r, c = cm.shape
    a_max = int(np.abs(p).max()) if p.size else 0
    if p.ndim != 2 or p.shape[1] != r:
        raise ShapeError(f"cannot left-multiply {cm.shape} by {p.shape}")
    flat = cm.body.reshape(r, c * params.rows * params.n1)
    out_flat = _matmul_signed_mod(p, flat, params.q, max(a_max, 1))
    body = out_flat.reshape(p.shape[0], c, params.rows, params.n1)
    budgets = np.abs(p) @ cm.budgets
    bounds = np.abs(p).astype(np.float64) @ cm.bounds
    return CipherMatrix(
        body=body,
        budgets=budgets,
        bounds=np.minimum(bounds, params.q / 2),
        step_exp=cm.step_exp,
        level=cm.level,
        fp=cm.fp,
        params=params,
    )


def plain_matmul_right(cm: CipherMatrix, p: np.ndarray) -> CipherMatrix:
    """cm @ p for a known integer matrix p, via two transposes."""
    return plain_matmul(np.asarray(p, dtype=np.int64).T, cm.transpose()).transpose()


def plain_scale(k: int, cm: CipherMatrix) -> CipherMatrix:
    """Scale every ciphertext by a known integer k; noise scales by |k|."""
    params = cm.params
    k = int(k)
    if abs(k) * (params.q - 1) < 2**62:
        body = (np.int64(k) * cm.body) % params.q
    else:
        body = ((k % params.q) * cm.body.astype(object) % params.q).astype(np.int64)
    return CipherMatrix(
        body=body,
        budgets=abs(k) * cm.budgets,
        bounds=np.minimum(abs(k) * cm.bounds, params.q / 2),
        step_exp=cm.step_exp,
        level=cm.level,
        fp=cm.fp,
        params=params,
    )


def with_step(cm: CipherMatrix, step_exp: int) -> CipherMatrix:
    """Relabel the effective step without touching ciphertexts."""
    return replace(cm, step_exp=step_exp)


def refine_step(cm: CipherMatrix, step_exp: int) -> CipherMatrix:
    """Move to a finer power-of-two step exactly (scale by the power gap)."""
    if step_exp > cm.step_exp:
        raise IncompatibleError("refine_step can only move to a finer step")
    scaled = plain_scale(1 << (cm.step_exp - step_exp), cm)
    return replace(scaled, step_exp=step_exp)


def cm_submatrix(cm: CipherMatrix, rows=None, cols=None) -> CipherMatrix:
    rows = np.arange(cm.shape[0]) if rows is None else np.asarray(rows)
    cols = np.arange(cm.shape[1]) if cols is None else np.asarray(cols)
    return replace(
        cm,
        body=cm.body[np.ix_(rows, cols)].copy(),
        budgets=cm.budgets[np.ix_(rows, cols)].copy(),
        bounds=cm.bounds[np.ix_(rows, cols)].copy(),
    )


def cm_vstack(mats: list) -> CipherMatrix:
    top = mats[0]
    for m in mats[1:]:
        _require_matrix_compatible(top, m)
        if m.step_exp != top.step_exp:
            raise IncompatibleError("stacked blocks must share an effective step")
    return replace(
        top,
        body=np.concatenate([m.body for m in mats], axis=0),
        budgets=np.concatenate([m.budgets for m in mats], axis=0),
        bounds=np.concatenate([m.bounds for m in mats], axis=0),
        level=max(m.level for m in mats),
    )


def cm_hstack(mats: list) -> CipherMatrix:
    return cm_vstack([m.transpose() for m in mats]).transpose()


def cm_block(blocks: list) -> CipherMatrix:
    """Assemble a CipherMatrix from a 2-D grid of conforming blocks."""
    return cm_vstack([cm_hstack(row) for row in blocks])


# ---------------------------------------------------------------------------
# Serialization: length-prefixed little-endian, magic "ELFC"
# ---------------------------------------------------------------------------


def _header(kind: int) -> bytes:
    return MAGIC + struct.pack("<HB", FORMAT_VERSION, kind)


def _check_header(blob: bytes, kind: int) -> int:
    if blob[:4] != MAGIC:
        raise IncompatibleError("bad magic bytes")
    ver, k = struct.unpack_from("<HB", blob, 4)
    if ver != FORMAT_VERSION:
        raise IncompatibleError(f"unsupported format version {ver}")
    if k != kind:
        raise IncompatibleError(f"expected blob kind {kind}, got {k}")
    return 7


def serialize_params(params: LweParams) -> bytes:
    return _header(_KIND_PARAMS) + struct.pack(
        "<QIIIII", params.q, params.sigma, params.n_l, params.nu, params.d, params.lam
    )


def deserialize_params(blob: bytes) -> LweParams:
    off = _check_header(blob, _KIND_PARAMS)
    q, sigma, n_l, nu, d, lam = struct.unpack_from("<QIIIII", blob, off)
    return LweParams(q=q, sigma=sigma, n_l=n_l, nu=nu, d=d, lam=lam)


def serialize_secret_key(sk: SecretKey) -> bytes:
    p = serialize_params(sk.params)
    return _header(_KIND_SECRET_KEY) + struct.pack("<I", len(p)) + p + sk.s.astype(np.int8).tobytes()


def deserialize_secret_key(blob: bytes) -> SecretKey:
    off = _check_header(blob, _KIND_SECRET_KEY)
    (plen,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = deserialize_params(blob[off : off + plen])
    off += plen
    s = np.frombuffer(blob[off : off + params.n_l], dtype=np.int8).astype(np.int64)
    return SecretKey(s=s, params=params)


def serialize_public_key(pk: PublicKey) -> bytes:
    p = serialize_params(pk.params)
    arr = pk.body.astype("<i8").tobytes()
    return _header(_KIND_PUBLIC_KEY) + struct.pack("<II", len(p), pk.body.shape[0]) + p + arr


def deserialize_public_key(blob: bytes) -> PublicKey:
    off = _check_header(blob, _KIND_PUBLIC_KEY)
    plen, nrows = struct.unpack_from("<II", blob, off)
    off += 8
    params = deserialize_params(blob[off : off + plen])
    off += plen
    body = np.frombuffer(blob[off:], dtype="<i8").reshape(nrows, params.n1).copy()
    return PublicKey(body=body, params=params)


def serialize_cipher_matrix(cm: CipherMatrix) -> bytes:
    r, c = cm.shape
    head = _header(_KIND_CIPHER_MATRIX) + cm.fp + struct.pack(
        "<IIIIiI", r, c, cm.params.rows, cm.params.n1, cm.step_exp, cm.level
    )
    return (
        head
        + cm.budgets.astype("<f8").tobytes()
        + cm.bounds.astype("<f8").tobytes()
        + cm.body.astype("<i8").tobytes()
    )


def deserialize_cipher_matrix(blob: bytes, params: LweParams) -> CipherMatrix:
    off = _check_header(blob, _KIND_CIPHER_MATRIX)
    fp = blob[off : off + 8]
    off += 8
    if fp != params.fingerprint():
        raise IncompatibleError("cipher matrix blob does not match supplied parameters")
    r, c, rows, n1, step_exp, level = struct.unpack_from("<IIIIiI", blob, off)
    off += 24
    if rows != params.rows or n1 != params.n1:
        raise IncompatibleError("cipher matrix dimensions do not match parameters")
    cnt = r * c
    budgets = np.frombuffer(blob[off : off + 8 * cnt], dtype="<f8").reshape(r, c).copy()
    off += 8 * cnt
    bounds = np.frombuffer(blob[off : off + 8 * cnt], dtype="<f8").reshape(r, c).copy()
    off += 8 * cnt
    body = np.frombuffer(blob[off:], dtype="<i8").reshape(r, c, rows, n1).copy()
    return CipherMatrix(
        body=body, budgets=budgets, bounds=bounds, step_exp=step_exp,
        level=level, fp=fp, params=params,
    )


def serialize_ciphertext(c: Ciphertext) -> bytes:
    head = _header(_KIND_CIPHERTEXT) + c.fp + struct.pack(
        "<IIddI", c.params.rows, c.params.n1, c.noise_budget, c.value_bound, c.level
    )
    return head + c.body.astype("<i8").tobytes()


def deserialize_ciphertext(blob: bytes, params: LweParams) -> Ciphertext:
    off = _check_header(blob, _KIND_CIPHERTEXT)
    fp = blob[off : off + 8]
    off += 8
    if fp != params.fingerprint():
        raise IncompatibleError("ciphertext blob does not match supplied parameters")
    rows, n1, budget, bound, level = struct.unpack_from("<IIddI", blob, off)
    off += 28
    body = np.frombuffer(blob[off:], dtype="<i8").reshape(rows, n1).copy()
    return Ciphertext(
        body=body, noise_budget=budget, value_bound=bound, level=level, fp=fp, params=params
    )
