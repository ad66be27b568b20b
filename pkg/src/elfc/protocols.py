"""Two-party protocol layer: ISO, delegate server, framed messages, masking.

The delegate server owns only the HE public key and the second-cryptosystem
secret key; the ISO owns the HE secret key.  Every matrix the ISO sees in
the clear is first wrapped on both sides with fresh invertible integer
masks, and every exchange is recorded in an append-only transcript so a
leakage audit can replay what each role observed.

Masked operations provided to the server:

  * matrix inversion        — mask, ISO decrypt/invert/re-encrypt, unmask
  * re-encryption           — mask, ISO decrypt/re-encrypt, unmask (noise refresh)
  * requantization          — re-encryption variant that also moves the
                              effective step (round at the new step)
  * rank certificate        — ISO reports the numerical rank of the masked matrix
  * integer rounding        — ISO returns the masked matrix rounded to exact
                              integers in the clear (used only for the
                              structural nilpotent state matrix)
  * price decryption        — ISO announces the tick-rounded price and returns
                              a fresh encryption for re-injection
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import struct
from dataclasses import dataclass, field

import numpy as np

from . import he_core as he
from .errors import (
    NoiseOverflowError,
    ProtocolError,
    RangeError,
    SingularMatrixError,
    UnrecoverableNoiseError,
)
from .quantizer import quantize_array

FRAME_MAGIC = b"ELFC"
FRAME_VERSION = 1


class Role(enum.IntEnum):
    ISO = 0
    SERVER = 1
    GENERATOR_BASE = 2  # generator i is role byte 2 + i

    @staticmethod
    def generator(i: int) -> int:
        return int(Role.GENERATOR_BASE) + i

    @staticmethod
    def name_of(code: int) -> str:
        if code == Role.ISO:
            return "ISO"
        if code == Role.SERVER:
            return "DelegateServer"
        return f"Generator({code - int(Role.GENERATOR_BASE) + 1})"


class Kind(enum.IntEnum):
    TYPE_REPORT = 1
    MASK_INVERT_REQ = 2
    MASK_INVERT_RESP = 3
    MASK_REFRESH_REQ = 4
    MASK_REFRESH_RESP = 5
    MASK_REQUANT_REQ = 6
    MASK_REQUANT_RESP = 7
    MASK_RANK_REQ = 8
    MASK_RANK_RESP = 9
    MASK_ROUND_INT_REQ = 10
    MASK_ROUND_INT_RESP = 11
    PRICE_DECRYPT_REQ = 12
    PRICE_DECRYPT_RESP = 13
    PRICE_ANNOUNCE = 14
    ERROR = 15


# Message kinds the ISO may legitimately receive: everything it sees is
# either masked or an end-product price ciphertext.
ISO_ALLOWED_KINDS = {
    Kind.MASK_INVERT_REQ,
    Kind.MASK_REFRESH_REQ,
    Kind.MASK_REQUANT_REQ,
    Kind.MASK_RANK_REQ,
    Kind.MASK_ROUND_INT_REQ,
    Kind.PRICE_DECRYPT_REQ,
}


@dataclass(frozen=True)
class Frame:
    sender: int
    receiver: int
    kind: int
    payload: bytes

    def encode(self) -> bytes:
        return (
            FRAME_MAGIC
            + struct.pack("<HBBBQ", FRAME_VERSION, self.sender, self.receiver, self.kind,
                          len(self.payload))
            + self.payload
        )

    @staticmethod
    def decode(blob: bytes) -> "Frame":
        if blob[:4] != FRAME_MAGIC:
            raise ProtocolError("bad frame magic")
        ver, snd, rcv, kind, plen = struct.unpack_from("<HBBBQ", blob, 4)
        if ver != FRAME_VERSION:
            raise ProtocolError(f"unsupported frame version {ver}")
        payload = blob[17 : 17 + plen]
        if len(payload) != plen:
            raise ProtocolError("truncated frame")
        return Frame(sender=snd, receiver=rcv, kind=kind, payload=payload)


@dataclass
class TranscriptEntry:
    seq: int
    sender: str
    receiver: str
    kind: str
    digest: str
    size: int


class Transcript:
    """Append-only record of every frame that crossed the bus."""

    def __init__(self):
        self.entries: list[TranscriptEntry] = []
        self._frames: list[Frame] = []

    def record(self, frame: Frame):
        self.entries.append(
            TranscriptEntry(
                seq=len(self.entries),
                sender=Role.name_of(frame.sender),
                receiver=Role.name_of(frame.receiver),
                kind=Kind(frame.kind).name,
                digest=hashlib.sha256(frame.payload).hexdigest()[:16],
                size=len(frame.payload),
            )
        )
        self._frames.append(frame)

    def frames(self) -> list[Frame]:
        return list(self._frames)

    def to_csv(self) -> str:
        lines = ["seq,sender,receiver,kind,digest,size"]
        for e in self.entries:
            lines.append(f"{e.seq},{e.sender},{e.receiver},{e.kind},{e.digest},{e.size}")
        return "\n".join(lines) + "\n"


class MessageBus:
    """In-process synchronous bus: a call delivers a request frame to the
    receiving party and records both the request and the response."""

    def __init__(self, transcript: Transcript | None = None):
        self.transcript = transcript or Transcript()
        self._handlers = {}

    def register(self, role: int, handler):
        self._handlers[role] = handler

    def send(self, sender: int, receiver: int, kind: Kind, payload: bytes):
        self.transcript.record(Frame(sender, receiver, int(kind), payload))

    def call(self, sender: int, receiver: int, kind: Kind, payload: bytes):
        self.send(sender, receiver, kind, payload)
        handler = self._handlers.get(receiver)
        if handler is None:
            raise ProtocolError(f"no party registered for role {Role.name_of(receiver)}")
        resp_kind, resp_payload = handler(kind, payload)
        self.send(receiver, sender, resp_kind, resp_payload)
        if resp_kind == Kind.ERROR:
            raise _decode_error(resp_payload)
        return resp_payload


class SocketBus(MessageBus):
    """Bus variant that forwards ISO-addressed calls over a stream socket
    carrying the framed binary format; all other traffic stays local."""

    def __init__(self, sock, transcript: Transcript | None = None):
        super().__init__(transcript)
        self._sock = sock

    def call(self, sender: int, receiver: int, kind: Kind, payload: bytes):
        if receiver != Role.ISO:
            return super().call(sender, receiver, kind, payload)
        self.send(sender, receiver, kind, payload)
        self._sock.sendall(Frame(sender, receiver, int(kind), payload).encode())
        header = _recv_exact(self._sock, 17)
        _, _, _, _, plen = struct.unpack_from("<HBBBQ", header, 4)
        resp = Frame.decode(header + _recv_exact(self._sock, plen))
        self.transcript.record(resp)
        if resp.kind == Kind.ERROR:
            raise _decode_error(resp.payload)
        return resp.payload


def _recv_exact(sock, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("socket closed mid-frame")
        buf += chunk
    return buf


def _encode_error(exc: Exception) -> bytes:
    name = type(exc).__name__.encode()
    msg = str(exc).encode()
    return struct.pack("<H", len(name)) + name + msg


def _decode_error(payload: bytes) -> Exception:
    (nlen,) = struct.unpack_from("<H", payload, 0)
    name = payload[2 : 2 + nlen].decode()
    msg = payload[2 + nlen :].decode()
    classes = {
        "NoiseOverflowError": NoiseOverflowError,
        "UnrecoverableNoiseError": UnrecoverableNoiseError,
        "SingularMatrixError": SingularMatrixError,
        "RangeError": RangeError,
        "QuantizationOverflowError": RangeError,
    }
    return classes.get(name, ProtocolError)(f"[ISO] {msg}")


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

_tag_counter = itertools.count(1)


@dataclass(frozen=True)
class MaskPair:
    phi: np.ndarray
    phi_inv: np.ndarray
    usage_tag: int


def gen_mask_pair(dim: int, rng, shear: bool = True) -> MaskPair:
    """Fresh invertible integer mask built from elementary row operations:
    a random signed permutation, optionally composed with one unit shear.
    Entries stay in {-1, 0, 1} and the exact integer inverse is known, so
    masking adds no quantization error and at most doubles noise per side.

    Operations where the ISO rounds to a new step (inversion and
    requantization) use shear=False: unit-row-sum masks keep the rounding
    perturbation unamplified, at the cost of hiding only positions and
    signs of the matrix entries rather than their combinations."""
    perm = rng.permutation(dim)
    signs = rng.choice(np.array([-1, 1], dtype=np.int64), size=dim)
    p = np.zeros((dim, dim), dtype=np.int64)
    p[np.arange(dim), perm] = signs
    p_inv = np.zeros((dim, dim), dtype=np.int64)
    p_inv[perm, np.arange(dim)] = signs
    if shear and dim >= 2:
        i, j = rng.choice(dim, size=2, replace=False)
        c = int(rng.choice([-1, 1]))
        shear_m = np.eye(dim, dtype=np.int64)
        shear_m[i, j] = c
        shear_inv = np.eye(dim, dtype=np.int64)
        shear_inv[i, j] = -c
        phi = p @ shear_m
        phi_inv = shear_inv @ p_inv
    else:
        phi, phi_inv = p, p_inv
    return MaskPair(phi=phi, phi_inv=phi_inv, usage_tag=next(_tag_counter))


# ---------------------------------------------------------------------------
# Parties
# ---------------------------------------------------------------------------


class IsoParty:
    """Market operator: holds the HE secret key, serves masked requests,
    decrypts and announces prices."""

    def __init__(self, keypair: he.KeyPair, seed):
        self.keys = keypair
        self.params = keypair.params
        self.rng = np.random.default_rng(seed)

    def handle(self, kind: Kind, payload: bytes):
        try:
            if kind == Kind.MASK_INVERT_REQ:
                return Kind.MASK_INVERT_RESP, self._handle_invert(payload)
            if kind == Kind.MASK_REFRESH_REQ:
                return Kind.MASK_REFRESH_RESP, self._handle_refresh(payload)
            if kind == Kind.MASK_REQUANT_REQ:
                return Kind.MASK_REQUANT_RESP, self._handle_requant(payload)
            if kind == Kind.MASK_RANK_REQ:
                return Kind.MASK_RANK_RESP, self._handle_rank(payload)
            if kind == Kind.MASK_ROUND_INT_REQ:
                return Kind.MASK_ROUND_INT_RESP, self._handle_round_int(payload)
            if kind == Kind.PRICE_DECRYPT_REQ:
                return Kind.PRICE_DECRYPT_RESP, self._handle_price(payload)
            raise ProtocolError(f"ISO cannot serve message kind {kind}")
        except (NoiseOverflowError, SingularMatrixError, RangeError, ProtocolError) as exc:
            return Kind.ERROR, _encode_error(exc)

    # -- handlers ----------------------------------------------------------

    def _decrypt_masked(self, blob: bytes) -> tuple[np.ndarray, int]:
        cm = he.deserialize_cipher_matrix(blob, self.params)
        return he.dec_matrix(self.keys.sk, cm), cm.step_exp

    def _handle_invert(self, payload: bytes) -> bytes:
        (out_step_exp,) = struct.unpack_from("<i", payload, 0)
        ints, step_exp = self._decrypt_masked(payload[4:])
        reals = ints.astype(np.float64) * 2.0**step_exp
        if reals.shape[0] != reals.shape[1]:
            raise ProtocolError("inversion requires a square matrix")
        if np.linalg.cond(reals) > 1e12:
            raise SingularMatrixError("masked matrix is numerically singular")
        inv = np.linalg.inv(reals)
        # The requested step is a precision floor; coarsen as needed so the
        # inverse magnitudes fit the modulus.  The response step is recorded
        # in the returned matrix.
        top = float(np.abs(inv).max())
        fit_exp = int(np.ceil(np.log2(top + 1))) - (self.params.q_bits - 4)
        out_step_exp = max(out_step_exp, fit_exp)
        out_ints = quantize_array(inv, 2.0**out_step_exp, self.params.q)
        fresh = he.enc_matrix(self.keys.pk, out_ints, self.rng, step_exp=out_step_exp)
        return he.serialize_cipher_matrix(fresh)

    def _handle_refresh(self, payload: bytes) -> bytes:
        ints, step_exp = self._decrypt_masked(payload)
        fresh = he.enc_matrix(self.keys.pk, ints, self.rng, step_exp=step_exp)
        return he.serialize_cipher_matrix(fresh)

    def _handle_requant(self, payload: bytes) -> bytes:
        (out_step_exp,) = struct.unpack_from("<i", payload, 0)
        ints, step_exp = self._decrypt_masked(payload[4:])
        reals = ints.astype(np.float64) * 2.0**step_exp
        out_ints = quantize_array(reals, 2.0**out_step_exp, self.params.q)
        fresh = he.enc_matrix(self.keys.pk, out_ints, self.rng, step_exp=out_step_exp)
        return he.serialize_cipher_matrix(fresh)

    def _handle_rank(self, payload: bytes) -> bytes:
        ints, step_exp = self._decrypt_masked(payload)
        rank = int(np.linalg.matrix_rank(ints.astype(np.float64) * 2.0**step_exp))
        return struct.pack("<I", rank)

    def _handle_round_int(self, payload: bytes) -> bytes:
        ints, step_exp = self._decrypt_masked(payload)
        rounded = np.round(ints.astype(np.float64) * 2.0**step_exp).astype(np.int64)
        r, c = rounded.shape
        return struct.pack("<II", r, c) + rounded.astype("<i8").tobytes()

    def _handle_price(self, payload: bytes) -> bytes:
        tick_exp, reenc_exp = struct.unpack_from("<ii", payload, 0)
        ints, step_exp = self._decrypt_masked(payload[8:])
        vals = ints.astype(np.float64).reshape(-1) * 2.0**step_exp
        tick = 2.0**tick_exp
        announced = np.round(vals / tick) * tick
        reenc_ints = quantize_array(announced.reshape(-1, 1), 2.0**reenc_exp, self.params.q)
        fresh = he.enc_matrix(self.keys.pk, reenc_ints, self.rng, step_exp=reenc_exp)
        blob = he.serialize_cipher_matrix(fresh)
        return struct.pack("<I", announced.size) + announced.astype("<f8").tobytes() + blob


class DelegateServer:
    """Controller-synthesis and evaluation party.  Holds pk1 and sk2 only."""

    def __init__(self, pk1: he.PublicKey, second_keys, bus: MessageBus, seed):
        self.pk = pk1
        self.params = pk1.params
        self.second_keys = second_keys
        self.bus = bus
        self.rng = np.random.default_rng(seed)
        self.mask_tags: list[int] = []
        self.reports: dict[int, dict] = {}

    # -- masking -----------------------------------------------------------

    def _fresh_masks(self, shape, shear: bool = True) -> tuple[MaskPair, MaskPair]:
        m1 = gen_mask_pair(shape[0], self.rng, shear=shear)
        m2 = gen_mask_pair(shape[1], self.rng, shear=shear)
        self.mask_tags.extend([m1.usage_tag, m2.usage_tag])
        return m1, m2

    def _mask(self, cm: he.CipherMatrix, m1: MaskPair, m2: MaskPair) -> he.CipherMatrix:
        if cm.max_budget() >= self.params.noise_threshold:
            raise UnrecoverableNoiseError(
                "noise already at decryption threshold; masked re-encryption "
                "must run before overflow",
                budget=cm.max_budget(),
                threshold=self.params.noise_threshold,
            )
        return he.plain_matmul_right(he.plain_matmul(m1.phi, cm), m2.phi)

    # -- protocol drivers ---------------------------------------------------

    def request_inverse(self, cm: he.CipherMatrix, out_step_exp: int) -> he.CipherMatrix:
        """Algorithm: encrypted matrix inversion via ISO-side plaintext inverse."""
        m1, m2 = self._fresh_masks(cm.shape, shear=False)
        masked = self._mask(cm, m1, m2)
        payload = struct.pack("<i", out_step_exp) + he.serialize_cipher_matrix(masked)
        resp = self.bus.call(Role.SERVER, Role.ISO, Kind.MASK_INVERT_REQ, payload)
        inv_masked = he.deserialize_cipher_matrix(resp, self.params)
        # (phi1 M phi2)^-1 = phi2^-1 M^-1 phi1^-1, so unmask with the masks.
        return he.plain_matmul_right(he.plain_matmul(m2.phi, inv_masked), m1.phi)

    def request_refresh(self, cm: he.CipherMatrix) -> he.CipherMatrix:
        """Algorithm: masked re-encryption (noise refresh, value preserved)."""
        m1, m2 = self._fresh_masks(cm.shape)
        masked = self._mask(cm, m1, m2)
        resp = self.bus.call(
            Role.SERVER, Role.ISO, Kind.MASK_REFRESH_REQ, he.serialize_cipher_matrix(masked)
        )
        fresh_masked = he.deserialize_cipher_matrix(resp, self.params)
        return he.plain_matmul_right(he.plain_matmul(m1.phi_inv, fresh_masked), m2.phi_inv)

    def request_requantize(self, cm: he.CipherMatrix, out_step_exp: int) -> he.CipherMatrix:
        """Noise refresh that also rounds the carried values to a new step."""
        if cm.step_exp == out_step_exp:
            return self.request_refresh(cm)
        m1, m2 = self._fresh_masks(cm.shape, shear=False)
        masked = self._mask(cm, m1, m2)
        payload = struct.pack("<i", out_step_exp) + he.serialize_cipher_matrix(masked)
        resp = self.bus.call(Role.SERVER, Role.ISO, Kind.MASK_REQUANT_REQ, payload)
        fresh_masked = he.deserialize_cipher_matrix(resp, self.params)
        return he.plain_matmul_right(he.plain_matmul(m1.phi_inv, fresh_masked), m2.phi_inv)

    def request_rank(self, cm: he.CipherMatrix) -> int:
        m1, m2 = self._fresh_masks(cm.shape)
        masked = self._mask(cm, m1, m2)
        resp = self.bus.call(
            Role.SERVER, Role.ISO, Kind.MASK_RANK_REQ, he.serialize_cipher_matrix(masked)
        )
        return struct.unpack("<I", resp)[0]

    def request_integer_round(self, cm: he.CipherMatrix) -> np.ndarray:
        """Round a near-integer encrypted matrix to exact plaintext integers.

        Only used for the structural nilpotent state matrix, whose values
        are canonical zeros and ones rather than type-derived secrets.
        Rounding commutes with the unit-norm integer masks because the
        residuals are far below one half.
        """
        m1, m2 = self._fresh_masks(cm.shape)
        masked = self._mask(cm, m1, m2)
        resp = self.bus.call(
            Role.SERVER, Role.ISO, Kind.MASK_ROUND_INT_REQ, he.serialize_cipher_matrix(masked)
        )
        r, c = struct.unpack_from("<II", resp, 0)
        rounded = np.frombuffer(resp[8:], dtype="<i8").reshape(r, c)
        return m1.phi_inv @ rounded @ m2.phi_inv

    def request_price(self, cm_price: he.CipherMatrix, tick_exp: int, reenc_exp: int):
        """Send the encrypted price out for decryption and re-injection."""
        payload = struct.pack("<ii", tick_exp, reenc_exp) + he.serialize_cipher_matrix(cm_price)
        resp = self.bus.call(Role.SERVER, Role.ISO, Kind.PRICE_DECRYPT_REQ, payload)
        (n,) = struct.unpack_from("<I", resp, 0)
        announced = np.frombuffer(resp[4 : 4 + 8 * n], dtype="<f8").copy()
        fresh = he.deserialize_cipher_matrix(resp[4 + 8 * n :], self.params)
        return announced, fresh

    # -- report intake ------------------------------------------------------

    def receive_report(self, generator_index: int, box: bytes):
        from . import generator_agent

        self.bus.send(
            Role.generator(generator_index), Role.SERVER, Kind.TYPE_REPORT, box
        )
        self.reports[generator_index] = generator_agent.open_report(
            box, self.second_keys.sk2, self.params
        )

    def require_reports(self, n_generators: int):
        missing = [i + 1 for i in range(n_generators) if i not in self.reports]
        if missing:
            from .errors import ProtocolIncompleteError

            raise ProtocolIncompleteError(
                f"missing type reports from generators {missing}"
            )


def announce_price(bus: MessageBus, announced: np.ndarray, n_generators: int):
    payload = announced.astype("<f8").tobytes()
    for i in range(n_generators):
        bus.send(Role.ISO, Role.generator(i), Kind.PRICE_ANNOUNCE, payload)


# ---------------------------------------------------------------------------
# Spec-level convenience wrappers
# ---------------------------------------------------------------------------


def enc_matrix_inverse(server: DelegateServer, cm: he.CipherMatrix, out_step_exp: int):
    return server.request_inverse(cm, out_step_exp)


def masked_reencrypt(server: DelegateServer, cm: he.CipherMatrix):
    return server.request_refresh(cm)


def refreshed_budget_bound(params: he.LweParams) -> float:
    """Budget guaranteed after masked re-encryption: fresh noise through two
    unit-norm masks (row sums at most 2 per side)."""
    return 4.0 * params.fresh_noise_bound


def run_offline_phase(iso: IsoParty, server: DelegateServer, generator_boxes, profile, inputs):
    """Collect doubly encrypted reports and synthesize the market controller.

    generator_boxes maps generator index -> sealed report bytes; inputs is
    the public market data (operator cost weights, coupling, covariances).
    """
    from . import market_synthesis

    for idx, box in generator_boxes.items():
        server.receive_report(idx, box)
    server.require_reports(len(generator_boxes))
    return market_synthesis.synthesize_encrypted(server, profile, inputs)


# ---------------------------------------------------------------------------
# Transcript audit
# ---------------------------------------------------------------------------


def digest_of_plain_matrix(mat: np.ndarray) -> str:
    """Digest a raw plaintext matrix the way frame payloads are digested."""
    return hashlib.sha256(np.ascontiguousarray(mat, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass
class AuditReport:
    findings: list = field(default_factory=list)
    checked_frames: int = 0
    mask_tags_unique: bool = True

    @property
    def ok(self) -> bool:
        return not self.findings and self.mask_tags_unique


def audit_transcript(
    transcript: Transcript,
    mask_tags: list[int] | None = None,
    forbidden_digests: dict | None = None,
) -> AuditReport:
    """Leakage audit: the ISO must only ever receive masked material or price
    ciphertexts, generators must only send sealed boxes to the server, and no
    frame anywhere may carry a raw type-derived matrix."""
    report = AuditReport()
    forbidden = forbidden_digests or {}
    for e in transcript.entries:
        report.checked_frames += 1
        if e.receiver == "ISO" and Kind[e.kind] not in ISO_ALLOWED_KINDS:
            report.findings.append(
                f"seq {e.seq}: ISO received disallowed kind {e.kind}"
            )
        if e.sender.startswith("Generator") and e.receiver == "DelegateServer":
            if Kind[e.kind] != Kind.TYPE_REPORT:
                report.findings.append(
                    f"seq {e.seq}: generator sent non-report kind {e.kind} to server"
                )
        for name, digest in forbidden.items():
            if e.digest == digest:
                report.findings.append(
                    f"seq {e.seq}: payload digest matches plaintext secret {name}"
                )
    if mask_tags is not None:
        report.mask_tags_unique = len(mask_tags) == len(set(mask_tags))
        if not report.mask_tags_unique:
            report.findings.append("mask usage tags repeat across invocations")
    return report


# ---------------------------------------------------------------------------
# Two-process support: serve the ISO over a stream socket
# ---------------------------------------------------------------------------


def iso_serve(sock, iso: IsoParty, max_requests: int | None = None):
    """Serve framed ISO requests until the peer closes (or max_requests)."""
    served = 0
    while max_requests is None or served < max_requests:
        try:
            header = _recv_exact(sock, 17)
        except ProtocolError:
            return served
        _, _, _, _, plen = struct.unpack_from("<HBBBQ", header, 4)
        frame = Frame.decode(header + _recv_exact(sock, plen))
        kind, payload = iso.handle(Kind(frame.kind), frame.payload)
        sock.sendall(Frame(int(Role.ISO), frame.sender, int(kind), payload).encode())
        served += 1
    return served
