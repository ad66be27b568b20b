"""Protocol layer: masks, encrypted inversion, masked re-encryption, audit."""

import socket
import struct
import threading

import numpy as np
import pytest

from elfc import he_core as he
from elfc import protocols as pr
from elfc import second_crypto
from elfc.errors import (
    NoiseOverflowError,
    ProtocolError,
    SingularMatrixError,
    UnrecoverableNoiseError,
)
from elfc.quantizer import select_profile

PROF = select_profile("desk")


@pytest.fixture()
def setup():
    kp = he.keygen(PROF.params, seed=5)
    iso = pr.IsoParty(kp, seed=6)
    bus = pr.MessageBus()
    bus.register(pr.Role.ISO, iso.handle)
    server = pr.DelegateServer(
        kp.pk, second_crypto.second_keygen(seed=b"\x02" * 32), bus, seed=7
    )
    return kp, iso, bus, server


def enc_real(pk, mat, step_exp, rng):
    ints = np.round(np.asarray(mat, dtype=float) / 2.0**step_exp).astype(np.int64)
    return he.enc_matrix(pk, ints, rng, step_exp=step_exp)


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def test_mask_pair_inverse_identity():
    rng = np.random.default_rng(0)
    for dim in (1, 2, 4, 8):
        m = pr.gen_mask_pair(dim, rng)
        assert np.array_equal(m.phi @ m.phi_inv, np.eye(dim, dtype=np.int64))
        assert np.array_equal(m.phi_inv @ m.phi, np.eye(dim, dtype=np.int64))


def test_mask_scalar_is_unit():
    rng = np.random.default_rng(1)
    m = pr.gen_mask_pair(1, rng)
    assert m.phi[0, 0] in (-1, 1)
    assert m.phi[0, 0] * m.phi_inv[0, 0] == 1


def test_mask_tags_unique_and_masks_vary():
    rng = np.random.default_rng(2)
    masks = [pr.gen_mask_pair(6, rng) for _ in range(1000)]
    tags = [m.usage_tag for m in masks]
    assert len(set(tags)) == 1000
    # Statistical distinctness: successive draws rarely repeat.
    repeats = sum(
        np.array_equal(a.phi, b.phi) for a, b in zip(masks, masks[1:])
    )
    assert repeats <= 2


def test_mask_row_sums_bounded():
    rng = np.random.default_rng(3)
    for _ in range(100):
        m = pr.gen_mask_pair(8, rng)
        assert np.abs(m.phi).sum(axis=1).max() <= 2
        assert np.abs(m.phi_inv).sum(axis=1).max() <= 2


# ---------------------------------------------------------------------------
# Algorithm: encrypted matrix inversion
# ---------------------------------------------------------------------------


def test_inverse_identity(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(8)
    cm = enc_real(kp.pk, np.eye(2), -8, rng)
    inv = server.request_inverse(cm, out_step_exp=-12)
    back = he.dec_matrix(kp.sk, inv) * inv.step
    assert np.allclose(back, np.eye(2), atol=2**-11)


def test_inverse_diagonal(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(9)
    cm = enc_real(kp.pk, np.diag([2.0, 4.0]), -8, rng)
    inv = server.request_inverse(cm, out_step_exp=-12)
    back = he.dec_matrix(kp.sk, inv) * inv.step
    assert np.allclose(back, np.diag([0.5, 0.25]), atol=2**-11)


def test_inverse_random_well_conditioned(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(10)
    for n in (2, 3, 4):
        m = rng.uniform(-1, 1, (n, n)) + 2 * n * np.eye(n)
        step_exp = -10
        cm = enc_real(kp.pk, m, step_exp, rng)
        m_q = he.dec_matrix(kp.sk, cm) * 2.0**step_exp  # the value actually carried
        inv = server.request_inverse(cm, out_step_exp=-14)
        back = he.dec_matrix(kp.sk, inv) * inv.step
        # Plaintext inversion oracle at the carried value.
        assert np.max(np.abs(back @ m_q - np.eye(n))) <= 10 * inv.step


def test_inverse_singular_propagates(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(11)
    cm = enc_real(kp.pk, np.zeros((2, 2)), -8, rng)
    with pytest.raises(SingularMatrixError):
        server.request_inverse(cm, out_step_exp=-10)


def test_inverse_transcript_shows_only_masked(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(12)
    secret = np.array([[1.25, 0.5], [-0.75, 2.0]])
    cm = enc_real(kp.pk, secret, -8, rng)
    server.request_inverse(cm, out_step_exp=-12)
    kinds = [e.kind for e in bus.transcript.entries]
    assert kinds == ["MASK_INVERT_REQ", "MASK_INVERT_RESP"]
    # Replaying with sk1: the ISO-visible matrix is masked, not the secret.
    req = bus.transcript.frames()[0]
    masked_cm = he.deserialize_cipher_matrix(req.payload[4:], PROF.params)
    seen = he.dec_matrix(kp.sk, masked_cm) * masked_cm.step
    assert not np.allclose(np.abs(seen), np.abs(secret))


# ---------------------------------------------------------------------------
# Algorithm: masked re-encryption
# ---------------------------------------------------------------------------


def test_refresh_preserves_value_exactly(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(13)
    ints = np.array([[123, -456], [789, 1]], dtype=np.int64)
    cm = he.enc_matrix(kp.pk, ints, rng, step_exp=-8)
    out = server.request_refresh(cm)
    assert np.array_equal(he.dec_matrix(kp.sk, out), ints)
    assert out.step_exp == cm.step_exp


def test_refresh_restores_budget(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(14)
    a = he.enc_matrix(kp.pk, np.full((2, 2), 9, dtype=np.int64), rng, step_exp=0)
    deep = a
    for _ in range(3):
        deep = he.enc_matmul(deep, a)
    assert deep.max_budget() > pr.refreshed_budget_bound(PROF.params)
    out = server.request_refresh(deep)
    assert np.array_equal(he.dec_matrix(kp.sk, out), he.dec_matrix(kp.sk, deep))
    assert out.max_budget() <= pr.refreshed_budget_bound(PROF.params)


def test_refresh_on_deep_circuit_budget_trace(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(15)
    base = he.enc_matrix(kp.pk, np.array([[2, 1], [0, 1]], dtype=np.int64), rng)
    acc = base
    plain = np.array([[2, 1], [0, 1]], dtype=np.int64)
    acc_plain = plain.copy()
    for depth in range(10):
        if he.mult_budget(
            acc.max_budget(), float(np.abs(acc_plain).max()),
            base.max_budget(), 2.0, PROF.params,
        ) >= PROF.params.noise_threshold / 2:
            acc = server.request_refresh(acc)
        acc = he.enc_matmul(acc, base)
        acc_plain = acc_plain @ plain
    assert np.array_equal(he.dec_matrix(kp.sk, acc), acc_plain)


def test_refresh_rejects_overflowed_input(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(16)
    cm = he.enc_matrix(kp.pk, np.eye(2, dtype=np.int64), rng)
    cm.budgets[:] = float(PROF.params.noise_threshold)
    with pytest.raises(UnrecoverableNoiseError):
        server.request_refresh(cm)


def test_requantize_moves_step(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(17)
    cm = enc_real(kp.pk, np.array([[0.5, -1.25]]), -12, rng)
    out = server.request_requantize(cm, out_step_exp=-6)
    assert out.step_exp == -6
    back = he.dec_matrix(kp.sk, out) * out.step
    assert np.allclose(back, [[0.5, -1.25]], atol=2**-7 * 4.5)


def test_integer_round_through_masks(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(18)
    near_int = np.array([[1.0000001, 0.0], [-0.0000002, 0.9999999]])
    cm = enc_real(kp.pk, near_int, -20, rng)
    out = server.request_integer_round(cm)
    assert np.array_equal(out, np.array([[1, 0], [0, 1]]))


def test_rank_certificate(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(19)
    full = enc_real(kp.pk, np.array([[1.0, 1.0], [0.0, 1.0]]), -8, rng)
    assert server.request_rank(full) == 2
    deficient = enc_real(kp.pk, np.array([[1.0, 1.0], [2.0, 2.0]]), -8, rng)
    assert server.request_rank(deficient) == 1


# ---------------------------------------------------------------------------
# Price round-trip
# ---------------------------------------------------------------------------


def test_price_decrypt_announce_reencrypt(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(20)
    price = np.array([[0.138671875], [-0.25]])  # exactly on the 2^-10 grid
    cm = enc_real(kp.pk, price, -14, rng)
    announced, fresh = server.request_price(cm, tick_exp=-10, reenc_exp=-8)
    tick = 2.0**-10
    assert np.allclose(announced, np.round(price.reshape(-1) / tick) * tick)
    back = he.dec_matrix(kp.sk, fresh) * fresh.step
    assert np.allclose(back.reshape(-1), announced, atol=2**-9)
    pr.announce_price(bus, announced, n_generators=2)
    kinds = [e.kind for e in bus.transcript.entries]
    assert kinds.count("PRICE_ANNOUNCE") == 2


# ---------------------------------------------------------------------------
# Leakage audit
# ---------------------------------------------------------------------------


def test_audit_clean_protocol_run(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(21)
    secret = np.array([[1.5, 0.25], [0.75, -2.0]])
    cm = enc_real(kp.pk, secret, -8, rng)
    server.request_inverse(cm, out_step_exp=-12)
    server.request_refresh(cm)
    report = pr.audit_transcript(
        bus.transcript,
        mask_tags=server.mask_tags,
        forbidden_digests={"secret": pr.digest_of_plain_matrix(secret)},
    )
    assert report.ok
    assert report.checked_frames == 4


def test_audit_flags_plaintext_leak():
    t = pr.Transcript()
    secret = np.array([[3.0, 1.0]])
    leaked = np.ascontiguousarray(secret, dtype=np.float64).tobytes()
    t.record(pr.Frame(pr.Role.SERVER, pr.Role.ISO, int(pr.Kind.MASK_RANK_REQ), leaked))
    report = pr.audit_transcript(
        t, forbidden_digests={"secret": pr.digest_of_plain_matrix(secret)}
    )
    assert not report.ok
    assert "secret" in report.findings[0]


def test_audit_flags_disallowed_kind():
    t = pr.Transcript()
    t.record(pr.Frame(pr.Role.SERVER, pr.Role.ISO, int(pr.Kind.TYPE_REPORT), b"x"))
    report = pr.audit_transcript(t)
    assert not report.ok


def test_audit_flags_repeated_mask_tags():
    t = pr.Transcript()
    report = pr.audit_transcript(t, mask_tags=[1, 2, 2])
    assert not report.ok


def test_transcript_csv_format(setup):
    kp, iso, bus, server = setup
    rng = np.random.default_rng(22)
    server.request_refresh(enc_real(kp.pk, np.eye(2), -8, rng))
    csv = bus.transcript.to_csv()
    lines = csv.strip().split("\n")
    assert lines[0] == "seq,sender,receiver,kind,digest,size"
    assert lines[1].startswith("0,DelegateServer,ISO,MASK_REFRESH_REQ,")


# ---------------------------------------------------------------------------
# Two-process socket transport
# ---------------------------------------------------------------------------


def test_socket_bus_round_trip():
    kp = he.keygen(PROF.params, seed=30)
    iso = pr.IsoParty(kp, seed=31)
    left, right = socket.socketpair()
    t = threading.Thread(target=pr.iso_serve, args=(right, iso), kwargs={"max_requests": 1})
    t.start()
    bus = pr.SocketBus(left)
    server = pr.DelegateServer(
        kp.pk, second_crypto.second_keygen(seed=b"\x03" * 32), bus, seed=32
    )
    rng = np.random.default_rng(33)
    ints = np.array([[41, -7]], dtype=np.int64)
    cm = he.enc_matrix(kp.pk, ints, rng, step_exp=-4)
    out = server.request_refresh(cm)
    t.join(timeout=10)
    left.close()
    right.close()
    assert np.array_equal(he.dec_matrix(kp.sk, out), ints)
    assert [e.kind for e in bus.transcript.entries] == [
        "MASK_REFRESH_REQ", "MASK_REFRESH_RESP",
    ]


def test_frame_encode_decode():
    f = pr.Frame(pr.Role.SERVER, pr.Role.ISO, int(pr.Kind.MASK_RANK_REQ), b"payload")
    dec = pr.Frame.decode(f.encode())
    assert dec == f
    with pytest.raises(ProtocolError):
        pr.Frame.decode(b"XXXX" + f.encode()[4:])
