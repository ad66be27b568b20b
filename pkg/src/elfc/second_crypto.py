"""Second (non-homomorphic) cryptosystem: public-key sealed boxes.

X25519 ephemeral key agreement feeding ChaCha20-Poly1305.  Only the holder
of the receiving secret key can open a box; anyone with the public key can
seal.  Used to wrap HE ciphertext reports so the price-decrypting party
cannot read them in transit.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from .errors import DecryptionError

_NONCE = b"\x00" * 12  # fresh ephemeral key per box, so a fixed nonce is safe


@dataclass(frozen=True)
class SecondCryptoKeys:
    sk2: bytes  # raw X25519 private key
    pk2: bytes  # raw X25519 public key


def second_keygen(seed: bytes | None = None) -> SecondCryptoKeys:
    raw = seed if seed is not None else os.urandom(32)
    if len(raw) != 32:
        raise DecryptionError("second-cryptosystem seed must be 32 bytes")
    priv = X25519PrivateKey.from_private_bytes(raw)
    from cryptography.hazmat.primitives.serialization import (
        Encoding, NoEncryption, PrivateFormat, PublicFormat,
    )

    return SecondCryptoKeys(
        sk2=priv.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()),
        pk2=priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw),
    )


def _derive_key(shared: bytes, eph_pub: bytes, recv_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=eph_pub + recv_pub
    ).derive(shared)


def second_encrypt(pk2: bytes, payload: bytes, eph_seed: bytes | None = None) -> bytes:
    """Seal payload to the holder of pk2."""
    raw = eph_seed if eph_seed is not None else os.urandom(32)
    eph = X25519PrivateKey.from_private_bytes(raw)
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(pk2))
    key = _derive_key(shared, eph_pub, pk2)
    return eph_pub + ChaCha20Poly1305(key).encrypt(_NONCE, payload, None)


def second_decrypt(sk2: bytes, box: bytes) -> bytes:
    """Open a sealed box; raises DecryptionError on wrong key or corruption."""
    if len(box) < 32 + 16:
        raise DecryptionError("sealed box too short")
    eph_pub, ct = box[:32], box[32:]
    priv = X25519PrivateKey.from_private_bytes(sk2)
    from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

    my_pub = priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    key = _derive_key(shared, eph_pub, my_pub)
    try:
        return ChaCha20Poly1305(key).decrypt(_NONCE, ct, None)
    except InvalidTag as exc:
        raise DecryptionError("sealed box failed to open (wrong key or corrupted)") from exc
