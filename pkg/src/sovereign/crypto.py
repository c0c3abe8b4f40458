"""Cryptographic primitives: identity signatures, payload encryption,
pairwise key agreement, and controller-issued certificates.

Algorithms are fixed system-wide: ECDSA-P256-SHA256 (RFC 6979 deterministic
nonces), AES-256-CBC with PKCS#7, ECDH on P-256 with HKDF-SHA256, and
HMAC-SHA256. CBC carries no integrity of its own; every Data packet is
signature-verified before any decryption is attempted.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
import secrets
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes, padding, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .naming import KEY, timestamp_component
from .tlv import DataPacket, Name, NameComponent, SignatureInfo, SIG_ECDSA_SHA256

PAIRWISE_INFO = b"sovereign-bootstrap-v1"

# P-256 group order, for deterministic keypair derivation in simulations
_P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class DecryptionError(ValueError):
    """Wrong key or corrupted ciphertext (bad padding / bad length)."""


class AuthenticationError(ValueError):
    """A keyed integrity tag did not verify."""


class InvalidPoint(ValueError):
    """Peer public key bytes do not describe a valid curve point."""


def random_bytes(count: int, rng=None) -> bytes:
    if rng is None:
        return secrets.token_bytes(count)
    return bytes(rng.getrandbits(8) for _ in range(count))


# ---------------------------------------------------------------------------
# identity keys and signatures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IdentityKeypair:
    private: ec.EllipticCurvePrivateKey

    @property
    def public_bytes(self) -> bytes:
        """Uncompressed SEC1 point, the on-wire public key form."""
        return self.private.public_key().public_bytes(
            serialization.Encoding.X962,
            serialization.PublicFormat.UncompressedPoint,
        )

    @property
    def key_id(self) -> str:
        return key_id_for(self.public_bytes)

    def private_value(self) -> int:
        return self.private.private_numbers().private_value


def key_id_for(public_bytes: bytes) -> str:
    return hashlib.sha256(public_bytes).digest()[:8].hex()


def generate_keypair(rng=None) -> IdentityKeypair:
    """Fresh P-256 keypair; a seeded rng makes it reproducible for simulations."""
    if rng is None:
        return IdentityKeypair(ec.generate_private_key(ec.SECP256R1()))
    scalar = rng.randrange(1, _P256_ORDER)
    return IdentityKeypair(ec.derive_private_key(scalar, ec.SECP256R1()))


def keypair_from_private_value(value: int) -> IdentityKeypair:
    return IdentityKeypair(ec.derive_private_key(value, ec.SECP256R1()))


def load_public_key(public_bytes: bytes) -> ec.EllipticCurvePublicKey:
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(
            ec.SECP256R1(), public_bytes
        )
    except ValueError as exc:
        raise InvalidPoint(str(exc)) from exc


def sign(keypair: IdentityKeypair, message: bytes) -> bytes:
    return keypair.private.sign(
        message, ec.ECDSA(hashes.SHA256(), deterministic_signing=True)
    )


def verify(public, message: bytes, signature: bytes) -> bool:
    """True iff the signature verifies; never raises on bad input."""
    try:
        key = load_public_key(public) if isinstance(public, bytes) else public
        key.verify(signature, message, ec.ECDSA(hashes.SHA256()))
        return True
    except (InvalidSignature, InvalidPoint, ValueError, TypeError):
        return False


# ---------------------------------------------------------------------------
# symmetric encryption
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymmetricKey:
    """Named EKEY/DKEY material with a version timestamp and lifetime."""

    name: Name
    bytes: bytes
    version: int
    not_after: int

    def __post_init__(self) -> None:
        if len(self.bytes) != 32:
            raise ValueError("symmetric key must be 32 bytes")


def _key_bytes(key) -> bytes:
    raw = key.bytes if isinstance(key, SymmetricKey) else key
    if len(raw) != 32:
        raise ValueError("AES-256 key must be 32 bytes")
    return raw


def encrypt(key, plaintext: bytes, rng=None, iv: bytes | None = None) -> bytes:
    """AES-256-CBC with PKCS#7; returns iv || ciphertext."""
    raw = _key_bytes(key)
    if iv is None:
        iv = random_bytes(16, rng)
    padder = padding.PKCS7(128).padder()
    padded = padder.update(plaintext) + padder.finalize()
    encryptor = Cipher(algorithms.AES(raw), modes.CBC(iv)).encryptor()
    return iv + encryptor.update(padded) + encryptor.finalize()


def decrypt(key, blob: bytes) -> bytes:
    raw = _key_bytes(key)
    if len(blob) < 32 or len(blob) % 16 != 0:
        raise DecryptionError("ciphertext length invalid")
    decryptor = Cipher(algorithms.AES(raw), modes.CBC(blob[:16])).decryptor()
    padded = decryptor.update(blob[16:]) + decryptor.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise DecryptionError("bad padding") from exc


def hmac_sha256(key: bytes, message: bytes) -> bytes:
    return hmac_mod.new(key, message, hashlib.sha256).digest()


def seal_tagged(secret: bytes, plaintext: bytes, rng=None) -> bytes:
    """Encrypt-then-MAC under a shared secret: iv||ct||tag(32)."""
    body = encrypt(secret, plaintext, rng=rng)
    return body + hmac_sha256(secret, body)


def open_tagged(secret: bytes, blob: bytes) -> bytes:
    if len(blob) < 64:
        raise AuthenticationError("sealed blob too short")
    body, tag = blob[:-32], blob[-32:]
    if not hmac_mod.compare_digest(tag, hmac_sha256(secret, body)):
        raise AuthenticationError("tag mismatch")
    return decrypt(secret, body)


# ---------------------------------------------------------------------------
# key agreement
# ---------------------------------------------------------------------------

def derive_pairwise_secret(my_keypair: IdentityKeypair, their_public: bytes) -> bytes:
    """ECDH then HKDF-SHA256; symmetric in the two parties."""
    shared = my_keypair.private.exchange(ec.ECDH(), load_public_key(their_public))
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=None, info=PAIRWISE_INFO
    ).derive(shared)


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    """A Data packet binding a subject name to a public key, plus parsed fields."""

    data: DataPacket
    subject: Name
    public_bytes: bytes
    not_after: int

    @property
    def name(self) -> Name:
        return self.data.name

    @property
    def key_name(self) -> Name:
        """Identity key name: subject + KEY/<key-id> (no version component)."""
        return Name(self.data.name.components[:-1])

    @property
    def key_id(self) -> str:
        return key_id_for(self.public_bytes)

    def wire(self) -> bytes:
        return self.data.encode()


def identity_key_name(subject: Name, public_bytes: bytes) -> Name:
    return subject.append(KEY, key_id_for(public_bytes))


def issue_certificate(
    issuer_keypair: IdentityKeypair,
    issuer_name: Name,
    subject_name: Name,
    subject_public: bytes,
    not_after: int,
    issued_at: int,
) -> Certificate:
    """Anchor- or self-signed certificate; self-signed when issuer == subject."""
    load_public_key(subject_public)
    name = identity_key_name(subject_name, subject_public)
    name = Name(name.components + (timestamp_component(issued_at),))
    content = subject_public + int(not_after).to_bytes(8, "big")
    locator = identity_key_name(issuer_name, issuer_keypair.public_bytes)
    unsigned = DataPacket(
        name=name,
        content=content,
        freshness_ms=0,
        sig_info=SignatureInfo(SIG_ECDSA_SHA256, locator),
    )
    signed = unsigned.with_signature(sign(issuer_keypair, unsigned.signed_portion()))
    return Certificate(signed, subject_name, subject_public, not_after)


def parse_certificate(data: DataPacket) -> Certificate:
    """Parse cert fields from a Data packet; no signature check here."""
    comps = data.name.components
    if len(comps) < 4 or comps[-3] != NameComponent(KEY.encode()):
        raise ValueError(f"not a certificate name: {data.name.to_uri()}")
    if len(data.content) != 65 + 8:
        raise ValueError("certificate content must be point + validity")
    subject = Name(comps[:-3])
    public = data.content[:65]
    not_after = int.from_bytes(data.content[65:], "big")
    return Certificate(data, subject, public, not_after)


def verify_certificate(cert: Certificate, issuer_public: bytes, now_ms: int) -> bool:
    """Issuer signature valid, name binds the carried key, not expired."""
    if now_ms > cert.not_after:
        return False
    if cert.key_name != identity_key_name(cert.subject, cert.public_bytes):
        return False
    return verify(issuer_public, cert.data.signed_portion(), cert.data.sig_value)
