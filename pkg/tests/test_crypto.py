from __future__ import annotations

import random

import pytest

from sovereign.crypto import (
    AuthenticationError,
    DecryptionError,
    InvalidPoint,
    SymmetricKey,
    decrypt,
    derive_pairwise_secret,
    encrypt,
    generate_keypair,
    identity_key_name,
    issue_certificate,
    key_id_for,
    open_tagged,
    parse_certificate,
    seal_tagged,
    sign,
    verify,
    verify_certificate,
)
from sovereign.tlv import Name, decode_packet


def test_sign_verify_round_trip():
    kp = generate_keypair(random.Random(1))
    message = b"the quick brown fox"
    sig = sign(kp, message)
    assert verify(kp.public_bytes, message, sig)


def test_verify_rejects_flipped_bit():
    kp = generate_keypair(random.Random(2))
    message = bytearray(b"temperature=71.5")
    sig = sign(kp, message)
    message[3] ^= 0x01
    assert not verify(kp.public_bytes, bytes(message), sig)


def test_verify_rejects_foreign_signature():
    kp1, kp2 = generate_keypair(random.Random(3)), generate_keypair(random.Random(4))
    sig = sign(kp1, b"msg")
    assert not verify(kp2.public_bytes, b"msg", sig)


def test_verify_never_raises_on_garbage():
    assert not verify(b"not-a-point", b"msg", b"sig")
    kp = generate_keypair(random.Random(5))
    assert not verify(kp.public_bytes, b"msg", b"\x00\x01garbage")


def test_encrypt_decrypt_round_trip():
    rng = random.Random(6)
    key = bytes(rng.getrandbits(8) for _ in range(32))
    for size in (0, 1, 15, 16, 17, 1000):
        payload = bytes(rng.getrandbits(8) for _ in range(size))
        assert decrypt(key, encrypt(key, payload, rng=rng)) == payload


def test_nist_cbc_known_answer():
    # SP 800-38A, F.2.5 CBC-AES256.Encrypt, first block
    key = bytes.fromhex(
        "603deb1015ca71be2b73aef0857d77811f352c073b6108d72d9810a30914dff4"
    )
    iv = bytes.fromhex("000102030405060708090a0b0c0d0e0f")
    plaintext = bytes.fromhex("6bc1bee22e409f96e93d7e117393172a")
    out = encrypt(key, plaintext, iv=iv)
    assert out[:16] == iv
    assert out[16:32] == bytes.fromhex("f58c4c04d6e5f1ba779eabfb5f7bfbd6")


def test_wrong_key_never_silently_succeeds():
    rng = random.Random(7)
    hits = 0
    for _ in range(1000):
        key = bytes(rng.getrandbits(8) for _ in range(32))
        other = bytes(rng.getrandbits(8) for _ in range(32))
        payload = bytes(rng.getrandbits(8) for _ in range(24))
        blob = encrypt(key, payload, rng=rng)
        try:
            if decrypt(other, blob) == payload:
                hits += 1
        except DecryptionError:
            pass
    assert hits == 0


def test_decrypt_rejects_bad_lengths():
    key = bytes(32)
    with pytest.raises(DecryptionError):
        decrypt(key, b"short")
    with pytest.raises(DecryptionError):
        decrypt(key, bytes(41))


def test_seal_open_tagged():
    rng = random.Random(8)
    secret = bytes(rng.getrandbits(8) for _ in range(32))
    blob = seal_tagged(secret, b"sealed payload", rng=rng)
    assert open_tagged(secret, blob) == b"sealed payload"
    tampered = bytearray(blob)
    tampered[20] ^= 0xFF
    with pytest.raises(AuthenticationError):
        open_tagged(secret, bytes(tampered))
    with pytest.raises(AuthenticationError):
        open_tagged(bytes(32), blob)


def test_pairwise_secret_symmetric():
    rng = random.Random(9)
    a, b = generate_keypair(rng), generate_keypair(rng)
    assert derive_pairwise_secret(a, b.public_bytes) == \
        derive_pairwise_secret(b, a.public_bytes)


def test_pairwise_secret_distinct_peers():
    rng = random.Random(10)
    me = generate_keypair(rng)
    secrets_seen = {
        derive_pairwise_secret(me, generate_keypair(rng).public_bytes)
        for _ in range(50)
    }
    assert len(secrets_seen) == 50


def test_pairwise_rejects_invalid_point():
    me = generate_keypair(random.Random(11))
    with pytest.raises(InvalidPoint):
        derive_pairwise_secret(me, b"\x04" + bytes(64))
    with pytest.raises(InvalidPoint):
        derive_pairwise_secret(me, b"")


def test_anchor_self_certificate_verifies():
    anchor = generate_keypair(random.Random(12))
    home = Name.of("alice-home-9f3a")
    cert = issue_certificate(anchor, home, home, anchor.public_bytes,
                             not_after=10**13, issued_at=1000)
    assert verify_certificate(cert, anchor.public_bytes, now_ms=2000)
    assert cert.name.to_uri().startswith(f"/alice-home-9f3a/KEY/{anchor.key_id}/")


def test_entity_certificate_chains_to_anchor():
    rng = random.Random(13)
    anchor, entity = generate_keypair(rng), generate_keypair(rng)
    home = Name.of("alice-home")
    subject = Name.of("alice-home", "TEMP", "bedroom", "senor-1")
    cert = issue_certificate(anchor, home, subject, entity.public_bytes,
                             not_after=10**13, issued_at=5)
    assert verify_certificate(cert, anchor.public_bytes, now_ms=10)
    assert subject.is_prefix_of(cert.name)
    assert cert.key_name == identity_key_name(subject, entity.public_bytes)
    # expiry and wrong-issuer checks
    assert not verify_certificate(cert, anchor.public_bytes, now_ms=10**14)
    assert not verify_certificate(cert, entity.public_bytes, now_ms=10)


def test_certificate_survives_codec_round_trip():
    rng = random.Random(14)
    anchor, entity = generate_keypair(rng), generate_keypair(rng)
    cert = issue_certificate(
        anchor, Name.of("home"), Name.of("home", "TEMP", "b", "s1"),
        entity.public_bytes, not_after=10**13, issued_at=77,
    )
    revived = parse_certificate(decode_packet(cert.wire()))
    assert revived.subject == cert.subject
    assert revived.public_bytes == cert.public_bytes
    assert revived.not_after == cert.not_after
    assert verify_certificate(revived, anchor.public_bytes, now_ms=100)


def test_key_id_is_sha256_prefix():
    kp = generate_keypair(random.Random(15))
    import hashlib
    assert kp.key_id == hashlib.sha256(kp.public_bytes).hexdigest()[:16]
    assert key_id_for(kp.public_bytes) == kp.key_id


def test_symmetric_key_requires_32_bytes():
    with pytest.raises(ValueError):
        SymmetricKey(Name.of("h", "TEMP", "EKEY"), bytes(16), 1, 10)


def test_bulk_randomized_invariants():
    """Sign/verify, encrypt/decrypt and ECDH symmetry over 10,000 trials."""
    rng = random.Random(16)
    pool = [generate_keypair(rng) for _ in range(8)]
    for i in range(10_000):
        kp = pool[i % len(pool)]
        message = bytes(rng.getrandbits(8) for _ in range(rng.randint(0, 64)))
        assert verify(kp.public_bytes, message, sign(kp, message))
        key = bytes(rng.getrandbits(8) for _ in range(32))
        assert decrypt(key, encrypt(key, message, rng=rng)) == message
        a, b = pool[i % len(pool)], pool[(i + 1 + i // 8) % len(pool)]
        assert derive_pairwise_secret(a, b.public_bytes) == \
            derive_pairwise_secret(b, a.public_bytes)
