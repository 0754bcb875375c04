import hashlib
import random
import struct
from dataclasses import replace

import pytest
from ecdsa.util import sigdecode_string, sigencode_string

from crypto_identity import (
    CURVE,
    PUBLIC_KEY_LEN,
    SIGNATURE_LEN,
    ZERO_HASH,
    FieldKind,
    KeyPair,
    SchemaError,
    canonical_bytes,
    encode_field,
    hash_bytes,
    sign,
    verify,
)
from records import DataRecord

ORDER = CURVE.generator.order()


def _prefixed(raw: bytes) -> bytes:
    return struct.pack(">I", len(raw)) + raw


def test_hash_vectors():
    assert hash_bytes(b"").hex() == \
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert hash_bytes(b"abc").hex() == \
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_canonical_zero_data_record():
    pk = bytes([2]) + bytes(32)
    record = DataRecord(content_hash=ZERO_HASH, timestamp=0,
                        sender_id=ZERO_HASH, metadata="",
                        sender_public_key=pk)
    encoded = canonical_bytes(record)
    assert encoded[0] == 0x01
    assert encoded[1:5] == b"\x00\x00\x00\x20"
    assert encoded[5:37] == ZERO_HASH
    expected = (b"\x01" + _prefixed(ZERO_HASH) + _prefixed(bytes(8))
                + _prefixed(ZERO_HASH) + _prefixed(b"") + _prefixed(pk))
    assert encoded == expected
    # 独立用 hashlib 计算的摘要
    assert hash_bytes(encoded) == hashlib.sha256(expected).digest()


def test_canonical_excludes_signature(data_record):
    resigned = replace(data_record, signature=b"x" * 64)
    assert canonical_bytes(resigned) == canonical_bytes(data_record)


def test_canonical_is_injective_over_fields(data_record):
    base = hash_bytes(canonical_bytes(data_record))
    variants = [
        replace(data_record, timestamp=1_001),
        replace(data_record, metadata="sample!"),
        replace(data_record, content_hash=hash_bytes(b"other")),
    ]
    digests = {hash_bytes(canonical_bytes(v)) for v in variants}
    assert base not in digests
    assert len(digests) == len(variants)


@pytest.mark.parametrize("field,value", [
    ("timestamp", None),
    ("timestamp", "1000"),
    ("timestamp", True),
    ("timestamp", -1),
    ("metadata", 12),
    ("metadata", "\ud800"),
    ("content_hash", "00" * 32),
])
def test_canonical_schema_errors(data_record, field, value):
    broken = replace(data_record, **{field: value})
    with pytest.raises(SchemaError):
        canonical_bytes(broken)


def test_canonical_requires_schema():
    with pytest.raises(SchemaError):
        canonical_bytes(object())


def test_encode_params_ordered():
    raw = encode_field("p", FieldKind.PARAMS, [("a", "1"), ("b", "")])
    assert raw == (struct.pack(">Q", 2) + _prefixed(b"a") + _prefixed(b"1")
                   + _prefixed(b"b") + _prefixed(b""))
    with pytest.raises(SchemaError):
        encode_field("p", FieldKind.PARAMS, [("a", 1)])


def test_keypair_from_seed_is_deterministic():
    a = KeyPair.from_seed("node-1")
    b = KeyPair.from_seed("node-1")
    c = KeyPair.from_seed("node-2")
    assert a.public_key == b.public_key
    assert a.public_key != c.public_key
    assert len(a.public_key) == PUBLIC_KEY_LEN
    assert a.node_id == hashlib.sha256(a.public_key).digest()


def test_sign_is_deterministic_and_low_s(sender):
    sig1 = sign(sender, b"message")
    sig2 = sign(sender, b"message")
    assert sig1 == sig2
    assert len(sig1) == SIGNATURE_LEN
    _, s = sigdecode_string(sig1, ORDER)
    assert s <= ORDER // 2


def test_verify_round_trip_and_mismatch(sender, other):
    sig = sign(sender, b"message")
    assert verify(sender.public_key, b"message", sig)
    assert not verify(other.public_key, b"message", sig)
    assert not verify(sender.public_key, b"messagf", sig)
    flipped = bytes([sig[0] ^ 0x01]) + sig[1:]
    assert not verify(sender.public_key, b"message", flipped)


def test_verify_rejects_high_s(sender):
    sig = sign(sender, b"message")
    r, s = sigdecode_string(sig, ORDER)
    high = sigencode_string(r, ORDER - s, ORDER)
    assert not verify(sender.public_key, b"message", high)


@pytest.mark.parametrize("pk,msg,sig", [
    (b"", b"m", bytes(64)),
    (bytes(33), b"m", bytes(64)),
    (b"\x02" + bytes(32), b"m", b"short"),
    (None, b"m", bytes(64)),
    ("02" * 33, b"m", bytes(64)),
    (b"\x02" + bytes(32), "m", bytes(64)),
])
def test_verify_never_raises_on_malformed_input(pk, msg, sig):
    assert verify(pk, msg, sig) is False


def test_sign_verify_random_messages():
    rng = random.Random(11)
    for i in range(20):
        key = KeyPair.from_seed(f"fuzz-{i}")
        message = rng.randbytes(rng.randint(0, 200))
        assert verify(key.public_key, message, sign(key, message))
        garbage = rng.randbytes(64)
        assert verify(key.public_key, message, garbage) is False
