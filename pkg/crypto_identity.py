# crypto_identity.py
# 内容哈希、规范化编码、密钥与签名：其它所有模块的比特级基础

import enum
import hashlib
import struct
from dataclasses import dataclass
from functools import lru_cache

from ecdsa import SECP256k1, SigningKey, VerifyingKey
from ecdsa.util import sigdecode_string, sigencode_string

# ---------- 协议常量（集中在此处，方便替换）
HASH_LEN = 32
SIGNATURE_LEN = 64
PUBLIC_KEY_LEN = 33
ZERO_HASH = bytes(HASH_LEN)

TAG_DATA = 0x01
TAG_MODEL = 0x02
TAG_PROOF = 0x03
TAG_TASK = 0x04
TAG_HEADER = 0x10
TAG_VOTE = 0x11
TAG_INFERENCE_OUTPUT = 0x20

MERKLE_LEAF_PREFIX = b"\x00"
MERKLE_NODE_PREFIX = b"\x01"

SCORE_SCALE = 1_000_000        # validation_score 以百万分之一为单位
METADATA_MAX_BYTES = 4096
MODEL_ID_MAX_BYTES = 128
MAX_UINT64 = 2 ** 64 - 1

CURVE = SECP256k1
_ORDER = CURVE.generator.order()


class SchemaError(Exception):
    """规范化编码时字段缺失或类型错误"""


class FieldKind(enum.Enum):
    HASH = "hash"          # 32 字节原始摘要
    UINT = "uint"          # 8 字节大端无符号整数
    STR = "str"            # UTF-8 字符串
    BYTES = "bytes"        # 原始字节（公钥、payload）
    PARAMS = "params"      # 有序 (key, value) 字符串对列表


def hash_bytes(data: bytes) -> bytes:
    """SHA-256 摘要"""
    return hashlib.sha256(data).digest()


def _utf8(name: str, text: str) -> bytes:
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError:
        raise SchemaError(f"字段 {name} 不是合法的 UTF-8 文本")


def _encode_params(params) -> bytes:
    out = [struct.pack(">Q", len(params))]
    for pair in params:
        if not isinstance(pair, (tuple, list)) or len(pair) != 2:
            raise SchemaError("decoding_params 每项必须是 (key, value)")
        for item in pair:
            if not isinstance(item, str):
                raise SchemaError("decoding_params 键值必须是字符串")
            raw = _utf8("decoding_params", item)
            out.append(struct.pack(">I", len(raw)) + raw)
    return b"".join(out)


def encode_field(name: str, kind: FieldKind, value) -> bytes:
    """单个字段的原始字节（不含长度前缀）"""
    if value is None:
        raise SchemaError(f"缺少字段: {name}")
    if kind is FieldKind.UINT:
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"字段 {name} 必须是整数")
        if not 0 <= value <= MAX_UINT64:
            raise SchemaError(f"字段 {name} 超出 uint64 范围")
        return struct.pack(">Q", value)
    if kind is FieldKind.STR:
        if not isinstance(value, str):
            raise SchemaError(f"字段 {name} 必须是字符串")
        return _utf8(name, value)
    if kind is FieldKind.PARAMS:
        if not isinstance(value, (tuple, list)):
            raise SchemaError(f"字段 {name} 必须是列表")
        return _encode_params(value)
    # HASH / BYTES：长度由各自的 schema 校验检查
    if not isinstance(value, (bytes, bytearray)):
        raise SchemaError(f"字段 {name} 必须是字节串")
    return bytes(value)


def canonical_bytes(value) -> bytes:
    """
    规范化编码：tag 字节 + 按固定 schema 顺序的字段，
    每个字段为 4 字节大端长度前缀 + 原始字节；签名字段不参与编码。
    value 需提供 CANONICAL_TAG 与 CANONICAL_FIELDS。
    """
    try:
        tag = value.CANONICAL_TAG
        fields = value.CANONICAL_FIELDS
    except AttributeError:
        raise SchemaError(f"{type(value).__name__} 没有规范化 schema")
    parts = [bytes([tag])]
    for name, kind in fields:
        raw = encode_field(name, kind, getattr(value, name, None))
        parts.append(struct.pack(">I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


@dataclass(frozen=True)
class KeyPair:
    """secp256k1 密钥对；node_id = SHA-256(压缩公钥)"""
    signing_key: SigningKey
    public_key: bytes
    node_id: bytes

    @classmethod
    def from_secret(cls, secret: int) -> "KeyPair":
        sk = SigningKey.from_secret_exponent(
            secret, curve=CURVE, hashfunc=hashlib.sha256)
        pk = sk.get_verifying_key().to_string("compressed")
        return cls(signing_key=sk, public_key=pk, node_id=hash_bytes(pk))

    @classmethod
    def from_seed(cls, label) -> "KeyPair":
        """由标签确定性派生密钥（仿真中每个节点身份可复现）"""
        if isinstance(label, str):
            label = label.encode("utf-8")
        counter = 0
        while True:
            digest = hash_bytes(label + struct.pack(">I", counter))
            secret = int.from_bytes(digest, "big")
            if 0 < secret < _ORDER:
                return cls.from_secret(secret)
            counter += 1

    @classmethod
    def generate(cls) -> "KeyPair":
        sk = SigningKey.generate(curve=CURVE, hashfunc=hashlib.sha256)
        return cls.from_secret(sk.privkey.secret_multiplier)


def sign(keypair: KeyPair, message: bytes) -> bytes:
    """RFC 6979 确定性 ECDSA，64 字节 r‖s，low-s 归一化"""
    sig = keypair.signing_key.sign_deterministic(
        message, hashfunc=hashlib.sha256, sigencode=sigencode_string)
    r, s = sigdecode_string(sig, _ORDER)
    # s 与 n-s 都能验签，只保留较小的那个
    if s > _ORDER // 2:
        sig = sigencode_string(r, _ORDER - s, _ORDER)
    return sig


@lru_cache(maxsize=65536)
def _verify_cached(public_key: bytes, message: bytes, sig: bytes) -> bool:
    try:
        r, s = sigdecode_string(sig, _ORDER)
        if not (0 < r < _ORDER and 0 < s <= _ORDER // 2):
            return False
        vk = VerifyingKey.from_string(
            public_key, curve=CURVE, hashfunc=hashlib.sha256)
        return vk.verify(sig, message, hashfunc=hashlib.sha256,
                         sigdecode=sigdecode_string)
    except Exception:
        return False


def verify(public_key, message, sig) -> bool:
    """验签；任何畸形输入都返回 False，不抛异常"""
    if not isinstance(public_key, (bytes, bytearray)) \
            or not isinstance(message, (bytes, bytearray)) \
            or not isinstance(sig, (bytes, bytearray)):
        return False
    if len(public_key) != PUBLIC_KEY_LEN or len(sig) != SIGNATURE_LEN:
        return False
    return _verify_cached(bytes(public_key), bytes(message), bytes(sig))


def verify_cache_clear():
    """清空验签缓存（延迟测量前调用）"""
    _verify_cached.cache_clear()
