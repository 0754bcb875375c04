# records.py
# DATA / MODEL / PROOF 三种记录：schema 校验 + 签名校验两道准入关

import enum
import re
from dataclasses import dataclass, fields, replace
from typing import Optional, Union

from crypto_identity import (
    HASH_LEN,
    METADATA_MAX_BYTES,
    MODEL_ID_MAX_BYTES,
    MAX_UINT64,
    PUBLIC_KEY_LEN,
    SCORE_SCALE,
    SIGNATURE_LEN,
    TAG_DATA,
    TAG_MODEL,
    TAG_PROOF,
    ZERO_HASH,
    FieldKind,
    KeyPair,
    canonical_bytes,
    hash_bytes,
    sign,
    verify,
)
from utils import from_hex, to_hex

MODEL_VERSION_PATTERN = re.compile(r"[A-Za-z0-9._-]{1,64}")


class RecordType(enum.Enum):
    DATA = "DATA"
    MODEL = "MODEL"
    PROOF = "PROOF"


class ValidationErrorKind(enum.Enum):
    MISSING_FIELD = "MissingField"
    BAD_LENGTH = "BadLength"
    BAD_TYPE = "BadType"
    BAD_PATTERN = "BadPattern"
    SCORE_OUT_OF_RANGE = "ScoreOutOfRange"
    BAD_SIGNATURE = "BadSignature"
    DUPLICATE = "Duplicate"


@dataclass(frozen=True)
class ValidationError:
    """第一个失败的检查项"""
    kind: ValidationErrorKind
    detail: str

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "detail": self.detail}


@dataclass(frozen=True)
class DataRecord:
    content_hash: bytes
    timestamp: int
    sender_id: bytes
    metadata: str = ""
    signature: bytes = b""
    sender_public_key: bytes = b""

    RECORD_TYPE = RecordType.DATA
    CANONICAL_TAG = TAG_DATA
    CANONICAL_FIELDS = (
        ("content_hash", FieldKind.HASH),
        ("timestamp", FieldKind.UINT),
        ("sender_id", FieldKind.HASH),
        ("metadata", FieldKind.STR),
        ("sender_public_key", FieldKind.BYTES),
    )


@dataclass(frozen=True)
class ModelRecord:
    model_hash: bytes
    model_version: str
    model_id: str
    timestamp: int
    sender_id: bytes
    config_metadata: str = ""
    signature: bytes = b""
    sender_public_key: bytes = b""

    RECORD_TYPE = RecordType.MODEL
    CANONICAL_TAG = TAG_MODEL
    CANONICAL_FIELDS = (
        ("model_hash", FieldKind.HASH),
        ("model_version", FieldKind.STR),
        ("model_id", FieldKind.STR),
        ("config_metadata", FieldKind.STR),
        ("timestamp", FieldKind.UINT),
        ("sender_id", FieldKind.HASH),
        ("sender_public_key", FieldKind.BYTES),
    )


@dataclass(frozen=True)
class ProofRecord:
    dataset_hash: bytes
    model_hash: bytes
    validation_score: int
    task_id: bytes
    timestamp: int
    sender_id: bytes
    proof_id: bytes = ZERO_HASH
    signature: bytes = b""
    sender_public_key: bytes = b""

    RECORD_TYPE = RecordType.PROOF
    CANONICAL_TAG = TAG_PROOF
    CANONICAL_FIELDS = (
        ("dataset_hash", FieldKind.HASH),
        ("model_hash", FieldKind.HASH),
        ("validation_score", FieldKind.UINT),
        ("task_id", FieldKind.HASH),
        ("proof_id", FieldKind.HASH),
        ("timestamp", FieldKind.UINT),
        ("sender_id", FieldKind.HASH),
        ("sender_public_key", FieldKind.BYTES),
    )


AnyRecord = Union[DataRecord, ModelRecord, ProofRecord]
RECORD_CLASSES = {
    RecordType.DATA: DataRecord,
    RecordType.MODEL: ModelRecord,
    RecordType.PROOF: ProofRecord,
}


def _err(kind: ValidationErrorKind, detail: str) -> ValidationError:
    return ValidationError(kind=kind, detail=detail)


def _check_field(record, name: str, kind: FieldKind) -> Optional[ValidationError]:
    """单字段检查：缺失 → 类型 → 长度/格式/范围"""
    value = getattr(record, name, None)
    if value is None:
        return _err(ValidationErrorKind.MISSING_FIELD, f"缺少字段 {name}")

    if kind is FieldKind.UINT:
        if isinstance(value, bool) or not isinstance(value, int):
            return _err(ValidationErrorKind.BAD_TYPE, f"{name} 必须是整数")
        if not 0 <= value <= MAX_UINT64:
            return _err(ValidationErrorKind.BAD_TYPE, f"{name} 必须是无符号整数")
        if name == "validation_score" and value > SCORE_SCALE:
            return _err(ValidationErrorKind.SCORE_OUT_OF_RANGE,
                        f"validation_score={value} 超出 [0, {SCORE_SCALE}]")
        return None

    if kind is FieldKind.STR:
        if not isinstance(value, str):
            return _err(ValidationErrorKind.BAD_TYPE, f"{name} 必须是字符串")
        try:
            size = len(value.encode("utf-8"))
        except UnicodeEncodeError:
            return _err(ValidationErrorKind.BAD_TYPE,
                        f"{name} 不是合法的 UTF-8 文本")
        if name == "model_version":
            if not MODEL_VERSION_PATTERN.fullmatch(value):
                return _err(ValidationErrorKind.BAD_PATTERN,
                            f"model_version 不是合法标识符: {value!r}")
        elif name == "model_id":
            if size == 0:
                return _err(ValidationErrorKind.BAD_PATTERN, "model_id 为空")
            if size > MODEL_ID_MAX_BYTES:
                return _err(ValidationErrorKind.BAD_LENGTH,
                            f"model_id 超过 {MODEL_ID_MAX_BYTES} 字节")
        elif size > METADATA_MAX_BYTES:
            return _err(ValidationErrorKind.BAD_LENGTH,
                        f"{name} 超过 {METADATA_MAX_BYTES} 字节")
        return None

    if not isinstance(value, (bytes, bytearray)):
        return _err(ValidationErrorKind.BAD_TYPE, f"{name} 必须是字节串")
    expected = HASH_LEN if kind is FieldKind.HASH else PUBLIC_KEY_LEN
    if len(value) != expected:
        return _err(ValidationErrorKind.BAD_LENGTH,
                    f"{name} 长度 {len(value)}，应为 {expected}")
    return None


def validate_schema(record) -> Optional[ValidationError]:
    """schema 校验；通过返回 None，否则返回第一个违规项"""
    if not isinstance(record, (DataRecord, ModelRecord, ProofRecord)):
        return _err(ValidationErrorKind.BAD_TYPE,
                    f"未知记录类型: {type(record).__name__}")
    for name, kind in record.CANONICAL_FIELDS:
        error = _check_field(record, name, kind)
        if error:
            return error
    sig = record.signature
    if sig is None:
        return _err(ValidationErrorKind.MISSING_FIELD, "缺少字段 signature")
    if not isinstance(sig, (bytes, bytearray)):
        return _err(ValidationErrorKind.BAD_TYPE, "signature 必须是字节串")
    if len(sig) != SIGNATURE_LEN:
        return _err(ValidationErrorKind.BAD_LENGTH,
                    f"signature 长度 {len(sig)}，应为 {SIGNATURE_LEN}")
    return None


def compute_proof_id(record: ProofRecord) -> bytes:
    """proof_id = hash(proof_id 置零后的规范化编码)"""
    return hash_bytes(canonical_bytes(replace(record, proof_id=ZERO_HASH)))


def validate_signature(record: AnyRecord) -> Optional[ValidationError]:
    """签名校验：公钥与 sender_id 绑定，签名覆盖规范化编码"""
    if hash_bytes(record.sender_public_key) != record.sender_id:
        return _err(ValidationErrorKind.BAD_SIGNATURE, "sender_id 与公钥不符")
    if isinstance(record, ProofRecord) \
            and compute_proof_id(record) != record.proof_id:
        return _err(ValidationErrorKind.BAD_SIGNATURE, "proof_id 与内容不符")
    if not verify(record.sender_public_key, canonical_bytes(record),
                  record.signature):
        return _err(ValidationErrorKind.BAD_SIGNATURE, "签名校验失败")
    return None


def admit(record) -> Optional[ValidationError]:
    """两道关：先 schema 后签名，短路返回"""
    return validate_schema(record) or validate_signature(record)


def sign_record(record: AnyRecord, keypair: KeyPair) -> AnyRecord:
    """填入发送者身份并签名；PROOF 先计算内容寻址的 proof_id"""
    record = replace(record, sender_id=keypair.node_id,
                     sender_public_key=keypair.public_key, signature=b"")
    if isinstance(record, ProofRecord):
        record = replace(record, proof_id=compute_proof_id(record))
    return replace(record, signature=sign(keypair, canonical_bytes(record)))


def build_data_record(keypair: KeyPair, content_hash: bytes, timestamp: int,
                      metadata: str = "") -> DataRecord:
    return sign_record(
        DataRecord(content_hash=content_hash, timestamp=timestamp,
                   sender_id=keypair.node_id, metadata=metadata),
        keypair)


def build_model_record(keypair: KeyPair, model_hash: bytes, model_version: str,
                       model_id: str, timestamp: int,
                       config_metadata: str = "") -> ModelRecord:
    return sign_record(
        ModelRecord(model_hash=model_hash, model_version=model_version,
                    model_id=model_id, timestamp=timestamp,
                    sender_id=keypair.node_id,
                    config_metadata=config_metadata),
        keypair)


def build_proof_record(keypair: KeyPair, dataset_hash: bytes, model_hash: bytes,
                       validation_score: int, task_id: bytes,
                       timestamp: int) -> ProofRecord:
    return sign_record(
        ProofRecord(dataset_hash=dataset_hash, model_hash=model_hash,
                    validation_score=validation_score, task_id=task_id,
                    timestamp=timestamp, sender_id=keypair.node_id),
        keypair)


def record_identity(record: AnyRecord) -> bytes:
    """记录身份哈希：PROOF 用 proof_id，其余用规范化编码的哈希"""
    if isinstance(record, ProofRecord):
        return record.proof_id
    return hash_bytes(canonical_bytes(record))


def lane_sort_key(record: AnyRecord):
    """车道内确定性排序：(timestamp, 主标识, 身份哈希)"""
    if isinstance(record, ProofRecord):
        primary = record.proof_id
    elif isinstance(record, ModelRecord):
        primary = record.model_hash
    else:
        primary = record.content_hash
    return record.timestamp, primary, record_identity(record)


# ---------- JSON 编解码（哈希、签名、公钥十六进制）
_BYTE_FIELDS = {"content_hash", "sender_id", "signature", "sender_public_key",
                "model_hash", "dataset_hash", "task_id", "proof_id"}


def record_to_json(record: AnyRecord) -> dict:
    out = {"type": record.RECORD_TYPE.value}
    for f in fields(record):
        value = getattr(record, f.name)
        if f.name in _BYTE_FIELDS and isinstance(value, (bytes, bytearray)):
            value = to_hex(bytes(value))
        out[f.name] = value
    return out


def record_from_json(data: dict, record_type=None) -> AnyRecord:
    """
    解码记录；缺失的键解码为 None（schema 校验给出 MissingField），
    非法十六进制保留原值（schema 校验给出 BadType）。
    """
    if record_type is None:
        record_type = RecordType(data.get("type"))
    elif isinstance(record_type, str):
        record_type = RecordType(record_type)
    cls = RECORD_CLASSES[record_type]
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            optional = f.name in ("metadata", "config_metadata")
            kwargs[f.name] = "" if optional else None
            continue
        value = data[f.name]
        if f.name in _BYTE_FIELDS and isinstance(value, str):
            decoded = from_hex(value)
            value = decoded if decoded is not None else value
        kwargs[f.name] = value
    return cls(**kwargs)
