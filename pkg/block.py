# block.py
# 区块头 + 三车道区块体，每条车道独立 Merkle 根；区块与链的校验

import enum
import logging
import threading
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

from crypto_identity import (
    MERKLE_LEAF_PREFIX,
    MERKLE_NODE_PREFIX,
    TAG_HEADER,
    ZERO_HASH,
    FieldKind,
    KeyPair,
    canonical_bytes,
    hash_bytes,
    sign,
    verify,
)
from records import (
    DataRecord,
    ModelRecord,
    ProofRecord,
    RecordType,
    admit,
    lane_sort_key,
    record_from_json,
    record_identity,
    record_to_json,
)
from utils import from_hex, to_hex

logger = logging.getLogger(__name__)

EMPTY_ROOT = hash_bytes(b"")


class BlockError(enum.Enum):
    BAD_HEIGHT = "BadHeight"
    BAD_PREV_HASH = "BadPrevHash"
    BAD_DATA_ROOT = "BadDataRoot"
    BAD_MODEL_ROOT = "BadModelRoot"
    BAD_PROOF_ROOT = "BadProofRoot"
    BAD_RECORD = "BadRecord"
    BAD_BLOCK_SIGNATURE = "BadBlockSignature"


class RecordInvalid(Exception):
    """build_block 收到未通过准入的记录"""

    def __init__(self, record, error):
        super().__init__(f"记录未通过准入: {error}")
        self.record = record
        self.error = error


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    timestamp: int
    data_root: bytes
    model_root: bytes
    proof_root: bytes
    proposer_id: bytes
    proposer_public_key: bytes
    signature: bytes = b""

    CANONICAL_TAG = TAG_HEADER
    CANONICAL_FIELDS = (
        ("height", FieldKind.UINT),
        ("prev_hash", FieldKind.HASH),
        ("timestamp", FieldKind.UINT),
        ("data_root", FieldKind.HASH),
        ("model_root", FieldKind.HASH),
        ("proof_root", FieldKind.HASH),
        ("proposer_id", FieldKind.HASH),
        ("proposer_public_key", FieldKind.BYTES),
    )


@dataclass(frozen=True)
class BlockBody:
    data_lane: tuple = ()
    model_lane: tuple = ()
    proof_lane: tuple = ()

    def records(self):
        return (*self.data_lane, *self.model_lane, *self.proof_lane)


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    body: BlockBody = field(default_factory=BlockBody)

    @property
    def block_hash(self) -> bytes:
        return hash_bytes(canonical_bytes(self.header))

    @property
    def height(self) -> int:
        return self.header.height


def merkle_root(leaves) -> bytes:
    """
    叶子 = SHA-256(0x00 ‖ leaf)，内部节点 = SHA-256(0x01 ‖ left ‖ right)，
    奇数节点与自身配对；空列表返回 SHA-256("")。
    """
    if not leaves:
        return EMPTY_ROOT
    level = [hash_bytes(MERKLE_LEAF_PREFIX + bytes(leaf)) for leaf in leaves]
    while True:
        if len(level) % 2:
            level.append(level[-1])
        level = [
            hash_bytes(MERKLE_NODE_PREFIX + level[i] + level[i + 1])
            for i in range(0, len(level), 2)
        ]
        if len(level) == 1:
            return level[0]


def lane_root(lane) -> bytes:
    return merkle_root([canonical_bytes(r) for r in lane])


def sign_header(header: BlockHeader, proposer: KeyPair) -> BlockHeader:
    header = replace(header, proposer_id=proposer.node_id,
                     proposer_public_key=proposer.public_key, signature=b"")
    return replace(header, signature=sign(proposer, canonical_bytes(header)))


def assemble_block(height: int, prev_hash: bytes, timestamp: int,
                   body: BlockBody, proposer: KeyPair) -> Block:
    """按给定车道内容计算三个根并签名（不做记录准入）"""
    header = BlockHeader(
        height=height,
        prev_hash=prev_hash,
        timestamp=timestamp,
        data_root=lane_root(body.data_lane),
        model_root=lane_root(body.model_lane),
        proof_root=lane_root(body.proof_lane),
        proposer_id=proposer.node_id,
        proposer_public_key=proposer.public_key,
    )
    return Block(header=sign_header(header, proposer), body=body)


@lru_cache(maxsize=1)
def genesis_block() -> Block:
    """创世块：高度 0，prev_hash 全零，三条空车道，固定密钥签名"""
    return assemble_block(0, ZERO_HASH, 0, BlockBody(),
                          KeyPair.from_seed("poi-genesis"))


def split_lanes(records):
    """按类型分车道并确定性排序；重复身份抛 RecordInvalid"""
    lanes = {RecordType.DATA: [], RecordType.MODEL: [], RecordType.PROOF: []}
    seen = set()
    for record in records:
        error = admit(record)
        if error:
            raise RecordInvalid(record, error)
        key = record_identity(record)
        if key in seen:
            raise RecordInvalid(record, "车道内重复记录")
        seen.add(key)
        lanes[record.RECORD_TYPE].append(record)
    return BlockBody(
        data_lane=tuple(sorted(lanes[RecordType.DATA], key=lane_sort_key)),
        model_lane=tuple(sorted(lanes[RecordType.MODEL], key=lane_sort_key)),
        proof_lane=tuple(sorted(lanes[RecordType.PROOF], key=lane_sort_key)),
    )


def build_block(prev: Block, records, proposer: KeyPair,
                timestamp: int) -> Block:
    """在 prev 之上打包记录并由 proposer 签名"""
    body = split_lanes(records)
    return assemble_block(prev.height + 1, prev.block_hash, timestamp,
                          body, proposer)


def _lane_types_ok(body: BlockBody) -> bool:
    return all(isinstance(r, DataRecord) for r in body.data_lane) \
        and all(isinstance(r, ModelRecord) for r in body.model_lane) \
        and all(isinstance(r, ProofRecord) for r in body.proof_lane)


def validate_block(block: Block, prev: Block) -> Optional[BlockError]:
    """
    依次检查：高度、前块哈希、三个车道根、每条记录准入、区块签名。
    通过返回 None，否则返回第一个失败项。
    """
    header = block.header
    if header.height != prev.height + 1:
        return BlockError.BAD_HEIGHT
    if header.prev_hash != prev.block_hash:
        return BlockError.BAD_PREV_HASH
    body = block.body
    try:
        if lane_root(body.data_lane) != header.data_root:
            return BlockError.BAD_DATA_ROOT
        if lane_root(body.model_lane) != header.model_root:
            return BlockError.BAD_MODEL_ROOT
        if lane_root(body.proof_lane) != header.proof_root:
            return BlockError.BAD_PROOF_ROOT
    except Exception:
        # 车道里有无法编码的记录
        return BlockError.BAD_RECORD
    if not _lane_types_ok(body):
        return BlockError.BAD_RECORD
    seen = set()
    for record in body.records():
        if admit(record):
            return BlockError.BAD_RECORD
        key = record_identity(record)
        if key in seen:
            return BlockError.BAD_RECORD
        seen.add(key)
    if hash_bytes(header.proposer_public_key) != header.proposer_id:
        return BlockError.BAD_BLOCK_SIGNATURE
    try:
        message = canonical_bytes(header)
    except Exception:
        return BlockError.BAD_BLOCK_SIGNATURE
    if not verify(header.proposer_public_key, message, header.signature):
        return BlockError.BAD_BLOCK_SIGNATURE
    return None


def validate_chain(blocks):
    """整条链校验；通过返回 None，否则返回 (下标, BlockError)"""
    if not blocks:
        return None
    first = blocks[0].header
    if first.height != 0:
        return 0, BlockError.BAD_HEIGHT
    if first.prev_hash != ZERO_HASH:
        return 0, BlockError.BAD_PREV_HASH
    for i in range(1, len(blocks)):
        error = validate_block(blocks[i], blocks[i - 1])
        if error:
            return i, error
    return None


class ChainStore:
    """只追加的链存储：单写者，读者拿已提交快照"""

    def __init__(self, genesis: Optional[Block] = None):
        self._blocks = [genesis or genesis_block()]
        self._lock = threading.Lock()

    def append(self, block: Block) -> Optional[BlockError]:
        with self._lock:
            error = validate_block(block, self._blocks[-1])
            if error:
                logger.warning("拒绝追加区块 height=%s: %s",
                               block.height, error.value)
                return error
            self._blocks.append(block)
        logger.debug("链追加区块 height=%s", block.height)
        return None

    def snapshot(self) -> tuple:
        with self._lock:
            return tuple(self._blocks)

    @property
    def tip(self) -> Block:
        return self._blocks[-1]

    @property
    def height(self) -> int:
        return self._blocks[-1].height

    def __len__(self):
        return len(self._blocks)


# ---------- JSON 导出 / 导入
_HEADER_BYTES = ("prev_hash", "data_root", "model_root", "proof_root",
                 "proposer_id", "proposer_public_key", "signature")


def header_to_json(header: BlockHeader) -> dict:
    out = {"height": header.height, "timestamp": header.timestamp}
    for name in _HEADER_BYTES:
        out[name] = to_hex(getattr(header, name))
    return out


def block_to_json(block: Block) -> dict:
    return {
        "block_hash": to_hex(block.block_hash),
        "header": header_to_json(block.header),
        "body": {
            "data_lane": [record_to_json(r) for r in block.body.data_lane],
            "model_lane": [record_to_json(r) for r in block.body.model_lane],
            "proof_lane": [record_to_json(r) for r in block.body.proof_lane],
        },
    }


def block_from_json(data: dict) -> Block:
    h = data["header"]
    header = BlockHeader(
        height=h["height"],
        timestamp=h["timestamp"],
        **{name: from_hex(h[name]) for name in _HEADER_BYTES},
    )
    body = data.get("body", {})
    return Block(
        header=header,
        body=BlockBody(
            data_lane=tuple(record_from_json(r, RecordType.DATA)
                            for r in body.get("data_lane", [])),
            model_lane=tuple(record_from_json(r, RecordType.MODEL)
                             for r in body.get("model_lane", [])),
            proof_lane=tuple(record_from_json(r, RecordType.PROOF)
                             for r in body.get("proof_lane", [])),
        ),
    )
