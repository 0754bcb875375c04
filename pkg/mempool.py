# mempool.py
# 记录内存池：三类记录分池存放，入池前强制准入，防重复

import enum
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

from records import (
    RecordType,
    ValidationError,
    ValidationErrorKind,
    admit,
    record_identity,
)

logger = logging.getLogger(__name__)

DEFAULT_CAPACITY = 10_000


class InsertStatus(enum.Enum):
    OK = "ok"
    INVALID = "invalid"
    DUPLICATE = "duplicate"
    POOL_FULL = "pool_full"


@dataclass(frozen=True)
class InsertResult:
    status: InsertStatus
    error: Optional[ValidationError] = None

    @property
    def ok(self) -> bool:
        return self.status is InsertStatus.OK


class Mempool:
    """
    每类记录一个按插入顺序的字典（键为记录身份哈希）。
    select_for_block 只读取，commit 时才真正移除，
    这样提案失败时记录自然保持可选。
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        self.capacity = capacity
        self._pools = {t: OrderedDict() for t in RecordType}
        self._lock = threading.RLock()

    def _pool(self, record):
        return self._pools[record.RECORD_TYPE]

    def insert(self, record) -> InsertResult:
        error = admit(record)
        if error:
            logger.warning("内存池拒绝无效记录: %s", error.kind.value)
            return InsertResult(InsertStatus.INVALID, error)
        key = record_identity(record)
        with self._lock:
            pool = self._pool(record)
            if key in pool:
                return InsertResult(InsertStatus.DUPLICATE, ValidationError(
                    ValidationErrorKind.DUPLICATE,
                    f"{record.RECORD_TYPE.value} 记录已在池中"))
            if len(pool) >= self.capacity:
                logger.warning("内存池已满: %s", record.RECORD_TYPE.value)
                return InsertResult(InsertStatus.POOL_FULL)
            pool[key] = record
        return InsertResult(InsertStatus.OK)

    def select_for_block(self, max_per_lane: int, exclude=()):
        """按插入顺序（最老优先）每车道最多取 max_per_lane 条"""
        exclude = set(exclude)
        with self._lock:
            picked = []
            for record_type in (RecordType.DATA, RecordType.MODEL,
                                RecordType.PROOF):
                lane = [r for k, r in self._pools[record_type].items()
                        if k not in exclude]
                picked.append(lane[:max_per_lane])
        return tuple(picked)

    def commit(self, records) -> int:
        """区块提交后移除已上链记录，返回移除条数"""
        removed = 0
        with self._lock:
            for record in records:
                if self._pool(record).pop(record_identity(record), None):
                    removed += 1
        return removed

    def discard(self, key: bytes, record_type: RecordType) -> bool:
        with self._lock:
            return self._pools[record_type].pop(key, None) is not None

    def contains(self, record) -> bool:
        with self._lock:
            return record_identity(record) in self._pool(record)

    def get(self, key: bytes, record_type: RecordType):
        with self._lock:
            return self._pools[record_type].get(key)

    def proofs(self) -> list:
        with self._lock:
            return list(self._pools[RecordType.PROOF].values())

    def items(self, record_type: RecordType) -> list:
        with self._lock:
            return list(self._pools[record_type].items())

    def revalidate(self) -> list:
        """全池重校验，返回不再通过准入的记录身份"""
        with self._lock:
            return [k for pool in self._pools.values()
                    for k, r in pool.items() if admit(r)]

    def depth(self) -> dict:
        with self._lock:
            return {t.value: len(p) for t, p in self._pools.items()}

    def __len__(self):
        with self._lock:
            return sum(len(p) for p in self._pools.values())
