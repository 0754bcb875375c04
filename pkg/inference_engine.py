# inference_engine.py
# 推理任务生命周期：确定性 mock 推理后端、评分、证明生成与重算验证

import enum
import logging
import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Optional

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from crypto_identity import (
    HASH_LEN,
    SCORE_SCALE,
    TAG_INFERENCE_OUTPUT,
    TAG_TASK,
    ZERO_HASH,
    FieldKind,
    KeyPair,
    SchemaError,
    canonical_bytes,
    encode_field,
    hash_bytes,
)
from records import MODEL_VERSION_PATTERN, ProofRecord, build_proof_record
from utils import from_b64, from_hex, to_b64, to_hex

logger = logging.getLogger(__name__)

MAX_PAYLOAD_BYTES = 64 * 1024


class BackendError(Exception):
    """推理后端调用失败"""


@dataclass(frozen=True)
class InferenceTask:
    dataset_hash: bytes
    model_hash: bytes
    model_version: str
    input_payload: bytes
    decoding_params: tuple
    deadline: int
    task_id: bytes = ZERO_HASH

    CANONICAL_TAG = TAG_TASK
    CANONICAL_FIELDS = (
        ("dataset_hash", FieldKind.HASH),
        ("model_hash", FieldKind.HASH),
        ("model_version", FieldKind.STR),
        ("input_payload", FieldKind.BYTES),
        ("decoding_params", FieldKind.PARAMS),
        ("deadline", FieldKind.UINT),
    )


@dataclass(frozen=True)
class InferenceResult:
    task_id: bytes
    output_hash: bytes
    validation_score: int
    executor_id: bytes

    def to_json(self) -> dict:
        return {
            "task_id": to_hex(self.task_id),
            "output_hash": to_hex(self.output_hash),
            "validation_score": self.validation_score,
            "executor_id": to_hex(self.executor_id),
        }

    @classmethod
    def from_json(cls, data: dict) -> "InferenceResult":
        return cls(
            task_id=from_hex(data["task_id"]),
            output_hash=from_hex(data["output_hash"]),
            validation_score=int(data["validation_score"]),
            executor_id=from_hex(data["executor_id"]),
        )


def make_task(dataset_hash: bytes, model_hash: bytes, model_version: str,
              input_payload: bytes, decoding_params=(),
              deadline: int = 0) -> InferenceTask:
    """构造任务，task_id 为其余字段规范化编码的哈希"""
    task = InferenceTask(
        dataset_hash=dataset_hash,
        model_hash=model_hash,
        model_version=model_version,
        input_payload=input_payload,
        decoding_params=tuple(tuple(p) for p in decoding_params),
        deadline=deadline,
    )
    return replace(task, task_id=hash_bytes(canonical_bytes(task)))


def task_problem(task: InferenceTask) -> Optional[str]:
    """任务 schema 检查；通过返回 None，否则返回原因"""
    try:
        encoded = canonical_bytes(task)
    except SchemaError as e:
        return str(e)
    if len(task.dataset_hash) != HASH_LEN or len(task.model_hash) != HASH_LEN:
        return "哈希长度错误"
    if not MODEL_VERSION_PATTERN.fullmatch(task.model_version):
        return "model_version 不是合法标识符"
    if len(task.input_payload) > MAX_PAYLOAD_BYTES:
        return "input_payload 超过 64 KiB"
    if hash_bytes(encoded) != task.task_id:
        return "task_id 与内容不符"
    return None


def task_to_json(task: InferenceTask) -> dict:
    return {
        "task_id": to_hex(task.task_id),
        "dataset_hash": to_hex(task.dataset_hash),
        "model_hash": to_hex(task.model_hash),
        "model_version": task.model_version,
        "input_payload": to_b64(task.input_payload),
        "decoding_params": [list(p) for p in task.decoding_params],
        "deadline": task.deadline,
    }


def task_from_json(data: dict) -> InferenceTask:
    return InferenceTask(
        dataset_hash=from_hex(data["dataset_hash"]),
        model_hash=from_hex(data["model_hash"]),
        model_version=data["model_version"],
        input_payload=from_b64(data["input_payload"]),
        decoding_params=tuple(tuple(p) for p in data["decoding_params"]),
        deadline=int(data["deadline"]),
        task_id=from_hex(data["task_id"]),
    )


# ---------- 后端抽象
class InferenceBackend(ABC):
    @abstractmethod
    def run(self, task: InferenceTask):
        """返回 (output_hash, validation_score)"""


class MockBackend(InferenceBackend):
    """
    用域分离哈希代替 LLM 前向计算，保留 PoI 依赖的唯一性质：
    廉价、确定、可重算。
    """

    def run(self, task: InferenceTask):
        params = encode_field("decoding_params", FieldKind.PARAMS,
                              task.decoding_params)
        output_hash = hash_bytes(
            bytes([TAG_INFERENCE_OUTPUT]) + task.model_hash
            + task.dataset_hash + task.input_payload + params)
        score = int.from_bytes(output_hash[:8], "big") % (SCORE_SCALE + 1)
        return output_hash, score


class HttpModelRunner(InferenceBackend):
    """
    外部模型执行器：POST 任务 JSON，
    期望返回 {"output_hash": hex, "validation_score": int}
    """

    def __init__(self, url: str, timeout: float = 30):
        self.url = url
        self.timeout = timeout
        self.session = requests.Session()
        retry = Retry(total=2, backoff_factor=0.5,
                      status_forcelist=[500, 502, 503, 504],
                      allowed_methods=frozenset(["POST"]))
        adapter = HTTPAdapter(max_retries=retry)
        self.session.mount("https://", adapter)
        self.session.mount("http://", adapter)

    def run(self, task: InferenceTask):
        try:
            r = self.session.post(self.url, json=task_to_json(task),
                                  timeout=self.timeout)
            r.raise_for_status()
            data = r.json()
        except (requests.RequestException, ValueError) as e:
            logger.warning("模型执行器调用失败: %s", e)
            raise BackendError(str(e))
        output_hash = from_hex(data.get("output_hash"))
        score = data.get("validation_score")
        if output_hash is None or len(output_hash) != HASH_LEN:
            raise BackendError("模型执行器返回的 output_hash 无效")
        if isinstance(score, bool) or not isinstance(score, int) \
                or not 0 <= score <= SCORE_SCALE:
            raise BackendError("模型执行器返回的 validation_score 无效")
        return output_hash, score


_backend = None
_backend_lock = threading.Lock()


def get_backend() -> InferenceBackend:
    """全局后端：设置了 POI_MODEL_RUNNER_URL 时走 HTTP，否则用 mock"""
    global _backend
    with _backend_lock:
        if _backend is None:
            url = os.environ.get("POI_MODEL_RUNNER_URL")
            _backend = HttpModelRunner(url) if url else MockBackend()
            logger.info("推理后端: %s", type(_backend).__name__)
        return _backend


def execute(task: InferenceTask, executor_id: bytes = ZERO_HASH,
            backend: Optional[InferenceBackend] = None) -> InferenceResult:
    """执行任务，纯函数"""
    output_hash, score = (backend or get_backend()).run(task)
    return InferenceResult(task_id=task.task_id, output_hash=output_hash,
                           validation_score=score, executor_id=executor_id)


def make_proof(result: InferenceResult, task: InferenceTask,
               executor: KeyPair, timestamp: int) -> ProofRecord:
    """执行者签发 PROOF 记录"""
    return build_proof_record(
        executor,
        dataset_hash=task.dataset_hash,
        model_hash=task.model_hash,
        validation_score=result.validation_score,
        task_id=task.task_id,
        timestamp=timestamp,
    )


class ProofMismatch(enum.Enum):
    SCORE_MISMATCH = "ScoreMismatch"
    TASK_MISMATCH = "TaskMismatch"


def verify_proof(proof: ProofRecord, task: InferenceTask, tolerance: int = 0,
                 backend: Optional[InferenceBackend] = None
                 ) -> Optional[ProofMismatch]:
    """重算任务并比对分数；偏差超过 tolerance（百万分之一单位）即不一致"""
    if (proof.task_id, proof.dataset_hash, proof.model_hash) != \
            (task.task_id, task.dataset_hash, task.model_hash):
        return ProofMismatch.TASK_MISMATCH
    recomputed = execute(task, backend=backend).validation_score
    if abs(recomputed - proof.validation_score) > tolerance:
        return ProofMismatch.SCORE_MISMATCH
    return None
