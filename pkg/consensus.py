# consensus.py
# 主节点逻辑：任务路由、结果评估、交叉验证区间（随机抽查）、多主节点投票与区块提交

import enum
import logging
import math
import random
import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

from block import (
    Block,
    ChainStore,
    block_from_json,
    block_to_json,
    build_block,
    validate_block,
)
from crypto_identity import (
    HASH_LEN,
    MAX_UINT64,
    SCORE_SCALE,
    TAG_VOTE,
    ZERO_HASH,
    FieldKind,
    KeyPair,
    SchemaError,
    canonical_bytes,
    hash_bytes,
    sign,
    verify,
)
from hub_network import InformationHub, Packet, PacketKind, SimNetwork
from inference_engine import (
    InferenceResult,
    InferenceTask,
    ProofMismatch,
    execute,
    make_task,
    task_from_json,
    task_problem,
    task_to_json,
    verify_proof,
)
from mempool import Mempool
from records import (
    ModelRecord,
    ProofRecord,
    RecordType,
    admit,
    build_data_record,
    build_model_record,
    record_from_json,
    record_identity,
    record_to_json,
    sign_record,
)
from trust_harness import Evidence, EvidenceKind, Tier, TrustHarness
from utils import from_b64, from_hex, to_hex

logger = logging.getLogger(__name__)

BROADCAST_KINDS = {
    RecordType.DATA: PacketKind.NEW_DATA_RECORD,
    RecordType.MODEL: PacketKind.NEW_MODEL_RECORD,
    RecordType.PROOF: PacketKind.NEW_PROOF_RECORD,
}


class NoAvailableExecutor(Exception):
    """没有未被排除的次级节点可分配任务"""


class UnknownTask(Exception):
    """结果引用的任务不在待办表中"""


class WrongExecutor(Exception):
    """结果不是由当前分配的执行者提交的"""


class TaskFailed(Exception):
    """任务被拒绝且无法重试，或所在区块在等待期内没有提交"""


@dataclass(frozen=True)
class ConsensusParams:
    verify_interval_rounds: int = 1
    audit_fraction: Fraction = Fraction(1, 5)
    max_per_lane: int = 256
    rng_seed: int = 0
    score_tolerance: int = 0
    task_timeout_ms: int = 1000
    max_task_attempts: int = 3
    agent_wait_rounds: Optional[int] = None
    quorum: Optional[int] = None
    # 非 leader 主节点是否实时重算每条广播来的证明（默认只抽查）
    cross_evaluate: bool = False

    def __post_init__(self):
        fraction = self.audit_fraction
        # 浮点先转字符串，0.3 才是精确的 3/10
        if isinstance(fraction, float):
            fraction = Fraction(str(fraction))
        fraction = Fraction(fraction)
        object.__setattr__(self, "audit_fraction", fraction)
        if not 0 < fraction <= 1:
            raise ValueError("audit_fraction 必须在 (0, 1] 内")
        if self.verify_interval_rounds < 1 or self.max_per_lane < 1:
            raise ValueError("verify_interval_rounds / max_per_lane 必须 ≥ 1")
        if self.max_task_attempts < 1:
            raise ValueError("max_task_attempts 必须 ≥ 1")
        if self.task_timeout_ms < 0 or self.score_tolerance < 0:
            raise ValueError("超时与容差不能为负")

    def quorum_for(self, masters: int) -> int:
        """默认 floor(M/2)+1；显式给定时必须严格过半"""
        q = self.quorum if self.quorum is not None else masters // 2 + 1
        if q * 2 <= masters or q > masters:
            raise ValueError(f"quorum={q} 与主节点数 {masters} 不一致")
        return q

    def wait_rounds(self, masters: int) -> int:
        if self.agent_wait_rounds is not None:
            return self.agent_wait_rounds
        return masters + 2


# ---------- 抽查样本
def audit_seed(rng_seed: int, round_no: int) -> int:
    """共享种子 ‖ 轮次 → 本轮抽查种子；所有主节点推出同一个值"""
    digest = hash_bytes(struct.pack(">QQ", rng_seed & MAX_UINT64, round_no))
    return int.from_bytes(digest[:8], "big")


def audit_sample(proofs, fraction, rng_seed: int, round_no: int) -> list:
    """
    从待提交证明中无放回抽取 ceil(fraction × n) 条（非空时至少 1 条）。
    先按 proof_id 排序，与各主节点收到广播的先后无关。
    """
    ordered = sorted(proofs, key=lambda p: p.proof_id)
    if not ordered:
        return []
    k = max(1, math.ceil(Fraction(fraction) * len(ordered)))
    rng = random.Random(audit_seed(rng_seed, round_no))
    return rng.sample(ordered, min(k, len(ordered)))


# ---------- 投票
class Verdict(enum.Enum):
    APPROVE = "Approve"
    REJECT = "Reject"


@dataclass(frozen=True)
class Vote:
    voter_id: bytes
    round: int
    proposed_block_hash: bytes
    audited_task_ids: tuple
    verdict: Verdict
    voter_public_key: bytes = b""
    signature: bytes = b""

    CANONICAL_TAG = TAG_VOTE
    CANONICAL_FIELDS = (
        ("voter_id", FieldKind.HASH),
        ("round", FieldKind.UINT),
        ("proposed_block_hash", FieldKind.HASH),
        ("audited_blob", FieldKind.BYTES),
        ("verdict_label", FieldKind.STR),
        ("voter_public_key", FieldKind.BYTES),
    )

    @property
    def audited_blob(self) -> bytes:
        return b"".join(self.audited_task_ids)

    @property
    def verdict_label(self) -> str:
        return self.verdict.value


def sign_vote(keypair: KeyPair, round_no: int, block_hash: bytes,
              audited_task_ids, verdict: Verdict) -> Vote:
    vote = Vote(voter_id=keypair.node_id, round=round_no,
                proposed_block_hash=block_hash,
                audited_task_ids=tuple(sorted(audited_task_ids)),
                verdict=verdict, voter_public_key=keypair.public_key)
    return replace(vote, signature=sign(keypair, canonical_bytes(vote)))


def verify_vote(vote: Vote) -> bool:
    if not isinstance(vote.verdict, Verdict):
        return False
    if any(not isinstance(t, bytes) or len(t) != HASH_LEN
           for t in vote.audited_task_ids):
        return False
    if not isinstance(vote.voter_public_key, bytes) \
            or hash_bytes(vote.voter_public_key) != vote.voter_id:
        return False
    try:
        message = canonical_bytes(vote)
    except SchemaError:
        return False
    return verify(vote.voter_public_key, message, vote.signature)


def vote_to_json(vote: Vote) -> dict:
    return {
        "voter_id": to_hex(vote.voter_id),
        "round": vote.round,
        "proposed_block_hash": to_hex(vote.proposed_block_hash),
        "audited_task_ids": [to_hex(t) for t in vote.audited_task_ids],
        "verdict": vote.verdict.value,
        "voter_public_key": to_hex(vote.voter_public_key),
        "signature": to_hex(vote.signature),
    }


def vote_from_json(data: dict) -> Vote:
    return Vote(
        voter_id=from_hex(data["voter_id"]),
        round=int(data["round"]),
        proposed_block_hash=from_hex(data["proposed_block_hash"]),
        audited_task_ids=tuple(from_hex(t) for t in data["audited_task_ids"]),
        verdict=Verdict(data["verdict"]),
        voter_public_key=from_hex(data["voter_public_key"]),
        signature=from_hex(data["signature"]),
    )


# ---------- 结果类型
@dataclass
class AuditReport:
    round: int
    # [(proof_id, task_id, "ok" | "ScoreMismatch" | "TaskMismatch" | "UnknownTask")]
    entries: list = field(default_factory=list)

    @property
    def sampled_tasks(self) -> set:
        return {task_id for _, task_id, _ in self.entries}

    @property
    def mismatches(self) -> int:
        return sum(1 for _, _, o in self.entries
                   if o in ("ScoreMismatch", "TaskMismatch"))

    def to_json(self) -> dict:
        return {"round": self.round,
                "entries": [{"proof": to_hex(p), "task": to_hex(t),
                             "outcome": o} for p, t, o in self.entries]}


@dataclass(frozen=True)
class RejectedResult:
    task_id: bytes
    executor_id: bytes
    reason: str
    submitted: Optional[int] = None
    recomputed: Optional[int] = None


@dataclass
class ProposalOutcome:
    round: int
    leader: bytes
    block: Optional[Block]
    votes: list
    committed: bool
    reason: str = "committed"

    def to_log(self, audit_mismatches: int = 0) -> dict:
        return {
            "round": self.round,
            "leader": to_hex(self.leader),
            "proposed_block": to_hex(self.block.block_hash)
            if self.block else None,
            "votes": [{"voter": to_hex(v.voter_id),
                       "verdict": v.verdict.value} for v in self.votes],
            "committed": self.committed,
            "audit_mismatches": audit_mismatches,
        }


class MasterBehavior(enum.Enum):
    HONEST = "honest"
    # 拒绝诚实区块；自己当 leader 时篡改一条证明的分数并用自己的密钥重签
    DISHONEST = "dishonest"


class TaskStatus(enum.Enum):
    ASSIGNED = "assigned"
    AWAITING_COMMIT = "awaiting_commit"
    COMMITTED = "committed"
    SERVED = "served"
    FAILED = "failed"


@dataclass
class PendingTask:
    task: InferenceTask
    executor_id: bytes
    deadline: int
    tier_at_assignment: Tier
    request_id: int = 0
    agent_id: bytes = ZERO_HASH
    attempts: int = 1
    tried: set = field(default_factory=set)
    status: TaskStatus = TaskStatus.ASSIGNED
    result: Optional[InferenceResult] = None
    proof_id: Optional[bytes] = None
    awaiting_since: int = 0


def task_from_request(request: dict, deadline: int) -> InferenceTask:
    """代理请求 → InferenceTask；字段格式不对抛 ValueError / KeyError / TypeError"""
    task = make_task(
        dataset_hash=from_hex(request["dataset_hash"]),
        model_hash=from_hex(request["model_hash"]),
        model_version=request["model_version"],
        input_payload=from_b64(request["input_payload"]),
        decoding_params=request.get("decoding_params", []),
        deadline=deadline,
    )
    problem = task_problem(task)
    if problem:
        raise ValueError(problem)
    return task


def task_tag(task_id: bytes) -> str:
    """主节点派生的 DATA / MODEL 记录在 metadata 里标注所属任务"""
    return "task:" + to_hex(task_id)


def _record_tag(record) -> Optional[str]:
    if isinstance(record, ModelRecord):
        return record.config_metadata
    return getattr(record, "metadata", None)


class MasterState:
    """
    单个主节点的确定性状态机，只由仿真网络投递的数据包驱动；
    主节点之间除了数据包不共享状态（信任档案表除外，由 harness 主节点维护）。
    """

    def __init__(self, keypair: KeyPair, peers, net: SimNetwork,
                 harness: TrustHarness,
                 params: Optional[ConsensusParams] = None,
                 behavior: MasterBehavior = MasterBehavior.HONEST,
                 backend=None):
        self.node = keypair
        self.peers = sorted(set(peers) | {keypair.node_id})
        self.params = params or ConsensusParams()
        self.quorum = self.params.quorum_for(len(self.peers))
        self.net = net
        self.harness = harness
        self.behavior = behavior
        self.backend = backend
        self.colluders = set()
        self.chain = ChainStore()
        self.mempool = Mempool()
        self.pending_tasks = {}
        self.known_tasks = {}
        self.round = 0
        self.round_submissions = []
        self.evidence = []
        self.rejections = []
        self.evaluations = []
        self.responses = []
        self.last_audit = None
        self.audit_failed = set()
        self.dropped_tags = set()
        self.optimistic = {}
        self.retroactive_discrepancies = 0
        self._ballots = {}
        self._cursor = {Tier.TRUSTED: 0, Tier.NON_TRUSTED: 0}

        self.hub = InformationHub(self.mempool, on_record=self._on_record)
        self.hub.register(PacketKind.AGENT_REQUEST, self._on_agent_request)
        self.hub.register(PacketKind.TASK_RESULT, self._on_task_result)
        self.hub.register(PacketKind.HEARTBEAT_PONG, self._on_pong)
        self.hub.register(PacketKind.VOTE_REQUEST, self._on_vote_request)
        self.hub.register(PacketKind.VOTE_RESPONSE, self._on_vote_response)
        self.hub.register(PacketKind.BLOCK_ANNOUNCE, self._on_block_announce)
        net.register(self.node_id, self.receive)

    @property
    def node_id(self) -> bytes:
        return self.node.node_id

    @property
    def honest(self) -> bool:
        return self.behavior is MasterBehavior.HONEST

    def receive(self, packet: Packet) -> str:
        return self.hub.hub_ingest(packet).label()

    def leader_for(self, round_no: int) -> bytes:
        return self.peers[round_no % len(self.peers)]

    def _others(self):
        return [p for p in self.peers if p != self.node_id]

    # ---------- 第 1-2 步：路由
    def _select_executor(self, exclude=()):
        """信任节点优先轮询，没有则在非信任节点中轮询"""
        for tier in (Tier.TRUSTED, Tier.NON_TRUSTED):
            candidates = [n for n in self.harness.nodes_in(tier)
                          if n not in exclude]
            if candidates:
                choice = candidates[self._cursor[tier] % len(candidates)]
                self._cursor[tier] += 1
                return choice, tier
        raise NoAvailableExecutor("没有可用的次级节点")

    def _assign_packet(self, pending: PendingTask) -> Packet:
        return Packet(PacketKind.TASK_ASSIGN, self.node_id,
                      pending.executor_id,
                      {"task": task_to_json(pending.task),
                       "attempt": pending.attempts})

    def route_task(self, request: dict, request_id: int = 0,
                   agent_id: bytes = ZERO_HASH) -> Packet:
        """构造任务、选择执行者并登记待办；返回 TASK_ASSIGN 包（由调用方发送）"""
        now = self.net.clock
        task = task_from_request(request, now + self.params.task_timeout_ms)
        if task.task_id in self.pending_tasks:
            raise ValueError("重复的任务请求")
        executor, tier = self._select_executor()
        pending = PendingTask(task=task, executor_id=executor,
                              deadline=now + self.params.task_timeout_ms,
                              tier_at_assignment=tier, request_id=request_id,
                              agent_id=agent_id, awaiting_since=self.round)
        self.pending_tasks[task.task_id] = pending
        self.known_tasks[task.task_id] = task
        logger.debug("任务 %s → %s (%s)", to_hex(task.task_id)[:12],
                     to_hex(executor)[:12], tier.value)
        return self._assign_packet(pending)

    def _retry(self, pending: PendingTask):
        """换一个执行者重新分配；超过次数或无人可用则任务失败"""
        pending.tried.add(pending.executor_id)
        if pending.attempts >= self.params.max_task_attempts:
            self._fail(pending, "TaskFailed")
            return
        try:
            executor, tier = self._select_executor(exclude=pending.tried)
        except NoAvailableExecutor:
            self._fail(pending, "NoAvailableExecutor")
            return
        pending.executor_id = executor
        pending.tier_at_assignment = tier
        pending.attempts += 1
        pending.deadline = self.net.clock + self.params.task_timeout_ms
        self.net.send(self._assign_packet(pending))

    def reassign_from(self, node_id: bytes) -> list:
        """把某节点手上未完成的任务转给其它节点（心跳超时时调用）"""
        moved = []
        for task_id in sorted(self.pending_tasks):
            pending = self.pending_tasks[task_id]
            if pending.status is TaskStatus.ASSIGNED \
                    and pending.executor_id == node_id:
                self._retry(pending)
                moved.append(task_id)
        return moved

    def expire_overdue(self) -> list:
        """截止时间已过仍无结果的任务：记 Timeout 并重新分配"""
        now = self.net.clock
        expired = []
        for task_id in sorted(self.pending_tasks):
            pending = self.pending_tasks[task_id]
            if pending.status is TaskStatus.ASSIGNED and now > pending.deadline:
                self.evidence.append(
                    (pending.executor_id,
                     Evidence(EvidenceKind.TIMEOUT, task_id)))
                self._retry(pending)
                expired.append(task_id)
        return expired

    def take_evidence(self) -> list:
        items, self.evidence = self.evidence, []
        return items

    def take_submissions(self) -> list:
        items, self.round_submissions = self.round_submissions, []
        return items

    # ---------- 第 3-4 步：评估
    def evaluate_result(self, packet: Packet):
        """
        重算任务核对执行者的证明：一致则证明连同派生的 DATA / MODEL
        记录入池并广播；不一致返回 RejectedResult 并重新分配任务。
        """
        payload = packet.payload
        task_id = from_hex(payload.get("task_id"))
        pending = self.pending_tasks.get(task_id) if task_id else None
        if pending is None or pending.status is not TaskStatus.ASSIGNED:
            raise UnknownTask(payload.get("task_id"))
        if packet.sender_id != pending.executor_id:
            raise WrongExecutor(to_hex(packet.sender_id))
        executor = pending.executor_id

        if self.net.clock > pending.deadline:
            self.evidence.append(
                (executor, Evidence(EvidenceKind.TIMEOUT, task_id)))
            return self._reject(pending, "Timeout")
        try:
            proof = record_from_json(payload["proof"], RecordType.PROOF)
            result = InferenceResult.from_json(payload["result"])
        except (KeyError, TypeError, ValueError):
            self.evidence.append(
                (executor, Evidence(EvidenceKind.PROOF_ANOMALY, task_id)))
            return self._reject(pending, "MalformedResult")
        if proof.sender_id != executor:
            self.evidence.append(
                (executor, Evidence(EvidenceKind.PROOF_ANOMALY, task_id)))
            return self._reject(pending, "WrongSender")

        self.round_submissions.append((executor, proof))
        error = admit(proof)
        if error:
            return self._reject(pending, error.kind.value, proof)
        mismatch = verify_proof(proof, pending.task,
                                self.params.score_tolerance,
                                backend=self.backend)
        if mismatch:
            recomputed = None
            if mismatch is ProofMismatch.SCORE_MISMATCH:
                recomputed = execute(pending.task,
                                     backend=self.backend).validation_score
            return self._reject(pending, mismatch.value, proof, recomputed)

        self._queue_records(proof, pending.task)
        self.evaluations.append((task_id, executor, "accepted"))
        pending.proof_id = proof.proof_id
        pending.result = result
        if pending.tier_at_assignment is Tier.TRUSTED:
            self.optimistic[proof.proof_id] = task_id
            self._send_to_agent(self.serve_agent(task_id, result))
        else:
            pending.status = TaskStatus.AWAITING_COMMIT
            pending.awaiting_since = self.round
        return proof

    def _reject(self, pending: PendingTask, reason: str,
                proof: Optional[ProofRecord] = None,
                recomputed: Optional[int] = None) -> RejectedResult:
        submitted = None
        if proof is not None and isinstance(proof.validation_score, int):
            submitted = proof.validation_score
        rejected = RejectedResult(pending.task.task_id, pending.executor_id,
                                  reason, submitted, recomputed)
        self.rejections.append(rejected)
        self.evaluations.append((rejected.task_id, rejected.executor_id,
                                 reason))
        logger.info("拒绝结果 %s from %s: %s",
                    to_hex(pending.task.task_id)[:12],
                    to_hex(pending.executor_id)[:12], reason)
        self._retry(pending)
        return rejected

    def _queue_records(self, proof: ProofRecord, task: InferenceTask):
        """证明 + 主节点派生并签名的 DATA / MODEL 记录：入本地池并广播给其它主节点"""
        now = self.net.clock
        tag = task_tag(task.task_id)
        data = build_data_record(self.node, task.dataset_hash, now,
                                 metadata=tag)
        model = build_model_record(self.node, task.model_hash,
                                   task.model_version,
                                   "model-" + to_hex(task.model_hash)[:16],
                                   now, config_metadata=tag)
        task_json = task_to_json(task)
        for record in (data, model, proof):
            self.mempool.insert(record)
            for peer in self._others():
                self.net.send(Packet(BROADCAST_KINDS[record.RECORD_TYPE],
                                     self.node_id, peer,
                                     {"record": record_to_json(record),
                                      "task": task_json}))

    def _on_record(self, record, packet: Packet):
        """其它主节点广播来的记录已入池；证明附带的任务记下来供抽查"""
        if not isinstance(record, ProofRecord):
            # 证明已作废的任务，晚到的派生记录直接移出
            if _record_tag(record) in self.dropped_tags:
                self.mempool.discard(record_identity(record),
                                     record.RECORD_TYPE)
            return
        task_data = packet.payload.get("task")
        if not isinstance(task_data, dict):
            return
        try:
            task = task_from_json(task_data)
        except (KeyError, TypeError, ValueError):
            return
        if task.task_id != record.task_id or task_problem(task):
            return
        self.known_tasks.setdefault(task.task_id, task)
        if self.params.cross_evaluate and verify_proof(
                record, task, self.params.score_tolerance,
                backend=self.backend):
            self._drop_proof(record)

    def _drop_proof(self, proof: ProofRecord):
        """证明作废：连同同一任务派生的 DATA / MODEL 记录一起移出本地池"""
        self.audit_failed.add(proof.proof_id)
        self.mempool.discard(proof.proof_id, RecordType.PROOF)
        tag = task_tag(proof.task_id)
        self.dropped_tags.add(tag)
        for record_type in (RecordType.DATA, RecordType.MODEL):
            for key, record in self.mempool.items(record_type):
                if _record_tag(record) == tag:
                    self.mempool.discard(key, record_type)

    # ---------- 返回代理
    def _respond(self, pending: PendingTask, status: str, path: str,
                 reason: str = "") -> Packet:
        payload = {"request_id": pending.request_id, "status": status,
                   "task_id": to_hex(pending.task.task_id), "path": path,
                   "tier_at_assignment": pending.tier_at_assignment.value}
        if reason:
            payload["reason"] = reason
        if pending.result is not None and status == "ok":
            payload["validation_score"] = pending.result.validation_score
            payload["output_hash"] = to_hex(pending.result.output_hash)
        self.responses.append({"t": self.net.clock,
                               "committed": pending.status
                               is TaskStatus.COMMITTED, **payload})
        return Packet(PacketKind.AGENT_RESPONSE, self.node_id,
                      pending.agent_id, payload)

    def serve_agent(self, task_id: bytes, result=None) -> Optional[Packet]:
        """
        信任执行者：评估通过即返回（乐观路径）；
        非信任执行者：证明所在区块提交后才返回（验证路径），之前返回 None。
        """
        pending = self.pending_tasks.get(task_id)
        if pending is None:
            raise UnknownTask(to_hex(task_id))
        if pending.status is TaskStatus.FAILED:
            raise TaskFailed(to_hex(task_id))
        if result is not None:
            pending.result = result
        if pending.proof_id is None or pending.status is TaskStatus.SERVED:
            return None
        if pending.tier_at_assignment is Tier.TRUSTED:
            path = "optimistic"
        elif pending.status is TaskStatus.COMMITTED:
            path = "verified"
        else:
            return None
        packet = self._respond(pending, "ok", path)
        pending.status = TaskStatus.SERVED
        return packet

    def _send_to_agent(self, packet: Optional[Packet]):
        # 单元测试里直接调用时代理可能没有注册到网络
        if packet is not None and packet.recipient_id in self.net.inboxes:
            self.net.send(packet)

    def _fail(self, pending: PendingTask, reason: str):
        pending.status = TaskStatus.FAILED
        logger.info("任务失败 %s: %s", to_hex(pending.task.task_id)[:12],
                    reason)
        self._send_to_agent(self._respond(pending, "failed", "none", reason))

    def expire_waiting(self, round_no: int) -> list:
        """验证路径上等待超过 agent_wait_rounds 轮仍未提交的任务判失败"""
        wait = self.params.wait_rounds(len(self.peers))
        failed = []
        for task_id in sorted(self.pending_tasks):
            pending = self.pending_tasks[task_id]
            if pending.status is TaskStatus.AWAITING_COMMIT \
                    and round_no - pending.awaiting_since >= wait:
                self._fail(pending, "CommitTimeout")
                failed.append(task_id)
        return failed

    # ---------- 第 5 步：交叉验证区间
    def run_verification_interval(self, round_no: Optional[int] = None
                                  ) -> AuditReport:
        """按 (种子, 轮次) 抽取待提交证明并重算；不一致的证明移出本地池"""
        round_no = self.round if round_no is None else round_no
        report = AuditReport(round=round_no)
        sample = audit_sample(self.mempool.proofs(),
                              self.params.audit_fraction,
                              self.params.rng_seed, round_no)
        for proof in sample:
            task = self.known_tasks.get(proof.task_id)
            if task is None:
                outcome = "UnknownTask"
            else:
                mismatch = verify_proof(proof, task,
                                        self.params.score_tolerance,
                                        backend=self.backend)
                outcome = mismatch.value if mismatch else "ok"
            report.entries.append((proof.proof_id, proof.task_id, outcome))
            if outcome in ("ScoreMismatch", "TaskMismatch"):
                self._drop_proof(proof)
                if proof.proof_id in self.optimistic:
                    self.retroactive_discrepancies += 1
                    logger.warning("已乐观返回的结果抽查不一致: %s",
                                   to_hex(proof.task_id)[:12])
        self.last_audit = report
        return report

    # ---------- 第 6-8 步：提案、投票、提交
    def _make_proposal(self, round_no: int) -> Block:
        data, model, proofs = self.mempool.select_for_block(
            self.params.max_per_lane, exclude=self.audit_failed)
        if not self.honest and proofs:
            target = proofs[0]
            forged = sign_record(
                ProofRecord(dataset_hash=target.dataset_hash,
                            model_hash=target.model_hash,
                            validation_score=(target.validation_score + 1)
                            % (SCORE_SCALE + 1),
                            task_id=target.task_id,
                            timestamp=target.timestamp,
                            sender_id=self.node_id),
                self.node)
            proofs = [forged, *proofs[1:]]
            logger.info("第 %s 轮 leader 篡改证明 %s", round_no,
                        to_hex(target.task_id)[:12])
        return build_block(self.chain.tip, [*data, *model, *proofs],
                           self.node, self.net.clock)

    def block_problem(self, block: Block, round_no: int) -> Optional[str]:
        """诚实主节点的审查：区块本身校验 + 对抽中或不认识的证明重算"""
        error = validate_block(block, self.chain.tip)
        if error:
            return error.value
        sampled = set()
        if self.last_audit is not None and self.last_audit.round == round_no:
            sampled = self.last_audit.sampled_tasks
        for proof in block.body.proof_lane:
            if proof.proof_id in self.audit_failed:
                return "AuditFailed"
            if proof.task_id in sampled or not self.mempool.contains(proof):
                task = self.known_tasks.get(proof.task_id)
                if task is None:
                    return "UnknownTask"
                if verify_proof(proof, task, self.params.score_tolerance,
                                backend=self.backend):
                    return "ScoreMismatch"
        return None

    def judge_block(self, block: Block, round_no: int) -> Vote:
        if self.honest:
            problem = self.block_problem(block, round_no)
            verdict = Verdict.REJECT if problem else Verdict.APPROVE
            if problem:
                logger.info("第 %s 轮否决区块: %s", round_no, problem)
        else:
            proposer = block.header.proposer_id
            allies = self.colluders | {self.node_id}
            verdict = Verdict.APPROVE if proposer in allies else Verdict.REJECT
        audited = ()
        if self.last_audit is not None and self.last_audit.round == round_no:
            audited = self.last_audit.sampled_tasks
        return sign_vote(self.node, round_no, block.block_hash, audited,
                         verdict)

    def _valid_approvals(self, votes, block: Block, round_no: int) -> list:
        seen = set()
        approvals = []
        for vote in votes:
            if vote.voter_id in seen or vote.voter_id not in self.peers:
                continue
            if vote.round != round_no \
                    or vote.proposed_block_hash != block.block_hash \
                    or not verify_vote(vote):
                continue
            seen.add(vote.voter_id)
            if vote.verdict is Verdict.APPROVE:
                approvals.append(vote)
        return approvals

    def propose_and_vote(self, round_no: Optional[int] = None
                         ) -> ProposalOutcome:
        """本轮 leader 打包提案、收集签名投票；达到法定票数才提交并广播"""
        round_no = self.round if round_no is None else round_no
        if self.leader_for(round_no) != self.node_id:
            raise ValueError("不是本轮 leader")
        block = self._make_proposal(round_no)
        ballots = self._ballots.setdefault(round_no, {})
        ballots[self.node_id] = self.judge_block(block, round_no)
        for peer in self._others():
            self.net.send(Packet(PacketKind.VOTE_REQUEST, self.node_id, peer,
                                 {"round": round_no,
                                  "block": block_to_json(block)}))
        self.net.run_until_idle()

        votes = [ballots[v] for v in sorted(ballots)]
        approvals = self._valid_approvals(votes, block, round_no)
        outcome = ProposalOutcome(round_no, self.node_id, block, votes, False)
        if len(approvals) < self.quorum:
            outcome.reason = "NoQuorum"
            logger.info("第 %s 轮未达法定票数 %s/%s", round_no,
                        len(approvals), self.quorum)
            return outcome
        error = self.commit_block(block)
        if error:
            outcome.reason = error.value
            return outcome
        outcome.committed = True
        for peer in self._others():
            self.net.send(Packet(PacketKind.BLOCK_ANNOUNCE, self.node_id,
                                 peer,
                                 {"round": round_no,
                                  "block": block_to_json(block),
                                  "votes": [vote_to_json(v) for v in votes]}))
        self.net.run_until_idle()
        return outcome

    def commit_block(self, block: Block):
        """追加上链、清理内存池；验证路径上的任务此时返回给代理"""
        error = self.chain.append(block)
        if error:
            return error
        self.mempool.commit(block.body.records())
        for proof in block.body.proof_lane:
            self.audit_failed.discard(proof.proof_id)
            self.optimistic.pop(proof.proof_id, None)
            pending = self.pending_tasks.get(proof.task_id)
            if pending is None or pending.proof_id != proof.proof_id:
                continue
            if pending.status is TaskStatus.AWAITING_COMMIT:
                pending.status = TaskStatus.COMMITTED
                self._send_to_agent(self.serve_agent(proof.task_id))
        logger.info("主节点 %s 提交区块 height=%s（%s 条记录）",
                    to_hex(self.node_id)[:8], block.height,
                    len(block.body.records()))
        return None

    # ---------- 中枢处理函数
    def _on_agent_request(self, packet: Packet) -> str:
        payload = packet.payload
        try:
            assign = self.route_task(payload["request"],
                                     payload["request_id"], packet.sender_id)
        except NoAvailableExecutor:
            self._reply_failure(packet, "NoAvailableExecutor")
            return "NoAvailableExecutor"
        except (KeyError, TypeError, ValueError, SchemaError) as e:
            logger.warning("无效的代理请求: %s", e)
            self._reply_failure(packet, "InvalidRequest")
            return "InvalidRequest"
        self.net.send(assign)
        return "assigned"

    def _reply_failure(self, packet: Packet, reason: str):
        payload = {"request_id": packet.payload["request_id"],
                   "status": "failed", "path": "none", "reason": reason}
        self.responses.append({"t": self.net.clock, "committed": False,
                               **payload})
        self._send_to_agent(Packet(PacketKind.AGENT_RESPONSE, self.node_id,
                                   packet.sender_id, payload))

    def _on_task_result(self, packet: Packet) -> str:
        try:
            outcome = self.evaluate_result(packet)
        except UnknownTask:
            return "UnknownTask"
        except WrongExecutor:
            return "WrongExecutor"
        if isinstance(outcome, RejectedResult):
            return outcome.reason
        return "accepted"

    def _on_pong(self, packet: Packet) -> str:
        self.harness.record_pong(packet.sender_id, self.net.clock)
        return "pong"

    def _on_vote_request(self, packet: Packet) -> str:
        round_no = packet.payload["round"]
        try:
            block = block_from_json(packet.payload["block"])
        except (KeyError, TypeError, ValueError) as e:
            logger.warning("无法解码的提案: %s", e)
            return "MalformedBlock"
        if packet.sender_id != self.leader_for(round_no) \
                or block.header.proposer_id != packet.sender_id:
            return "NotLeader"
        vote = self.judge_block(block, round_no)
        self.net.send(Packet(PacketKind.VOTE_RESPONSE, self.node_id,
                             packet.sender_id, {"vote": vote_to_json(vote)}))
        return vote.verdict.value

    def _on_vote_response(self, packet: Packet) -> str:
        try:
            vote = vote_from_json(packet.payload["vote"])
        except (KeyError, TypeError, ValueError) as e:
            logger.warning("无法解码的投票: %s", e)
            return "MalformedVote"
        if vote.voter_id != packet.sender_id or not verify_vote(vote):
            return "BadVote"
        self._ballots.setdefault(vote.round, {}).setdefault(vote.voter_id,
                                                            vote)
        return "vote"

    def _on_block_announce(self, packet: Packet) -> str:
        round_no = packet.payload["round"]
        if packet.sender_id != self.leader_for(round_no):
            return "NotLeader"
        try:
            block = block_from_json(packet.payload["block"])
            votes = [vote_from_json(v) for v in packet.payload["votes"]]
        except (KeyError, TypeError, ValueError) as e:
            logger.warning("无法解码的区块公告: %s", e)
            return "MalformedBlock"
        if len(self._valid_approvals(votes, block, round_no)) < self.quorum:
            return "NoQuorum"
        error = self.commit_block(block)
        return error.value if error else "committed"
