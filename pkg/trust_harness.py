# trust_harness.py
# 两级信任状态机 + 每轮三阶段 harness（心跳 → 异常检测 → 信任更新）

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from hub_network import Packet, PacketKind, SimNetwork
from inference_engine import ProofMismatch, execute, verify_proof
from records import admit
from utils import from_hex, to_hex

logger = logging.getLogger(__name__)


class Tier(enum.Enum):
    TRUSTED = "Trusted"
    NON_TRUSTED = "NonTrusted"
    EXCLUDED = "Excluded"


DEMOTION = {Tier.TRUSTED: Tier.NON_TRUSTED, Tier.NON_TRUSTED: Tier.EXCLUDED}


@dataclass
class NodeProfile:
    node_id: bytes
    tier: Tier = Tier.NON_TRUSTED
    consecutive_failures: int = 0
    consecutive_successes: int = 0
    last_heartbeat: int = -1       # -1：从未收到 PONG


@dataclass(frozen=True)
class HarnessParams:
    tau_d: int = 2
    tau_p: int = 5
    heartbeat_timeout_ms: int = 500
    anomaly_tolerance: int = 0

    def __post_init__(self):
        if self.tau_d < 1 or self.tau_p < 1:
            raise ValueError("tau_d / tau_p 必须 ≥ 1")
        if self.heartbeat_timeout_ms < 0 or self.anomaly_tolerance < 0:
            raise ValueError("超时与容差不能为负")


class EvidenceKind(enum.Enum):
    PROOF_OK = "ProofOk"
    PROOF_ANOMALY = "ProofAnomaly"
    TIMEOUT = "Timeout"
    HEARTBEAT_MISS = "HeartbeatMiss"


FAILURE_KINDS = {EvidenceKind.PROOF_ANOMALY, EvidenceKind.TIMEOUT,
                 EvidenceKind.HEARTBEAT_MISS}


@dataclass(frozen=True)
class Evidence:
    kind: EvidenceKind
    task_id: Optional[bytes] = None
    submitted: Optional[int] = None
    recomputed: Optional[int] = None


class RoundEvidence:
    """一轮内按节点累积的证据；只接受档案表里存在的节点"""

    def __init__(self, profiles: dict):
        self._profiles = profiles
        self.events = {}

    def add(self, node_id: bytes, evidence: Evidence):
        if node_id not in self._profiles:
            raise KeyError(f"未知节点 {to_hex(node_id)}")
        self.events.setdefault(node_id, []).append(evidence)

    def merge(self, other: "RoundEvidence"):
        for node_id, items in other.events.items():
            for item in items:
                self.add(node_id, item)

    def of(self, node_id: bytes) -> list:
        return self.events.get(node_id, [])

    def kinds(self, kind: EvidenceKind):
        return [(n, e) for n in sorted(self.events)
                for e in self.events[n] if e.kind is kind]


@dataclass(frozen=True)
class TierTransition:
    node_id: bytes
    from_tier: Tier
    to_tier: Tier
    round: int

    def to_json(self) -> dict:
        return {"node": to_hex(self.node_id), "from": self.from_tier.value,
                "to": self.to_tier.value}


@dataclass
class HarnessReport:
    round: int
    misses: list = field(default_factory=list)
    anomalies: list = field(default_factory=list)
    timeouts: list = field(default_factory=list)
    transitions: list = field(default_factory=list)

    def is_quiet(self) -> bool:
        return not (self.misses or self.anomalies or self.timeouts
                    or self.transitions)

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "misses": [to_hex(n) for n in self.misses],
            "anomalies": [
                {"node": to_hex(n),
                 "task": to_hex(e.task_id) if e.task_id else None,
                 "submitted": e.submitted, "recomputed": e.recomputed}
                for n, e in self.anomalies
            ],
            "timeouts": [
                {"node": to_hex(n),
                 "task": to_hex(e.task_id) if e.task_id else None}
                for n, e in self.timeouts
            ],
            "transitions": [t.to_json() for t in self.transitions],
        }

    @classmethod
    def from_json(cls, data: dict) -> "HarnessReport":
        def _task(item):
            return from_hex(item["task"]) if item.get("task") else None

        return cls(
            round=data["round"],
            misses=[from_hex(n) for n in data["misses"]],
            anomalies=[
                (from_hex(a["node"]),
                 Evidence(EvidenceKind.PROOF_ANOMALY, _task(a),
                          a["submitted"], a["recomputed"]))
                for a in data["anomalies"]
            ],
            timeouts=[
                (from_hex(t["node"]), Evidence(EvidenceKind.TIMEOUT, _task(t)))
                for t in data.get("timeouts", [])
            ],
            transitions=[
                TierTransition(from_hex(t["node"]), Tier(t["from"]),
                               Tier(t["to"]), data["round"])
                for t in data["transitions"]
            ],
        )


# ---------- 阶段一：心跳
def heartbeat_phase(profiles: dict, net: SimNetwork, prober_id: bytes,
                    params: HarnessParams, round_no: int,
                    reassign: Optional[Callable] = None) -> RoundEvidence:
    """
    向所有未排除的次级节点发 PING，排空网络后检查 PONG；
    超时未回的节点记 HeartbeatMiss，其待办任务交给 reassign 重新分配。
    PONG 由探测方的处理函数写入 profile.last_heartbeat。
    """
    evidence = RoundEvidence(profiles)
    ping_at = net.clock
    targets = [n for n in sorted(profiles)
               if profiles[n].tier is not Tier.EXCLUDED]
    for node_id in targets:
        net.send(Packet(PacketKind.HEARTBEAT_PING, prober_id, node_id,
                        {"round": round_no}))
    net.run_until_idle()
    for node_id in targets:
        seen = profiles[node_id].last_heartbeat
        if seen < ping_at or seen - ping_at > params.heartbeat_timeout_ms:
            evidence.add(node_id, Evidence(EvidenceKind.HEARTBEAT_MISS))
            logger.warning("心跳超时: %s", to_hex(node_id)[:12])
            if reassign:
                reassign(node_id)
    return evidence


# ---------- 阶段二：异常检测
def anomaly_phase(profiles: dict, round_proofs, tasks: dict,
                  params: HarnessParams, backend=None) -> RoundEvidence:
    """
    round_proofs: [(执行者 node_id, ProofRecord)]。
    每条证明都重算；偏差超过 anomaly_tolerance、任务不符或签名不过都记 ProofAnomaly。
    """
    evidence = RoundEvidence(profiles)
    for executor_id, proof in round_proofs:
        if executor_id not in profiles:
            continue
        task = tasks.get(proof.task_id)
        submitted = proof.validation_score
        recomputed = None
        if task is not None:
            recomputed = execute(task, backend=backend).validation_score
        if admit(proof) or task is None:
            ok = False
        else:
            mismatch = verify_proof(proof, task, params.anomaly_tolerance,
                                    backend=backend)
            ok = mismatch is None
            if mismatch is ProofMismatch.TASK_MISMATCH:
                recomputed = None
        kind = EvidenceKind.PROOF_OK if ok else EvidenceKind.PROOF_ANOMALY
        task_id = proof.task_id if isinstance(proof.task_id, bytes) else None
        evidence.add(executor_id, Evidence(kind, task_id, submitted,
                                           recomputed))
    return evidence


# ---------- 阶段三：信任更新
def trust_update_phase(profiles: dict, evidence: RoundEvidence,
                       params: HarnessParams, round_no: int = 0) -> list:
    """
    按轮计数：本轮有任何失败事件记一次失败，只有 ProofOk 记一次成功，
    没有事件则计数不变。连续失败 ≥ tau_d 降一级，
    非信任节点连续成功 ≥ tau_p 升为信任；发生迁移后计数清零。
    """
    transitions = []
    for node_id in sorted(profiles):
        profile = profiles[node_id]
        if profile.tier is Tier.EXCLUDED:
            continue
        kinds = {e.kind for e in evidence.of(node_id)}
        if kinds & FAILURE_KINDS:
            profile.consecutive_failures += 1
            profile.consecutive_successes = 0
        elif EvidenceKind.PROOF_OK in kinds:
            profile.consecutive_successes += 1
            profile.consecutive_failures = 0
        else:
            continue

        before = profile.tier
        if profile.consecutive_failures >= params.tau_d:
            profile.tier = DEMOTION[before]
        elif profile.consecutive_successes >= params.tau_p \
                and before is Tier.NON_TRUSTED:
            profile.tier = Tier.TRUSTED
        if profile.tier is not before:
            profile.consecutive_failures = 0
            profile.consecutive_successes = 0
            transitions.append(
                TierTransition(node_id, before, profile.tier, round_no))
            logger.info("第 %s 轮 %s: %s → %s", round_no,
                        to_hex(node_id)[:12], before.value,
                        profile.tier.value)
    return transitions


def run_harness_round(profiles: dict, net: SimNetwork, round_proofs,
                      tasks: dict, params: HarnessParams, *,
                      prober_id: bytes, round_no: int,
                      reassign: Optional[Callable] = None,
                      collect_timeouts: Optional[Callable] = None,
                      phase_log: Optional[list] = None,
                      backend=None) -> HarnessReport:
    """严格按顺序执行三阶段；collect_timeouts 在心跳之后取本轮超时证据"""
    evidence = heartbeat_phase(profiles, net, prober_id, params, round_no,
                               reassign)
    if phase_log is not None:
        phase_log.append((round_no, "heartbeat"))
    if collect_timeouts:
        for node_id, ev in collect_timeouts():
            if node_id in profiles:
                evidence.add(node_id, ev)
    evidence.merge(anomaly_phase(profiles, round_proofs, tasks, params,
                                 backend=backend))
    if phase_log is not None:
        phase_log.append((round_no, "anomaly"))
    transitions = trust_update_phase(profiles, evidence, params, round_no)
    if phase_log is not None:
        phase_log.append((round_no, "trust_update"))
    return HarnessReport(
        round=round_no,
        misses=[n for n, _ in evidence.kinds(EvidenceKind.HEARTBEAT_MISS)],
        anomalies=evidence.kinds(EvidenceKind.PROOF_ANOMALY),
        timeouts=evidence.kinds(EvidenceKind.TIMEOUT),
        transitions=transitions,
    )


class TrustHarness:
    """harness 主节点持有的档案表与每轮报告"""

    def __init__(self, params: Optional[HarnessParams] = None):
        self.params = params or HarnessParams()
        self.profiles = {}
        self.reports = []
        self.phase_log = []

    def add_node(self, node_id: bytes, tier: Tier = Tier.NON_TRUSTED):
        self.profiles[node_id] = NodeProfile(node_id=node_id, tier=tier)

    def tier_of(self, node_id: bytes) -> Tier:
        return self.profiles[node_id].tier

    def nodes_in(self, tier: Tier) -> list:
        return [n for n in sorted(self.profiles)
                if self.profiles[n].tier is tier]

    def record_pong(self, node_id: bytes, t: int):
        profile = self.profiles.get(node_id)
        if profile is not None:
            profile.last_heartbeat = t

    def run_round(self, net: SimNetwork, round_proofs, tasks: dict, *,
                  prober_id: bytes, round_no: int, reassign=None,
                  collect_timeouts=None, backend=None) -> HarnessReport:
        report = run_harness_round(
            self.profiles, net, round_proofs, tasks, self.params,
            prober_id=prober_id, round_no=round_no, reassign=reassign,
            collect_timeouts=collect_timeouts, phase_log=self.phase_log,
            backend=backend)
        self.reports.append(report)
        return report
