# simulator.py
# 多节点确定性仿真：主节点 / 次级节点 / 代理在同一个仿真网络上按轮运行，
# 结束后做安全性与一致性检查并生成 MetricsReport

import logging
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import pandas as pd

from block import block_to_json, validate_chain
from consensus import MasterBehavior, MasterState, TaskStatus
from crypto_identity import (
    SCORE_SCALE,
    KeyPair,
    canonical_bytes,
    hash_bytes,
    sign,
)
from experiments import MetricsReport
from hub_network import Packet, PacketKind, SimNetwork
from inference_engine import (
    execute,
    make_proof,
    task_from_json,
    task_problem,
    verify_proof,
)
from records import record_to_json
from scenario import Behavior, Scenario, SecondarySpec
from trust_harness import TrustHarness
from utils import dump_json, dump_jsonl, to_b64, to_hex, write_text

logger = logging.getLogger(__name__)


class SecondaryNode:
    """执行推理任务的次级节点；行为由场景决定"""

    def __init__(self, label: str, spec: SecondarySpec, net: SimNetwork,
                 backend=None):
        self.label = label
        self.key = KeyPair.from_seed(label)
        self.spec = spec
        self.net = net
        self.backend = backend
        self.round = 0
        # 伪造签名用的另一把密钥
        self._forge_key = KeyPair.from_seed(label + "-forged")
        self.injected = []
        self.assigned_rounds = []
        net.register(self.node_id, self.receive)

    @property
    def node_id(self) -> bytes:
        return self.key.node_id

    @property
    def crashed(self) -> bool:
        return self.spec.behavior is Behavior.CRASHER \
            and self.round >= self.spec.crash_at_round

    @property
    def delay_ms(self) -> int:
        if self.spec.behavior is Behavior.LAGGARD:
            return self.spec.delay_ms
        return 0

    def receive(self, packet: Packet) -> str:
        if self.crashed:
            return "crashed"
        if packet.kind is PacketKind.HEARTBEAT_PING:
            self.net.send(Packet(PacketKind.HEARTBEAT_PONG, self.node_id,
                                 packet.sender_id, dict(packet.payload)),
                          extra_delay_ms=self.delay_ms)
            return "pong"
        if packet.kind is PacketKind.TASK_ASSIGN:
            return self._run_task(packet)
        return "ignored"

    def _run_task(self, packet: Packet) -> str:
        try:
            task = task_from_json(packet.payload["task"])
        except (KeyError, TypeError, ValueError):
            return "MalformedTask"
        if task_problem(task):
            return "MalformedTask"
        self.assigned_rounds.append(self.round)
        result = execute(task, self.node_id, backend=self.backend)
        behavior = self.spec.behavior
        if behavior is Behavior.FABRICATOR:
            score = result.validation_score + self.spec.delta
            if score > SCORE_SCALE:
                score = result.validation_score - self.spec.delta
            result = replace(result, validation_score=max(score, 0))
        proof = make_proof(result, task, self.key, self.net.clock)
        if behavior is Behavior.SIGNATURE_FORGER:
            proof = replace(proof, signature=sign(self._forge_key,
                                                  canonical_bytes(proof)))
        if self.spec.injects_invalid:
            self.injected.append((task.task_id, self.round))
        self.net.send(Packet(PacketKind.TASK_RESULT, self.node_id,
                             packet.sender_id,
                             {"task_id": to_hex(task.task_id),
                              "result": result.to_json(),
                              "proof": record_to_json(proof)}),
                      extra_delay_ms=self.delay_ms)
        return "executed"


class AgentDriver:
    """合成的代理：每轮向入口主节点发推理请求，记录响应到达的仿真时刻"""

    DATASETS = 4
    MODELS = 2

    def __init__(self, net: SimNetwork, entry_id: bytes, seed: int = 0):
        self.key = KeyPair.from_seed("agent")
        self.net = net
        self.entry_id = entry_id
        self.seed = seed
        self.sent_at = {}
        self.responses = {}
        self._next_id = 0
        net.register(self.node_id, self.receive)

    @property
    def node_id(self) -> bytes:
        return self.key.node_id

    def request_body(self, request_id: int) -> dict:
        return {
            "dataset_hash": to_hex(hash_bytes(
                f"dataset-{request_id % self.DATASETS}".encode())),
            "model_hash": to_hex(hash_bytes(
                f"model-{request_id % self.MODELS}".encode())),
            "model_version": "v1",
            "input_payload": to_b64(
                f"prompt-{self.seed}-{request_id}".encode()),
            "decoding_params": [["temperature", "0"], ["top_k", "1"]],
        }

    def submit(self, count: int):
        for _ in range(count):
            request_id = self._next_id
            self._next_id += 1
            self.sent_at[request_id] = self.net.clock
            self.net.send(Packet(PacketKind.AGENT_REQUEST, self.node_id,
                                 self.entry_id,
                                 {"request_id": request_id,
                                  "request": self.request_body(request_id)}))

    def receive(self, packet: Packet) -> str:
        if packet.kind is not PacketKind.AGENT_RESPONSE:
            return "ignored"
        request_id = packet.payload["request_id"]
        self.responses.setdefault(request_id, {
            **packet.payload,
            "latency_ms": self.net.clock - self.sent_at.get(request_id, 0),
        })
        return packet.payload["status"]

    def summary(self) -> dict:
        rows = list(self.responses.values())
        frame = pd.DataFrame(rows, columns=["status", "path", "latency_ms"])
        out = {"requests": self._next_id, "responses": len(rows)}
        for path in ("optimistic", "verified"):
            ok = frame[(frame["status"] == "ok") & (frame["path"] == path)]
            out[f"{path}_responses"] = int(len(ok))
            out[f"{path}_median_latency_ms"] = \
                float(ok["latency_ms"].median()) if len(ok) else None
        out["failed_responses"] = int((frame["status"] == "failed").sum())
        return out


def check_safety(blocks, tasks: dict, tolerance: int = 0,
                 backend=None) -> list:
    """已提交的每条证明都必须能重算出同样的分数；返回违规的 task_id 列表"""
    violations = []
    for block in blocks:
        for proof in block.body.proof_lane:
            task = tasks.get(proof.task_id)
            if task is None or verify_proof(proof, task, tolerance,
                                            backend=backend):
                violations.append(proof.task_id)
    return violations


def check_consistency(masters) -> bool:
    """诚实主节点的链逐块哈希相同"""
    chains = {tuple(b.block_hash for b in m.chain.snapshot())
              for m in masters if m.honest}
    return len(chains) <= 1


def gating_parity(responses) -> bool:
    """提交前返回 ⇔ 分配时执行者是信任节点"""
    for r in responses:
        if r.get("status") != "ok":
            continue
        trusted = r.get("tier_at_assignment") == "Trusted"
        optimistic = r.get("path") == "optimistic"
        if trusted != optimistic or optimistic == r.get("committed"):
            return False
    return True


@dataclass
class SimulationResult:
    report: MetricsReport
    consensus_log: list = field(default_factory=list)
    harness_log: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    chain: list = field(default_factory=list)


class Simulation:
    """按场景搭好全部节点；run() 逐轮驱动并返回结果"""

    def __init__(self, scenario: Scenario, backend=None):
        self.scenario = scenario.validate()
        self.backend = backend
        net = scenario.net
        self.net = SimNetwork(net.base_latency_ms, net.jitter_ms,
                              net.loss_rate, net.seed)
        self.harness = TrustHarness(scenario.harness)
        keys = [KeyPair.from_seed(f"master-{i}")
                for i in range(scenario.masters)]
        ids = [k.node_id for k in keys]
        self.masters = []
        for i, key in enumerate(keys):
            # 入口主节点（0 号）永远诚实
            dishonest = 1 <= i <= scenario.dishonest_masters
            behavior = MasterBehavior.DISHONEST if dishonest \
                else MasterBehavior.HONEST
            self.masters.append(MasterState(key, ids, self.net, self.harness,
                                            scenario.consensus, behavior,
                                            backend))
        colluders = {m.node_id for m in self.masters if not m.honest}
        for master in self.masters:
            master.colluders = colluders
        self.entry = self.masters[0]
        self.by_id = {m.node_id: m for m in self.masters}

        self.secondaries = []
        for i, spec in enumerate(scenario.secondaries):
            node = SecondaryNode(f"secondary-{i}", spec, self.net, backend)
            self.harness.add_node(node.node_id, spec.initial_tier)
            self.secondaries.append(node)
        self.labels = {n.node_id: n.label for n in self.secondaries}
        self.labels.update({m.node_id: f"master-{i}"
                            for i, m in enumerate(self.masters)})
        self.agent = AgentDriver(self.net, self.entry.node_id, net.seed)
        self.consensus_log = []
        self.harness_log = []
        self.transitions = []

    def label(self, node_id: bytes) -> str:
        return self.labels.get(node_id, to_hex(node_id)[:12])

    def _collect_timeouts(self):
        self.entry.expire_overdue()
        return self.entry.take_evidence()

    def run_round(self, round_no: int):
        round_start = self.net.clock
        for master in self.masters:
            master.round = round_no
        for node in self.secondaries:
            node.round = round_no

        # 1-4：请求 → 分配 → 执行 → 评估 / 入池 / 乐观返回
        self.agent.submit(self.scenario.requests_per_round)
        self.net.run_until_idle()

        # 5-8：交叉验证区间、提案、投票、提交
        if round_no % self.scenario.consensus.verify_interval_rounds == 0:
            audits = {m.node_id: m.run_verification_interval(round_no)
                      for m in self.masters}
            leader = self.by_id[self.entry.leader_for(round_no)]
            outcome = leader.propose_and_vote(round_no)
            self.consensus_log.append(
                outcome.to_log(audits[leader.node_id].mismatches))

        # harness：心跳 → 异常检测 → 信任更新
        report = self.harness.run_round(
            self.net, self.entry.take_submissions(), self.entry.known_tasks,
            prober_id=self.entry.node_id, round_no=round_no,
            reassign=self.entry.reassign_from,
            collect_timeouts=self._collect_timeouts, backend=self.backend)
        self.net.run_until_idle()
        self.entry.expire_waiting(round_no)
        self.net.run_until_idle()
        # 每轮至少占用 round_ms 的仿真时间，截止时间才有意义
        self.net.advance_to(round_start + self.scenario.round_ms)
        self.harness_log.append(report.to_json())
        for t in report.transitions:
            self.transitions.append({"round": round_no,
                                     "node": self.label(t.node_id),
                                     "from": t.from_tier.value,
                                     "to": t.to_tier.value})

    def run(self) -> SimulationResult:
        logger.info("场景 %s 开始（seed=%s）", self.scenario.name,
                    self.scenario.seed)
        for round_no in range(1, self.scenario.rounds + 1):
            self.run_round(round_no)
        report = self.build_report()
        logger.info("场景 %s 结束：%s 个区块，检出率 %.2f，误报率 %.2f",
                    self.scenario.name, report.committed_blocks,
                    report.detection_rate, report.false_positive_rate)
        return SimulationResult(
            report=report,
            consensus_log=self.consensus_log,
            harness_log=self.harness_log,
            trace=list(self.net.trace),
            chain=[block_to_json(b) for b in self.entry.chain.snapshot()],
        )

    def known_tasks(self) -> dict:
        tasks = {}
        for master in self.masters:
            tasks.update(master.known_tasks)
        return tasks

    def build_report(self) -> MetricsReport:
        report = MetricsReport(name=self.scenario.name)
        injecting = {n.node_id for n in self.secondaries
                     if n.spec.injects_invalid}
        # 超时的结果没有经过校验，不计入有效 / 无效用例
        for task_id, executor, outcome in self.entry.evaluations:
            if outcome == "Timeout":
                continue
            if executor in injecting:
                report.invalid_cases += 1
                if outcome != "accepted":
                    report.detected_invalid += 1
            else:
                report.valid_cases += 1
                if outcome != "accepted":
                    report.rejected_valid += 1
        accepted = {(t, e) for t, e, o in self.entry.evaluations
                    if o == "accepted"}
        undetected = sum(1 for n in self.secondaries
                         for task_id, _ in n.injected
                         if (task_id, n.node_id) in accepted)

        chain = self.entry.chain.snapshot()
        honest = [m for m in self.masters if m.honest]
        tasks = self.known_tasks()
        violations = []
        for master in honest:
            violations += check_safety(master.chain.snapshot(), tasks,
                                       self.scenario.consensus.score_tolerance,
                                       self.backend)
        responses = self.entry.responses
        report.case_counts = {"proof": {"valid": report.valid_cases,
                                        "invalid": report.invalid_cases}}
        report.harness_transitions = self.transitions
        report.committed_blocks = len(chain) - 1
        report.chain_valid = all(validate_chain(m.chain.snapshot()) is None
                                 for m in honest)
        report.safety_violations = len(violations)
        report.chains_consistent = check_consistency(self.masters)
        report.scenario = {
            "seed": self.scenario.seed,
            "masters": self.scenario.masters,
            "dishonest_masters": self.scenario.dishonest_masters,
            "secondaries": len(self.secondaries),
            "rounds": self.scenario.rounds,
            "injected_invalid": sum(len(n.injected)
                                    for n in self.secondaries),
            "undetected_injections": undetected,
            "rejections": len(self.entry.rejections),
            "failed_tasks": sum(1 for p in self.entry.pending_tasks.values()
                                if p.status is TaskStatus.FAILED),
            "retroactive_discrepancies": sum(
                m.retroactive_discrepancies for m in self.masters),
            "gating_parity": gating_parity(responses),
            "agent": self.agent.summary(),
            "final_tiers": {self.label(n): p.tier.value
                            for n, p in self.harness.profiles.items()},
            "mempool_depth": self.entry.mempool.depth(),
            "proposals": len(self.consensus_log),
            "network": {"sent": self.net.sent, "delivered": self.net.delivered,
                        "dropped": self.net.dropped},
        }
        return report


def write_outputs(result: SimulationResult, out_dir: str,
                  trace: bool = False) -> list:
    """metrics.json / consensus.jsonl / harness.jsonl（/ trace.jsonl）"""
    files = {
        "metrics.json": dump_json(result.report.to_json()),
        "consensus.jsonl": dump_jsonl(result.consensus_log),
        "harness.jsonl": dump_jsonl(result.harness_log),
    }
    if trace:
        files["trace.jsonl"] = dump_jsonl(result.trace)
    written = []
    for name, text in files.items():
        path = os.path.join(out_dir, name)
        write_text(path, text)
        written.append(path)
    logger.info("已写出 %s", ", ".join(written))
    return written


def run_scenario(scenario: Scenario, out_dir: Optional[str] = None,
                 trace: bool = False, backend=None) -> MetricsReport:
    """完整跑一遍场景；给了 out_dir 就写出报告与 JSONL 轨迹"""
    result = Simulation(scenario, backend=backend).run()
    if out_dir:
        write_outputs(result, out_dir, trace)
    return result.report
