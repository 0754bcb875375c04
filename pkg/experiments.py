# experiments.py
# 验证实验：固定的有效 / 无效用例组合（记录、区块、中枢、内存池），
# 检出率 / 误报率统计与墙钟延迟（min / median / p99）

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import pandas as pd

from block import (
    Block,
    BlockBody,
    assemble_block,
    genesis_block,
    validate_block,
)
from crypto_identity import KeyPair, hash_bytes
from hub_network import InformationHub, Packet, PacketKind
from mempool import Mempool
from records import (
    RecordType,
    admit,
    build_data_record,
    build_model_record,
    build_proof_record,
    lane_sort_key,
    record_to_json,
)

logger = logging.getLogger(__name__)

COMPONENTS = ("record", "block", "hub", "pool")

# 组合实验的有效用例规模：记录 1003、中枢 1005，其余与基线相同
COMBINED_VALID = {"record": 1003, "block": 2, "hub": 1005, "pool": 3}
SCALE_VALID = {"record": 1000, "hub": 1000}


@dataclass(frozen=True)
class CaseResult:
    component: str
    name: str
    expected_valid: bool
    accepted: bool
    reason: str = ""

    @property
    def correct(self) -> bool:
        return self.expected_valid == self.accepted


class LatencyRecorder:
    """
    高精度墙钟计时，只包住纯校验调用。
    有效用例走完整条校验路径，无效用例在第一个失败项就返回，两者分开存放。
    """

    def __init__(self):
        self.samples = {c: [] for c in COMPONENTS}
        self.invalid_samples = {c: [] for c in COMPONENTS}

    @contextmanager
    def time(self, component: str, valid: bool = True):
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = (time.perf_counter() - start) * 1000
            target = self.samples if valid else self.invalid_samples
            target.setdefault(component, []).append(elapsed)

    def to_json(self) -> dict:
        return {
            "valid": {c: list(v) for c, v in self.samples.items() if v},
            "invalid": {c: list(v)
                        for c, v in self.invalid_samples.items() if v},
        }


@dataclass
class MetricsReport:
    name: str
    valid_cases: int = 0
    invalid_cases: int = 0
    detected_invalid: int = 0
    rejected_valid: int = 0
    case_counts: dict = field(default_factory=dict)
    invalid_fixtures: list = field(default_factory=list)
    harness_transitions: list = field(default_factory=list)
    committed_blocks: int = 0
    chain_valid: bool = True
    safety_violations: int = 0
    chains_consistent: bool = True
    scenario: dict = field(default_factory=dict)
    latency: LatencyRecorder = field(default_factory=LatencyRecorder)

    @property
    def detection_rate(self) -> float:
        # 没有无效用例时视为全部检出
        if not self.invalid_cases:
            return 1.0
        return self.detected_invalid / self.invalid_cases

    @property
    def false_positive_rate(self) -> float:
        if not self.valid_cases:
            return 0.0
        return self.rejected_valid / self.valid_cases

    @property
    def passed(self) -> bool:
        return (self.detection_rate == 1.0
                and self.false_positive_rate == 0.0
                and self.chain_valid
                and self.safety_violations == 0
                and self.chains_consistent)

    def record_case(self, case: CaseResult):
        counts = self.case_counts.setdefault(case.component,
                                             {"valid": 0, "invalid": 0})
        if case.expected_valid:
            counts["valid"] += 1
            self.valid_cases += 1
            if not case.accepted:
                self.rejected_valid += 1
                logger.warning("误报: %s/%s %s", case.component, case.name,
                               case.reason)
        else:
            counts["invalid"] += 1
            self.invalid_cases += 1
            if not case.accepted:
                self.detected_invalid += 1
            else:
                logger.warning("漏检: %s/%s", case.component, case.name)
            self.invalid_fixtures.append({
                "component": case.component, "name": case.name,
                "detected": not case.accepted, "reason": case.reason})

    def to_json(self) -> dict:
        """确定性导出：不含墙钟延迟（延迟单独写 latency.json）"""
        return {
            "name": self.name,
            "valid_cases": self.valid_cases,
            "invalid_cases": self.invalid_cases,
            "detected_invalid": self.detected_invalid,
            "rejected_valid": self.rejected_valid,
            "detection_rate": self.detection_rate,
            "false_positive_rate": self.false_positive_rate,
            "case_counts": self.case_counts,
            "invalid_fixtures": self.invalid_fixtures,
            "harness_transitions": self.harness_transitions,
            "committed_blocks": self.committed_blocks,
            "chain_valid": self.chain_valid,
            "safety_violations": self.safety_violations,
            "chains_consistent": self.chains_consistent,
            "scenario": self.scenario,
            "passed": self.passed,
        }


def measure_latency(report: MetricsReport,
                    include_invalid: bool = False) -> dict:
    """每个组件的墙钟延迟摘要（毫秒）；默认只统计有效用例"""
    summary = {}
    for component in COMPONENTS:
        samples = list(report.latency.samples.get(component, []))
        if include_invalid:
            samples += report.latency.invalid_samples.get(component, [])
        if not samples:
            continue
        s = pd.Series(samples, dtype="float64")
        summary[component] = {
            "count": int(s.count()),
            "min_ms": float(s.min()),
            "median_ms": float(s.median()),
            "p99_ms": float(s.quantile(0.99)),
        }
    return summary


def latency_frame(report: MetricsReport) -> pd.DataFrame:
    """延迟摘要表，给看板用"""
    summary = measure_latency(report)
    if not summary:
        return pd.DataFrame(columns=["count", "min_ms", "median_ms", "p99_ms"])
    return pd.DataFrame.from_dict(summary, orient="index")


# ---------- 用例构造
class _Bench:
    """一次实验用到的身份、时钟与计时器"""

    def __init__(self, report: MetricsReport):
        self.report = report
        self.sender = KeyPair.from_seed("bench-sender")
        self.other = KeyPair.from_seed("bench-other")
        self.proposer = KeyPair.from_seed("bench-proposer")
        self._clock = 1_700_000_000_000
        self._seq = 0

    def tick(self) -> int:
        self._clock += 1
        return self._clock

    def digest(self, label: str) -> bytes:
        self._seq += 1
        return hash_bytes(f"{label}-{self._seq}".encode())

    def data(self, key=None):
        return build_data_record(key or self.sender, self.digest("data"),
                                 self.tick(), metadata="bench")

    def model(self):
        return build_model_record(self.sender, self.digest("model"), "v1.0",
                                  "bench-model", self.tick())

    def proof(self, score: int = 654_321):
        return build_proof_record(self.sender, self.digest("dataset"),
                                  self.digest("model"), score,
                                  self.digest("task"), self.tick())

    def check_record(self, name, record, expected_valid):
        with self.report.latency.time("record", expected_valid):
            error = admit(record)
        self.report.record_case(CaseResult(
            "record", name, expected_valid, error is None,
            error.kind.value if error else ""))

    def check_block(self, name, block, prev, expected_valid):
        with self.report.latency.time("block", expected_valid):
            error = validate_block(block, prev)
        self.report.record_case(CaseResult(
            "block", name, expected_valid, error is None,
            error.value if error else ""))

    def check_hub(self, name, hub, packet, expected_valid):
        with self.report.latency.time("hub", expected_valid):
            verdict = hub.hub_ingest(packet)
        self.report.record_case(CaseResult(
            "hub", name, expected_valid, verdict.routed,
            "" if verdict.routed else verdict.reason))

    def check_pool(self, name, pool, record, expected_valid):
        with self.report.latency.time("pool", expected_valid):
            result = pool.insert(record)
        self.report.record_case(CaseResult(
            "pool", name, expected_valid, result.ok,
            "" if result.ok else result.status.value))


def invalid_record_fixtures(bench: _Bench) -> list:
    """8 个无效记录：每种 schema 违规一个，另加三种签名篡改"""
    data = bench.data()
    model = bench.model()
    proof = bench.proof()
    return [
        ("missing_field", replace(data, content_hash=None)),
        ("bad_hash_length", replace(model, model_hash=model.model_hash[:31])),
        ("bad_type", replace(data, timestamp=str(data.timestamp))),
        ("bad_model_version", replace(model, model_version="v 1.0!")),
        ("score_out_of_range", replace(proof, validation_score=1_000_001)),
        ("tampered_signature",
         replace(data, signature=bytes([data.signature[0] ^ 0x01])
                 + data.signature[1:])),
        ("wrong_sender_key",
         replace(model, sender_public_key=bench.other.public_key)),
        ("tampered_content", replace(proof, validation_score=123_456)),
    ]


def _body(records) -> BlockBody:
    # 不经 split_lanes：车道里的记录第一次被校验发生在 validate_block 内
    lanes = {t: [] for t in RecordType}
    for record in records:
        lanes[record.RECORD_TYPE].append(record)
    return BlockBody(
        data_lane=tuple(sorted(lanes[RecordType.DATA], key=lane_sort_key)),
        model_lane=tuple(sorted(lanes[RecordType.MODEL], key=lane_sort_key)),
        proof_lane=tuple(sorted(lanes[RecordType.PROOF], key=lane_sort_key)),
    )


def _block_cases(bench: _Bench):
    """2 个有效区块（高度 1、2 正确链接）+ 5 个篡改区块"""
    genesis = genesis_block()

    def fresh(height, prev_hash):
        body = _body([bench.data(), bench.model(), bench.proof()])
        return assemble_block(height, prev_hash, bench.tick(), body,
                              bench.proposer)

    first = fresh(1, genesis.block_hash)
    second = fresh(2, first.block_hash)
    valid = [("linked_height_1", first, genesis),
             ("linked_height_2", second, first)]

    wrong_height = fresh(5, first.block_hash)
    wrong_prev = fresh(2, hash_bytes(b"not-the-parent"))
    data_tamper = fresh(2, first.block_hash)
    data_tamper = Block(data_tamper.header, replace(
        data_tamper.body, data_lane=(bench.data(),)))
    proof_tamper = fresh(2, first.block_hash)
    proof_tamper = Block(proof_tamper.header, replace(
        proof_tamper.body, proof_lane=(bench.proof(),)))
    forged = fresh(2, first.block_hash)
    forged = Block(replace(forged.header,
                           signature=bytes(reversed(forged.header.signature))),
                   forged.body)
    invalid = [("bad_height", wrong_height, first),
               ("bad_prev_hash", wrong_prev, first),
               ("tampered_data_lane", data_tamper, first),
               ("tampered_proof_lane", proof_tamper, first),
               ("forged_signature", forged, first)]
    return valid, invalid


def _hub(pool: Mempool) -> InformationHub:
    hub = InformationHub(pool)
    for kind in (PacketKind.HEARTBEAT_PONG, PacketKind.AGENT_REQUEST):
        hub.register(kind, lambda packet: "handled")
    return hub


def _record_packet(bench: _Bench, record) -> Packet:
    kind = {"DATA": PacketKind.NEW_DATA_RECORD,
            "MODEL": PacketKind.NEW_MODEL_RECORD,
            "PROOF": PacketKind.NEW_PROOF_RECORD}[record.RECORD_TYPE.value]
    return Packet(kind, bench.sender.node_id, bench.proposer.node_id,
                  {"record": record_to_json(record)})


def _run_suite(name: str, record_valid: int, hub_valid: int) -> MetricsReport:
    report = MetricsReport(name=name)
    bench = _Bench(report)

    # 记录：有效用例轮流使用三种类型
    makers = (bench.data, bench.model, bench.proof)
    valid_records = []
    for i in range(record_valid):
        record = makers[i % 3]()
        valid_records.append(record)
        bench.check_record(f"valid_{i}", record, True)
    for fixture, record in invalid_record_fixtures(bench):
        bench.check_record(fixture, record, False)

    valid_blocks, invalid_blocks = _block_cases(bench)
    for fixture, block, prev in valid_blocks:
        bench.check_block(fixture, block, prev, True)
    for fixture, block, prev in invalid_blocks:
        bench.check_block(fixture, block, prev, False)

    # 中枢：三种记录包 + 两种路由到处理函数的包，其余为大批量记录包
    hub = _hub(Mempool(capacity=max(hub_valid, 16)))
    node = bench.sender.node_id
    routed = [
        ("new_data_record", _record_packet(bench, bench.data())),
        ("new_model_record", _record_packet(bench, bench.model())),
        ("new_proof_record", _record_packet(bench, bench.proof())),
        ("heartbeat_pong",
         Packet(PacketKind.HEARTBEAT_PONG, node, node, {"round": 1})),
        ("agent_request",
         Packet(PacketKind.AGENT_REQUEST, node, node,
                {"request_id": 1, "request": {}})),
    ]
    for i in range(max(hub_valid - len(routed), 0)):
        routed.append((f"bulk_{i}",
                       _record_packet(bench, makers[i % 3]())))
    for fixture, packet in routed[:hub_valid]:
        bench.check_hub(fixture, hub, packet, True)
    forged = bench.proof()
    forged = replace(forged, signature=bytes(64))
    bench.check_hub("forged_proof_record", hub,
                    _record_packet(bench, forged), False)
    bench.check_hub("malformed_payload", hub,
                    Packet(PacketKind.NEW_DATA_RECORD, node, node,
                           {"records": []}), False)

    # 内存池：三条已校验记录入池，再重复插入一条
    pool = Mempool()
    for i, record in enumerate(valid_records[:3]):
        bench.check_pool(f"insert_{record.RECORD_TYPE.value.lower()}", pool,
                         record, True)
    bench.check_pool("duplicate_insert", pool, valid_records[0], False)

    logger.info("%s: %s 个有效 / %s 个无效用例，检出率 %.0f%%，误报率 %.0f%%",
                name, report.valid_cases, report.invalid_cases,
                report.detection_rate * 100, report.false_positive_rate * 100)
    return report


def run_baseline_suite() -> MetricsReport:
    """基线：记录 3/8、区块 2/5、中枢 5/2、内存池 3/1"""
    return _run_suite("baseline", record_valid=3, hub_valid=5)


def run_combined_suite() -> MetricsReport:
    """组合：在基线之上放大记录与中枢的有效用例（共 2013 有效 / 16 无效）"""
    return _run_suite("combined", record_valid=COMBINED_VALID["record"],
                      hub_valid=COMBINED_VALID["hub"])


def run_scale_suite() -> MetricsReport:
    """规模：只有大批量有效记录校验与中枢提交"""
    report = MetricsReport(name="scale")
    bench = _Bench(report)
    makers = (bench.data, bench.model, bench.proof)
    for i in range(SCALE_VALID["record"]):
        bench.check_record(f"valid_{i}", makers[i % 3](), True)
    hub = _hub(Mempool(capacity=SCALE_VALID["hub"]))
    for i in range(SCALE_VALID["hub"]):
        bench.check_hub(f"bulk_{i}", hub,
                        _record_packet(bench, makers[i % 3]()), True)
    return report

