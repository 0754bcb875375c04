# scenario.py
# 场景配置：主节点数量、次级节点行为与初始信任等级、网络与协议参数；JSON 读写

import enum
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace

from consensus import ConsensusParams
from trust_harness import HarnessParams, Tier

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """场景配置不一致"""


class Behavior(enum.Enum):
    HONEST = "Honest"
    FABRICATOR = "Fabricator"
    LAGGARD = "Laggard"
    CRASHER = "Crasher"
    SIGNATURE_FORGER = "SignatureForger"


@dataclass(frozen=True)
class SecondarySpec:
    behavior: Behavior = Behavior.HONEST
    initial_tier: Tier = Tier.NON_TRUSTED
    delta: int = 0              # Fabricator：分数偏移（百万分之一单位）
    delay_ms: int = 0           # Laggard：结果与心跳的额外延迟
    crash_at_round: int = 0     # Crasher：从这一轮起不再响应

    @property
    def injects_invalid(self) -> bool:
        return self.behavior in (Behavior.FABRICATOR,
                                 Behavior.SIGNATURE_FORGER)

    def to_json(self) -> dict:
        out = {"behavior": self.behavior.value,
               "initial_tier": self.initial_tier.value}
        if self.behavior is Behavior.FABRICATOR:
            out["delta"] = self.delta
        elif self.behavior is Behavior.LAGGARD:
            out["delay_ms"] = self.delay_ms
        elif self.behavior is Behavior.CRASHER:
            out["crash_at_round"] = self.crash_at_round
        return out


@dataclass(frozen=True)
class NetParams:
    base_latency_ms: int = 5
    jitter_ms: int = 5
    loss_rate: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    masters: int = 3
    dishonest_masters: int = 0
    secondaries: tuple = ()
    rounds: int = 5
    requests_per_round: int = 4
    round_ms: int = 1000         # 每轮占用的最短仿真时间
    net: NetParams = field(default_factory=NetParams)
    consensus: ConsensusParams = field(default_factory=ConsensusParams)
    harness: HarnessParams = field(default_factory=HarnessParams)

    def validate(self):
        if self.masters < 1:
            raise ConfigError("masters 必须 ≥ 1")
        if self.dishonest_masters < 0 \
                or self.dishonest_masters > (self.masters - 1) // 2:
            raise ConfigError(
                f"{self.masters} 个主节点最多容忍 {(self.masters - 1) // 2} "
                f"个不诚实主节点")
        try:
            self.consensus.quorum_for(self.masters)
        except ValueError as e:
            raise ConfigError(str(e))
        if not self.secondaries:
            raise ConfigError("至少需要一个次级节点")
        if self.rounds < 1 or self.requests_per_round < 0 \
                or self.round_ms < 0:
            raise ConfigError(
                "rounds 必须 ≥ 1，requests_per_round / round_ms 不能为负")
        if not 0 <= self.net.loss_rate < 1:
            raise ConfigError("loss_rate 必须在 [0, 1) 内")
        if self.net.base_latency_ms < 0 or self.net.jitter_ms < 0:
            raise ConfigError("延迟不能为负")
        for i, spec in enumerate(self.secondaries):
            if spec.behavior is Behavior.FABRICATOR and spec.delta < 1:
                raise ConfigError(f"secondaries[{i}]: Fabricator 的 delta 必须 ≥ 1")
            if spec.behavior is Behavior.LAGGARD and spec.delay_ms < 0:
                raise ConfigError(f"secondaries[{i}]: delay_ms 不能为负")
            if spec.behavior is Behavior.CRASHER and spec.crash_at_round < 1:
                raise ConfigError(
                    f"secondaries[{i}]: crash_at_round 必须 ≥ 1")
            if spec.initial_tier is Tier.EXCLUDED:
                raise ConfigError(f"secondaries[{i}]: 初始等级不能是 Excluded")
        return self

    def with_seed(self, seed: int) -> "Scenario":
        """同时替换网络种子与抽查种子"""
        return replace(self, net=replace(self.net, seed=seed),
                       consensus=replace(self.consensus, rng_seed=seed))

    @property
    def seed(self) -> int:
        return self.net.seed

    def to_json(self) -> dict:
        consensus = asdict(self.consensus)
        consensus["audit_fraction"] = str(self.consensus.audit_fraction)
        return {
            "name": self.name,
            "masters": self.masters,
            "dishonest_masters": self.dishonest_masters,
            "secondaries": [s.to_json() for s in self.secondaries],
            "rounds": self.rounds,
            "requests_per_round": self.requests_per_round,
            "round_ms": self.round_ms,
            "net": asdict(self.net),
            "consensus": consensus,
            "harness": asdict(self.harness),
        }


def _params(cls, data, label):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{label} 必须是对象")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{label} 有未知字段: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{label}: {e}")


def secondary_from_json(data) -> SecondarySpec:
    if isinstance(data, str):
        data = {"behavior": data}
    if not isinstance(data, dict):
        raise ConfigError("次级节点配置必须是对象")
    try:
        behavior = Behavior(data.get("behavior", "Honest"))
    except ValueError:
        raise ConfigError(f"未知行为: {data.get('behavior')}")
    try:
        tier = Tier(data.get("initial_tier", "NonTrusted"))
    except ValueError:
        raise ConfigError(f"未知信任等级: {data.get('initial_tier')}")
    try:
        return SecondarySpec(
            behavior=behavior,
            initial_tier=tier,
            delta=int(data.get("delta", 0)),
            delay_ms=int(data.get("delay_ms", 0)),
            crash_at_round=int(data.get("crash_at_round", 0)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))


def scenario_from_json(data: dict) -> Scenario:
    """解析并校验场景；secondaries 支持 {"count": n, ...} 的简写"""
    if not isinstance(data, dict):
        raise ConfigError("场景必须是 JSON 对象")
    secondaries = []
    for item in data.get("secondaries", []):
        count = item.get("count", 1) if isinstance(item, dict) else 1
        if not isinstance(count, int) or count < 0:
            raise ConfigError("count 必须是非负整数")
        spec = secondary_from_json(
            {k: v for k, v in item.items() if k != "count"}
            if isinstance(item, dict) else item)
        secondaries.extend([spec] * count)
    try:
        scenario = Scenario(
            name=str(data.get("name", "scenario")),
            masters=int(data.get("masters", 3)),
            dishonest_masters=int(data.get("dishonest_masters", 0)),
            secondaries=tuple(secondaries),
            rounds=int(data.get("rounds", 5)),
            requests_per_round=int(data.get("requests_per_round", 4)),
            round_ms=int(data.get("round_ms", 1000)),
            net=_params(NetParams, data.get("net"), "net"),
            consensus=_params(ConsensusParams, data.get("consensus"),
                              "consensus"),
            harness=_params(HarnessParams, data.get("harness"), "harness"),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))
    return scenario.validate()


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(f"无法读取场景文件 {path}: {e}")
    scenario = scenario_from_json(data)
    logger.info("载入场景 %s：%s 个主节点，%s 个次级节点，%s 轮",
                scenario.name, scenario.masters, len(scenario.secondaries),
                scenario.rounds)
    return scenario
