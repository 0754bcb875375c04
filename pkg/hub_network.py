# hub_network.py
# 信息中枢（类型化数据包的入口与路由）+ 确定性的点对点仿真网络

import enum
import logging
import random
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import simpy

from mempool import InsertStatus, Mempool
from records import RecordType, ValidationError, admit, record_from_json
from utils import to_hex

logger = logging.getLogger(__name__)


class PacketKind(enum.Enum):
    NEW_DATA_RECORD = "NEW_DATA_RECORD"
    NEW_MODEL_RECORD = "NEW_MODEL_RECORD"
    NEW_PROOF_RECORD = "NEW_PROOF_RECORD"
    TASK_ASSIGN = "TASK_ASSIGN"
    TASK_RESULT = "TASK_RESULT"
    HEARTBEAT_PING = "HEARTBEAT_PING"
    HEARTBEAT_PONG = "HEARTBEAT_PONG"
    VOTE_REQUEST = "VOTE_REQUEST"
    VOTE_RESPONSE = "VOTE_RESPONSE"
    BLOCK_ANNOUNCE = "BLOCK_ANNOUNCE"
    AGENT_REQUEST = "AGENT_REQUEST"
    AGENT_RESPONSE = "AGENT_RESPONSE"


RECORD_KINDS = {
    PacketKind.NEW_DATA_RECORD: RecordType.DATA,
    PacketKind.NEW_MODEL_RECORD: RecordType.MODEL,
    PacketKind.NEW_PROOF_RECORD: RecordType.PROOF,
}

# 每种包的 payload 必需键及类型
PAYLOAD_SCHEMA = {
    PacketKind.NEW_DATA_RECORD: {"record": dict},
    PacketKind.NEW_MODEL_RECORD: {"record": dict},
    PacketKind.NEW_PROOF_RECORD: {"record": dict},
    PacketKind.TASK_ASSIGN: {"task": dict, "attempt": int},
    PacketKind.TASK_RESULT: {"task_id": str, "result": dict, "proof": dict},
    PacketKind.HEARTBEAT_PING: {"round": int},
    PacketKind.HEARTBEAT_PONG: {"round": int},
    PacketKind.VOTE_REQUEST: {"round": int, "block": dict},
    PacketKind.VOTE_RESPONSE: {"vote": dict},
    PacketKind.BLOCK_ANNOUNCE: {"round": int, "block": dict, "votes": list},
    PacketKind.AGENT_REQUEST: {"request_id": int, "request": dict},
    PacketKind.AGENT_RESPONSE: {"request_id": int, "status": str},
}


class MalformedPacket(Exception):
    """payload 与包类型不匹配"""


class UnknownRecipient(Exception):
    """接收方未在网络中注册"""


@dataclass(frozen=True)
class Packet:
    kind: PacketKind
    sender_id: bytes
    recipient_id: bytes
    payload: dict = field(default_factory=dict)
    sent_at: int = 0

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "sender_id": to_hex(self.sender_id),
            "recipient_id": to_hex(self.recipient_id),
            "payload": self.payload,
            "sent_at": self.sent_at,
        }


def decode_payload(packet: Packet):
    """按包类型校验 payload；记录类包返回解码后的记录，其余返回 payload"""
    schema = PAYLOAD_SCHEMA.get(packet.kind)
    payload = packet.payload
    if schema is None or not isinstance(payload, dict):
        raise MalformedPacket(f"无法识别的包: {packet.kind}")
    for key, expected in schema.items():
        value = payload.get(key)
        if isinstance(value, bool) or not isinstance(value, expected):
            raise MalformedPacket(f"{packet.kind.value} 缺少或错误的字段 {key}")
    record_type = RECORD_KINDS.get(packet.kind)
    if record_type is None:
        return payload
    data = payload["record"]
    if data.get("type", record_type.value) != record_type.value:
        raise MalformedPacket(f"{packet.kind.value} 携带了 {data.get('type')}")
    try:
        return record_from_json(data, record_type)
    except (TypeError, ValueError) as e:
        raise MalformedPacket(f"记录解码失败: {e}")


@dataclass(frozen=True)
class HubVerdict:
    routed: bool
    reason: str = "routed"
    error: Optional[ValidationError] = None

    def label(self) -> str:
        return "routed" if self.routed else f"rejected:{self.reason}"


class InformationHub:
    """
    节点的消息入口：记录类包先准入再入内存池，
    其它类型按 kind 分发给共识 / harness 的处理函数。
    """

    def __init__(self, mempool: Mempool, on_record: Optional[Callable] = None):
        self.mempool = mempool
        self.on_record = on_record
        self._handlers = {}
        self.routed = 0
        self.rejected = 0

    def register(self, kind: PacketKind, handler: Callable):
        self._handlers[kind] = handler

    def _reject(self, reason, error=None) -> HubVerdict:
        self.rejected += 1
        return HubVerdict(False, reason, error)

    def hub_ingest(self, packet: Packet) -> HubVerdict:
        try:
            decoded = decode_payload(packet)
        except MalformedPacket as e:
            logger.warning("中枢拒绝畸形包: %s", e)
            return self._reject("MalformedPacket")

        if packet.kind in RECORD_KINDS:
            error = admit(decoded)
            if error:
                logger.warning("中枢拒绝记录: %s %s",
                               error.kind.value, error.detail)
                return self._reject(error.kind.value, error)
            result = self.mempool.insert(decoded)
            if result.status is InsertStatus.POOL_FULL:
                return self._reject("PoolFull")
            if not result.ok:
                return self._reject(result.error.kind.value, result.error)
            if self.on_record:
                self.on_record(decoded, packet)
            self.routed += 1
            return HubVerdict(True)

        handler = self._handlers.get(packet.kind)
        if handler is None:
            return self._reject("NoRoute")
        reason = handler(packet) or "routed"
        self.routed += 1
        return HubVerdict(True, reason)


@dataclass(frozen=True)
class Delivery:
    t: int
    packet: Packet
    verdict: str


class SimNetwork:
    """
    离散事件仿真网络（simpy 事件循环）。
    同一 (场景, 种子) 得到完全相同的事件序列；同一时刻的事件按插入顺序投递。
    """

    def __init__(self, base_latency_ms: int = 5, jitter_ms: int = 5,
                 loss_rate: float = 0.0, seed: int = 0):
        self.env = simpy.Environment()
        self.rng = random.Random(seed)
        self.base_latency_ms = base_latency_ms
        self.jitter_ms = jitter_ms
        self.loss_rate = loss_rate
        self.link_latency = {}
        self.inboxes = {}
        self._handlers = {}
        self.trace = []
        self.sent = 0
        self.dropped = 0
        self.delivered = 0
        self._last = None

    @property
    def clock(self) -> int:
        return self.env.now

    def register(self, node_id: bytes, handler: Optional[Callable] = None):
        """handler(packet) -> 判定字符串；在事件循环内被调用"""
        self.inboxes.setdefault(node_id, deque())
        self._handlers[node_id] = handler

    def set_link_latency(self, a: bytes, b: bytes, latency_ms: int):
        self.link_latency[(a, b)] = latency_ms
        self.link_latency[(b, a)] = latency_ms

    def send(self, packet: Packet, extra_delay_ms: int = 0) -> bool:
        """按丢包率决定是否投递；投递时刻 = 当前时钟 + 基础延迟 + 抖动"""
        if packet.recipient_id not in self.inboxes:
            raise UnknownRecipient(to_hex(packet.recipient_id))
        self.sent += 1
        packet = replace(packet, sent_at=self.env.now)
        if self.rng.random() < self.loss_rate:
            self.dropped += 1
            logger.debug("丢包 %s", packet.kind.value)
            return False
        latency = self.link_latency.get(
            (packet.sender_id, packet.recipient_id), self.base_latency_ms)
        jitter = self.rng.randint(0, self.jitter_ms) if self.jitter_ms else 0
        event = self.env.timeout(latency + jitter + extra_delay_ms,
                                 value=packet)
        event.callbacks.append(self._deliver)
        return True

    def _deliver(self, event):
        packet = event.value
        self.inboxes[packet.recipient_id].append(packet)
        handler = self._handlers.get(packet.recipient_id)
        verdict = "delivered"
        if handler is not None:
            verdict = handler(packet) or "ok"
        self.delivered += 1
        self.trace.append({
            "t": self.env.now,
            "kind": packet.kind.value,
            "from": to_hex(packet.sender_id),
            "to": to_hex(packet.recipient_id),
            "verdict": verdict,
        })
        self._last = Delivery(self.env.now, packet, verdict)

    def pending(self) -> bool:
        return self.env.peek() != simpy.core.Infinity

    def step(self) -> Optional[Delivery]:
        """推进到最早的事件并投递；没有待投递事件时返回 None"""
        if not self.pending():
            return None
        self._last = None
        self.env.step()
        return self._last

    def run_until_idle(self, max_events: int = 1_000_000) -> int:
        count = 0
        while self.pending() and count < max_events:
            self.step()
            count += 1
        return count

    def advance_to(self, t: int):
        """空闲时把时钟拨到 t"""
        if t > self.env.now:
            self.env.run(until=t)
