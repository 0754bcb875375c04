import json
from dataclasses import replace

import pytest

from crypto_identity import KeyPair
from hub_network import (
    InformationHub,
    MalformedPacket,
    Packet,
    PacketKind,
    SimNetwork,
    UnknownRecipient,
    decode_payload,
)
from mempool import Mempool
from records import record_to_json

A = KeyPair.from_seed("hub-a").node_id
B = KeyPair.from_seed("hub-b").node_id
C = KeyPair.from_seed("hub-c").node_id


def _packet(kind, record):
    return Packet(kind, A, B, {"record": record_to_json(record)})


def test_record_packets_enter_pool(data_record, model_record, proof_record):
    pool = Mempool()
    seen = []
    hub = InformationHub(pool, on_record=lambda r, p: seen.append(r))
    for kind, record in ((PacketKind.NEW_DATA_RECORD, data_record),
                         (PacketKind.NEW_MODEL_RECORD, model_record),
                         (PacketKind.NEW_PROOF_RECORD, proof_record)):
        verdict = hub.hub_ingest(_packet(kind, record))
        assert verdict.routed, verdict.reason
    assert len(pool) == 3
    assert seen == [data_record, model_record, proof_record]
    assert hub.routed == 3


def test_hub_rejections(data_record, proof_record):
    hub = InformationHub(Mempool())
    forged = replace(proof_record, signature=bytes(64))
    verdict = hub.hub_ingest(_packet(PacketKind.NEW_PROOF_RECORD, forged))
    assert not verdict.routed
    assert verdict.reason == "BadSignature"
    assert verdict.label() == "rejected:BadSignature"

    wrong_lane = hub.hub_ingest(_packet(PacketKind.NEW_PROOF_RECORD,
                                        data_record))
    assert wrong_lane.reason == "MalformedPacket"

    assert hub.hub_ingest(_packet(PacketKind.NEW_DATA_RECORD,
                                  data_record)).routed
    dup = hub.hub_ingest(_packet(PacketKind.NEW_DATA_RECORD, data_record))
    assert dup.reason == "Duplicate"

    no_route = hub.hub_ingest(Packet(PacketKind.HEARTBEAT_PING, A, B,
                                     {"round": 1}))
    assert no_route.reason == "NoRoute"
    assert hub.rejected == 4


def test_surrogate_text_is_rejected_not_raised(data_record):
    pool = Mempool()
    hub = InformationHub(pool)
    payload = {"record": {**record_to_json(data_record),
                          "metadata": json.loads('"\\ud800"')}}
    verdict = hub.hub_ingest(Packet(PacketKind.NEW_DATA_RECORD, A, B, payload))
    assert not verdict.routed
    assert verdict.reason == "BadType"
    assert len(pool) == 0
    assert hub.rejected == 1


def test_handlers_receive_typed_packets():
    hub = InformationHub(Mempool())
    hub.register(PacketKind.HEARTBEAT_PONG, lambda p: "pong")
    verdict = hub.hub_ingest(Packet(PacketKind.HEARTBEAT_PONG, A, B,
                                    {"round": 3}))
    assert verdict.routed and verdict.reason == "pong"


@pytest.mark.parametrize("kind,payload", [
    (PacketKind.NEW_DATA_RECORD, {"records": []}),
    (PacketKind.TASK_ASSIGN, {"task": {}, "attempt": True}),
    (PacketKind.HEARTBEAT_PING, {"round": "1"}),
    (PacketKind.VOTE_RESPONSE, {}),
])
def test_decode_payload_rejects_malformed(kind, payload):
    with pytest.raises(MalformedPacket):
        decode_payload(Packet(kind, A, B, payload))


def _echo_network(**kwargs):
    net = SimNetwork(**kwargs)
    log = []
    for node in (A, B, C):
        net.register(node, lambda p, log=log: log.append(p) or "ok")
    return net, log


def test_network_delivery_order_and_trace():
    net, log = _echo_network(base_latency_ms=10, jitter_ms=0)
    net.send(Packet(PacketKind.HEARTBEAT_PING, A, B, {"round": 1}))
    net.send(Packet(PacketKind.HEARTBEAT_PING, A, C, {"round": 1}))
    net.send(Packet(PacketKind.HEARTBEAT_PONG, B, A, {"round": 1}),
             extra_delay_ms=5)
    assert net.run_until_idle() == 3
    assert [p.recipient_id for p in log] == [B, C, A]
    assert [e["t"] for e in net.trace] == [10, 10, 15]
    assert net.trace[0]["kind"] == "HEARTBEAT_PING"
    assert net.trace[0]["from"] == A.hex()
    assert net.delivered == 3 and net.sent == 3
    assert net.step() is None


def test_link_latency_override():
    net, _ = _echo_network(base_latency_ms=10, jitter_ms=0)
    net.set_link_latency(A, B, 50)
    net.send(Packet(PacketKind.HEARTBEAT_PING, B, A, {"round": 1}))
    delivery = net.step()
    assert delivery.t == 50
    assert delivery.verdict == "ok"


def test_loss_and_determinism():
    def run(seed):
        net, _ = _echo_network(loss_rate=0.3, seed=seed)
        for i in range(200):
            net.send(Packet(PacketKind.HEARTBEAT_PING, A, B, {"round": i}))
        net.run_until_idle()
        return net.dropped, [(e["t"], e["kind"]) for e in net.trace]

    first = run(4)
    assert first == run(4)
    assert 0 < first[0] < 200
    assert first != run(5)


def test_unknown_recipient():
    net = SimNetwork()
    with pytest.raises(UnknownRecipient):
        net.send(Packet(PacketKind.HEARTBEAT_PING, A, B, {"round": 1}))


def test_advance_to_moves_idle_clock():
    net, _ = _echo_network()
    net.advance_to(1_000)
    assert net.clock == 1_000
    net.advance_to(500)
    assert net.clock == 1_000
