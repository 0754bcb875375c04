from dataclasses import replace

import pytest

from crypto_identity import KeyPair, hash_bytes
from hub_network import PacketKind, SimNetwork
from inference_engine import execute, make_proof
from scenario import Behavior, SecondarySpec
from simulator import SecondaryNode
from trust_harness import (
    Evidence,
    EvidenceKind,
    HarnessParams,
    HarnessReport,
    NodeProfile,
    RoundEvidence,
    Tier,
    TrustHarness,
    anomaly_phase,
    heartbeat_phase,
    trust_update_phase,
)

NODE = hash_bytes(b"node")
OK = Evidence(EvidenceKind.PROOF_OK)
BAD = Evidence(EvidenceKind.PROOF_ANOMALY)


def _drive(profiles, pattern, params=None):
    """按 "o"（成功）/ "x"（失败）/ "-"（无事件）逐轮喂证据，返回每轮迁移"""
    params = params or HarnessParams()
    history = []
    for round_no, mark in enumerate(pattern, start=1):
        evidence = RoundEvidence(profiles)
        if mark != "-":
            evidence.add(NODE, OK if mark == "o" else BAD)
        history.append(trust_update_phase(profiles, evidence, params,
                                          round_no))
    return history


def test_promotion_after_tau_p_successes():
    profiles = {NODE: NodeProfile(NODE)}
    history = _drive(profiles, "ooooo")
    assert all(h == [] for h in history[:4])
    (t,) = history[4]
    assert (t.from_tier, t.to_tier, t.round) == \
        (Tier.NON_TRUSTED, Tier.TRUSTED, 5)
    assert profiles[NODE].consecutive_successes == 0


def test_demotion_chain_to_excluded():
    profiles = {NODE: NodeProfile(NODE, Tier.TRUSTED)}
    history = _drive(profiles, "xxxx")
    assert [h[0].to_tier for h in history if h] == \
        [Tier.NON_TRUSTED, Tier.EXCLUDED]
    assert [h[0].round for h in history if h] == [2, 4]


def test_excluded_is_absorbing():
    profiles = {NODE: NodeProfile(NODE, Tier.EXCLUDED)}
    history = _drive(profiles, "oooooooooo")
    assert all(h == [] for h in history)
    assert profiles[NODE].tier is Tier.EXCLUDED
    assert profiles[NODE].consecutive_successes == 0


def test_alternating_outcomes_stay_put():
    profiles = {NODE: NodeProfile(NODE, Tier.TRUSTED)}
    assert all(h == [] for h in _drive(profiles, "xoxoxoxo"))
    assert profiles[NODE].tier is Tier.TRUSTED


def test_quiet_rounds_keep_counters():
    profiles = {NODE: NodeProfile(NODE)}
    history = _drive(profiles, "oo--ooo")
    assert history[-1][0].to_tier is Tier.TRUSTED


def test_any_failure_counts_the_round_as_failed():
    profiles = {NODE: NodeProfile(NODE, Tier.TRUSTED)}
    for round_no in (1, 2):
        evidence = RoundEvidence(profiles)
        evidence.add(NODE, OK)
        evidence.add(NODE, Evidence(EvidenceKind.TIMEOUT))
        trust_update_phase(profiles, evidence, HarnessParams(), round_no)
    assert profiles[NODE].tier is Tier.NON_TRUSTED


def test_custom_thresholds():
    params = HarnessParams(tau_d=1, tau_p=2)
    profiles = {NODE: NodeProfile(NODE)}
    history = _drive(profiles, "oox", params)
    assert [h[0].to_tier for h in history if h] == \
        [Tier.TRUSTED, Tier.NON_TRUSTED]


@pytest.mark.parametrize("kwargs", [
    {"tau_d": 0},
    {"tau_p": 0},
    {"heartbeat_timeout_ms": -1},
    {"anomaly_tolerance": -5},
])
def test_invalid_params(kwargs):
    with pytest.raises(ValueError):
        HarnessParams(**kwargs)


def test_evidence_for_unknown_node():
    with pytest.raises(KeyError):
        RoundEvidence({}).add(NODE, OK)


def test_anomaly_phase(task, backend):
    honest_key = KeyPair.from_seed("honest")
    cheat_key = KeyPair.from_seed("cheat")
    profiles = {k.node_id: NodeProfile(k.node_id)
                for k in (honest_key, cheat_key)}
    result = execute(task, backend=backend)
    good = make_proof(result, task, honest_key, 10)
    score = result.validation_score
    shifted = score + 3 if score + 3 <= 1_000_000 else score - 3
    bad = make_proof(replace(result, validation_score=shifted), task,
                     cheat_key, 10)
    stranger = KeyPair.from_seed("stranger")
    proofs = [(honest_key.node_id, good), (cheat_key.node_id, bad),
              (stranger.node_id, make_proof(result, task, stranger, 10))]
    tasks = {task.task_id: task}

    evidence = anomaly_phase(profiles, proofs, tasks, HarnessParams(),
                             backend=backend)
    assert [e.kind for e in evidence.of(honest_key.node_id)] == \
        [EvidenceKind.PROOF_OK]
    (anomaly,) = evidence.of(cheat_key.node_id)
    assert anomaly.kind is EvidenceKind.PROOF_ANOMALY
    assert (anomaly.submitted, anomaly.recomputed) == (shifted, score)
    assert stranger.node_id not in evidence.events

    lenient = anomaly_phase(profiles, proofs, tasks,
                            HarnessParams(anomaly_tolerance=3),
                            backend=backend)
    assert lenient.of(cheat_key.node_id)[0].kind is EvidenceKind.PROOF_OK

    unknown = anomaly_phase(profiles, proofs[:1], {}, HarnessParams(),
                            backend=backend)
    assert unknown.of(honest_key.node_id)[0].kind is \
        EvidenceKind.PROOF_ANOMALY


class _Pinger:
    """在网络上注册一个探测方，PONG 写回 harness"""

    def __init__(self, net, harness):
        self.key = KeyPair.from_seed("pinger")
        self.pongs = []

        def handle(packet):
            if packet.kind is PacketKind.HEARTBEAT_PONG:
                harness.record_pong(packet.sender_id, net.clock)
                self.pongs.append(packet.sender_id)
            return "pong"

        net.register(self.key.node_id, handle)

    @property
    def node_id(self):
        return self.key.node_id


def _heartbeat_cluster(backend):
    net = SimNetwork(base_latency_ms=5, jitter_ms=0)
    harness = TrustHarness()
    pinger = _Pinger(net, harness)
    specs = {
        "ok": SecondarySpec(),
        "crash": SecondarySpec(Behavior.CRASHER, crash_at_round=0),
        "slow": SecondarySpec(Behavior.LAGGARD, delay_ms=1_000),
        "gone": SecondarySpec(initial_tier=Tier.EXCLUDED),
    }
    nodes = {}
    for label, spec in specs.items():
        node = SecondaryNode(label, spec, net, backend)
        harness.add_node(node.node_id, spec.initial_tier)
        nodes[label] = node
    return net, harness, pinger, nodes


def test_heartbeat_phase(backend):
    net, harness, pinger, nodes = _heartbeat_cluster(backend)
    reassigned = []
    evidence = heartbeat_phase(harness.profiles, net, pinger.node_id,
                               harness.params, 1, reassigned.append)
    misses = {n for n, _ in evidence.kinds(EvidenceKind.HEARTBEAT_MISS)}
    assert misses == {nodes["crash"].node_id, nodes["slow"].node_id}
    assert set(reassigned) == misses
    assert nodes["gone"].node_id not in pinger.pongs
    assert harness.profiles[nodes["ok"].node_id].last_heartbeat == 10
    assert harness.profiles[nodes["crash"].node_id].last_heartbeat == -1


def test_run_round_phases_and_report(backend, task):
    net, harness, pinger, nodes = _heartbeat_cluster(backend)
    ok_node = nodes["ok"]
    proof = make_proof(execute(task, backend=backend), task, ok_node.key, 1)
    timeout = Evidence(EvidenceKind.TIMEOUT, task.task_id)
    reports = []
    for round_no in (1, 2):
        reports.append(harness.run_round(
            net, [(ok_node.node_id, proof)], {task.task_id: task},
            prober_id=pinger.node_id, round_no=round_no,
            collect_timeouts=lambda: [(nodes["slow"].node_id, timeout)],
            backend=backend))
    assert harness.phase_log == [
        (1, "heartbeat"), (1, "anomaly"), (1, "trust_update"),
        (2, "heartbeat"), (2, "anomaly"), (2, "trust_update"),
    ]
    first, second = reports
    assert first.transitions == []
    assert {t.node_id for t in second.transitions} == \
        {nodes["crash"].node_id, nodes["slow"].node_id}
    assert harness.tier_of(nodes["crash"].node_id) is Tier.EXCLUDED
    assert harness.tier_of(ok_node.node_id) is Tier.NON_TRUSTED
    assert len(second.timeouts) == 1
    assert not second.is_quiet()

    restored = HarnessReport.from_json(second.to_json())
    assert restored.to_json() == second.to_json()
    assert restored.transitions[0].round == 2


def test_excluded_nodes_drop_out_of_routing(backend):
    net, harness, pinger, nodes = _heartbeat_cluster(backend)
    for round_no in (1, 2):
        harness.run_round(net, [], {}, prober_id=pinger.node_id,
                          round_no=round_no, backend=backend)
    assert harness.nodes_in(Tier.EXCLUDED) == sorted(
        n.node_id for n in (nodes["crash"], nodes["slow"], nodes["gone"]))
    assert harness.nodes_in(Tier.NON_TRUSTED) == [nodes["ok"].node_id]
    assert HarnessReport(round=3).is_quiet()
