import json
from fractions import Fraction
from pathlib import Path

import pytest

from scenario import (
    Behavior,
    ConfigError,
    load_scenario,
    scenario_from_json,
)
from trust_harness import Tier

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

BASE = {
    "name": "unit",
    "masters": 3,
    "rounds": 2,
    "secondaries": [{"behavior": "Honest", "count": 2}],
}


def _with(**changes):
    return {**BASE, **changes}


def test_defaults_and_count_shorthand():
    scenario = scenario_from_json(_with(secondaries=[
        {"behavior": "Honest", "initial_tier": "Trusted", "count": 2},
        "Honest",
        {"behavior": "Fabricator", "delta": 10},
        {"behavior": "Laggard", "count": 0, "delay_ms": 10},
    ]))
    assert len(scenario.secondaries) == 4
    assert [s.initial_tier for s in scenario.secondaries[:2]] == \
        [Tier.TRUSTED, Tier.TRUSTED]
    assert scenario.secondaries[3].behavior is Behavior.FABRICATOR
    assert scenario.round_ms == 1000
    assert scenario.requests_per_round == 4
    assert scenario.consensus.audit_fraction == Fraction(1, 5)


def test_json_round_trip():
    scenario = scenario_from_json(_with(
        consensus={"audit_fraction": 0.3, "score_tolerance": 2},
        harness={"tau_d": 3},
        net={"loss_rate": 0.1, "seed": 9},
        dishonest_masters=1,
    ))
    assert scenario.consensus.audit_fraction == Fraction(3, 10)
    assert scenario_from_json(scenario.to_json()) == scenario


@pytest.mark.parametrize("changes", [
    {"masters": 0},
    {"masters": 3, "dishonest_masters": 2},
    {"masters": 4, "dishonest_masters": 2},
    {"secondaries": []},
    {"rounds": 0},
    {"round_ms": -1},
    {"net": {"loss_rate": 1.0}},
    {"net": {"jitter_ms": -2}},
    {"net": {"bandwidth": 10}},
    {"consensus": {"audit_fraction": 0}},
    {"consensus": {"quorum": 1}},
    {"harness": {"tau_p": 0}},
    {"secondaries": [{"behavior": "Byzantine"}]},
    {"secondaries": [{"behavior": "Honest", "initial_tier": "Excluded"}]},
    {"secondaries": [{"behavior": "Fabricator"}]},
    {"secondaries": [{"behavior": "Crasher", "crash_at_round": 0}]},
    {"secondaries": [{"behavior": "Honest", "count": -1}]},
    {"secondaries": [42]},
    {"masters": "three"},
])
def test_invalid_scenarios(changes):
    with pytest.raises(ConfigError):
        scenario_from_json(_with(**changes))


def test_not_an_object():
    with pytest.raises(ConfigError):
        scenario_from_json([])


def test_with_seed_changes_both_seeds():
    scenario = scenario_from_json(BASE).with_seed(11)
    assert scenario.seed == 11
    assert scenario.net.seed == 11
    assert scenario.consensus.rng_seed == 11


def test_load_scenario(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(BASE), encoding="utf-8")
    assert load_scenario(str(path)).name == "unit"
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_scenario(str(broken))
    with pytest.raises(ConfigError):
        load_scenario(str(tmp_path / "missing.json"))


def test_bundled_scenarios_load():
    for path in sorted(SCENARIOS.glob("*.json")):
        assert load_scenario(str(path)).name == path.stem
