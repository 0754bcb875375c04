import sqlite3

import db_utils
from scenario import scenario_from_json
from simulator import Simulation


def _result():
    scenario = scenario_from_json({
        "name": "db",
        "masters": 3,
        "rounds": 2,
        "requests_per_round": 2,
        "secondaries": [{"behavior": "Fabricator", "delta": 3,
                         "initial_tier": "Trusted"},
                        {"behavior": "Honest", "count": 2}],
    })
    return Simulation(scenario).run()


def test_save_load_delete(tmp_path):
    path = str(tmp_path / "runs.db")
    result = _result()
    run_id = db_utils.save_run(result.report, result.chain, path=path)

    (row,) = db_utils.list_runs(path)
    assert row["id"] == run_id
    assert row["name"] == "db"
    assert row["kind"] == "scenario"
    assert row["committed_blocks"] == result.report.committed_blocks

    run = db_utils.load_run(run_id, path)
    assert run["metrics"] == result.report.to_json()
    assert [b["block_hash"] for b in run["blocks"]] == \
        [b["block_hash"] for b in result.chain]
    assert [(t["round"], t["to_tier"]) for t in run["transitions"]] == \
        [(t["round"], t["to"]) for t in result.report.harness_transitions]

    db_utils.delete_run(run_id, path)
    assert db_utils.load_run(run_id, path) is None
    assert db_utils.list_runs(path) == []


def test_runs_listed_newest_first(tmp_path):
    path = str(tmp_path / "runs.db")
    report = _result().report
    first = db_utils.save_run(report, kind="baseline", path=path)
    second = db_utils.save_run(report, kind="combined", path=path)
    assert [r["id"] for r in db_utils.list_runs(path)] == [second, first]


def test_upgrade_adds_missing_columns(tmp_path):
    path = str(tmp_path / "old.db")
    conn = sqlite3.connect(path)
    conn.execute("CREATE TABLE runs (id INTEGER PRIMARY KEY, name TEXT, "
                 "seed INTEGER, created_at TEXT, valid_cases INTEGER, "
                 "invalid_cases INTEGER, detection_rate REAL, "
                 "false_positive_rate REAL, committed_blocks INTEGER, "
                 "chain_valid INTEGER, metrics_json TEXT)")
    conn.commit()
    conn.close()
    conn, c = db_utils.init_db(path)
    c.execute("PRAGMA table_info(runs)")
    cols = {col[1] for col in c.fetchall()}
    conn.close()
    assert {"kind", "passed"} <= cols


def test_env_path(tmp_path, monkeypatch):
    path = tmp_path / "env.db"
    monkeypatch.setenv("POI_DB_PATH", str(path))
    db_utils.init_db()[0].close()
    assert path.exists()
