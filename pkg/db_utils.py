import json
import os
import sqlite3

from utils import dump_json

DEFAULT_DB = os.path.join(os.path.dirname(__file__), "poi_runs.db")


def get_db(path=None):
    """获取数据库连接和游标；POI_DB_PATH 可覆盖默认位置"""
    db_path = path or os.environ.get("POI_DB_PATH") or DEFAULT_DB
    conn = sqlite3.connect(db_path, check_same_thread=False)
    conn.row_factory = sqlite3.Row
    return conn, conn.cursor()


# 数据库升级相关函数


def _upgrade_runs_kind(conn, c):
    """升级运行表：早期版本没有 kind / passed 字段"""
    c.execute("PRAGMA table_info(runs)")
    cols = [col[1] for col in c.fetchall()]
    if "kind" not in cols:
        c.execute("ALTER TABLE runs ADD COLUMN kind TEXT DEFAULT 'scenario'")
    if "passed" not in cols:
        c.execute("ALTER TABLE runs ADD COLUMN passed INTEGER DEFAULT 0")
    conn.commit()


def init_db(path=None):
    """初始化数据库"""
    conn, c = get_db(path)
    # 三张表：runs / blocks / transitions
    c.execute(
        """
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY,
            name TEXT,
            seed INTEGER,
            kind TEXT DEFAULT 'scenario',
            passed INTEGER DEFAULT 0,
            created_at TEXT DEFAULT CURRENT_TIMESTAMP,
            valid_cases INTEGER,
            invalid_cases INTEGER,
            detection_rate REAL,
            false_positive_rate REAL,
            committed_blocks INTEGER,
            chain_valid INTEGER,
            metrics_json TEXT
        )
        """
    )
    c.execute(
        """
        CREATE TABLE IF NOT EXISTS blocks (
            id INTEGER PRIMARY KEY,
            run_id INTEGER NOT NULL,
            height INTEGER,
            block_hash TEXT,
            prev_hash TEXT,
            proposer_id TEXT,
            data_count INTEGER,
            model_count INTEGER,
            proof_count INTEGER,
            block_json TEXT,
            FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
        )
        """
    )
    c.execute(
        """
        CREATE TABLE IF NOT EXISTS transitions (
            id INTEGER PRIMARY KEY,
            run_id INTEGER NOT NULL,
            round INTEGER,
            node TEXT,
            from_tier TEXT,
            to_tier TEXT,
            FOREIGN KEY (run_id) REFERENCES runs(id) ON DELETE CASCADE
        )
        """
    )
    _upgrade_runs_kind(conn, c)
    conn.commit()
    return conn, c


def save_run(report, chain=(), kind="scenario", path=None):
    """保存一次运行：指标、已提交区块、信任等级迁移；返回 run_id"""
    conn, c = init_db(path)
    metrics = report.to_json()
    c.execute(
        """
        INSERT INTO runs (name, seed, kind, valid_cases, invalid_cases,
                          detection_rate, false_positive_rate,
                          committed_blocks, chain_valid, passed, metrics_json)
        VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        """,
        (
            report.name,
            report.scenario.get("seed"),
            kind,
            report.valid_cases,
            report.invalid_cases,
            report.detection_rate,
            report.false_positive_rate,
            report.committed_blocks,
            int(report.chain_valid),
            int(report.passed),
            dump_json(metrics),
        ),
    )
    run_id = c.lastrowid
    for block in chain:
        header = block["header"]
        body = block["body"]
        c.execute(
            """
            INSERT INTO blocks (run_id, height, block_hash, prev_hash,
                                proposer_id, data_count, model_count,
                                proof_count, block_json)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
            """,
            (
                run_id,
                header["height"],
                block["block_hash"],
                header["prev_hash"],
                header["proposer_id"],
                len(body["data_lane"]),
                len(body["model_lane"]),
                len(body["proof_lane"]),
                json.dumps(block, sort_keys=True),
            ),
        )
    for t in report.harness_transitions:
        c.execute(
            "INSERT INTO transitions (run_id, round, node, from_tier, to_tier) "
            "VALUES (?, ?, ?, ?, ?)",
            (run_id, t["round"], t["node"], t["from"], t["to"]),
        )
    conn.commit()
    conn.close()
    return run_id


def list_runs(path=None):
    """按时间倒序列出运行记录（不含大字段）"""
    conn, c = init_db(path)
    c.execute(
        """
        SELECT id, name, kind, seed, created_at, valid_cases, invalid_cases,
               detection_rate, false_positive_rate, committed_blocks,
               chain_valid, passed
        FROM runs ORDER BY id DESC
        """
    )
    rows = [dict(r) for r in c.fetchall()]
    conn.close()
    return rows


def load_run(run_id, path=None):
    """读取单次运行：指标 + 区块 + 迁移；不存在返回 None"""
    conn, c = init_db(path)
    c.execute("SELECT * FROM runs WHERE id=?", (run_id,))
    row = c.fetchone()
    if row is None:
        conn.close()
        return None
    run = dict(row)
    run["metrics"] = json.loads(run.pop("metrics_json") or "{}")
    c.execute(
        "SELECT block_json FROM blocks WHERE run_id=? ORDER BY height",
        (run_id,),
    )
    run["blocks"] = [json.loads(r["block_json"]) for r in c.fetchall()]
    c.execute(
        "SELECT round, node, from_tier, to_tier FROM transitions "
        "WHERE run_id=? ORDER BY id",
        (run_id,),
    )
    run["transitions"] = [dict(r) for r in c.fetchall()]
    conn.close()
    return run


def delete_run(run_id, path=None):
    """删除运行及其区块、迁移"""
    conn, c = init_db(path)
    c.execute("DELETE FROM blocks WHERE run_id=?", (run_id,))
    c.execute("DELETE FROM transitions WHERE run_id=?", (run_id,))
    c.execute("DELETE FROM runs WHERE id=?", (run_id,))
    conn.commit()
    conn.close()
