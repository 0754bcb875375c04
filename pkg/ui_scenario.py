import json

import pandas as pd
import streamlit as st

from db_utils import save_run
from scenario import (
    Behavior,
    ConfigError,
    NetParams,
    Scenario,
    SecondarySpec,
    scenario_from_json,
)
from consensus import ConsensusParams
from simulator import Simulation
from trust_harness import HarnessParams, Tier


def _secondaries_from_form(rows):
    specs = []
    for row in rows:
        count = int(row["数量"] or 0)
        spec = SecondarySpec(
            behavior=Behavior(row["行为"]),
            initial_tier=Tier(row["初始等级"]),
            delta=int(row.get("delta") or 0),
            delay_ms=int(row.get("delay_ms") or 0),
            crash_at_round=int(row.get("crash_at_round") or 0),
        )
        specs.extend([spec] * count)
    return tuple(specs)


def _scenario_form():
    """表单 → Scenario；配置不一致时返回 None 并提示"""
    col1, col2, col3 = st.columns(3)
    with col1:
        name = st.text_input("场景名称", "dashboard")
        masters = st.number_input("主节点数", 1, 15, 3)
        dishonest = st.number_input("不诚实主节点数", 0, 7, 0)
    with col2:
        rounds = st.number_input("轮数", 1, 100, 10)
        requests = st.number_input("每轮请求数", 0, 200, 6)
        seed = st.number_input("种子", 0, 2 ** 31, 0)
    with col3:
        fraction = st.number_input("抽查比例", 0.01, 1.0, 0.2, step=0.05)
        loss = st.number_input("丢包率", 0.0, 0.9, 0.0, step=0.01)
        tau_d = st.number_input("τ_d（降级阈值）", 1, 20, 2)
        tau_p = st.number_input("τ_p（升级阈值）", 1, 50, 5)

    st.caption("次级节点（每行一类，数量为 0 的行忽略）")
    default = pd.DataFrame([
        {"行为": "Fabricator", "初始等级": "Trusted", "数量": 1,
         "delta": 1000, "delay_ms": 0, "crash_at_round": 0},
        {"行为": "Honest", "初始等级": "NonTrusted", "数量": 5,
         "delta": 0, "delay_ms": 0, "crash_at_round": 0},
    ])
    rows = st.data_editor(
        default,
        num_rows="dynamic",
        column_config={
            "行为": st.column_config.SelectboxColumn(
                options=[b.value for b in Behavior]),
            "初始等级": st.column_config.SelectboxColumn(
                options=[Tier.TRUSTED.value, Tier.NON_TRUSTED.value]),
        },
        key="secondary_editor",
    )
    try:
        scenario = Scenario(
            name=name,
            masters=int(masters),
            dishonest_masters=int(dishonest),
            secondaries=_secondaries_from_form(rows.to_dict("records")),
            rounds=int(rounds),
            requests_per_round=int(requests),
            net=NetParams(loss_rate=float(loss), seed=int(seed)),
            consensus=ConsensusParams(audit_fraction=float(fraction),
                                      rng_seed=int(seed)),
            harness=HarnessParams(tau_d=int(tau_d), tau_p=int(tau_p)),
        )
        return scenario.validate()
    except (ConfigError, ValueError) as e:
        st.error(f"场景配置错误: {e}")
        return None


def _show_result(result):
    report = result.report
    c1, c2, c3, c4 = st.columns(4)
    c1.metric("检出率", f"{report.detection_rate:.0%}")
    c2.metric("误报率", f"{report.false_positive_rate:.0%}")
    c3.metric("已提交区块", report.committed_blocks)
    c4.metric("链有效", "是" if report.chain_valid else "否")
    if report.passed:
        st.success("全部检查通过")
    else:
        st.error(f"检查未通过：安全违规 {report.safety_violations}，"
                 f"链一致 {report.chains_consistent}")

    st.subheader("信任等级迁移")
    if report.harness_transitions:
        st.dataframe(pd.DataFrame(report.harness_transitions),
                     use_container_width=True)
    else:
        st.info("没有发生等级迁移")

    st.subheader("共识日志")
    log = pd.DataFrame([
        {"轮次": e["round"], "leader": e["leader"][:12],
         "区块": (e["proposed_block"] or "")[:12],
         "赞成": sum(v["verdict"] == "Approve" for v in e["votes"]),
         "反对": sum(v["verdict"] == "Reject" for v in e["votes"]),
         "提交": e["committed"], "抽查不一致": e["audit_mismatches"]}
        for e in result.consensus_log
    ])
    st.dataframe(log, use_container_width=True)

    st.subheader("代理响应")
    st.json(report.scenario.get("agent", {}))
    with st.expander("最终信任等级"):
        st.json(report.scenario.get("final_tiers", {}))
    st.download_button("下载 metrics.json",
                       json.dumps(report.to_json(), ensure_ascii=False,
                                  indent=2, sort_keys=True),
                       file_name="metrics.json")


def scenario_page():
    """场景运行页面"""
    st.title("场景仿真")
    source = st.radio("场景来源", ["表单", "上传 JSON"], horizontal=True)
    scenario = None
    if source == "表单":
        scenario = _scenario_form()
    else:
        uploaded = st.file_uploader("场景文件", type=["json"])
        if uploaded is not None:
            try:
                scenario = scenario_from_json(json.load(uploaded))
            except (ConfigError, ValueError) as e:
                st.error(f"场景配置错误: {e}")

    if scenario is not None and st.button("运行仿真", type="primary"):
        with st.spinner("仿真运行中..."):
            st.session_state.last_result = Simulation(scenario).run()

    result = st.session_state.get("last_result")
    if result is None:
        return
    _show_result(result)
    if st.button("保存到历史记录"):
        run_id = save_run(result.report, result.chain, kind="scenario")
        st.success(f"已保存，运行编号 {run_id}")
