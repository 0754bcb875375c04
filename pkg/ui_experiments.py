import pandas as pd
import streamlit as st

from db_utils import save_run
from experiments import (
    latency_frame,
    run_baseline_suite,
    run_combined_suite,
    run_scale_suite,
)

SUITES = {
    "基线（13 有效 / 16 无效）": ("baseline", run_baseline_suite),
    "组合（2013 有效 / 16 无效）": ("combined", run_combined_suite),
    "规模（1000 记录 + 1000 中枢）": ("scale", run_scale_suite),
}


def experiments_page():
    """验证实验页面"""
    st.title("验证实验")
    label = st.selectbox("实验", list(SUITES))
    kind, runner = SUITES[label]
    if st.button("运行实验", type="primary"):
        with st.spinner("校验中..."):
            st.session_state.suite_report = (kind, runner())

    saved = st.session_state.get("suite_report")
    if not saved:
        return
    kind, report = saved
    c1, c2, c3, c4 = st.columns(4)
    c1.metric("有效用例", report.valid_cases)
    c2.metric("无效用例", report.invalid_cases)
    c3.metric("检出率", f"{report.detection_rate:.0%}")
    c4.metric("误报率", f"{report.false_positive_rate:.0%}")

    st.subheader("各组件用例数")
    counts = pd.DataFrame(report.case_counts).T
    st.dataframe(counts, use_container_width=True)

    if report.invalid_fixtures:
        st.subheader("无效用例明细")
        st.dataframe(pd.DataFrame(report.invalid_fixtures),
                     use_container_width=True)

    st.subheader("校验延迟（毫秒，仅有效用例）")
    frame = latency_frame(report)
    st.dataframe(frame, use_container_width=True)
    if not frame.empty:
        st.bar_chart(frame["median_ms"])

    if st.button("保存到历史记录"):
        run_id = save_run(report, kind=kind)
        st.success(f"已保存，运行编号 {run_id}")
