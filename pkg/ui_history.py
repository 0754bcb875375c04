import pandas as pd
import streamlit as st

from db_utils import delete_run, list_runs, load_run


def history_page():
    """历史运行页面"""
    st.title("历史记录")
    runs = list_runs()
    if not runs:
        st.info("暂无历史记录")
        return
    frame = pd.DataFrame(runs)
    frame["chain_valid"] = frame["chain_valid"].astype(bool)
    frame["passed"] = frame["passed"].astype(bool)
    st.dataframe(frame, use_container_width=True)

    choice = st.radio(
        "请选择一次运行",
        options=runs,
        format_func=lambda r: f"#{r['id']} {r['name']} ({r['kind']}, "
                              f"{r['created_at']})",
    )
    if not choice:
        return
    run = load_run(choice["id"])
    st.write("---")
    st.write(f"**{run['name']}**：检出率 {run['detection_rate']:.0%}，"
             f"误报率 {run['false_positive_rate']:.0%}，"
             f"区块 {run['committed_blocks']}")
    if run["transitions"]:
        st.subheader("信任等级迁移")
        st.dataframe(pd.DataFrame(run["transitions"]),
                     use_container_width=True)
    with st.expander("metrics.json"):
        st.json(run["metrics"])
    if st.button("删除该记录", key=f"del_run_{run['id']}"):
        delete_run(run["id"])
        st.success("记录已删除！")
        st.rerun()
