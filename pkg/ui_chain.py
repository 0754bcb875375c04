import pandas as pd
import streamlit as st

from db_utils import list_runs, load_run

LANES = (("data_lane", "DATA"), ("model_lane", "MODEL"),
         ("proof_lane", "PROOF"))


def _lane_frame(records):
    rows = []
    for r in records:
        row = {k: v for k, v in r.items()
               if k not in ("signature", "sender_public_key")}
        for key in ("sender_id", "content_hash", "model_hash",
                    "dataset_hash", "task_id", "proof_id"):
            if isinstance(row.get(key), str):
                row[key] = row[key][:16]
        rows.append(row)
    return pd.DataFrame(rows)


def _pick_chain():
    """本次会话的仿真结果，或历史记录里保存的链"""
    options = {}
    result = st.session_state.get("last_result")
    if result is not None:
        options["当前仿真"] = result.chain
    for run in list_runs():
        if run["committed_blocks"]:
            options[f"#{run['id']} {run['name']}"] = run["id"]
    if not options:
        return None
    choice = st.selectbox("链来源", list(options))
    value = options[choice]
    if isinstance(value, int):
        run = load_run(value)
        return run["blocks"] if run else None
    return value


def chain_page():
    """区块浏览页面"""
    st.title("区块浏览")
    chain = _pick_chain()
    if not chain:
        st.info("暂无已提交的链，请先运行仿真")
        return

    summary = pd.DataFrame([
        {"高度": b["header"]["height"], "哈希": b["block_hash"][:16],
         "前块": b["header"]["prev_hash"][:16],
         "proposer": b["header"]["proposer_id"][:12],
         "DATA": len(b["body"]["data_lane"]),
         "MODEL": len(b["body"]["model_lane"]),
         "PROOF": len(b["body"]["proof_lane"])}
        for b in chain
    ])
    st.dataframe(summary, use_container_width=True)

    heights = [b["header"]["height"] for b in chain]
    height = st.select_slider("高度", options=heights,
                              value=heights[-1])
    block = next(b for b in chain if b["header"]["height"] == height)
    with st.expander("区块头", expanded=True):
        st.json(block["header"])
    for key, label in LANES:
        records = block["body"][key]
        st.subheader(f"{label} 车道（{len(records)}）")
        if records:
            st.dataframe(_lane_frame(records), use_container_width=True)
