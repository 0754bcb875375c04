import logging

import streamlit as st

from db_utils import init_db
from ui_chain import chain_page
from ui_experiments import experiments_page
from ui_history import history_page
from ui_scenario import scenario_page

PAGES = {
    "场景仿真": scenario_page,
    "验证实验": experiments_page,
    "区块浏览": chain_page,
    "历史记录": history_page,
}


def main():
    st.set_page_config(page_title="Proof-of-Inference 仿真", page_icon="⛓",
                       layout="wide")
    st.sidebar.subheader("调试信息")
    debug = st.sidebar.checkbox("启用调试日志", False)
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO)
    init_db()

    selected_page = st.sidebar.selectbox("导航", list(PAGES))
    PAGES[selected_page]()

    if st.sidebar.button("清空本次会话结果", key="reset"):
        st.session_state.pop("last_result", None)
        st.session_state.pop("suite_report", None)
        st.rerun()


if __name__ == "__main__":
    main()
