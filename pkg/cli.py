# cli.py
# 命令行入口：run <scenario.json> / baseline / combined / scale

import argparse
import logging
import os
import sys

import db_utils
from experiments import (
    measure_latency,
    run_baseline_suite,
    run_combined_suite,
    run_scale_suite,
)
from scenario import ConfigError, load_scenario
from simulator import Simulation, write_outputs
from utils import dump_json, write_text

logger = logging.getLogger(__name__)

SUITES = {
    "baseline": run_baseline_suite,
    "combined": run_combined_suite,
    "scale": run_scale_suite,
}


def _common_options(top_level: bool) -> argparse.ArgumentParser:
    """--out / --db / --verbose；子命令上的副本不设默认值"""
    common = argparse.ArgumentParser(add_help=False)
    unset = None if top_level else argparse.SUPPRESS
    common.add_argument("--out", default=unset, help="输出目录")
    common.add_argument("--db", default=unset,
                        help="把运行结果存入 SQLite（路径）")
    common.add_argument("--verbose", action="store_true",
                        default=False if top_level else argparse.SUPPRESS,
                        help="DEBUG 日志")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poi", description="Proof-of-Inference 仿真与验证实验",
        parents=[_common_options(top_level=True)])
    sub = parser.add_subparsers(dest="cmd", required=True)
    common = _common_options(top_level=False)

    run = sub.add_parser("run", help="运行场景文件", parents=[common])
    run.add_argument("scenario", help="场景 JSON 路径")
    run.add_argument("--seed", type=int, default=None,
                     help="覆盖场景中的网络与抽查种子")
    run.add_argument("--trace", action="store_true",
                     help="同时写出 trace.jsonl")

    for name in SUITES:
        sub.add_parser(name, help=f"{name} 验证实验", parents=[common])
    return parser


def _write_suite(report, out_dir: str):
    write_text(os.path.join(out_dir, "metrics.json"),
               dump_json(report.to_json()))
    latency = {"summary": measure_latency(report),
               "summary_with_invalid": measure_latency(report, True),
               "samples": report.latency.to_json()}
    write_text(os.path.join(out_dir, "latency.json"), dump_json(latency))
    logger.info("已写出 %s", out_dir)


def _print_summary(report):
    print(f"{report.name}: 有效 {report.valid_cases} / 无效 "
          f"{report.invalid_cases}，检出率 {report.detection_rate:.2%}，"
          f"误报率 {report.false_positive_rate:.2%}")
    for component, s in measure_latency(report).items():
        print(f"  {component:<6} median {s['median_ms']:.4f} ms  "
              f"p99 {s['p99_ms']:.4f} ms  (n={s['count']})")
    if report.scenario:
        print(f"  区块 {report.committed_blocks}，链有效 {report.chain_valid}，"
              f"安全违规 {report.safety_violations}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    chain = ()
    if args.cmd == "run":
        try:
            scenario = load_scenario(args.scenario)
            if args.seed is not None:
                scenario = scenario.with_seed(args.seed)
            result = Simulation(scenario).run()
        except ConfigError as e:
            logger.error("场景配置错误: %s", e)
            return 2
        report = result.report
        chain = result.chain
        if args.out:
            write_outputs(result, args.out, args.trace)
    else:
        report = SUITES[args.cmd]()
        if args.out:
            _write_suite(report, args.out)

    _print_summary(report)
    if args.db:
        run_id = db_utils.save_run(report, chain, kind=args.cmd,
                                   path=args.db)
        logger.info("运行已保存，id=%s", run_id)
    if not report.passed:
        logger.error("%s 未通过", report.name)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
