"""Command-line entry point.

Exit codes: 0 when everything passes, 1 when a check fails, 2 for usage,
parse or config errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import analysis
from .config import ExperimentConfig, load_config
from .dag import enumerate_complete_trajectories, read_dag_file
from .envs import Environment
from .exceptions import ConfigError, DagError, TabGFNError
from .flows import (
    TrajectoryFlow,
    check_detailed_balance,
    check_flow_matching,
    flow_from_terminating_and_backward,
    is_markovian,
    markovian_projection,
    summarize,
)
from .params import CheckpointError, read_checkpoint, save_checkpoint
from .training import evaluate, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
REPORT_NAME, CHECKPOINT_NAME, ANALYSIS_NAME = "report.jsonl", "checkpoint.gfn", "analysis.json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _u64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser():
    p = _Parser(prog="tabgfn", description="Exact flows and tabular GFlowNet training on small DAGs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="check flow conditions on a DAG file or a built-in environment")
    v.add_argument("dag_file", nargs="?", help="text DAG file with optional R and T records")
    v.add_argument("--config", help="experiment config whose environment is verified")
    v.add_argument("--require-markovian", action="store_true", help="fail when supplied trajectory flows are not Markovian")

    for name, text in (("train", "train a parametrization"), ("analyze", "exact analysis and checkpoint evaluation")):
        c = sub.add_parser(name, help=text)
        c.add_argument("--config", required=True)
        c.add_argument("--seed", type=_u64)
        c.add_argument("--out", help="output directory (overrides [output] dir)")
        if name == "train":
            c.add_argument("--jobs", type=_positive, default=1, help="train N consecutive seeds in parallel")
        else:
            c.add_argument("--checkpoint", help="checkpoint to evaluate (default: OUT/checkpoint.gfn if present)")

    e = sub.add_parser("enumerate", help="list complete trajectories")
    e.add_argument("dag_file", nargs="?")
    e.add_argument("--config")
    return p


def _source_env(args) -> tuple[Environment, dict]:
    """Environment plus any trajectory flows supplied with it."""
    if bool(args.dag_file) == bool(args.config):
        raise ConfigError("give exactly one of a DAG file or --config")
    if args.dag_file:
        parsed = read_dag_file(args.dag_file)
        rewards = parsed.rewards or None
        if rewards is not None and set(rewards) != set(parsed.dag.terminating_states):
            raise DagError("R records must cover every terminating state")
        env = Environment(parsed.dag, rewards, "file") if rewards else None
        return env or _FlowOnly(parsed.dag), parsed.flows
    cfg = load_config(args.config)
    env = cfg.build_env()
    return env, dict(env.meta.get("flows", {}))


class _FlowOnly:
    """Stand-in for an environment when a file only supplies flows."""

    def __init__(self, dag):
        self.dag = dag
        self.reward = None


def cmd_verify(args) -> int:
    env, flows = _source_env(args)
    dag = env.dag
    checks = {}
    if flows:
        flow = TrajectoryFlow.from_mapping(dag, flows)
        mc = is_markovian(flow)
        checks["markovian"] = {
            "ok": bool(mc),
            "witness": None if mc else {"trajectory": list(mc.trajectory), "flow": mc.flow_value, "factorized": mc.factorized_value},
        }
        proj = markovian_projection(flow)
        s0, s1 = summarize(flow), summarize(proj)
        edge_gap = float(np.max(np.abs(s0.edge_flow - s1.edge_flow)))
        checks["projection"] = {
            "ok": bool(is_markovian(proj)) and edge_gap <= 1e-9 * max(1.0, float(np.max(s0.edge_flow))),
            "edge_flow_gap": edge_gap,
        }
        summary = s1
    elif env.reward is not None:
        term = env.reward[list(dag.terminating_states)]
        summary = summarize(flow_from_terminating_and_backward(dag, term, _uniform_backward(dag)))
    else:
        raise ConfigError("nothing to verify: supply R or T records")

    fm = check_flow_matching(dag, summary.state_flow, summary.edge_flow)
    checks["flow_matching"] = {"ok": bool(fm), "worst_state": fm.worst, "violation": fm.violation}
    term_flow = np.zeros(dag.num_states)
    term_flow[list(dag.terminating_states)] = summary.edge_flow[list(dag.terminating_edges)]
    db = check_detailed_balance(dag, summary.state_flow, summary.p_forward, summary.p_backward, term_flow)
    checks["detailed_balance"] = {"ok": bool(db), "worst_edge": list(db.worst), "violation": db.violation}

    required = [k for k in checks if k != "markovian" or args.require_markovian]
    ok = all(checks[k]["ok"] for k in required)
    json.dump({"ok": ok, "checks": checks}, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK if ok else EXIT_FAIL


def _uniform_backward(dag):
    indeg = np.bincount(dag.edge_dst, minlength=dag.num_states)
    return 1.0 / indeg[dag.edge_dst]


def cmd_enumerate(args) -> int:
    env, _ = _source_env(args)
    for traj in enumerate_complete_trajectories(env.dag):
        print(" ".join(map(str, traj)))
    return EXIT_OK


def _out_dir(cfg: ExperimentConfig, args):
    return args.out if args.out else cfg.output_dir


def run_training(cfg: ExperimentConfig, out_dir: str):
    """Train once and write the report and final checkpoint into ``out_dir``."""
    env = cfg.build_env()
    params = cfg.build_params(env)
    source = cfg.build_source(env)
    report = train(env, params, cfg.training, source=source)
    os.makedirs(out_dir, exist_ok=True)
    report.write_jsonl(os.path.join(out_dir, REPORT_NAME))
    save_checkpoint(os.path.join(out_dir, CHECKPOINT_NAME), params)
    return report.final


def _train_job(job):
    cfg, out_dir = job
    return run_training(cfg, out_dir)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    cfg.build_source(cfg.build_env())  # surface source errors before any work
    out = _out_dir(cfg, args)
    if args.jobs == 1:
        final = run_training(cfg, out)
        print(json.dumps({"out": out, "final": final}))
        return EXIT_OK
    base = cfg.training.seed
    jobs = [(cfg.with_seed(base + k), os.path.join(out, f"seed-{base + k}")) for k in range(args.jobs)]
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        finals = list(pool.map(_train_job, jobs))
    for (c, d), final in zip(jobs, finals):
        print(json.dumps({"out": d, "seed": c.training.seed, "final": final}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    env = cfg.build_env()
    out = _out_dir(cfg, args)
    result = analysis.analysis_report(env, entropy=cfg.analysis["entropy"], expected=cfg.analysis["expected_reward"])
    anchors = cfg.analysis["anchors"]
    if anchors:
        result["conditional"] = {
            str(a): analysis.conditional_terminating_distribution(env, int(a)).tolist() for a in anchors
        }
    ckpt = args.checkpoint or os.path.join(out, CHECKPOINT_NAME)
    if args.checkpoint or os.path.exists(ckpt):
        params = read_checkpoint(ckpt, env.dag)
        result["checkpoint"] = evaluate(params, env).to_json(env.dag)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, ANALYSIS_NAME), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2)
        fh.write("\n")
    _print_analysis(env, result)
    return EXIT_OK


def _print_analysis(env, result):
    print(f"Z = {result['Z']:.6g}")
    learned = result.get("checkpoint", {}).get("p_terminating", {})
    print("state  target      learned")
    for s, p in result["target"].items():
        q = learned.get(s)
        print(f"{s:>5}  {p:.6f}  " + (f"{q:.6f}" if q is not None else "-"))
    if "checkpoint" in result:
        print(f"L1 = {result['checkpoint']['l1']:.3e}  KL = {result['checkpoint']['kl']:.3e}")
    if result.get("entropy") is not None:
        print(f"H = {result['entropy']:.6f}")
    fe = result["free_energy"]["free_energy"]
    vt = result.get("expected_reward")
    print("state  free_energy  V")
    for s in range(env.dag.num_states - 1):
        v = f"{vt[s]:.6g}" if vt and vt[s] is not None else "-"
        f = f"{fe[s]:11.6f}" if fe[s] is not None else f"{'inf':>11}"
        print(f"{s:>5}  {f}  {v}")


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "analyze": cmd_analyze, "enumerate": cmd_enumerate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DagError, CheckpointError, OSError) as exc:
        print(f"tabgfn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TabGFNError as exc:
        print(f"tabgfn: check failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
