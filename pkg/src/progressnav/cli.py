"""Command-line entry point for the navigation training pipeline."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .datagen import build_sl_dataset, write_dataset
from .gradsuite import run_suite
from .models import ParamSet, PolicyModel, ProgressModel
from .pipeline import (
    ABLATION_SUITES, ablate, eval_tasks, evaluate_checkpoint, make_tasks,
    make_world, run_pipeline, train_stage1, train_stage2, train_stage3,
    training_dataset,
)
from .report import emit_report
from .runconfig import ConfigError, RunConfig, apply_overrides, load_config
from .serial import canonical_json
from .world import episode_to_record
from .evaluation import episode_khats


def _load_cfg(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args.set or [])


def _outdir(args) -> str:
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    return out


def cmd_gen_world(args) -> int:
    cfg = _load_cfg(args)
    world = make_world(cfg, args.seed)
    out = _outdir(args)
    path = os.path.join(out, f"world_{args.seed}.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json({"spec": world.spec.to_dict(),
                                 "grid": world.grid.tolist()}) + "\n")
    print(path)
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args)
    tasks, ds = training_dataset(cfg, args.seed)
    data_path = os.path.join(out, "train_data.jsonl")
    write_dataset(data_path, ds)
    ep_path = os.path.join(out, "episodes.jsonl")
    with open(ep_path, "w", encoding="utf-8") as fh:
        for _, ep in tasks:
            fh.write(canonical_json(episode_to_record(ep)) + "\n")
    print(data_path)
    print(ep_path)
    return 0


def cmd_train_sapp(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args)
    _, ds = training_dataset(cfg, args.seed)
    prm, _ = train_stage1(cfg, ds, args.seed,
                          log_path=os.path.join(out, "stage1_log.jsonl"))
    path = os.path.join(out, "prm_stage1.ckpt")
    prm.params.save(path)
    print(path)
    return 0


def cmd_train_policy(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args)
    tasks, ds = training_dataset(cfg, args.seed)
    prm = ProgressModel.from_paramset(ParamSet.load(args.prm))
    policy, _ = train_stage2(cfg, ds, prm, args.seed,
                             dagger_tasks=tasks if cfg["stage2.use_dagger"] else None,
                             log_path=os.path.join(out, "stage2_log.jsonl"))
    path = os.path.join(out, "policy_stage2.ckpt")
    policy.params.save(path)
    print(path)
    return 0


def cmd_train_ppcf(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args)
    _, ds = training_dataset(cfg, args.seed)
    prm = ProgressModel.from_paramset(ParamSet.load(args.prm))
    policy = PolicyModel.from_paramset(ParamSet.load(args.policy))
    prm, policy, _ = train_stage3(cfg, ds, prm, policy, args.seed,
                                  log_path=os.path.join(out, "stage3_log.jsonl"))
    p1 = os.path.join(out, "prm_stage3.ckpt")
    p2 = os.path.join(out, "policy_stage3.ckpt")
    prm.params.save(p1)
    policy.params.save(p2)
    print(p1)
    print(p2)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args)
    prm = ProgressModel.from_paramset(ParamSet.load(args.prm))
    policy = PolicyModel.from_paramset(ParamSet.load(args.policy))
    report, _, traces = evaluate_checkpoint(cfg, prm, policy, eval_tasks(cfg, args.seed))
    emit_report(out, [("eval", report)], cfg.hash, traces=traces)
    print(json.dumps(report.to_dict()))
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    result = run_pipeline(cfg, args.seed, _outdir(args))
    print(json.dumps(result["report"].to_dict()))
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    rows = ablate(args.suite, cfg, [args.seed], out_dir=_outdir(args))
    for name, rep in rows:
        print(name, json.dumps(rep.to_dict()))
    return 0


def cmd_progress_trace(args) -> int:
    cfg = _load_cfg(args)
    out = _outdir(args)
    prm = ProgressModel.from_paramset(ParamSet.load(args.prm))
    tasks = eval_tasks(cfg, args.seed)[:args.n_episodes]
    path = os.path.join(out, "progress_trace.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for _, ep in tasks:
            khats, kstars = episode_khats(prm, ep, tau=cfg["sapp.tau"],
                                          H=cfg["data.history_len"])
            fh.write(canonical_json({"episode_id": ep.episode_id,
                                     "khat": khats, "k_star": kstars}) + "\n")
    print(path)
    return 0


def cmd_grad_check(args) -> int:
    results = run_suite(n_instances=args.instances, seed=args.seed)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: {r.instances} instances, {r.skipped} skipped, "
              f"max rel err {r.max_rel_err:.3e}")
        for f in r.failures:
            print("  " + f)
        ok = ok and r.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progressnav")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable")

    handlers = {}
    for name, fn in [
        ("gen-world", cmd_gen_world), ("gen-data", cmd_gen_data),
        ("train-sapp", cmd_train_sapp), ("train-policy", cmd_train_policy),
        ("train-ppcf", cmd_train_ppcf), ("eval", cmd_eval),
        ("pipeline", cmd_pipeline), ("ablate", cmd_ablate),
        ("progress-trace", cmd_progress_trace), ("grad-check", cmd_grad_check),
    ]:
        p = sub.add_parser(name)
        common(p)
        handlers[name] = fn
        if name in ("train-policy", "train-ppcf", "eval", "progress-trace"):
            p.add_argument("--prm", required=True, help="progress model checkpoint")
        if name in ("train-ppcf", "eval"):
            p.add_argument("--policy", required=True, help="policy checkpoint")
        if name == "ablate":
            p.add_argument("--suite", required=True, choices=ABLATION_SUITES)
        if name == "progress-trace":
            p.add_argument("--n-episodes", type=int, default=5)
        if name == "grad-check":
            p.add_argument("--instances", type=int, default=50)
    parser.set_defaults(_handlers=handlers)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args._handlers[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
