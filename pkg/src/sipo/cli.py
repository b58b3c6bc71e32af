"""Command-line entry point: ``sipo <subcommand> ...``.

Every subcommand exits 0 only when the checks it runs pass.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import approximator as ap
from . import config as C
from . import evaluation as ev
from . import intrinsic as it
from . import oracle, gridpaths
from . import trainer as tr
from .io_utils import atomic_write_json, atomic_write_text


def _print(msg):
    print(msg, flush=True)


def _load(args):
    overrides = {"algo": getattr(args, "algo", None), "env.name": getattr(args, "env", None),
                 "seed": getattr(args, "seed", None), "out": getattr(args, "out", None)}
    if getattr(args, "freeze_lambda", None) is not None:
        overrides["train.freeze_lambda"] = args.freeze_lambda
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise C.ConfigError(item, "expected key=value")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    return C.load_config(args.config, overrides)


def save_policy(policy, path):
    ap.save(policy.net, path)
    if policy.log_std is not None:
        atomic_write_json(path + ".logstd.json", [float(x) for x in policy.log_std])


def _calibrate_if_needed(cfg, log):
    if not (cfg.delta_auto or cfg.alpha_auto):
        return cfg, None
    cal = tr.calibrate(cfg.trainer, cfg.env, cfg.seed, c1=cfg.c1, c2=cfg.c2)
    log(cal.report())
    return C.with_calibration(cfg, cal.delta, cal.alpha), cal


def cmd_train(args):
    cfg = _load(args)
    out = cfg.out
    os.makedirs(out, exist_ok=True)
    _print(f"training {cfg.algo} on {cfg.env.name} (seed {cfg.seed}) -> {out}")
    cfg, cal = _calibrate_if_needed(cfg, _print)
    if cal is not None:
        atomic_write_text(os.path.join(out, "calibration.txt"), cal.report() + "\n")
    atomic_write_text(os.path.join(out, "config.txt"), cfg.to_text())

    def log(row, _lam):
        if args.verbose:
            _print(f"iter {row.iteration} step {row.step} J {row.J_hat:.3f} "
                   f"R_int {np.round(row.R_int, 4).tolist()} lambda {np.round(row.lam, 3).tolist()}")

    tcfg = cfg.trainer
    if cfg.algo == "pbt":
        run = tr.pbt_run(tcfg, cfg.env, cfg.seed, log=log)
        n_c = tcfg.population - 1
    else:
        if cfg.algo == "ppo":
            tcfg = replace(tcfg, delta=0.0, freeze_lambda=0.0, intrinsic=replace(tcfg.intrinsic, alpha=0.0))
        run = tr.itr_run(tcfg, cfg.env, cfg.seed, log=log, unconstrained=cfg.algo == "ppo")
        n_c = tcfg.population - 1 if cfg.algo != "ppo" else 0
        run.archive.save(os.path.join(out, "archive"))
    atomic_write_text(os.path.join(out, "metrics.csv"), tr.metrics_csv(run.metrics, n_c))
    atomic_write_text(os.path.join(out, "timing.csv"), tr.timing_csv(run.metrics))
    for rec in run.records:
        save_policy(rec.policy, os.path.join(out, f"policy_{rec.index}.bin"))
    summary = {"algo": cfg.algo, "returns": [float(np.mean([e.ret for e in r.episodes])) for r in run.records],
               "greedy_returns": [r.greedy[0].ret for r in run.records]}
    if cfg.env.name == "nav":
        summary["landmarks"] = [ev.policy_landmark(r) for r in run.records]
        summary["discovered"] = len(ev.discovered_landmarks(run.records))
    atomic_write_json(os.path.join(out, "summary.json"), summary)
    _print(json.dumps(summary))
    return 0


def cmd_calibrate(args):
    cfg = _load(args)
    try:
        cal = tr.calibrate(cfg.trainer, cfg.env, cfg.seed, c1=cfg.c1, c2=cfg.c2)
    except tr.CalibrationError as exc:
        _print(f"calibration failed: {exc}")
        return 1
    _print(cal.report())
    if args.out:
        atomic_write_json(os.path.join(args.out, "calibration.json") if os.path.isdir(args.out) else args.out,
                          {"D": cal.D, "J_max": cal.J_max, "delta": cal.delta, "alpha": cal.alpha,
                           "c1": cal.c1, "c2": cal.c2,
                           "sweep": [{"c1": c, "delta": d, "alpha": a} for c, d, a in cal.sweep]})
    return 0


def cmd_eval(args):
    archive = it.Archive.load(args.archive)
    try:
        report = ev.eval_population(archive, k=args.k, max_points=args.max_points)
    except (ev.EvaluationError, ValueError) as exc:
        _print(f"evaluation failed: {exc}")
        return 1
    text = ev.to_json(report)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    _print(text)
    return 0


def cmd_path_table(args):
    cells, seconds = gridpaths.reproduce()
    _print(gridpaths.format_report(cells, seconds))
    ok = all(c.passed for c in cells) and seconds < 1.0
    _print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_verify(args):
    t0 = time.perf_counter()
    rng = np.random.default_rng(args.seed)
    report = oracle.verify_greedy_bound(args.n, rng, n_points=args.points, delta=args.delta)
    wc = oracle.worst_case_instance()
    t1 = oracle.solve_pbt_exact(wc).value
    full = oracle.solve_itr_greedy(wc, wc.delta).value
    half = oracle.solve_itr_greedy(wc, wc.delta / 2).value
    out = report.to_dict()
    out["worst_case"] = {"pbt": t1, "itr_full_threshold": full, "itr_half_threshold": half}
    out["seconds"] = time.perf_counter() - t0
    _print(json.dumps(out, indent=2))
    ok = not report.violations and full < t1 and half >= t1 - 1e-9
    if report.instances == report.infeasible:
        _print("every instance was infeasible")
    return 0 if ok else 1


def cmd_compare(args):
    cfg = _load(argparse.Namespace(config=args.config, env="nav", algo="pbt", seed=None, out=None, set=args.set))
    n_seeds = args.seeds or (2 if args.reduced else 6)
    seeds = list(range(args.seed, args.seed + n_seeds))
    steps = args.steps or (cfg.trainer.steps // 2 if args.reduced else cfg.trainer.steps)
    results = []
    ok = True
    for n_l in args.n_landmarks or ([4] if args.reduced else [4, 5]):
        res = ev.compare_frameworks(cfg, seeds, n_l, steps=steps, log=_print)
        _print(res.table())
        results.append(res.summary())
        itr_mean, pbt_mean = res.summary()["itr_mean"], res.summary()["pbt_mean"]
        if args.reduced:
            ok &= itr_mean > pbt_mean
        elif n_l == 4:
            ok &= itr_mean >= 3.0 and pbt_mean <= itr_mean - 0.5
        elif n_l == 5:
            ok &= itr_mean >= 3.5
        ok &= not res.failed
    if args.out:
        atomic_write_json(args.out, results)
    _print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_heatmap(args):
    archive = it.Archive.load(args.archive)
    trajs = []
    for e in archive.entries:
        if args.policy is not None and e.policy_index != args.policy:
            continue
        trajs.append(e.raw_states)
    counts = ev.export_heatmap(trajs, args.resolution, args.low, args.high)
    text = ev.heatmap_csv(counts)
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="sipo", description="Diverse policy discovery toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def run_args(sp, algo=True):
        if algo:
            sp.add_argument("--algo", choices=C.ALGOS)
        sp.add_argument("--env", choices=C.ENVS)
        sp.add_argument("--config", help="flat key = value configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("train", help="train a population")
    run_args(sp)
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--freeze-lambda", type=float, dest="freeze_lambda",
                    help="hold every multiplier at this value")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("calibrate", help="derive delta and alpha from two unconstrained policies")
    run_args(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("eval", help="diversity report for an archive directory")
    sp.add_argument("--archive", required=True)
    sp.add_argument("--k", type=int, default=12)
    sp.add_argument("--max-points", type=int, default=256, dest="max_points")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("reproduce-table1", help="grid-world diversity-measure table")
    sp.set_defaults(func=cmd_path_table)

    sp = sub.add_parser("verify-theorem1", help="greedy-vs-population check on random 1-D instances")
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--points", type=int, default=200)
    sp.add_argument("--delta", type=float, default=None)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("compare-frameworks", help="ITR vs PBT landmark discovery on navigation")
    sp.add_argument("--config")
    sp.add_argument("--seeds", type=int, default=None, help="number of seeds (6, or 2 with --reduced)")
    sp.add_argument("--seed", type=int, default=0, help="first seed")
    sp.add_argument("--n-landmarks", type=int, nargs="+", default=None, dest="n_landmarks")
    sp.add_argument("--steps", type=int, help="environment steps per policy")
    sp.add_argument("--reduced", action="store_true", help="2 seeds and half the training budget; checks ITR > PBT")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE")
    sp.add_argument("--out", help="JSON results file")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("export-heatmap", help="CSV visit counts from an archive")
    sp.add_argument("--archive", required=True)
    sp.add_argument("--resolution", type=int, default=5)
    sp.add_argument("--low", type=float, default=-0.125)
    sp.add_argument("--high", type=float, default=1.125)
    sp.add_argument("--policy", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except C.ConfigError as exc:
        _print(f"configuration error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
