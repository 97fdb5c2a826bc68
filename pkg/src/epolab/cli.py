"""Command line entry point: ``epolab {train,verify-theory,plot,sweep}``.

Exit codes: 0 success, 1 failed theory check, 2 invalid config or
arguments, 3 non-finite loss during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import re
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .config import ConfigFileError, ExperimentConfig, load
from .trainer import NonFiniteLossError, run_training, summarize_run

log = logging.getLogger("epolab")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_NONFINITE = 0, 1, 2, 3


def code_fingerprint() -> str:
    """Hash of the package sources, so a manifest pins the exact code that ran."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _train_seed(cfg: ExperimentConfig, seed: int, out_dir: str, resume: bool) -> dict:
    env = cfg.make_env()
    state = run_training(env, cfg.epo, cfg.trainer, cfg.policy, seed, Path(out_dir), resume, cfg.window_capacity)
    tail = cfg.trainer.tail_fraction
    iid = summarize_run(state.metrics, tail, "iid")
    ood = summarize_run(state.metrics, tail, "ood")
    return {"seed": seed, "dir": Path(out_dir).name, "iid_best": iid[0], "iid_tail": iid[1], "ood_best": ood[0], "ood_tail": ood[1]}


def run_experiment(cfg: ExperimentConfig, out: Path, resume: bool = False) -> list[dict]:
    """Train every seed into ``out/seed_<s>`` and write ``out/manifest.json``."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "version": __version__,
        "code": code_fingerprint(),
        "seeds": list(cfg.seeds),
        "status": "running",
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    dirs = [str(out / f"seed_{s}") for s in cfg.seeds]
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(_train_seed, cfg, s, d, resume) for s, d in zip(cfg.seeds, dirs)]
            results = [f.result() for f in futures]
    else:
        results = []
        for s, d in zip(cfg.seeds, dirs):
            log.info("training seed %d -> %s", s, d)
            results.append(_train_seed(cfg, s, d, resume))
    manifest["status"] = "complete"
    manifest["results"] = results
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return results


def _load_config(path: str) -> ExperimentConfig:
    return load(path)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seeds:
        cfg = ExperimentConfig(**{**cfg.__dict__, "seeds": tuple(args.seeds)})
    if args.workers:
        cfg = ExperimentConfig(**{**cfg.__dict__, "workers": args.workers})
    out = Path(args.out or cfg.out_dir)
    results = run_experiment(cfg, out, args.resume)
    for r in results:
        print(f"seed {r['seed']}: iid tail {r['iid_tail']:.3f} (best {r['iid_best']:.3f})  ood tail {r['ood_tail']:.3f}")
    print(f"wrote {out}")
    return EXIT_OK


def _slug(point: dict) -> str:
    parts = [f"{k.split('.', 1)[1]}={v}" for k, v in sorted(point.items())]
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", "_".join(parts))


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    out = Path(args.out or cfg.out_dir)
    points = cfg.sweep_points() if cfg.sweep else [{}]
    index = []
    for i, point in enumerate(points):
        sub = cfg.with_overrides(point) if point else cfg
        d = out / (f"point_{i:03d}_{_slug(point)}" if point else "point_000")
        log.info("sweep point %d/%d %s", i + 1, len(points), point)
        results = run_experiment(sub, d, args.resume)
        index.append({"point": point, "dir": d.name, "results": results})
        tails = [r["iid_tail"] for r in results]
        print(f"{d.name}: mean iid tail {sum(tails) / len(tails):.3f}")
    (out / "sweep.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_verify_theory(args) -> int:
    from .theory import TOLERANCES, run_suite, summarize_suite

    if args.n < 1:
        print("error: suite size must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    tolerances = {k: args.tolerance for k in TOLERANCES} if args.tolerance is not None else None
    results = run_suite(args.n, args.seed, tolerances)
    report = Path(args.report)
    with open(report, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    summary = summarize_suite(results)
    print(f"{'check':<24}{'n':>4}{'failed':>8}{'worst':>14}{'tolerance':>12}")
    for name, s in summary.items():
        print(f"{name:<24}{s['n']:>4}{s['failed']:>8}{s['worst']:>14.3e}{s['tolerance']:>12.1e}")
    print(f"report: {report}")
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(json.dumps({"failed": r.name, "index": r.index, "value": r.value, "replay": r.replay}, sort_keys=True), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import MetricsNotFound, plot_runs

    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            written = plot_runs(args.runs, args.out, args.smooth)
    except MetricsNotFound as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epolab", description="Entropy-smoothed policy optimization on toy multi-turn tasks.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (default: run.out_dir)")
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--workers", type=int)
    t.add_argument("--resume", action="store_true", help="continue from checkpoints in the output directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train the cartesian product of the [sweep] section")
    s.add_argument("config")
    s.add_argument("--out")
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify-theory", help="run the randomized exact-MDP verification suite")
    v.add_argument("--n", type=int, default=50, help="number of random MDPs")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tolerance", type=float, help="override every check tolerance")
    v.add_argument("--report", default="theory_report.jsonl", help="JSONL output, one object per check")
    v.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("plot", help="aggregate runs into SVG charts and a CSV")
    p.add_argument("runs", nargs="+", help="run directories (a seed dir or an experiment dir)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--smooth", type=int, default=0, help="trailing-mean window (off by default)")
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonFiniteLossError as exc:
        print(f"error: non-finite loss: {exc}", file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
