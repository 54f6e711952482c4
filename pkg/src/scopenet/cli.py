"""``scopenet`` command line: gen-data, train, eval, infer, sweep, gradcheck.

Every command resolves one experiment config (defaults, then ``--config``,
then flags), and writes under ``<out>/<train-hash>/``. The output root is
``--out``, else ``$SCOPENET_OUT``, else ``./runs``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from .autograd import corrupt_backward
from .config import SCORING_MODES, ConfigError, ExperimentConfig, from_dict, load_config, save_config
from .data import write_dataset
from .detect import write_detections
from .evaluate import export_pr_curve
from .experiments import (
    DEFAULT_NUMS,
    DEFAULT_SIZES,
    datasets,
    eval_run,
    load_model,
    metrics_json,
    output_root,
    run_dir,
    run_inference,
    sweep,
    train_run,
)

log = logging.getLogger("scopenet")

EXIT_CONFIG = 2


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (missing keys take defaults)")
    common.add_argument("--seed", type=int, help="model init / batch-order seed")
    common.add_argument("--out", type=Path, help="output root (default $SCOPENET_OUT or ./runs)")
    common.add_argument("--nms-threshold", type=float, help="class-wise NMS IoU threshold")
    common.add_argument("--scoring-mode", choices=SCORING_MODES, help="detection score: p_cls or p_cls * p_loc")
    common.add_argument("--no-uncertainty", action="store_true", help="fix the bin-softmax temperature at 1")
    common.add_argument(
        "--levels",
        type=_floats,
        metavar="B1,B2,...",
        help="inner regression-range boundaries; k values give k+1 levels, e.g. 32 -> [0,32),[32,inf)",
    )
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bit-reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="scopenet", description="Scope-head detector on synthetic scenes: data, training, evaluation, sweeps and gradient checks.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the train/test scenes as PGM + JSON lines")
    sub.add_parser("train", parents=[common], help="train and checkpoint (skipped if already trained)")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a trained run on the test split")
    ev.add_argument("--checkpoint", type=Path, help="checkpoint to evaluate instead of the run's own")
    ev.add_argument("--pr-curve", type=Path, help="also write the IoU=0.5 precision/recall curve as CSV")
    inf = sub.add_parser("infer", parents=[common], help="write test-split detections as JSON lines")
    inf.add_argument("--checkpoint", type=Path)
    inf.add_argument("--output", type=Path, help="detections file (default <run>/eval-<hash>/detections.jsonl)")
    sw = sub.add_parser("sweep", parents=[common], help="bin size x bin count grid, one run per cell")
    sw.add_argument("--sizes", type=_floats, default=list(DEFAULT_SIZES))
    sw.add_argument("--nums", type=_ints, default=list(DEFAULT_NUMS))
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss term")
    gc.add_argument("--step", type=float, default=1e-5)
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--max-entries", type=int, default=48, help="sampled entries per parameter tensor")
    # negative control for tests: scale one primitive's derivative rule
    gc.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    gc.add_argument("--corrupt-factor", type=float, default=1.01, help=argparse.SUPPRESS)
    return p


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.nms_threshold is not None:
        d["infer"]["nms_threshold"] = args.nms_threshold
    if args.scoring_mode is not None:
        d["infer"]["scoring_mode"] = args.scoring_mode
    if args.no_uncertainty:
        d["model"]["uncertainty"] = False
    if args.levels is not None:
        edges = [0.0] + list(args.levels) + [None]
        d["model"]["ranges"] = [[edges[i], edges[i + 1]] for i in range(len(edges) - 1)]
        d["model"]["anchor_max"] = None
    return from_dict(d)


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    train, test = datasets(cfg)
    root = run_dir(cfg, args.out) / "data"
    write_dataset(root / "train", train, cfg.data, cfg.data.train_seed)
    write_dataset(root / "test", test, cfg.data, cfg.data.test_seed)
    print(root)
    return 0


def cmd_train(cfg: ExperimentConfig, args) -> int:
    start = time.perf_counter()
    rd = train_run(cfg, args.out)
    log.info("trained in %.1fs", time.perf_counter() - start)
    print(rd)
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ed, result = eval_run(cfg, args.out, args.checkpoint)
    if args.pr_curve:
        export_pr_curve(result, 0.5, args.pr_curve)
    sys.stdout.write(metrics_json(result))
    log.info("metrics written to %s", ed / "metrics.json")
    return 0


def cmd_infer(cfg: ExperimentConfig, args) -> int:
    rd = run_dir(cfg, args.out)
    model = load_model(cfg, args.checkpoint or rd / "model.ckpt")
    _, test = datasets(cfg)
    dets = run_inference(model, cfg, test)
    out = args.output
    if out is None:
        ed = rd / f"eval-{cfg.infer_hash()}"
        ed.mkdir(parents=True, exist_ok=True)
        save_config(cfg, ed / "config.json")
        out = ed / "detections.jsonl"
    write_detections(out, [s.image_id for s in test], dets)
    print(out)
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    sweep_dir, cells = sweep(cfg, args.out, sizes=args.sizes, nums=args.nums)
    sys.stdout.write((sweep_dir / "sweep.csv").read_text())
    return 1 if all(c.metrics is None for c in cells) else 0


def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    from .diagnostics import check_model_gradients, tiny_config

    tiny = tiny_config(cfg)
    start = time.perf_counter()
    if args.corrupt_op:
        with corrupt_backward(args.corrupt_op, args.corrupt_factor):
            result = check_model_gradients(tiny, args.step, args.tolerance, args.max_entries, tiny.seed)
    else:
        result = check_model_gradients(tiny, args.step, args.tolerance, args.max_entries, tiny.seed)
    print("\n".join(result.lines()))
    worst = max(r.max_rel_error for r in result.reports.values())
    print(f"max relative error {worst:.3e} (tolerance {args.tolerance:g}) in {time.perf_counter() - start:.1f}s")
    if args.verbose or not result.passed:
        for comp, rep in result.reports.items():
            for line in rep.lines():
                if args.verbose or line.startswith("FAIL"):
                    print(f"  {comp}: {line}")
    return 0 if result.passed else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"scopenet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"scopenet: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("output root %s", output_root(args.out))
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        if args.verbose:
            raise
        print(f"scopenet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
