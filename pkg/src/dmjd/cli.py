"""Command-line entry point: ``dmjd <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ExperimentConfig
from .data import generate_toy_dataset, save_dataset
from .errors import (ComparisonError, ConfigError, ContractError, DimensionError, FormatError,
                     InfeasiblePlanError, NumericError, ParameterError)
from .masking import format_masks, plan_view_quotas, prediction_rate, sample_views

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("dmjd")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    if args.out:
        cfg.set("out_dir", args.out)
    return cfg


def cmd_gen_data(args):
    seed = 0 if args.seed is None else args.seed
    ds = generate_toy_dataset(args.n_images, args.image_size, args.classes, seed)
    path = Path(args.output or Path(args.out or ".") / "toy.dmjd")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    print(f"wrote {len(ds)} images ({args.classes} classes) to {path}")


def cmd_pretrain(args):
    cfg = _load_config(args)
    if args.dataset:
        cfg.set("dataset", args.dataset)
    if args.run_name:
        cfg.set("run_name", args.run_name)
    result = harness.run_pretrain(cfg)
    last = result.stats.records[-1] if result.stats.records else None
    print(f"run directory: {result.run_dir}")
    if last is not None:
        print(f"epoch {last.epoch} (ETE {last.ete}): loss_mim {last.loss_mim:.5f} loss_vis {last.loss_vis:.5f} "
              f"val_loss_mim {last.val_loss_mim:.5f}")
    if result.probe:
        print(f"linear probe accuracy {result.probe['accuracy']:.4f}")


def cmd_probe(args):
    seed = 0 if args.seed is None else args.seed
    res = harness.run_linear_probe(args.checkpoint, args.dataset, args.probe_epochs, seed)
    print(json.dumps(res, indent=2))


def cmd_compare(args):
    report = harness.compare_runs(args.run_a, args.run_b, args.threshold, args.metric)
    print("\n".join(report.lines()))


def cmd_ablate(args):
    base = _load_config(args)
    if args.dataset:
        base.set("dataset", args.dataset)
    grid = harness.parse_grid(Path(args.grid).read_text())
    out = Path(args.out or base.run.out_dir) / "ablation"
    res = harness.run_ablation(base, grid, out, jobs=args.jobs)
    print(f"{len(res.results)} configs, {len(res.failures)} failed; final metrics in {res.final_csv}")
    return EXIT_OK if not res.failures else EXIT_NUMERIC


def cmd_grad_check(args):
    cfg = _load_config(args) if args.config or args.set else None
    seed = 0 if args.seed is None else args.seed
    report = harness.objective_grad_check(cfg, seed=seed, max_coords=args.max_coords, tol=args.tol)
    print(report)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_mask_stats(args):
    cfg = _load_config(args).resolve()
    t = cfg.train
    n = cfg.model.n_tokens
    plan = plan_view_quotas(n, t.m_corr, t.k_views, t.m_pred, t.mask_pattern(cfg.model.grid))
    rng = np.random.default_rng(t.seed)
    rates, fresh = [], []
    last = None
    for _ in range(args.samples):
        views = sample_views(plan, rng)
        rates.append(prediction_rate(views))
        covered = np.zeros(n, dtype=bool)
        counts = []
        for v in views:
            counts.append(int((v.bits & ~covered).sum()))
            covered |= v.bits
        fresh.append(counts)
        last = views
    fresh = np.array(fresh)
    print(f"tokens {n}, views {t.k_views}, per-view masked {plan.per_view}, pattern {plan.pattern.kind}")
    print(f"quota of fresh tokens per view: {list(plan.new_quota)}")
    print(f"prediction rate: target {plan.target_pred_rate:.4f}, realized mean {np.mean(rates):.4f} "
          f"(min {np.min(rates):.4f}, max {np.max(rates):.4f})")
    print(f"fresh tokens per view (mean): {np.round(fresh.mean(axis=0), 3).tolist()}")
    if args.dump:
        Path(args.dump).write_text(format_masks(last))
        print(f"last sample written to {args.dump}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dmjd", description="Disjoint-masking joint-distillation pretraining")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the procedural toy dataset")
    p.add_argument("--n-images", type=int, default=1000)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("-o", "--output", help="dataset path (default OUT/toy.dmjd)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="run one pretraining experiment")
    p.add_argument("--dataset", help="dataset file (overrides the config)")
    p.add_argument("--run-name")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", parents=[common], help="linear probe of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--probe-epochs", type=int, default=100)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("compare", parents=[common], help="time-to-threshold comparison of two runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--metric", default="val_loss_mim")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", parents=[common], help="run a grid of configs")
    p.add_argument("grid", help="grid file with 'key = v1, v2' lines")
    p.add_argument("--dataset")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the full objective")
    p.add_argument("--max-coords", type=int)
    p.add_argument("--tol", type=float, default=1e-3)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("mask-stats", parents=[common], help="sample views and report masking statistics")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--dump", help="write the last sampled views in text form")
    p.set_defaults(func=cmd_mask_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    try:
        code = args.func(args)
        return EXIT_OK if code is None else code
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParameterError, InfeasiblePlanError, ContractError, ComparisonError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
