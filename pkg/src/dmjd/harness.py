"""Experiment runs: pretraining with CSV telemetry, linear probes, comparisons, ablation grids."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import SCHEMA_VERSION, ExperimentConfig, format_value
from .data import Dataset, load_dataset, split_indices
from .errors import ComparisonError, ConfigError, ContractError, FormatError, NumericError
from .model import DMJDModel, load_model, save_checkpoint
from .targets import external_target_load
from .trainer import INPUT_MEAN, INPUT_STD, EpochRecord, RunStats, TrainData, Trainer

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "ete", "steps", "lr", "loss_mim", "loss_vis", "loss_total", "m_pred_realized", "wall_s"]
VAL_HEADER = ["epoch", "ete", "val_loss_mim", "val_loss_vis"]
MAX_GRID = 64

# settings that must agree for two runs to be comparable
COMPAT_KEYS = ("dataset", "split_seed", "val_fraction", "val_pattern", "val_m_corr", "image_size",
               "patch_size", "in_chans", "encoder_dim", "encoder_depth", "encoder_heads", "decoder_dim",
               "decoder_heads", "mlp_ratio", "target_dim", "mim_kind", "mim_norm")


# -- CSV ------------------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([_fmt(getattr(r, k)) for k in METRICS_HEADER])


def write_val_metrics(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VAL_HEADER)
        for r in records:
            w.writerow([_fmt(r.epoch), _fmt(r.ete), _fmt(r.val_loss_mim), _fmt(r.val_loss_vis)])


def read_csv_table(path, header) -> dict[str, np.ndarray]:
    """Parse and validate a metrics CSV: exact header, numeric cells, increasing epochs."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise FormatError(f"{path}: header {rows[0] if rows else []} != {header}")
    cols = {k: [] for k in header}
    for i, row in enumerate(rows[1:], 2):
        if len(row) != len(header):
            raise FormatError(f"{path}: line {i} has {len(row)} columns, expected {len(header)}")
        for k, cell in zip(header, row):
            try:
                cols[k].append(float(cell))
            except ValueError:
                raise FormatError(f"{path}: line {i}: {k}={cell!r} is not numeric") from None
    out = {k: np.array(v) for k, v in cols.items()}
    if len(out["epoch"]) and (np.diff(out["epoch"]) <= 0).any():
        raise FormatError(f"{path}: epoch column is not strictly increasing")
    return out


def read_metrics(run_dir) -> dict[str, np.ndarray]:
    return read_csv_table(Path(run_dir) / "metrics.csv", METRICS_HEADER)


def read_val_metrics(run_dir) -> dict[str, np.ndarray]:
    return read_csv_table(Path(run_dir) / "val_metrics.csv", VAL_HEADER)


# -- pretraining ------------------------------------------------------------------

def build_train_data(cfg: ExperimentConfig, ds: Dataset, idx) -> TrainData:
    external = None
    if cfg.target.vis_kind == "external":
        emb = external_target_load(cfg.target.external_path, cfg.model.n_tokens, cfg.model.vis_target_dim)
        if emb.values.shape[0] != len(ds):
            raise FormatError(f"{cfg.target.external_path}: {emb.values.shape[0]} embeddings for "
                              f"{len(ds)} images")
        external = emb.values[idx]
    return TrainData.from_images(ds.images[idx], cfg.model, cfg.target, external=external,
                                 flip=cfg.train.flip, keep_images=cfg.train.crop)


def check_dataset(cfg: ExperimentConfig, ds: Dataset) -> None:
    _, h, w, c = ds.images.shape
    problems = []
    if h != cfg.model.image_size or w != cfg.model.image_size:
        problems.append(f"dataset images are {h}x{w}, config expects image_size={cfg.model.image_size}")
    if c != cfg.model.in_chans:
        problems.append(f"dataset has {c} channels, config expects in_chans={cfg.model.in_chans}")
    if problems:
        raise ConfigError(problems)


@dataclass
class PretrainResult:
    run_dir: Path | None
    stats: RunStats
    model: DMJDModel
    probe: dict | None = None


def run_pretrain(cfg: ExperimentConfig, dataset: Dataset | None = None, run_dir=None, write=True,
                 on_epoch=None) -> PretrainResult:
    """Train per config; write config snapshot, metrics CSVs and checkpoint into the run directory."""
    cfg = cfg.copy().resolve()
    if dataset is None:
        if not cfg.run.dataset:
            raise ConfigError("no dataset given (set 'dataset' in the config)")
        dataset = load_dataset(cfg.run.dataset)
    check_dataset(cfg, dataset)
    train_idx, val_idx = split_indices(len(dataset), cfg.run.split_seed, cfg.run.val_fraction)
    train_data = build_train_data(cfg, dataset, train_idx)
    val_data = build_train_data(cfg, dataset, val_idx) if len(val_idx) else None

    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 1]))
    model = DMJDModel(cfg.model, rng=rng, dtype=np.float32)
    model.vdb_stop_grad = cfg.run.vdb_stop_grad
    trainer = Trainer(model, train_data, cfg.train, cfg.loss, val_data=val_data,
                      val_pattern=cfg.run.val_pattern, val_m_corr=cfg.run.val_m_corr)

    out = None
    if write:
        out = Path(run_dir) if run_dir is not None else Path(cfg.run.out_dir) / cfg.run.run_name
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.dumps())

    def epoch_done(rec: EpochRecord):
        if out is not None:
            write_metrics(out / "metrics.csv", trainer.stats.records)
            write_val_metrics(out / "val_metrics.csv", trainer.stats.records)
        log.info("epoch %d ete %d loss_mim %.4f loss_vis %.4f val_mim %.4f", rec.epoch, rec.ete,
                 rec.loss_mim, rec.loss_vis, rec.val_loss_mim)
        if on_epoch is not None:
            on_epoch(rec)

    status = "ok"
    try:
        trainer.fit(on_epoch=epoch_done)
    except NumericError:
        status = "numeric_failure"
        raise
    finally:
        if out is not None:
            (out / "run.json").write_text(json.dumps({
                "schema_version": SCHEMA_VERSION, "seed": cfg.train.seed, "status": status,
                "epochs_completed": len(trainer.stats.records), "config_digest": cfg.digest(),
            }, indent=2) + "\n")
    result = PretrainResult(out, trainer.stats, model)
    if out is not None and cfg.run.checkpoint:
        save_checkpoint(out / "checkpoint.dmjc", model, {"schema_version": SCHEMA_VERSION,
                                                          "seed": cfg.train.seed})
    if cfg.run.probe_epochs > 0 and dataset.labeled:
        result.probe = linear_probe(model, dataset, cfg.run.probe_epochs, seed=cfg.run.split_seed)
        if out is not None:
            (out / "probe.json").write_text(json.dumps(result.probe, indent=2) + "\n")
    return result


# -- linear probe ------------------------------------------------------------------

def _softmax_regression(x, y, n_classes, epochs, seed, lr=0.01, batch=128, wd=1e-4):
    """Multinomial logistic regression trained with Adam on standardized features."""
    rng = np.random.default_rng(seed)
    n, d = x.shape
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    m = [np.zeros_like(w), np.zeros_like(b)]
    v = [np.zeros_like(w), np.zeros_like(b)]
    t = 0
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            i = order[s:s + batch]
            logits = x[i] @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - onehot[i]) / len(i)
            grads = [x[i].T @ g + wd * w, g.sum(axis=0)]
            t += 1
            for k, (param, gk) in enumerate(zip((w, b), grads)):
                m[k] = 0.9 * m[k] + 0.1 * gk
                v[k] = 0.999 * v[k] + 0.001 * gk * gk
                param -= lr * (m[k] / (1 - 0.9 ** t)) / (np.sqrt(v[k] / (1 - 0.999 ** t)) + 1e-8)
    return w, b


def linear_probe(model: DMJDModel, dataset: Dataset, probe_epochs: int = 100, seed: int = 0,
                 holdout: float = 0.2) -> dict:
    """Freeze the encoder, fit a linear classifier on mean-pooled features.

    Returns held-out and train-split top-1 accuracy for a deterministic
    80/20 split drawn from ``seed``.
    """
    if not dataset.labeled:
        raise ContractError("linear probing needs a labeled dataset")
    x = np.asarray(dataset.images, dtype=np.float64) / 255.0
    patches = ((model.patchify(x) - INPUT_MEAN) / INPUT_STD).astype(model.dtype)
    feats = model.features(patches).astype(np.float64)
    train_idx, val_idx = split_indices(len(dataset), seed, holdout)
    mu = feats[train_idx].mean(axis=0)
    sd = feats[train_idx].std(axis=0) + 1e-6
    f = (feats - mu) / sd
    y = dataset.labels.astype(np.int64)
    w, b = _softmax_regression(f[train_idx], y[train_idx], dataset.class_count, probe_epochs, seed)

    def acc(idx):
        return float(((f[idx] @ w + b).argmax(axis=1) == y[idx]).mean()) if len(idx) else float("nan")

    return {"accuracy": acc(val_idx), "train_accuracy": acc(train_idx), "probe_epochs": probe_epochs,
            "n_train": int(len(train_idx)), "n_heldout": int(len(val_idx))}


def run_linear_probe(checkpoint, dataset, probe_epochs: int = 100, seed: int = 0) -> dict:
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    model, _ = load_model(checkpoint)
    return linear_probe(model, dataset, probe_epochs, seed)


# -- comparison --------------------------------------------------------------------

def read_run_config(run_dir) -> ExperimentConfig:
    return ExperimentConfig.load(Path(run_dir) / "config.txt")


def first_crossing(values, threshold):
    hit = np.flatnonzero(np.asarray(values) <= threshold)
    return int(hit[0]) if hit.size else None


@dataclass
class Crossing:
    epoch: int | None
    ete: int | None
    wall_s: float | None

    @property
    def crossed(self) -> bool:
        return self.epoch is not None


@dataclass
class SpeedupReport:
    threshold: float
    metric: str
    a: Crossing
    b: Crossing
    ratios: dict = field(default_factory=dict)

    def lines(self):
        def show(c):
            return "never crossed" if not c.crossed else f"epoch {c.epoch}, ETE {c.ete}, {c.wall_s:.2f} s"
        out = [f"threshold {self.metric} <= {self.threshold:g}", f"A: {show(self.a)}", f"B: {show(self.b)}"]
        for k, v in self.ratios.items():
            out.append(f"ratio B/A {k}: {'n/a' if v is None else f'{v:.4f}'}")
        return out


def crossing_from_tables(metrics, val, threshold, metric) -> Crossing:
    source = val if metric.startswith("val_") else metrics
    i = first_crossing(source[metric], threshold)
    if i is None:
        return Crossing(None, None, None)
    epoch = int(source["epoch"][i])
    row = int(np.flatnonzero(metrics["epoch"] == epoch)[0])
    return Crossing(epoch, int(metrics["ete"][row]), float(metrics["wall_s"][row]))


def compare_runs(run_dir_a, run_dir_b, loss_threshold: float, metric: str = "val_loss_mim") -> SpeedupReport:
    """When does each run first reach ``metric <= loss_threshold``; ratios are B over A."""
    if metric not in ("val_loss_mim", "val_loss_vis", "loss_mim", "loss_vis", "loss_total"):
        raise ComparisonError(f"unsupported comparison metric {metric!r}")
    ca, cb = read_run_config(run_dir_a), read_run_config(run_dir_b)
    diffs = [k for k in COMPAT_KEYS if format_value(ca.get(k)) != format_value(cb.get(k))]
    if diffs:
        raise ComparisonError("runs are not comparable; differing settings: " + ", ".join(diffs))
    a = crossing_from_tables(read_metrics(run_dir_a), read_val_metrics(run_dir_a), loss_threshold, metric)
    b = crossing_from_tables(read_metrics(run_dir_b), read_val_metrics(run_dir_b), loss_threshold, metric)
    ratios = {}
    for key in ("epoch", "ete", "wall_s"):
        va, vb = getattr(a, key), getattr(b, key)
        ratios[key] = (vb / va) if (va and vb is not None) else None
    return SpeedupReport(loss_threshold, metric, a, b, ratios)


def epochs_to_reach(values, threshold):
    """1-based epoch at which ``values`` first drops to ``threshold`` (None if never)."""
    i = first_crossing(values, threshold)
    return None if i is None else i + 1


# -- ablation ------------------------------------------------------------------------

def parse_grid(text: str) -> dict[str, list[str]]:
    """``key = v1, v2, ...`` lines; ``#`` comments allowed."""
    grid = {}
    keys = ExperimentConfig.key_map()
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, values = line.partition("=")
        key = key.strip()
        if not sep or key not in keys:
            problems.append(f"line {lineno}: unknown or malformed grid entry {line!r}")
            continue
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
    if problems:
        raise ConfigError(problems)
    return grid


def expand_grid(base: ExperimentConfig, grid: dict) -> list[tuple[dict, ExperimentConfig]]:
    if not grid or any(not v for v in grid.values()):
        raise ConfigError("ablation grid is empty")
    keys = list(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    if len(combos) > MAX_GRID:
        raise ConfigError(f"ablation grid has {len(combos)} configs; the limit is {MAX_GRID}")
    out = []
    for combo in combos:
        cfg = base.copy()
        for k, v in zip(keys, combo):
            cfg.set(k, v)
        out.append((dict(zip(keys, combo)), cfg))
    return out


def _run_member(args):
    overrides, cfg, dataset, out_root, threads = args
    if threads:
        from threadpoolctl import threadpool_limits
        threadpool_limits(threads)
    digest = cfg.digest()
    run_dir = Path(out_root) / f"cfg-{digest}"
    try:
        res = run_pretrain(cfg, dataset=dataset, run_dir=run_dir)
        return {"overrides": overrides, "digest": digest, "run_dir": str(run_dir),
                "records": res.stats.records, "probe": res.probe, "error": None}
    except Exception as exc:  # member failures are reported, not fatal
        return {"overrides": overrides, "digest": digest, "run_dir": str(run_dir), "records": [],
                "probe": None, "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class AblationResult:
    results: list
    long_csv: Path
    final_csv: Path

    @property
    def failures(self):
        return [r for r in self.results if r["error"]]


def run_ablation(base: ExperimentConfig, grid: dict, out_dir, dataset: Dataset | None = None,
                 jobs: int = 1) -> AblationResult:
    """Run every grid member and aggregate per-epoch and final metrics, keyed by config hash."""
    members = expand_grid(base, grid)
    for _, cfg in members:
        cfg.copy().resolve()
    if dataset is None:
        paths = {cfg.run.dataset for _, cfg in members}
        if len(paths) == 1 and next(iter(paths)):
            dataset = load_dataset(next(iter(paths)))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = [(ov, cfg, dataset, out, 1 if jobs > 1 else 0) for ov, cfg in members]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_member, args))
    else:
        results = [_run_member(a) for a in args]

    keys = list(grid)
    long_path, final_path = out / "ablation_long.csv", out / "ablation_final.csv"
    val_cols = ["val_loss_mim", "val_loss_vis"]
    with open(long_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", *keys, *METRICS_HEADER, *val_cols])
        for r in results:
            for rec in r["records"]:
                w.writerow([r["digest"], *(r["overrides"][k] for k in keys),
                            *(_fmt(getattr(rec, c)) for c in METRICS_HEADER + val_cols)])
    with open(final_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config_hash", *keys, "status", "epochs_done", "ete", "loss_mim", "loss_vis", "loss_total",
                    "val_loss_mim", "val_loss_vis", "probe_accuracy"])
        for r in results:
            last = r["records"][-1] if r["records"] else None
            probe = r["probe"]["accuracy"] if r["probe"] else float("nan")
            vals = ([last.epoch, last.ete, last.loss_mim, last.loss_vis, last.loss_total,
                     last.val_loss_mim, last.val_loss_vis] if last else [0, 0] + [math.nan] * 5)
            w.writerow([r["digest"], *(r["overrides"][k] for k in keys), "failed" if r["error"] else "ok",
                        *(_fmt(v) for v in vals), _fmt(probe)])
    failures = [r for r in results if r["error"]]
    if failures:
        (out / "ablation_failures.txt").write_text(
            "".join(f"{r['digest']} {r['overrides']}: {r['error']}\n" for r in failures))
    return AblationResult(results, long_path, final_path)


# -- gradient verification ------------------------------------------------------------

def micro_model_config(**overrides):
    """A model small enough for exhaustive finite-difference checks."""
    from .model import ModelConfig
    base = dict(image_size=8, patch_size=2, in_chans=3, encoder_dim=8, encoder_depth=1, encoder_heads=2,
                decoder_dim=8, decoder_depth=2, decoder_heads=2, mlp_ratio=2.0, projector_hidden=8)
    base.update(overrides)
    return ModelConfig(**base)


def objective_grad_check(cfg: ExperimentConfig | None = None, seed: int = 0, max_coords: int | None = None,
                         tol: float = 1e-3):
    """Finite-difference check of the joint objective over every parameter tensor (64-bit).

    One image, ``k_views`` disjoint views, pixel reconstruction targets plus
    the configured visible-distillation targets.
    """
    from . import autodiff as ad
    from .trainer import TargetConfig, TrainConfig

    if cfg is None:
        cfg = ExperimentConfig(model=micro_model_config(), train=TrainConfig(k_views=2, m_corr=0.5, flip=False),
                               target=TargetConfig(vis_kind="hog", hog_cells=1, hog_bins=4))
    cfg = cfg.copy().resolve()
    rng = np.random.default_rng(seed)
    size, chans = cfg.model.image_size, cfg.model.in_chans
    image = rng.integers(0, 256, size=(1, size, size, chans)).astype(np.uint8)
    with ad.precision(np.float64):
        model = DMJDModel(cfg.model, rng=rng, dtype=np.float64)
        model.vdb_stop_grad = cfg.run.vdb_stop_grad
        data = TrainData.from_images(image, cfg.model, cfg.target, dtype=np.float64, flip=False)
        trainer = Trainer(model, data, cfg.train, cfg.loss)
        masks = trainer.sample_batch_masks(1)
        k = cfg.train.k_views
        patches = np.repeat(data.patches[0], k, axis=0)
        mim_t = np.repeat(data.mim[0], k, axis=0)
        vis_t = np.repeat(data.vis[0], k, axis=0) if data.vis is not None else None

        def objective():
            return trainer.loss_terms(patches, masks, mim_t, vis_t)[2]

        return ad.grad_check(objective, model.params, tol=tol, max_coords=max_coords,
                             rng=np.random.default_rng(seed + 1))
