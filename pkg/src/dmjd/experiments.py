"""Desk-scale experiment arms shared by the scripts and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .data import Dataset, generate_toy_dataset
from .harness import epochs_to_reach, linear_probe, run_pretrain
from .model import DMJDModel

TOY_IMAGES = 1000
TOY_SEED = 0
EFFICIENCY_EPOCHS = 30
DESK_BASE_LR = 7e-4
SEEDS = (0, 1, 2)

# K=1 uniform baseline, disjoint masking, and disjoint masking with HOG distillation
ARMS = {
    "baseline": dict(k_views=1, pattern="uniform", m_corr=0.75, vis_kind="none"),
    "dm": dict(k_views=2, pattern="block", m_corr=0.6, m_pred=0.95, vis_kind="none"),
    "dmjd": dict(k_views=2, pattern="block", m_corr=0.6, m_pred=0.95, vis_kind="hog"),
}


def toy_dataset(n_images: int = TOY_IMAGES, seed: int = TOY_SEED) -> Dataset:
    return generate_toy_dataset(n_images, 32, 10, seed)


def arm_config(arm: str, seed: int, epochs: int = EFFICIENCY_EPOCHS, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig()
    settings = dict(base_lr=DESK_BASE_LR, epochs=epochs, warmup_epochs=2.0, seed=seed,
                    run_name=f"{arm}-s{seed}", checkpoint=False)
    settings.update(ARMS[arm])
    settings.update(overrides)
    for key, value in settings.items():
        cfg.set(key, value)
    return cfg


@dataclass
class ArmRun:
    arm: str
    seed: int
    val_loss_mim: np.ndarray
    model: DMJDModel


def run_arm(arm: str, seed: int, dataset: Dataset, epochs: int = EFFICIENCY_EPOCHS, run_dir=None,
            **overrides) -> ArmRun:
    cfg = arm_config(arm, seed, epochs, **overrides)
    res = run_pretrain(cfg, dataset, run_dir=run_dir, write=run_dir is not None)
    return ArmRun(arm, seed, res.stats.column("val_loss_mim"), res.model)


def efficiency_ratios(runs: dict[str, list[ArmRun]]) -> dict[str, list[float | None]]:
    """Per seed: epochs an arm needs to reach the baseline's final validation loss, over the baseline's count."""
    out = {}
    base = runs["baseline"]
    for arm, arm_runs in runs.items():
        if arm == "baseline":
            continue
        ratios = []
        for b, r in zip(base, arm_runs):
            reached = epochs_to_reach(r.val_loss_mim, b.val_loss_mim[-1])
            ratios.append(None if reached is None else reached / len(b.val_loss_mim))
        out[arm] = ratios
    return out


def median_ratio(ratios) -> float:
    """Median where a run that never reached the threshold counts as infinitely slow."""
    return float(np.median([np.inf if r is None else r for r in ratios]))


def random_encoder_probe(dataset: Dataset, seed: int, probe_epochs: int = 100, **model_overrides) -> dict:
    cfg = arm_config("dmjd", seed, **model_overrides).resolve()
    model = DMJDModel(cfg.model, rng=np.random.default_rng(np.random.SeedSequence([seed, 1])))
    return linear_probe(model, dataset, probe_epochs, seed=seed)


PROBE_EPOCHS = 50          # pretraining epochs before probing
PROBE_TRAIN_EPOCHS = 100   # epochs of the linear classifier itself
# the HOG-target setting: both branches regress layer-normalized HOG descriptors
HOG_TARGETS = dict(mim_kind="hog", mim_norm="layer_norm", vis_kind="hog", vis_norm="layer_norm")


def pretrained_probe(seed: int, dataset: Dataset, decoder_depth: int = 2, epochs: int = PROBE_EPOCHS,
                     run_dir=None) -> dict:
    r = run_arm("dmjd", seed, dataset, epochs, run_dir=run_dir, decoder_depth=decoder_depth, **HOG_TARGETS)
    return linear_probe(r.model, dataset, PROBE_TRAIN_EPOCHS, seed=seed)
