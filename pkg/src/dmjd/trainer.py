"""Pretraining loop: K disjoint views per image, AdamW, warmup + cosine, telemetry."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from . import autodiff as ad
from .errors import ConfigError, NumericError
from .masking import MaskPattern, n_masked, plan_view_quotas, round_half_up, sample_mask, sample_views
from .model import DMJDModel, ModelConfig, no_decay
from .patches import patchify
from .objective import LossConfig, mim_loss, total_loss, visible_distill_loss
from .targets import hog_dim, hog_target, normalize_values, pixel_target

INPUT_MEAN, INPUT_STD = 0.5, 0.25
VAL_MASK_SEED = 20_240_917


@dataclass
class TrainConfig:
    base_lr: float = 1.5e-4
    batch_size: int = 64
    k_views: int = 1
    m_corr: float = 0.75
    m_pred: float | None = None       # None: m_corr for K=1, else min(1, K*m_corr)
    pattern: str = "uniform"          # uniform | block
    min_block_tokens: int = 4
    weight_decay: float = 0.05
    epochs: int = 30
    warmup_epochs: float = 2.0
    min_lr: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    lr_rule: str = "adaptive"         # adaptive | linear
    flip: bool = True
    crop: bool = False                # random resized crop, recomputing targets per batch
    crop_scale: float = 0.2           # smallest crop area as a fraction of the image
    seed: int = 0

    @property
    def target_pred_rate(self) -> float:
        if self.m_pred is not None:
            return self.m_pred
        return self.m_corr if self.k_views == 1 else min(1.0, self.k_views * self.m_corr)

    def problems(self) -> list[str]:
        out = []
        if self.k_views < 1:
            out.append("k_views must be >= 1")
        elif self.batch_size % self.k_views:
            out.append(f"batch_size {self.batch_size} not divisible by k_views {self.k_views}")
        if self.batch_size < 1 or self.epochs < 1:
            out.append("batch_size and epochs must be positive")
        if not 0 < self.m_corr <= 1:
            out.append(f"m_corr {self.m_corr} outside (0, 1]")
        if self.target_pred_rate < self.m_corr:
            out.append(f"m_pred {self.target_pred_rate} below m_corr {self.m_corr}")
        if self.k_views == 1 and self.m_pred is not None and self.m_pred != self.m_corr:
            out.append("a single view cannot raise m_pred above m_corr")
        if self.pattern not in ("uniform", "block"):
            out.append(f"pattern must be uniform or block, got {self.pattern!r}")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.warmup_epochs < 0 or self.min_lr < 0:
            out.append("base_lr must be positive; weight_decay, warmup_epochs, min_lr non-negative")
        if self.warmup_epochs > self.epochs:
            out.append("warmup_epochs exceeds epochs")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("AdamW betas must lie in [0, 1)")
        if not 0 < self.crop_scale <= 1:
            out.append(f"crop_scale {self.crop_scale} outside (0, 1]")
        if self.lr_rule not in ("adaptive", "linear"):
            out.append(f"lr_rule must be adaptive or linear, got {self.lr_rule!r}")
        return out

    def mask_pattern(self, grid=None) -> MaskPattern:
        if self.pattern == "block":
            return MaskPattern.block(self.min_block_tokens, grid=grid)
        return MaskPattern.uniform(grid=grid)


# -- schedule ----------------------------------------------------------------

def scaled_lr(eta_base: float, batch_size: int, k_views: int, m_pred: float, m_corr: float) -> float:
    """``eta_base * (b/K * m_pred/m_corr) / 256``."""
    if min(eta_base, batch_size, k_views, m_pred, m_corr) <= 0:
        raise ConfigError("scaled_lr arguments must be positive")
    if batch_size % k_views:
        raise ConfigError(f"batch size {batch_size} is not divisible by K={k_views}")
    if m_pred < m_corr:
        raise ConfigError(f"m_pred {m_pred} below m_corr {m_corr}")
    unique = batch_size // k_views
    return eta_base * (unique * (m_pred / m_corr)) / 256


def peak_lr(cfg: TrainConfig) -> float:
    if cfg.lr_rule == "linear":
        return cfg.base_lr * cfg.batch_size / 256
    return scaled_lr(cfg.base_lr, cfg.batch_size, cfg.k_views, cfg.target_pred_rate, cfg.m_corr)


def lr_at_step(cfg: TrainConfig, step: int, steps_per_epoch: int, peak: float | None = None) -> float:
    """Linear warmup from 0, then half-cosine down to ``min_lr``."""
    peak = peak_lr(cfg) if peak is None else peak
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return peak * step / warm
    if total <= warm:
        return peak
    progress = min(1.0, (step - warm) / (total - warm))
    return cfg.min_lr + (peak - cfg.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def effective_epochs(k_views: int, epochs: int) -> int:
    if k_views < 1 or epochs < 0:
        raise ValueError("k_views must be positive and epochs non-negative")
    return k_views * epochs


def steps_per_epoch(n_images: int, k_views: int, batch_size: int) -> int:
    return math.ceil(n_images * k_views / batch_size)


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float,
               betas=(0.9, 0.95), eps: float = 1e-8, decay=None) -> None:
    """In-place AdamW update: decoupled decay first, then the bias-corrected Adam step.

    ``decay(name)`` says whether a parameter is decayed (default: all).
    A missing gradient counts as zero.
    """
    b1, b2 = betas
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        data = p.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        if weight_decay and (decay is None or decay(name)):
            data *= data.dtype.type(1.0 - lr * weight_decay)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(data.dtype, copy=False)


# -- data -----------------------------------------------------------------------------

@dataclass
class TargetConfig:
    mim_kind: str = "pixel"              # pixel | hog
    mim_norm: str = "per_patch_standardize"
    vis_kind: str = "none"               # none | pixel | hog | external
    vis_norm: str = "layer_norm"
    hog_bins: int = 9
    hog_cells: int = 2
    external_path: str = ""

    def dim(self, kind: str, mcfg: ModelConfig, external_dim: int = 0) -> int:
        if kind == "pixel":
            return mcfg.patch_dim
        if kind == "hog":
            return hog_dim(mcfg.patch_size, mcfg.in_chans, self.hog_bins, self.hog_cells)
        if kind == "external":
            return external_dim
        return 0


def _targets(kind, norm, x, mcfg, tcfg, external=None):
    if kind == "pixel":
        return pixel_target(x, mcfg.patch_size, norm).values
    if kind == "hog":
        return hog_target(x, mcfg.patch_size, tcfg.hog_bins, tcfg.hog_cells, norm).values
    if kind == "external":
        return normalize_values(np.asarray(external, dtype=np.float64), norm)
    raise ConfigError(f"unknown target kind {kind!r}")


def encode_images(x: np.ndarray, mcfg: ModelConfig, tcfg: TargetConfig, dtype=np.float32, external=None):
    """Model inputs plus reconstruction and distillation targets for images in [0, 1]."""
    patches = ((patchify(x, mcfg.patch_size) - INPUT_MEAN) / INPUT_STD).astype(dtype)
    mim = _targets(tcfg.mim_kind, tcfg.mim_norm, x, mcfg, tcfg).astype(dtype)
    vis = None
    if tcfg.vis_kind != "none":
        vis = _targets(tcfg.vis_kind, tcfg.vis_norm, x, mcfg, tcfg, external).astype(dtype)
    return patches, mim, vis


def crop_box(h: int, w: int, rng, scale_min: float, ratio=(3 / 4, 4 / 3), attempts: int = 10):
    """Area-and-aspect crop sampling; falls back to the largest centred box of clamped aspect."""
    area = h * w
    log_r = np.log(ratio)
    for _ in range(attempts):
        target = area * rng.uniform(scale_min, 1.0)
        aspect = float(np.exp(rng.uniform(*log_r)))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    aspect = w / h
    if aspect < ratio[0]:
        cw, ch = w, int(round(w / ratio[0]))
    elif aspect > ratio[1]:
        ch, cw = h, int(round(h * ratio[1]))
    else:
        ch, cw = h, w
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def resized_crop(img: np.ndarray, box, size: int) -> np.ndarray:
    """Bilinear resample of ``img[top:top+ch, left:left+cw]`` onto a ``size`` x ``size`` grid."""
    top, left, ch, cw = box
    sub = img[top:top + ch, left:left + cw]
    ys = (np.arange(size) + 0.5) * ch / size - 0.5
    xs = (np.arange(size) + 0.5) * cw / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    # edge samples clamp to the crop, never reaching pixels outside it
    return np.stack([map_coordinates(sub[..., c], [yy, xx], order=1, mode="nearest")
                     for c in range(img.shape[-1])], axis=-1)


@dataclass
class TrainData:
    """Model inputs and precomputed targets; index 1 of each pair is the h-flipped copy.

    ``images`` keeps the raw [0, 1] images when targets must be recomputed
    per batch (random resized crop).
    """

    patches: tuple
    mim: tuple
    vis: tuple | None
    images: np.ndarray | None = None
    model_cfg: ModelConfig | None = None
    target_cfg: TargetConfig | None = None

    @property
    def n_images(self) -> int:
        return len(self.patches[0])

    @classmethod
    def from_images(cls, images: np.ndarray, mcfg: ModelConfig, tcfg: TargetConfig, dtype=np.float32,
                    external: np.ndarray | None = None, flip: bool = True, keep_images: bool = False):
        x = np.asarray(images, dtype=np.float64) / 255.0
        if tcfg.vis_kind == "external" and (flip or keep_images):
            raise ConfigError("external targets cannot be combined with flip or crop augmentation")
        variants = [x, x[:, :, ::-1, :]] if flip else [x]
        patches, mim, vis = [], [], []
        for img in variants:
            p, m, v = encode_images(img, mcfg, tcfg, dtype, external)
            patches.append(p)
            mim.append(m)
            if v is not None:
                vis.append(v)
        if not flip:
            patches, mim, vis = patches * 2, mim * 2, vis * 2
        return cls(tuple(patches), tuple(mim), tuple(vis) if vis else None,
                   x if keep_images else None, mcfg, tcfg)

    def subset(self, idx) -> "TrainData":
        pick = lambda pair: tuple(a[idx] for a in pair) if pair is not None else None  # noqa: E731
        images = None if self.images is None else self.images[idx]
        return TrainData(pick(self.patches), pick(self.mim), pick(self.vis), images, self.model_cfg, self.target_cfg)


# -- telemetry -------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    ete: int
    steps: int
    lr: float
    loss_mim: float
    loss_vis: float
    loss_total: float
    m_pred_realized: float
    wall_s: float
    val_loss_mim: float = float("nan")
    val_loss_vis: float = float("nan")


@dataclass
class RunStats:
    k_views: int
    records: list = field(default_factory=list)

    @property
    def ete(self) -> int:
        return effective_epochs(self.k_views, len(self.records))

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])


# -- the loop ------------------------------------------------------------------------------

class Trainer:
    """Owns model, optimizer state and RNG streams for one pretraining run."""

    def __init__(self, model: DMJDModel, data: TrainData, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                 val_data: TrainData | None = None, val_pattern: str = "uniform", val_m_corr: float = 0.75):
        problems = cfg.problems()
        if problems:
            raise ConfigError(problems)
        if data.n_images < 1:
            raise ConfigError("dataset is empty")
        if cfg.crop and data.images is None:
            raise ConfigError("crop augmentation needs TrainData built with keep_images=True")
        self.model = model
        self.data = data
        self.cfg = cfg
        self.loss_cfg = loss_cfg or LossConfig()
        self.use_vis = bool(model.cfg.vis_target_dim) and data.vis is not None
        n = model.cfg.n_tokens
        self.plan = plan_view_quotas(n, cfg.m_corr, cfg.k_views, cfg.target_pred_rate,
                                     cfg.mask_pattern(model.cfg.grid))
        seeds = np.random.SeedSequence(cfg.seed).spawn(3)
        self.order_rng = np.random.default_rng(seeds[0])
        self.mask_rng = np.random.default_rng(seeds[1])
        self.aug_rng = np.random.default_rng(seeds[2])
        self.state = AdamState()
        self.steps_per_epoch = steps_per_epoch(data.n_images, cfg.k_views, cfg.batch_size)
        self.peak = peak_lr(cfg)
        self.step = 0
        self.stats = RunStats(cfg.k_views)
        self.val_data = val_data
        self.val_masks = None
        if val_data is not None:
            vrng = np.random.default_rng(VAL_MASK_SEED)
            pat = MaskPattern.block(cfg.min_block_tokens, grid=model.cfg.grid) if val_pattern == "block" \
                else MaskPattern.uniform(grid=model.cfg.grid)
            self.val_masks = np.stack([sample_mask(n, pat, val_m_corr, vrng).bits
                                       for _ in range(val_data.n_images)])

    def sample_batch_masks(self, n_images: int) -> np.ndarray:
        """``(n_images * K, N)`` masks; rows ``i*K .. i*K+K-1`` are image i's views."""
        out = np.empty((n_images * self.cfg.k_views, self.model.cfg.n_tokens), dtype=bool)
        for i in range(n_images):
            for k, view in enumerate(sample_views(self.plan, self.mask_rng)):
                out[i * self.cfg.k_views + k] = view.bits
        return out

    def loss_terms(self, patches, masks, mim_t, vis_t):
        model = self.model
        z = model.encode_visible(patches, masks)
        l_mim = mim_loss(model.decode_masked(z, masks), mim_t, masks)
        l_vis = None
        if self.use_vis:
            l_vis = visible_distill_loss(model.project_visible(z), vis_t, masks, "none", self.loss_cfg.beta)
        return l_mim, l_vis, total_loss(l_vis, l_mim, self.loss_cfg.lam)

    def train_step(self, idx: np.ndarray, grad_hook=None):
        cfg, data, k = self.cfg, self.data, self.cfg.k_views
        flips = (self.aug_rng.random(len(idx)) < 0.5) if cfg.flip else np.zeros(len(idx), dtype=bool)
        masks = self.sample_batch_masks(len(idx))
        if cfg.crop:
            patches, mim_t, vis_t = (None if a is None else np.repeat(a, k, axis=0)
                                     for a in self.augmented_batch(idx, flips))
            vis_t = vis_t if self.use_vis else None
        else:
            def pick(pair):
                return np.repeat(np.where(flips[:, None, None], pair[1][idx], pair[0][idx]), k, axis=0)

            patches = pick(data.patches)
            mim_t = pick(data.mim)
            vis_t = pick(data.vis) if self.use_vis else None
        lr = lr_at_step(cfg, self.step, self.steps_per_epoch, self.peak)
        self.model.zero_grad()
        l_mim, l_vis, loss = self.loss_terms(patches, masks, mim_t, vis_t)
        ad.backward(loss)
        if grad_hook is not None:
            grad_hook(self.step, self.model)
        grads = {n: p.grad for n, p in self.model.params.items()}
        adamw_step(self.model.params, grads, self.state, lr, cfg.weight_decay,
                   (cfg.beta1, cfg.beta2), cfg.adam_eps, decay=lambda n: not no_decay(n))
        self.step += 1
        union = masks.reshape(len(idx), k, -1).any(axis=1).mean(axis=1)
        return (float(l_mim.data), float(l_vis.data) if l_vis is not None else 0.0,
                float(loss.data), lr, union)

    def augmented_batch(self, idx: np.ndarray, flips: np.ndarray):
        """Crop, resize and flip the raw images of ``idx``, then recompute inputs and targets."""
        data, size = self.data, self.model.cfg.image_size
        out = []
        for i, flip in zip(idx, flips):
            img = data.images[i]
            img = resized_crop(img, crop_box(*img.shape[:2], self.aug_rng, self.cfg.crop_scale), size)
            out.append(img[:, ::-1] if flip else img)
        return encode_images(np.stack(out), data.model_cfg, data.target_cfg, data.patches[0].dtype)

    def validate(self, batch_size=256) -> tuple[float, float]:
        if self.val_data is None:
            return float("nan"), float("nan")
        mims, viss, weights = [], [], []
        with ad.no_grad():
            for s in range(0, self.val_data.n_images, batch_size):
                sl = slice(s, s + batch_size)
                vis_t = self.val_data.vis[0][sl] if self.use_vis else None
                l_mim, l_vis, _ = self.loss_terms(self.val_data.patches[0][sl], self.val_masks[sl],
                                                  self.val_data.mim[0][sl], vis_t)
                mims.append(float(l_mim.data))
                viss.append(float(l_vis.data) if l_vis is not None else 0.0)
                weights.append(len(self.val_masks[sl]))
        return float(np.average(mims, weights=weights)), float(np.average(viss, weights=weights))

    def train_epoch(self, grad_hook=None) -> EpochRecord:
        cfg = self.cfg
        epoch = len(self.stats.records) + 1
        t0 = time.perf_counter()
        unique = cfg.batch_size // cfg.k_views
        order = self.order_rng.permutation(self.data.n_images)
        sums = np.zeros(3)
        weight = 0
        unions = []
        lr = 0.0
        for s in range(self.steps_per_epoch):
            idx = order[s * unique:(s + 1) * unique]
            if len(idx) == 0:
                continue
            try:
                l_mim, l_vis, l_tot, lr, union = self.train_step(idx, grad_hook)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, step {s}: {exc}") from exc
            sums += np.array([l_mim, l_vis, l_tot]) * len(idx)
            weight += len(idx)
            unions.append(union)
        val_mim, val_vis = self.validate()
        elapsed = time.perf_counter() - t0
        prev = self.stats.records[-1].wall_s if self.stats.records else 0.0
        means = sums / max(weight, 1)
        rec = EpochRecord(epoch=epoch, ete=effective_epochs(cfg.k_views, epoch), steps=self.steps_per_epoch,
                          lr=lr, loss_mim=float(means[0]), loss_vis=float(means[1]), loss_total=float(means[2]),
                          m_pred_realized=float(np.concatenate(unions).mean()), wall_s=prev + elapsed,
                          val_loss_mim=val_mim, val_loss_vis=val_vis)
        self.stats.records.append(rec)
        return rec

    def fit(self, epochs: int | None = None, on_epoch=None) -> RunStats:
        for _ in range(epochs or self.cfg.epochs):
            rec = self.train_epoch()
            if on_epoch is not None:
                on_epoch(rec)
        return self.stats


def realized_quota_rate(n_tokens: int, cfg: TrainConfig) -> float:
    """The prediction rate the integer quotas actually realize."""
    return round_half_up(n_tokens * cfg.target_pred_rate) / n_tokens


__all__ = [
    "TrainConfig", "TargetConfig", "TrainData", "Trainer", "RunStats", "EpochRecord", "AdamState",
    "encode_images", "crop_box", "resized_crop",
    "scaled_lr", "peak_lr", "lr_at_step", "adamw_step", "effective_epochs", "steps_per_epoch",
    "realized_quota_rate", "n_masked",
]
