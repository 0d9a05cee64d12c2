"""Per-token regression targets: normalized pixels, HOG descriptors, stored embeddings."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError
from .patches import patchify

NORM_MODES = ("none", "per_patch_standardize", "layer_norm", "l2")
TARGET_KINDS = ("pixel", "hog", "external")

# variance floor for target standardization: rows with variance above it come
# out with exactly unit variance, constant rows come out as zeros
TARGET_EPS = 1e-6
HOG_EPS = 1e-6

EMBED_MAGIC = b"DMJT"


@dataclass
class TargetTensor:
    """Targets for one image ``(N, D)`` or a stack of images ``(M, N, D)``."""

    values: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ParameterError(f"unknown target kind {self.kind!r}")
        if self.values.ndim < 2:
            raise DimensionError("targets need at least (tokens, dim) axes")
        if not np.isfinite(self.values).all():
            raise ParameterError("targets contain non-finite values")

    @property
    def n_tokens(self) -> int:
        return self.values.shape[-2]

    @property
    def dim(self) -> int:
        return self.values.shape[-1]


def _standardize(v: np.ndarray) -> np.ndarray:
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    out = (v - mu) / np.sqrt(np.maximum(var, TARGET_EPS))
    flat = np.ptp(v, axis=-1, keepdims=True) == 0
    return np.where(flat, 0.0, out)


def normalize_values(v: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none":
        return v
    if mode in ("per_patch_standardize", "layer_norm"):
        # both are parameter-free per-token standardization
        return _standardize(v)
    if mode == "l2":
        return v / np.sqrt((v * v).sum(axis=-1, keepdims=True) + 1e-12)
    raise ParameterError(f"unknown normalization {mode!r}; choose from {NORM_MODES}")


def normalize_target(t: TargetTensor, mode: str) -> TargetTensor:
    if mode == "none":
        return t
    return TargetTensor(normalize_values(np.asarray(t.values, dtype=np.float64), mode), t.kind)


def pixel_target(image: np.ndarray, patch_size: int, norm: str = "per_patch_standardize") -> TargetTensor:
    """Flattened ``p x p x C`` patches, normalized token by token."""
    tokens = patchify(np.asarray(image, dtype=np.float64), patch_size)
    return TargetTensor(normalize_values(tokens, norm), "pixel")


# -- HOG ---------------------------------------------------------------------

def image_gradients(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central ``[-1, 0, 1]`` differences with edge replication, per channel."""
    img = np.asarray(image, dtype=np.float64)
    ax_h, ax_w = img.ndim - 3, img.ndim - 2
    pad = [(0, 0)] * img.ndim
    pad[ax_h] = pad[ax_w] = (1, 1)
    p = np.pad(img, pad, mode="edge")
    gx = p[..., 1:-1, 2:, :] - p[..., 1:-1, :-2, :]
    gy = p[..., 2:, 1:-1, :] - p[..., :-2, 1:-1, :]
    return gx, gy


def orientation_votes(gx: np.ndarray, gy: np.ndarray, bins: int):
    """Unsigned orientation split linearly between the two nearest bin centres.

    Bin ``b`` is centred on ``b * pi / bins``; returns (lower bin, upper bin,
    lower weight, upper weight) with weights already scaled by magnitude.
    """
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta / (np.pi / bins)
    base = np.floor(pos)
    frac = pos - base
    lo = base.astype(np.int64) % bins
    hi = (lo + 1) % bins
    return lo, hi, mag * (1.0 - frac), mag * frac


def hog_target(image: np.ndarray, patch_size: int, bins: int = 9, cells: int = 2,
               norm: str = "none") -> TargetTensor:
    """Per-patch HOG: ``cells x cells`` cell histograms per channel, L2 block-normalized.

    Accepts ``(H, W, C)`` or a stack ``(M, H, W, C)``; descriptor layout is
    ``(cell_row, cell_col, channel, bin)`` with dim ``cells*cells*C*bins``.
    """
    img = np.asarray(image, dtype=np.float64)
    if bins < 2:
        raise ParameterError("HOG needs at least 2 orientation bins")
    if cells < 1 or patch_size % cells:
        raise DimensionError(f"patch size {patch_size} is not divisible into {cells}x{cells} cells")
    *lead, h, w, c = img.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    cs = patch_size // cells
    gx, gy = image_gradients(img)
    lo, hi, wlo, whi = orientation_votes(gx, gy, bins)
    hist = np.empty((*lead, h // cs, w // cs, c, bins))
    for b in range(bins):
        vote = np.where(lo == b, wlo, 0.0) + np.where(hi == b, whi, 0.0)
        hist[..., b] = vote.reshape(*lead, h // cs, cs, w // cs, cs, c).sum(axis=(-4, -2))
    gh, gw = h // patch_size, w // patch_size
    nl = len(lead)
    x = hist.reshape(*lead, gh, cells, gw, cells, c, bins)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4, nl + 5)
    desc = x.reshape(*lead, gh * gw, cells * cells * c * bins)
    desc = desc / np.sqrt((desc * desc).sum(axis=-1, keepdims=True) + HOG_EPS)
    return TargetTensor(normalize_values(desc, norm), "hog")


def hog_dim(patch_size: int, channels: int, bins: int = 9, cells: int = 2) -> int:
    return cells * cells * channels * bins


# -- external embeddings -------------------------------------------------------------

def save_embeddings(path, values: np.ndarray) -> None:
    """Write ``(images, N, D)`` embeddings as ``DMJT`` + three u32 + f32 payload."""
    v = np.asarray(values)
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise DimensionError("embeddings must be (images, tokens, dim)")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<3I", *v.shape))
        fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def external_target_load(path, n_tokens: int, dim: int) -> TargetTensor:
    """Load stored embeddings verbatim as an ``(images, N, D)`` stack."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: file too short for a header ({len(raw)} bytes)")
    if raw[:4] != EMBED_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {EMBED_MAGIC!r}")
    images, n, d = struct.unpack_from("<3I", raw, 4)
    if n != n_tokens or d != dim:
        raise FormatError(f"{path}: header declares N={n}, D={d}; expected N={n_tokens}, D={dim}")
    payload = len(raw) - 16
    row_bytes = 4 * d
    want_rows = images * n
    if payload != want_rows * row_bytes:
        found = payload / row_bytes if row_bytes else 0
        found_txt = f"{int(found)}" if float(found).is_integer() else f"{found:.2f}"
        raise FormatError(f"{path}: expected {want_rows} rows of {d} floats, found {found_txt} rows")
    vals = np.frombuffer(raw, dtype="<f4", offset=16).reshape(images, n, d)
    return TargetTensor(vals.astype(np.float32), "external")
