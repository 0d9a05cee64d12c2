"""Patch extraction and fixed 2-D sin-cos positional embeddings."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``(..., H, W, C)`` -> ``(..., N, p*p*C)`` with tokens in row-major grid order."""
    *lead, h, w, c = images.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise DimensionError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = images.reshape(*lead, gh, p, gw, p, c)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, gh * gw, p * p * c)


def unpatchify(tokens: np.ndarray, patch_size: int, grid: tuple[int, int], channels: int) -> np.ndarray:
    *lead, n, d = tokens.shape
    gh, gw = grid
    p = patch_size
    if n != gh * gw or d != p * p * channels:
        raise DimensionError(f"{n}x{d} tokens do not match grid {grid} with patch {p}, C={channels}")
    nl = len(lead)
    x = tokens.reshape(*lead, gh, gw, p, p, channels)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, gh * p, gw * p, channels)


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(dim: int, grid: tuple[int, int]) -> np.ndarray:
    """MAE-style fixed embedding: half the channels encode the row, half the column."""
    if dim % 4:
        raise DimensionError(f"positional embedding width {dim} must be divisible by 4")
    gh, gw = grid
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    return np.concatenate([_sincos_1d(dim // 2, rows), _sincos_1d(dim // 2, cols)], axis=1)
