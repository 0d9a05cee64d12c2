"""Reconstruction, visible-distillation and joint losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, ParameterError
from .model import split_indices
from .targets import normalize_values


@dataclass
class LossConfig:
    lam: float = 1.0      # weight of the masked-prediction loss
    beta: float = 2.0     # smooth-L1 knee

    def __post_init__(self):
        if self.lam < 0 or self.beta <= 0:
            raise ParameterError(f"need lambda >= 0 and beta > 0, got {self.lam}, {self.beta}")


def _target_array(target, dtype):
    vals = getattr(target, "values", target)
    return np.asarray(vals, dtype=dtype)


def mim_loss(pred: Tensor, target, mask) -> Tensor:
    """Mean squared error over masked tokens only.

    ``pred`` is ``(B, N, D)`` (or ``(N, D)``), ``target`` the matching full
    grid of targets and ``mask`` the boolean view masks. Unmasked slots never
    enter the graph, so their gradient is exactly zero.
    """
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if pred.ndim == 2:
        pred = pred.reshape(1, *pred.shape)
    bits = bits.reshape(pred.shape[0], -1)
    t = _target_array(target, pred.dtype).reshape(pred.shape)
    if bits.shape[1] != pred.shape[1]:
        raise DimensionError(f"mask covers {bits.shape[1]} tokens, predictions have {pred.shape[1]}")
    if not bits.any(axis=1).all():
        raise ContractError("mim_loss needs at least one masked token per view")
    _, msk = split_indices(bits, allow_all_masked=True)
    rows = np.arange(bits.shape[0])[:, None]
    diff = ad.gather_rows(pred, msk) - Tensor(t[rows, msk], dtype=pred.dtype)
    return ad.mean(diff * diff)


def visible_distill_loss(proj: Tensor, target, mask, norm: str = "layer_norm", beta: float = 2.0) -> Tensor:
    """Smooth-L1 between projected visible tokens and normalized targets.

    ``proj`` rows follow the ascending visible-token order produced by the
    encoder; ``target`` is the full ``(B, N, D)`` grid.
    """
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    if proj.ndim == 2:
        proj = proj.reshape(1, *proj.shape)
    bits = bits.reshape(proj.shape[0], -1)
    if bits.all(axis=1).any():
        raise ContractError("visible_distill_loss needs at least one visible token per view")
    vis, _ = split_indices(bits)
    t = _target_array(target, np.float64).reshape(bits.shape[0], bits.shape[1], -1)
    rows = np.arange(bits.shape[0])[:, None]
    tv = normalize_values(t[rows, vis], norm).astype(proj.dtype)
    if tv.shape != proj.shape:
        raise DimensionError(f"projection {proj.shape} does not match visible targets {tv.shape}")
    return ad.mean(ad.smooth_l1(proj - Tensor(tv, dtype=proj.dtype), beta))


def total_loss(l_vis, l_mim, lam: float = 1.0):
    """``l_vis + lam * l_mim``; works on Tensors and plain floats."""
    if isinstance(l_mim, Tensor):
        return ad.add(l_vis, ad.scale(l_mim, lam)) if l_vis is not None else ad.scale(l_mim, lam)
    return (0.0 if l_vis is None else l_vis) + lam * l_mim
