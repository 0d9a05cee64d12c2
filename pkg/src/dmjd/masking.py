"""Token masking: single views, block patterns and disjoint multi-view sampling.

A view masks exactly ``round(N * m_corr)`` tokens. Disjoint sampling draws
view ``k`` partly from tokens no earlier view has masked (its fresh quota)
and partly from the already-covered set, so every view after the first adds
coverage while the per-view corruption rate stays fixed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InfeasiblePlanError, ParameterError, PlanInconsistencyError


def round_half_up(x: float) -> int:
    # the small slack absorbs products like 0.95 * 100 = 94.99999999999999
    return int(math.floor(x + 0.5 + 1e-9))


def n_masked(n_tokens: int, m_corr: float) -> int:
    if not 0.0 < m_corr <= 1.0:
        raise ParameterError(f"corruption rate must lie in (0, 1], got {m_corr}")
    count = round_half_up(n_tokens * m_corr)
    if count < 1:
        raise ParameterError(f"round({n_tokens} * {m_corr}) masks no tokens")
    return count


def grid_shape(n_tokens: int, grid=None) -> tuple[int, int]:
    if grid is not None:
        rows, cols = grid
        if rows * cols != n_tokens:
            raise DimensionError(f"grid {rows}x{cols} does not hold {n_tokens} tokens")
        return int(rows), int(cols)
    side = math.isqrt(n_tokens)
    if side * side != n_tokens:
        raise DimensionError(f"{n_tokens} tokens is not a square grid; pass grid=(rows, cols)")
    return side, side


@dataclass(frozen=True)
class MaskPattern:
    kind: str = "uniform"
    min_block_tokens: int = 4
    aspect_min: float = 0.3
    aspect_max: float = 1 / 0.3
    grid: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "block"):
            raise ParameterError(f"unknown mask pattern {self.kind!r} (uniform|block)")
        if self.min_block_tokens < 1 or not 0 < self.aspect_min <= self.aspect_max:
            raise ParameterError("block parameters must be positive with aspect_min <= aspect_max")

    @classmethod
    def uniform(cls, grid=None):
        return cls("uniform", grid=grid)

    @classmethod
    def block(cls, min_block_tokens=4, aspect=(0.3, 1 / 0.3), grid=None):
        return cls("block", min_block_tokens, aspect[0], aspect[1], grid)

    def check(self, n_tokens: int, m_corr: float) -> None:
        if self.kind == "block":
            grid_shape(n_tokens, self.grid)
            if self.min_block_tokens > n_masked(n_tokens, m_corr):
                raise ParameterError(
                    f"min_block_tokens={self.min_block_tokens} exceeds the "
                    f"{n_masked(n_tokens, m_corr)} tokens masked per view")


@dataclass(frozen=True)
class MaskVector:
    bits: np.ndarray
    corruption_rate: float

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        object.__setattr__(self, "bits", bits)
        expected = n_masked(bits.size, self.corruption_rate)
        if int(bits.sum()) != expected:
            raise ParameterError(f"mask holds {int(bits.sum())} tokens, expected {expected}")

    @property
    def n_tokens(self) -> int:
        return self.bits.size

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.bits)

    def __eq__(self, other):
        return isinstance(other, MaskVector) and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class CumulativeMask:
    covered: np.ndarray
    k_views: int = 0

    @classmethod
    def empty(cls, n_tokens: int) -> "CumulativeMask":
        return cls(np.zeros(n_tokens, dtype=bool), 0)

    @property
    def n_tokens(self) -> int:
        return self.covered.size


def accumulate(cum: CumulativeMask, view: MaskVector) -> CumulativeMask:
    if cum.n_tokens != view.n_tokens:
        raise DimensionError(f"cumulative mask has {cum.n_tokens} tokens, view has {view.n_tokens}")
    return CumulativeMask(cum.covered | view.bits, cum.k_views + 1)


@dataclass(frozen=True)
class DisjointViewPlan:
    n_tokens: int
    k_views: int
    corruption_rate: float
    target_pred_rate: float
    new_quota: tuple
    pattern: MaskPattern = field(default_factory=MaskPattern)

    def __post_init__(self):
        q = tuple(int(v) for v in self.new_quota)
        object.__setattr__(self, "new_quota", q)
        per_view = n_masked(self.n_tokens, self.corruption_rate)
        if len(q) != self.k_views:
            raise PlanInconsistencyError(f"{len(q)} quotas for {self.k_views} views")
        if q[0] != per_view:
            raise PlanInconsistencyError(f"first view must be all fresh ({per_view}), got {q[0]}")
        if any(not 1 <= v <= per_view for v in q[1:]):
            raise PlanInconsistencyError(f"later quotas must lie in [1, {per_view}]: {q}")
        if np.cumsum(q)[-1] > self.n_tokens:
            raise PlanInconsistencyError(f"quotas {q} exceed {self.n_tokens} tokens")
        if sum(q) != round_half_up(self.n_tokens * self.target_pred_rate):
            raise PlanInconsistencyError(
                f"quotas sum to {sum(q)}, target needs {round_half_up(self.n_tokens * self.target_pred_rate)}")

    @property
    def per_view(self) -> int:
        return self.new_quota[0]

    @property
    def realized_pred_rate(self) -> float:
        return sum(self.new_quota) / self.n_tokens


def pred_rate_bounds(n_tokens: int, m_corr: float, k_views: int) -> tuple[float, float]:
    return m_corr + (k_views - 1) / n_tokens, min(1.0, k_views * m_corr)


def pred_count_bounds(n_tokens: int, m_corr: float, k_views: int) -> tuple[int, int]:
    """Smallest and largest union size K views of ``round(N*m_corr)`` tokens can reach."""
    per_view = n_masked(n_tokens, m_corr)
    return per_view + (k_views - 1), min(n_tokens, k_views * per_view)


def plan_view_quotas(n_tokens: int, m_corr: float, k_views: int, target_pred_rate: float | None = None,
                     pattern: MaskPattern | None = None) -> DisjointViewPlan:
    """Split the fresh-token budget across K views.

    View 1 is entirely fresh; the remaining ``round(N*m_pred) - round(N*m_corr)``
    fresh tokens are shared evenly by views 2..K with the remainder going to
    the earliest ones.
    """
    pattern = pattern or MaskPattern()
    per_view = n_masked(n_tokens, m_corr)
    if k_views < 1:
        raise ParameterError("k_views must be >= 1")
    if target_pred_rate is None:
        target_pred_rate = m_corr if k_views == 1 else min(1.0, k_views * m_corr)
    pattern.check(n_tokens, m_corr)
    lo, hi = pred_rate_bounds(n_tokens, m_corr, k_views)
    total = round_half_up(n_tokens * target_pred_rate)
    lo_count, hi_count = pred_count_bounds(n_tokens, m_corr, k_views)
    tol = 1e-12
    if (target_pred_rate < lo - tol or target_pred_rate > hi + tol
            or not lo_count <= total <= hi_count):
        raise InfeasiblePlanError(
            f"target prediction rate {target_pred_rate} is infeasible for N={n_tokens}, "
            f"K={k_views}, m_corr={m_corr}: must lie in [{lo:.6g}, {hi:.6g}] and round(N*m_pred) "
            f"in [{lo_count}, {hi_count}]")
    extra = total - per_view
    quotas = [per_view]
    if k_views > 1:
        base, rem = divmod(extra, k_views - 1)
        quotas += [base + (1 if i < rem else 0) for i in range(k_views - 1)]
    return DisjointViewPlan(n_tokens, k_views, m_corr, target_pred_rate, tuple(quotas), pattern)


# -- block-wise sampling ------------------------------------------------------

def sample_block_union(rows: int, cols: int, target: int, pattern: MaskPattern, rng,
                       max_attempts: int = 10_000):
    """Union of random rectangles covering at least ``target`` cells.

    Returns the untrimmed boolean grid and the flat indices the final
    rectangle added (the only cells trimming may remove).
    """
    grid = np.zeros((rows, cols), dtype=bool)
    count = 0
    last_new = np.empty(0, dtype=np.intp)
    log_lo, log_hi = math.log(pattern.aspect_min), math.log(pattern.aspect_max)
    attempts = 0
    while count < target and attempts < max_attempts:
        attempts += 1
        area = rng.uniform(pattern.min_block_tokens, max(pattern.min_block_tokens, target - count))
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        h = int(round(math.sqrt(area * aspect)))
        w = int(round(math.sqrt(area / aspect)))
        if h < 1 or w < 1 or h > rows or w > cols or h * w < pattern.min_block_tokens:
            continue
        top = int(rng.integers(0, rows - h + 1))
        left = int(rng.integers(0, cols - w + 1))
        rect = np.zeros_like(grid)
        rect[top:top + h, left:left + w] = True
        new = rect & ~grid
        if not new.any():
            continue
        grid |= rect
        last_new = np.flatnonzero(new)
        count = int(grid.sum())
    return grid, last_new


def _masked_neighbours(grid: np.ndarray) -> np.ndarray:
    padded = np.pad(grid.astype(np.int8), 1)
    return (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:]).reshape(-1)


def _distance_to_mask(grid: np.ndarray) -> np.ndarray:
    rows, cols = grid.shape
    r, c = np.divmod(np.arange(rows * cols), cols)
    mr, mc = np.divmod(np.flatnonzero(grid), cols)
    if mr.size == 0:
        return np.zeros(rows * cols)
    return (np.abs(r[:, None] - mr[None, :]) + np.abs(c[:, None] - mc[None, :])).min(axis=1)


def _pick(candidates: np.ndarray, score: np.ndarray, n: int, rng) -> np.ndarray:
    """The ``n`` candidates with the lowest score, ties broken at random."""
    if n <= 0:
        return np.empty(0, dtype=np.intp)
    tie = rng.random(candidates.size)
    order = np.lexsort((tie, score[candidates]))
    return candidates[order[:n]]


def _remove(grid, candidates, n, rng):
    flat = grid.reshape(-1)
    drop = _pick(candidates, _masked_neighbours(grid), n, rng)
    flat[drop] = False


def _add(grid, candidates, n, rng):
    flat = grid.reshape(-1)
    take = _pick(candidates, _distance_to_mask(grid), n, rng)
    flat[take] = True


def _block_mask(n_tokens: int, count: int, pattern: MaskPattern, rng) -> np.ndarray:
    rows, cols = grid_shape(n_tokens, pattern.grid)
    grid, last_new = sample_block_union(rows, cols, count, pattern, rng)
    have = int(grid.sum())
    if have > count:
        _remove(grid, last_new, have - count, rng)
    elif have < count:
        _add(grid, np.flatnonzero(~grid.reshape(-1)), count - have, rng)
    return grid.reshape(-1)


# -- public sampling API ----------------------------------------------------------

def sample_mask(n_tokens: int, pattern: MaskPattern, m_corr: float, rng) -> MaskVector:
    count = n_masked(n_tokens, m_corr)
    pattern.check(n_tokens, m_corr)
    if pattern.kind == "uniform":
        bits = np.zeros(n_tokens, dtype=bool)
        bits[rng.choice(n_tokens, size=count, replace=False)] = True
    else:
        bits = _block_mask(n_tokens, count, pattern, rng)
    return MaskVector(bits, m_corr)


def sample_disjoint_view(n_tokens: int, pattern: MaskPattern, plan: DisjointViewPlan, k: int,
                         cum: CumulativeMask, rng) -> MaskVector:
    """Sample view ``k`` with exactly ``plan.new_quota[k]`` previously unmasked tokens."""
    if not 0 <= k < plan.k_views:
        raise PlanInconsistencyError(f"view index {k} outside plan of {plan.k_views} views")
    if cum.n_tokens != n_tokens or plan.n_tokens != n_tokens:
        raise DimensionError("plan, cumulative mask and token count disagree")
    count = plan.per_view
    fresh_quota = plan.new_quota[k]
    covered = cum.covered
    fresh_pool = np.flatnonzero(~covered)
    if fresh_pool.size < fresh_quota:
        raise PlanInconsistencyError(
            f"view {k} needs {fresh_quota} fresh tokens but only {fresh_pool.size} are unmasked")
    repeat_quota = count - fresh_quota
    covered_pool = np.flatnonzero(covered)
    if covered_pool.size < repeat_quota:
        raise PlanInconsistencyError(
            f"view {k} needs {repeat_quota} repeated tokens but only {covered_pool.size} are covered")

    if pattern.kind == "uniform":
        bits = np.zeros(n_tokens, dtype=bool)
        bits[rng.choice(fresh_pool, size=fresh_quota, replace=False)] = True
        if repeat_quota:
            bits[rng.choice(covered_pool, size=repeat_quota, replace=False)] = True
        return MaskVector(bits, plan.corruption_rate)

    bits = _block_mask(n_tokens, count, pattern, rng)
    grid = bits.reshape(grid_shape(n_tokens, pattern.grid))
    flat = grid.reshape(-1)
    n_fresh = int((flat & ~covered).sum())
    if n_fresh > fresh_quota:
        # swap surplus fresh cells for covered cells next to the block
        d = n_fresh - fresh_quota
        _remove(grid, np.flatnonzero(flat & ~covered), d, rng)
        _add(grid, np.flatnonzero(~flat & covered), d, rng)
    elif n_fresh < fresh_quota:
        d = fresh_quota - n_fresh
        _remove(grid, np.flatnonzero(flat & covered), d, rng)
        _add(grid, np.flatnonzero(~flat & ~covered), d, rng)
    return MaskVector(flat.copy(), plan.corruption_rate)


def sample_views(plan: DisjointViewPlan, rng) -> list[MaskVector]:
    """All K views of one image, sampled sequentially under the plan."""
    cum = CumulativeMask.empty(plan.n_tokens)
    views = []
    for k in range(plan.k_views):
        view = sample_disjoint_view(plan.n_tokens, plan.pattern, plan, k, cum, rng)
        cum = accumulate(cum, view)
        views.append(view)
    return views


def prediction_rate(views) -> float:
    views = list(views)
    if not views:
        raise ParameterError("prediction_rate needs at least one view")
    n = views[0].n_tokens
    union = np.zeros(n, dtype=bool)
    for v in views:
        if v.n_tokens != n:
            raise DimensionError("views have different token counts")
        union |= v.bits
    return float(union.sum()) / n


def format_masks(views) -> str:
    """Debug export: ``"N K"`` then one row of 0/1 characters per view."""
    views = list(views)
    n = views[0].n_tokens if views else 0
    lines = [f"{n} {len(views)}"]
    lines += ["".join("1" if b else "0" for b in v.bits) for v in views]
    return "\n".join(lines) + "\n"


def parse_masks(text: str) -> np.ndarray:
    lines = text.strip().splitlines()
    n, k = (int(t) for t in lines[0].split())
    rows = lines[1:]
    if len(rows) != k or any(len(r) != n or set(r) - {"0", "1"} for r in rows):
        raise ValueError(f"mask dump does not hold {k} rows of {n} 0/1 characters")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool).reshape(k, n)
