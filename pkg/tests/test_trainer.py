import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmjd.autodiff import Tensor
from dmjd.data import generate_toy_dataset
from dmjd.errors import ConfigError, NumericError
from dmjd.masking import MaskPattern, plan_view_quotas, sample_views
from dmjd.model import DMJDModel, ModelConfig
from dmjd.targets import hog_dim
from dmjd.trainer import (AdamState, TargetConfig, TrainConfig, TrainData, Trainer, adamw_step, crop_box,
                          effective_epochs, lr_at_step, peak_lr, resized_crop, scaled_lr, steps_per_epoch)

SMALL = dict(image_size=32, patch_size=8, encoder_dim=32, encoder_depth=2, encoder_heads=2, decoder_dim=32,
             decoder_depth=2, decoder_heads=2, projector_hidden=32)


@pytest.fixture(autouse=True)
def quiet():
    logger = logging.getLogger("dmjd")
    level = logger.level
    logger.setLevel(logging.ERROR)
    yield
    logger.setLevel(level)


def make_trainer(n_images=8, vis=True, seed=0, keep=False, **train):
    ds = generate_toy_dataset(n_images, seed=1)
    mcfg = ModelConfig(**SMALL, vis_target_dim=hog_dim(8, 3) if vis else 0)
    tcfg = TargetConfig(vis_kind="hog" if vis else "none")
    data = TrainData.from_images(ds.images, mcfg, tcfg, flip=train.get("flip", True), keep_images=keep)
    params = dict(batch_size=4, k_views=2, m_corr=0.5, m_pred=0.9, epochs=4, warmup_epochs=1, seed=seed)
    params.update(train)
    return Trainer(DMJDModel(mcfg, rng=np.random.default_rng(seed)), data, TrainConfig(**params))


# -- learning-rate rule ------------------------------------------------------------------

def test_scaled_lr_examples():
    assert scaled_lr(1.5e-4, 1024, 1, 0.75, 0.75) == 6e-4
    assert scaled_lr(1.5e-4, 1024, 2, 0.9, 0.6) == pytest.approx(4.5e-4, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1e-2), st.integers(1, 4096), st.floats(0.05, 1.0))
def test_single_view_reduces_to_linear_rule(eta, b, m):
    assert scaled_lr(eta, b, 1, m, m) == eta * b / 256


def test_scaled_lr_with_measured_union_rate():
    plan = plan_view_quotas(196, 0.6, 2, 0.95, MaskPattern.block())
    first, second = sample_views(plan, np.random.default_rng(2024))
    union = set(np.flatnonzero(first.bits)) | set(np.flatnonzero(second.bits))
    m_pred = len(union) / 196
    assert len(union) == 186
    expected = 1.5e-4 * (1024 // 2) * m_pred / 0.6 / 256
    assert scaled_lr(1.5e-4, 1024, 2, m_pred, 0.6) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("args", [(1.5e-4, 1023, 2, 0.9, 0.6), (1.5e-4, 1024, 2, 0.5, 0.6), (0.0, 64, 1, 0.5, 0.5)])
def test_scaled_lr_rejects_bad_arguments(args):
    with pytest.raises(ConfigError):
        scaled_lr(*args)


def test_linear_rule_ignores_views():
    cfg = TrainConfig(base_lr=1e-3, batch_size=512, k_views=2, m_corr=0.6, m_pred=0.95, lr_rule="linear")
    assert peak_lr(cfg) == 1e-3 * 2


# -- schedule ---------------------------------------------------------------------------

def test_schedule_endpoints_and_junction():
    cfg = TrainConfig(base_lr=1.5e-4, batch_size=1024, epochs=10, warmup_epochs=2, min_lr=1e-6)
    spe, peak = 7, peak_lr(cfg)
    warm, total = 14, 70
    assert lr_at_step(cfg, 0, spe) == 0.0
    assert lr_at_step(cfg, warm, spe) == peak
    final = 1e-6 + (peak - 1e-6) * 0.5 * (1 + math.cos(math.pi * (total - 1 - warm) / (total - warm)))
    assert abs(lr_at_step(cfg, total - 1, spe) - final) <= 1e-12
    assert abs(lr_at_step(cfg, total, spe) - 1e-6) <= 1e-12
    left = peak * (warm - 1e-9) / warm
    assert abs(left - lr_at_step(cfg, warm, spe)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(0, 10), st.integers(1, 50))
def test_schedule_bounded_and_monotone_after_peak(epochs, warmup, spe):
    cfg = TrainConfig(epochs=max(epochs, warmup), warmup_epochs=warmup)
    peak = peak_lr(cfg)
    lrs = [lr_at_step(cfg, s, spe) for s in range(cfg.epochs * spe + 1)]
    assert all(0 <= v <= peak * (1 + 1e-12) for v in lrs)
    tail = lrs[warmup * spe:]
    assert all(b <= a + 1e-18 for a, b in zip(tail, tail[1:]))


# -- optimizer ----------------------------------------------------------------------------

def _params(values):
    return {f"p{i}.w": Tensor(np.array([v]), dtype=np.float64) for i, v in enumerate(values)}


def test_zero_gradient_step_is_pure_decay():
    params = _params([1.0, -2.0, 0.5])
    before = {n: p.data.copy() for n, p in params.items()}
    adamw_step(params, {}, AdamState(), lr=0.1, weight_decay=0.05)
    for n, p in params.items():
        assert np.array_equal(p.data, before[n] * (1 - 0.1 * 0.05))


def test_first_step_moment_equals_gradient():
    params = _params([0.0])
    state = AdamState()
    adamw_step(params, {"p0.w": np.array([0.3])}, state, lr=0.01, weight_decay=0.0)
    assert state.m["p0.w"][0] / (1 - 0.9) == pytest.approx(0.3, rel=1e-15)
    assert params["p0.w"].data[0] == pytest.approx(-0.01 * 0.3 / (0.3 + 1e-8), rel=1e-12)


def test_five_step_trajectory_matches_reference():
    curv = [1.0, 3.0, 0.5]
    x_ref = [1.0, -2.0, 0.7]
    m, v = [0.0] * 3, [0.0] * 3
    lr, wd, b1, b2, eps = 0.05, 0.1, 0.9, 0.95, 1e-8
    params = {f"p{i}": Tensor(np.array([x]), dtype=np.float64) for i, x in enumerate(x_ref)}
    state = AdamState()
    for t in range(1, 6):
        grads = [c * x for c, x in zip(curv, x_ref)]
        for i in range(3):
            x_ref[i] *= 1 - lr * wd
            m[i] = b1 * m[i] + (1 - b1) * grads[i]
            v[i] = b2 * v[i] + (1 - b2) * grads[i] ** 2
            x_ref[i] -= lr * (m[i] / (1 - b1 ** t)) / (math.sqrt(v[i] / (1 - b2 ** t)) + eps)
        adamw_step(params, {f"p{i}": np.array([curv[i] * params[f"p{i}"].data[0]]) for i in range(3)},
                   state, lr, wd, (b1, b2), eps)
    for i in range(3):
        assert abs(params[f"p{i}"].data[0] - x_ref[i]) <= 1e-7


def test_non_finite_gradient_names_parameter():
    params = _params([1.0, 2.0])
    with pytest.raises(NumericError, match="p1.w"):
        adamw_step(params, {"p1.w": np.array([np.nan])}, AdamState(), 0.1, 0.0)
    assert params["p0.w"].data[0] == 1.0


def test_decay_mask_respected():
    params = {"blk.w": Tensor(np.array([1.0])), "blk.b": Tensor(np.array([1.0])), "mask_token": Tensor(np.ones(1))}
    adamw_step(params, {}, AdamState(), 0.5, 0.1, decay=lambda n: n.endswith(".w") and n != "mask_token")
    assert params["blk.w"].data[0] == 0.95 and params["blk.b"].data[0] == 1.0 and params["mask_token"].data[0] == 1.0


# -- epochs -------------------------------------------------------------------------------

def test_steps_and_ete():
    assert steps_per_epoch(8, 2, 4) == 4
    assert effective_epochs(2, 800) == 1600 and effective_epochs(2, 400) == 800 and effective_epochs(1, 7) == 7
    tr = make_trainer(epochs=2)
    stats = tr.fit()
    assert [r.steps for r in stats.records] == [4, 4] and tr.step == 8
    assert stats.ete == 4 and [r.ete for r in stats.records] == [2, 4]


def test_each_image_gets_k_regulated_views_per_epoch():
    tr = make_trainer(n_images=10, batch_size=4, k_views=2, m_corr=0.5, m_pred=0.875)
    seen, views = [], []
    original_step, original_masks = tr.train_step, tr.sample_batch_masks

    def step(idx, grad_hook=None):
        seen.extend(idx.tolist())
        return original_step(idx, grad_hook)

    def masks(n):
        out = original_masks(n)
        views.append(out)
        return out

    tr.train_step, tr.sample_batch_masks = step, masks
    rec = tr.train_epoch()
    assert sorted(seen) == list(range(10))
    allm = np.concatenate(views).reshape(10, 2, 16)
    assert (allm.sum(axis=2) == 8).all()
    assert ((allm[:, 1] & ~allm[:, 0]).sum(axis=1) >= 1).all()
    assert np.all(np.abs(allm.any(axis=1).mean(axis=1) - 0.875) <= 1 / 16)
    assert abs(rec.m_pred_realized - 0.875) <= 1 / 16


def test_fixed_seed_runs_are_identical():
    traces = []
    for _ in range(2):
        tr = make_trainer(seed=5)
        traces.append([tr.train_step(np.array([0, 1]))[:3] for _ in range(5)])
    assert traces[0] == traces[1]


def test_single_image_overfits():
    tr = make_trainer(n_images=1, batch_size=1, k_views=1, m_corr=0.75, m_pred=None, base_lr=2.0, epochs=50,
                      warmup_epochs=0, weight_decay=0.0, flip=False)
    fixed = tr.sample_batch_masks(1)
    tr.sample_batch_masks = lambda n: fixed
    losses = [tr.train_step(np.array([0]))[2] for _ in range(50)]
    assert np.mean(np.diff(losses) < 0) >= 0.9
    assert losses[-1] < 0.1 * losses[0]


def test_every_parameter_receives_gradient():
    tr = make_trainer()
    touched = set()

    def hook(step, model):
        touched.update(n for n, p in model.params.items() if p.grad is not None and np.any(p.grad != 0))

    order = np.random.default_rng(0).permutation(8)
    for s in range(10):
        tr.train_step(order[(2 * s) % 8:(2 * s) % 8 + 2], grad_hook=hook)
    assert touched == set(tr.model.params)
    assert any(n.startswith("proj") for n in touched) and "pred.w" in touched and "mask_token" in touched


def test_invalid_configs_rejected():
    with pytest.raises(ConfigError):
        make_trainer(batch_size=5, k_views=2)
    with pytest.raises(ConfigError):
        make_trainer(k_views=1, m_corr=0.5, m_pred=0.9)
    assert TrainConfig(k_views=2, m_corr=0.6).target_pred_rate == 1.0


# -- random resized crop --------------------------------------------------------------------

def test_crop_is_off_by_default():
    assert TrainConfig().crop is False


def test_full_image_box_resamples_to_identity():
    img = np.random.default_rng(0).random((16, 16, 3))
    np.testing.assert_allclose(resized_crop(img, (0, 0, 16, 16), 16), img, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 1.0))
def test_crop_box_stays_inside_and_respects_scale(seed, scale_min):
    top, left, ch, cw = crop_box(32, 32, np.random.default_rng(seed), scale_min)
    assert 0 <= top and top + ch <= 32 and 0 <= left and left + cw <= 32 and ch > 0 and cw > 0
    assert ch * cw >= 0.5 * scale_min * 32 * 32


def test_crop_upsamples_a_quadrant():
    img = np.zeros((8, 8, 1))
    img[:4, :4] = 1.0
    out = resized_crop(img, (0, 0, 4, 4), 8)
    assert np.all(out == 1.0)


def test_crop_training_is_deterministic_and_learns():
    def run():
        tr = make_trainer(crop=True, flip=True, keep=True, base_lr=0.05, epochs=6)
        return [rec.loss_total for rec in tr.fit().records]

    a, b = run(), run()
    assert a == b
    assert a[-1] < a[0]


def test_crop_requires_raw_images():
    with pytest.raises(ConfigError):
        make_trainer(crop=True)
