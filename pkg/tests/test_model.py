import logging

import numpy as np
import pytest

from dmjd import autodiff as ad
from dmjd.autodiff import Tensor
from dmjd.errors import ConfigError, ContractError, FormatError
from dmjd.masking import MaskPattern, sample_mask
from dmjd.model import DMJDModel, ModelConfig, load_checkpoint, load_model, save_checkpoint, split_indices
from dmjd.patches import patchify, unpatchify

TINY = dict(image_size=8, patch_size=2, encoder_dim=8, encoder_depth=1, encoder_heads=2, decoder_dim=8,
            decoder_depth=2, decoder_heads=2, mlp_ratio=2.0, projector_hidden=8, target_dim=12, vis_target_dim=6)


def closed_form_count(c: ModelConfig) -> int:
    def block(d):
        h = int(d * c.mlp_ratio)
        return 4 * d * d + 2 * d * h + 9 * d + h

    d, dd, hid, p = c.encoder_dim, c.decoder_dim, c.projector_hidden, c.patch_size ** 2 * c.in_chans
    total = p * d + d + c.encoder_depth * block(d) + 2 * d
    total += d * dd + dd + dd + c.decoder_depth * block(dd) + 2 * dd + dd * c.target_dim + c.target_dim
    if c.vis_target_dim:
        if c.projector == "nonlinear":
            total += (d * hid + 3 * hid) + 2 * (hid * hid + 3 * hid)
        else:
            total += d * hid + hid
        total += hid * c.vis_target_dim + c.vis_target_dim
    return total


def random_patches(cfg, batch=1, seed=0):
    imgs = np.random.default_rng(seed).normal(size=(batch, cfg.image_size, cfg.image_size, cfg.in_chans))
    return patchify(imgs, cfg.patch_size)


@pytest.mark.parametrize("overrides", [
    {}, dict(vis_target_dim=108), dict(vis_target_dim=50, projector="linear"),
    dict(decoder_depth=8, encoder_dim=32, encoder_heads=2, vis_target_dim=20, projector_hidden=512),
    TINY,
])
def test_parameter_count_closed_form(overrides):
    cfg = ModelConfig(**overrides)
    assert DMJDModel(cfg).n_params == closed_form_count(cfg)


def test_mask_token_has_decoder_width():
    assert DMJDModel(ModelConfig(decoder_dim=48, decoder_heads=4)).params["mask_token"].shape == (48,)


def test_config_problems_collected():
    with pytest.raises(ConfigError) as exc:
        DMJDModel(ModelConfig(image_size=30, encoder_dim=66, encoder_heads=4))
    assert len(exc.value.problems) >= 2


def test_unusual_decoder_depth_is_flagged(caplog):
    with caplog.at_level(logging.WARNING, logger="dmjd"):
        DMJDModel(ModelConfig(decoder_depth=3))
    assert "decoder_depth=3" in caplog.text


# -- patches --------------------------------------------------------------------------

def test_patch_counts():
    assert patchify(np.zeros((32, 32, 3)), 8).shape == (16, 192)
    assert patchify(np.zeros((32, 32, 3)), 32).shape == (1, 3072)


def test_unpatchify_inverts_patchify():
    x = np.random.default_rng(0).random((2, 32, 32, 3))
    assert np.array_equal(unpatchify(patchify(x, 8), 8, (4, 4), 3), x)


# -- encoder ----------------------------------------------------------------------------

def test_masked_patches_never_reach_encoder_or_projector():
    cfg = ModelConfig(vis_target_dim=108)
    model = DMJDModel(cfg, rng=np.random.default_rng(1))
    rng = np.random.default_rng(2)
    patches = random_patches(cfg, 2).astype(np.float32)
    mask = np.stack([sample_mask(16, MaskPattern.uniform(), 0.75, rng).bits for _ in range(2)])
    with ad.no_grad():
        z1 = model.encode_visible(patches, mask)
        p1 = model.project_visible(z1)
        perturbed = patches.copy()
        perturbed[mask] = rng.normal(size=perturbed[mask].shape) * 100
        z2 = model.encode_visible(perturbed, mask)
        p2 = model.project_visible(z2)
    assert z1.shape == (2, 16 - 12, 64)
    assert np.array_equal(z1.data, z2.data) and np.array_equal(p1.data, p2.data)


def test_all_masked_is_contract_error():
    model = DMJDModel(ModelConfig(**TINY))
    with pytest.raises(ContractError):
        model.encode_visible(random_patches(model.cfg), np.ones(16, dtype=bool))


def test_encoder_is_permutation_equivariant():
    cfg = ModelConfig()
    model = DMJDModel(cfg, rng=np.random.default_rng(3))
    patches = random_patches(cfg).astype(np.float32)
    vis = np.sort(np.random.default_rng(4).choice(16, size=6, replace=False))[None]
    perm = np.random.default_rng(5).permutation(6)
    with ad.no_grad():
        z = model.encode_tokens(model.embed(patches, vis)).data
        zp = model.encode_tokens(model.embed(patches, vis[:, perm])).data
    np.testing.assert_allclose(zp, z[:, perm], atol=1e-5)


def test_split_indices_ascending():
    vis, msk = split_indices(np.array([[True, False, True, False]]))
    assert vis.tolist() == [[1, 3]] and msk.tolist() == [[0, 2]]


# -- decoder and projector ------------------------------------------------------------------

def test_decoder_shapes_and_shared_mask_token():
    cfg = ModelConfig(vis_target_dim=108)
    model = DMJDModel(cfg, rng=np.random.default_rng(0))
    mask = sample_mask(16, MaskPattern.uniform(), 0.75, np.random.default_rng(0)).bits
    with ad.no_grad():
        z = model.encode_visible(random_patches(cfg).astype(np.float32), mask)
        out = model.decode_masked(z, mask)
        proj = model.project_visible(z, trace := {})
        raw = model.decoder_input(z, mask, with_positions=False).data[0]
    assert out.shape == (1, 16, cfg.target_dim)
    assert proj.shape == (1, 4, 108)
    assert trace["proj"].shape[-1] == cfg.projector_hidden
    np.testing.assert_array_equal(raw[mask], np.broadcast_to(model.params["mask_token"].data, (12, 64)))


def test_full_width_projector_shapes():
    cfg = ModelConfig(projector_hidden=512, vis_target_dim=108)
    model = DMJDModel(cfg)
    assert model.params["proj.fc0.w"].shape == (64, 512) and model.params["pred.w"].shape == (512, 108)


def _tiny64(seed=0):
    with ad.precision(np.float64):
        model = DMJDModel(ModelConfig(**TINY), rng=np.random.default_rng(seed), dtype=np.float64)
    patches = random_patches(model.cfg, 2, seed)
    rng = np.random.default_rng(seed + 10)
    mask = np.stack([sample_mask(16, MaskPattern.uniform(), 0.5, rng).bits for _ in range(2)])
    return model, patches, mask


def test_decoder_output_gradients():
    model, patches, mask = _tiny64()
    weights = np.random.default_rng(1).normal(size=(2, 16, model.cfg.target_dim))
    with ad.precision(np.float64):
        report = ad.grad_check(lambda: (model.decode_masked(model.encode_visible(patches, mask), mask)
                                        * weights).sum(),
                               {k: v for k, v in model.params.items() if not k.startswith(("proj", "pred"))},
                               tol=1e-3)
    assert report.passed, report


def test_projector_gradients():
    model, patches, mask = _tiny64(1)
    weights = np.random.default_rng(2).normal(size=(2, 8, model.cfg.vis_target_dim))
    with ad.precision(np.float64):
        report = ad.grad_check(lambda: (model.project_visible(model.encode_visible(patches, mask)) * weights).sum(),
                               {k: v for k, v in model.params.items() if not k.startswith(("dec", "mask"))},
                               tol=1e-3)
    assert report.passed, report


def test_stop_grad_switch_cuts_distillation_gradient():
    model, patches, mask = _tiny64(2)
    model.vdb_stop_grad = True
    with ad.precision(np.float64):
        loss = model.project_visible(model.encode_visible(patches, mask)).sum()
        ad.backward(loss)
    assert model.params["patch_embed.w"].grad is None
    assert model.params["pred.w"].grad is not None


def test_fresh_model_activation_rms():
    cfg = ModelConfig(vis_target_dim=108)
    model = DMJDModel(cfg, rng=np.random.default_rng(0))
    mask = sample_mask(16, MaskPattern.block(), 0.6, np.random.default_rng(1)).bits
    patches = ((random_patches(cfg, 4) * 0.25)).astype(np.float32)
    trace = {}
    with ad.no_grad():
        z = model.encode_visible(patches, np.stack([mask] * 4), trace)
        model.decode_masked(z, np.stack([mask] * 4), trace)
        model.project_visible(z, trace)
    for name, t in trace.items():
        rms = float(np.sqrt(np.mean(t.data.astype(np.float64) ** 2)))
        assert np.isfinite(t.data).all() and 1e-3 < rms < 1e3, (name, rms)


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(vis_target_dim=108, decoder_depth=4)
    model = DMJDModel(cfg, rng=np.random.default_rng(0))
    save_checkpoint(tmp_path / "a.dmjc", model, {"seed": 7})
    loaded, extra = load_model(tmp_path / "a.dmjc")
    assert loaded.cfg == cfg and extra["seed"] == "7"
    for name, p in model.params.items():
        assert loaded.params[name].data.tobytes() == p.data.tobytes()
    save_checkpoint(tmp_path / "b.dmjc", loaded, {"seed": 7})
    assert (tmp_path / "a.dmjc").read_bytes() == (tmp_path / "b.dmjc").read_bytes()


def test_checkpoint_truncated_and_bad_magic(tmp_path):
    path = tmp_path / "a.dmjc"
    save_checkpoint(path, DMJDModel(ModelConfig(**TINY)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)


def test_features_mean_pool_all_tokens():
    cfg = ModelConfig()
    model = DMJDModel(cfg, rng=np.random.default_rng(0))
    patches = random_patches(cfg, 3).astype(np.float32)
    with ad.no_grad():
        z = model.encode_tokens(model.embed(patches)).data
    np.testing.assert_allclose(model.features(patches), z.mean(axis=1), rtol=1e-6)
    assert isinstance(model.params["mask_token"], Tensor)
