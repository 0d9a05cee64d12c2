"""Micro ViT autoencoder with a masked-prediction decoder and a visible-distillation head.

The encoder only ever sees visible tokens. Its output feeds two branches:

* the decoder, which scatters the encoded tokens back into the full grid,
  fills masked slots with a shared learned token and regresses targets for
  every slot (the loss later keeps the masked ones);
* the projector (3 FC layers, each followed by LayerNorm, GELU between) and
  a single FC predictor, applied to visible tokens only.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .patches import patchify, sincos_pos_embed

log = logging.getLogger(__name__)

PAPER_DECODER_DEPTHS = (2, 4, 8)
CKPT_MAGIC = b"DMJC"


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    in_chans: int = 3
    encoder_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    decoder_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    projector: str = "nonlinear"      # nonlinear | linear
    projector_hidden: int = 128
    target_dim: int = 192
    vis_target_dim: int = 0           # 0 disables the visible branch

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.in_chans

    def problems(self) -> list[str]:
        out = []
        if self.patch_size < 1 or self.image_size % self.patch_size:
            out.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.encoder_heads < 1 or self.encoder_dim % self.encoder_heads:
            out.append(f"encoder_dim {self.encoder_dim} not divisible by encoder_heads {self.encoder_heads}")
        if self.decoder_heads < 1 or self.decoder_dim % self.decoder_heads:
            out.append(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        for name in ("encoder_dim", "decoder_dim"):
            if getattr(self, name) % 4:
                out.append(f"{name} must be divisible by 4 for 2-D sin-cos positions")
        if self.encoder_depth < 1 or self.decoder_depth < 1:
            out.append("encoder_depth and decoder_depth must be >= 1")
        if self.projector not in ("nonlinear", "linear"):
            out.append(f"projector must be nonlinear or linear, got {self.projector!r}")
        if self.target_dim < 1 or self.vis_target_dim < 0 or self.projector_hidden < 1:
            out.append("target_dim and projector_hidden must be positive, vis_target_dim >= 0")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        if self.decoder_depth not in PAPER_DECODER_DEPTHS:
            log.warning("decoder_depth=%d is outside the ablated range %s", self.decoder_depth,
                        PAPER_DECODER_DEPTHS)


def _mlp_hidden(dim, ratio):
    return int(dim * ratio)


def _block_shapes(prefix, dim, ratio):
    h = _mlp_hidden(dim, ratio)
    return [
        (f"{prefix}.ln1.g", (dim,)), (f"{prefix}.ln1.b", (dim,)),
        (f"{prefix}.attn.qkv.w", (dim, 3 * dim)), (f"{prefix}.attn.qkv.b", (3 * dim,)),
        (f"{prefix}.attn.proj.w", (dim, dim)), (f"{prefix}.attn.proj.b", (dim,)),
        (f"{prefix}.ln2.g", (dim,)), (f"{prefix}.ln2.b", (dim,)),
        (f"{prefix}.mlp.fc1.w", (dim, h)), (f"{prefix}.mlp.fc1.b", (h,)),
        (f"{prefix}.mlp.fc2.w", (h, dim)), (f"{prefix}.mlp.fc2.b", (dim,)),
    ]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    d, dd = cfg.encoder_dim, cfg.decoder_dim
    shapes = [("patch_embed.w", (cfg.patch_dim, d)), ("patch_embed.b", (d,))]
    for i in range(cfg.encoder_depth):
        shapes += _block_shapes(f"enc.{i}", d, cfg.mlp_ratio)
    shapes += [("enc.norm.g", (d,)), ("enc.norm.b", (d,)),
               ("dec.embed.w", (d, dd)), ("dec.embed.b", (dd,)), ("mask_token", (dd,))]
    for i in range(cfg.decoder_depth):
        shapes += _block_shapes(f"dec.{i}", dd, cfg.mlp_ratio)
    shapes += [("dec.norm.g", (dd,)), ("dec.norm.b", (dd,)),
               ("dec.head.w", (dd, cfg.target_dim)), ("dec.head.b", (cfg.target_dim,))]
    if cfg.vis_target_dim:
        hid = cfg.projector_hidden
        if cfg.projector == "nonlinear":
            widths = [d, hid, hid, hid]
            for j in range(3):
                shapes += [(f"proj.fc{j}.w", (widths[j], widths[j + 1])), (f"proj.fc{j}.b", (widths[j + 1],)),
                           (f"proj.ln{j}.g", (widths[j + 1],)), (f"proj.ln{j}.b", (widths[j + 1],))]
        else:
            shapes += [("proj.fc0.w", (d, hid)), ("proj.fc0.b", (hid,))]
        shapes += [("pred.w", (hid, cfg.vis_target_dim)), ("pred.b", (cfg.vis_target_dim,))]
    return shapes


def trunc_normal(rng, shape, std=0.02):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, rng, dtype=None) -> dict[str, Tensor]:
    dtype = dtype or ad.default_dtype()
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name == "mask_token" or leaf == "w":
            val = trunc_normal(rng, shape)
        elif leaf == "g":
            val = np.ones(shape)
        else:
            val = np.zeros(shape)
        params[name] = Tensor(val, requires_grad=True, dtype=dtype, name=name)
    return params


def no_decay(name: str) -> bool:
    """Gains, biases and the mask token are excluded from weight decay."""
    return name == "mask_token" or not name.endswith(".w")


def _as_batch(mask):
    bits = getattr(mask, "bits", mask)
    bits = np.asarray(bits, dtype=bool)
    return bits[None] if bits.ndim == 1 else bits


def split_indices(mask_bits: np.ndarray, allow_all_masked: bool = False):
    """Visible / masked index arrays ``(B, V)`` and ``(B, N-V)`` in ascending order."""
    bits = _as_batch(mask_bits)
    b, n = bits.shape
    counts = bits.sum(axis=1)
    if (counts != counts[0]).any():
        raise DimensionError("all views in a batch must mask the same number of tokens")
    n_mask = int(counts[0])
    if n_mask == n and not allow_all_masked:
        raise ContractError("every token is masked; the encoder needs at least one visible token")
    order = np.argsort(bits, axis=1, kind="stable")
    vis = order[:, : n - n_mask]
    msk = order[:, n - n_mask:]
    return vis, msk


class DMJDModel:
    def __init__(self, cfg: ModelConfig, rng=None, dtype=None, params=None):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype or ad.default_dtype()).type
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = init_params(cfg, rng, self.dtype)
        self.params = params
        self.pos_enc = sincos_pos_embed(cfg.encoder_dim, cfg.grid).astype(self.dtype)
        self.pos_dec = sincos_pos_embed(cfg.decoder_dim, cfg.grid).astype(self.dtype)
        self.vdb_stop_grad = False

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- building blocks ---------------------------------------------------
    def _lin(self, x, prefix):
        return ad.linear(x, self.params[f"{prefix}.w"], self.params[f"{prefix}.b"])

    def _ln(self, x, prefix):
        return ad.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _attention(self, x, prefix, heads):
        b, t, d = x.shape
        dh = d // heads
        qkv = self._lin(x, f"{prefix}.qkv").reshape(b, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.scale(q @ k.transpose(0, 1, 3, 2), dh ** -0.5))
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self._lin(out, f"{prefix}.proj")

    def _block(self, x, prefix, heads, trace=None):
        x = x + self._attention(self._ln(x, f"{prefix}.ln1"), f"{prefix}.attn", heads)
        h = ad.gelu(self._lin(self._ln(x, f"{prefix}.ln2"), f"{prefix}.mlp.fc1"))
        x = x + self._lin(h, f"{prefix}.mlp.fc2")
        if trace is not None:
            trace[prefix] = x
        return x

    # -- encoder -----------------------------------------------------------
    def embed(self, patches, idx=None) -> Tensor:
        """Patch embedding plus encoder positions, optionally for a row subset only."""
        x = np.asarray(patches, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        pos = np.broadcast_to(self.pos_enc, (x.shape[0],) + self.pos_enc.shape)
        if idx is not None:
            rows = np.arange(x.shape[0])[:, None]
            x, pos = x[rows, idx], pos[rows, idx]
        return self._lin(Tensor(x, dtype=self.dtype), "patch_embed") + Tensor(pos, dtype=self.dtype)

    def encode_tokens(self, h: Tensor, trace=None) -> Tensor:
        for i in range(self.cfg.encoder_depth):
            h = self._block(h, f"enc.{i}", self.cfg.encoder_heads, trace)
        z = self._ln(h, "enc.norm")
        if trace is not None:
            trace["enc.norm"] = z
        return z

    def encode_visible(self, patches, mask, trace=None) -> Tensor:
        """Encode the unmasked tokens only; rows follow ascending token index."""
        bits = _as_batch(mask)
        if bits.shape[-1] != self.cfg.n_tokens:
            raise DimensionError(f"mask covers {bits.shape[-1]} tokens, model expects {self.cfg.n_tokens}")
        vis, _ = split_indices(bits)
        h = self.embed(patches, vis)
        if trace is not None:
            trace["patch_embed"] = h
        return self.encode_tokens(h, trace)

    # -- masked prediction branch ---------------------------------------------
    def decoder_input(self, z: Tensor, mask, with_positions=True) -> Tensor:
        bits = _as_batch(mask)
        b, n = bits.shape
        vis, _ = split_indices(bits)
        v = vis.shape[1]
        if z.shape[:2] != (b, v) or z.shape[-1] != self.cfg.encoder_dim:
            raise DimensionError(f"encoded tokens {z.shape} do not match mask with {v} visible of {n}")
        zd = self._lin(z, "dec.embed")
        tok = Tensor(np.zeros((b, 1, self.cfg.decoder_dim), dtype=self.dtype)) + self.params["mask_token"]
        full = ad.concat([zd, tok], axis=1)
        slot = np.full((b, n), v, dtype=np.intp)
        slot[np.arange(b)[:, None], vis] = np.arange(v)
        x = ad.gather_rows(full, slot)
        if with_positions:
            x = x + Tensor(self.pos_dec, dtype=self.dtype)
        return x

    def decode_masked(self, z: Tensor, mask, trace=None) -> Tensor:
        """Predictions for all N slots, shape ``(B, N, target_dim)``."""
        x = self.decoder_input(z, mask)
        for i in range(self.cfg.decoder_depth):
            x = self._block(x, f"dec.{i}", self.cfg.decoder_heads, trace)
        out = self._lin(self._ln(x, "dec.norm"), "dec.head")
        if trace is not None:
            trace["dec.head"] = out
        return out

    # -- visible distillation branch ------------------------------------------
    def project_visible(self, z: Tensor, trace=None) -> Tensor:
        if not self.cfg.vis_target_dim:
            raise ConfigError("visible branch disabled (vis_target_dim = 0)")
        if self.vdb_stop_grad:
            z = ad.detach(z)
        if self.cfg.projector == "nonlinear":
            h = z
            for j in range(3):
                h = self._ln(self._lin(h, f"proj.fc{j}"), f"proj.ln{j}")
                if j < 2:
                    h = ad.gelu(h)
        else:
            h = self._lin(z, "proj.fc0")
        out = self._lin(h, "pred")
        if trace is not None:
            trace["proj"] = h
            trace["pred"] = out
        return out

    # -- evaluation ---------------------------------------------------------------
    def features(self, patches, batch_size=256) -> np.ndarray:
        """Mean-pooled encoder output over all tokens of unmasked images."""
        patches = np.asarray(patches)
        out = []
        with ad.no_grad():
            for s in range(0, len(patches), batch_size):
                z = self.encode_tokens(self.embed(patches[s:s + batch_size]))
                out.append(z.data.mean(axis=1))
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.encoder_dim))

    def patchify(self, images) -> np.ndarray:
        return patchify(np.asarray(images), self.cfg.patch_size)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, model: DMJDModel, extra: dict | None = None) -> None:
    """``DMJC`` | u32 text length | key=value config | u32 count | named f32 blobs."""
    cfg = {f"model.{k}": v for k, v in asdict(model.cfg).items()}
    cfg.update(extra or {})
    text = "".join(f"{k}={v}\n" for k, v in cfg.items()).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _coerce(field_type, text):
    if field_type in (int, "int"):
        return int(text)
    if field_type in (float, "float"):
        return float(text)
    return text


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated at offset {off} (needed {n} more bytes)")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {CKPT_MAGIC!r}")
    (tlen,) = struct.unpack("<I", take(4))
    config = {}
    for line in take(tlen).decode().splitlines():
        if line:
            k, _, v = line.partition("=")
            config[k] = v
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    return config, params


def model_config_from_dict(config: dict) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        key = f"model.{f.name}"
        if key in config:
            kwargs[f.name] = _coerce(f.type, config[key])
    return ModelConfig(**kwargs)


def load_model(path, dtype=np.float32) -> tuple[DMJDModel, dict]:
    config, arrays = load_checkpoint(path)
    cfg = model_config_from_dict(config)
    expected = dict(param_shapes(cfg))
    if set(expected) != set(arrays):
        raise FormatError(f"{path}: parameter names do not match the stored model config")
    for name, shape in expected.items():
        if tuple(arrays[name].shape) != tuple(shape):
            raise FormatError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    params = {n: Tensor(arrays[n], requires_grad=True, dtype=dtype, name=n) for n, _ in param_shapes(cfg)}
    return DMJDModel(cfg, dtype=dtype, params=params), config
