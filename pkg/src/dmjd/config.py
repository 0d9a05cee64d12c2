"""Experiment configuration: composed dataclasses behind flat ``key = value`` files."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .objective import LossConfig
from .targets import NORM_MODES
from .trainer import TargetConfig, TrainConfig

SCHEMA_VERSION = 1


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = "runs"
    run_name: str = "run"
    split_seed: int = 0
    val_fraction: float = 0.2
    val_pattern: str = "uniform"
    val_m_corr: float = 0.75
    vdb_stop_grad: bool = False
    probe_epochs: int = 0
    checkpoint: bool = True


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    run: RunConfig = field(default_factory=RunConfig)

    SECTIONS = ("model", "train", "target", "loss", "run")

    # -- flat key access ----------------------------------------------------
    @classmethod
    def key_map(cls) -> dict[str, tuple[str, dataclasses.Field]]:
        out = {}
        proto = cls()
        for section in cls.SECTIONS:
            for f in fields(getattr(proto, section)):
                if f.name in out:
                    raise RuntimeError(f"duplicate config key {f.name}")
                out[f.name] = (section, f)
        return out

    def get(self, key):
        section, _ = self.key_map()[key]
        return getattr(getattr(self, section), key)

    def set(self, key, value) -> None:
        kmap = self.key_map()
        if key not in kmap:
            raise ConfigError(f"unknown config key {key!r}")
        section, f = kmap[key]
        setattr(getattr(self, section), key, parse_value(f, value, key))
        if not hasattr(self, "_explicit"):
            self._explicit = set()
        self._explicit.add(key)

    def items(self):
        for key in self.key_map():
            yield key, self.get(key)

    def copy(self) -> "ExperimentConfig":
        out = dataclasses.replace(self, **{s: dataclasses.replace(getattr(self, s)) for s in self.SECTIONS})
        out._explicit = set(getattr(self, "_explicit", ()))
        return out

    # -- consistency ---------------------------------------------------------
    def resolve(self) -> "ExperimentConfig":
        """Fill derived target widths and validate every cross-field constraint."""
        problems = []
        m, t = self.model, self.target
        problems += m.problems()
        problems += self.train.problems()
        if t.mim_kind not in ("pixel", "hog"):
            problems.append(f"mim_kind must be pixel or hog, got {t.mim_kind!r}")
        if t.vis_kind not in ("none", "pixel", "hog", "external"):
            problems.append(f"vis_kind must be none, pixel, hog or external, got {t.vis_kind!r}")
        for key in ("mim_norm", "vis_norm"):
            if getattr(t, key) not in NORM_MODES:
                problems.append(f"{key} must be one of {NORM_MODES}")
        if t.hog_bins < 2 or t.hog_cells < 1 or (m.patch_size % t.hog_cells if t.hog_cells else True):
            problems.append("hog_bins >= 2 and hog_cells dividing patch_size required")
        if t.vis_kind == "external":
            if not t.external_path:
                problems.append("vis_kind = external needs external_path")
            if self.train.flip or self.train.crop:
                problems.append("external targets require flip = false and crop = false")
        if not 0 <= self.run.val_fraction < 1:
            problems.append("val_fraction must lie in [0, 1)")
        if self.run.val_pattern not in ("uniform", "block"):
            problems.append("val_pattern must be uniform or block")
        if not problems:
            explicit = getattr(self, "_explicit", set())
            want = t.dim(t.mim_kind, m)
            if "target_dim" in explicit and m.target_dim != want:
                problems.append(f"target_dim {m.target_dim} does not match {t.mim_kind} targets ({want})")
            m.target_dim = want
            if t.vis_kind == "external":
                if m.vis_target_dim < 1:
                    problems.append("external targets need vis_target_dim set to the embedding width")
            else:
                want_v = t.dim(t.vis_kind, m)
                if "vis_target_dim" in explicit and m.vis_target_dim != want_v:
                    problems.append(f"vis_target_dim {m.vis_target_dim} does not match "
                                    f"{t.vis_kind} targets ({want_v})")
                m.vis_target_dim = want_v
        if problems:
            raise ConfigError(problems)
        return self

    # -- text form -----------------------------------------------------------------
    def dumps(self) -> str:
        lines = [f"# schema_version = {SCHEMA_VERSION}"]
        for section in self.SECTIONS:
            lines.append(f"# [{section}]")
            for f in fields(getattr(self, section)):
                lines.append(f"{f.name} = {format_value(getattr(getattr(self, section), f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        body = "\n".join(f"{k}={format_value(v)}" for k, v in self.items()
                         if k not in ("out_dir", "run_name"))
        return hashlib.sha1(body.encode()).hexdigest()[:10]

    @classmethod
    def loads(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cfg = base.copy() if base is not None else cls()
        problems = []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                problems.append(f"line {lineno}: expected 'key = value'")
                continue
            try:
                cfg.set(key.strip(), value.strip())
            except ConfigError as exc:
                problems.append(f"line {lineno}: {exc}")
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def load(cls, path, base=None) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.loads(text, base)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(f: dataclasses.Field, value, key=""):
    if not isinstance(value, str):
        return value
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    text = value.strip()
    try:
        if "None" in kind and text.lower() in ("none", ""):
            return None
        if kind.startswith("bool"):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return text
