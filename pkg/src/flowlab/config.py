"""Experiment configuration in line-oriented ``section.key = value`` text.

Lines starting with ``#`` and blank lines are ignored.  Booleans are
``true``/``false``; lists are comma-separated; a gauss2 centre list is
``-2 0, 2 0`` (coordinates space-separated).  Unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .assets import ViewRanges
from .datasets import DatasetSpec
from .distill import DistillConfig, VfIsmConfig
from .flow import SolverSchedule
from .nn import NetworkSpec


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class DatasetSection:
    name: str = "gauss2"
    size: int = 10_000
    seed: int = 0
    centers: tuple = ((-2.0, 0.0), (2.0, 0.0))
    sigma: float = 0.3
    noise: float = 0.05
    image_size: int = 16


@dataclass(frozen=True)
class NetworkSection:
    hidden: tuple = (64, 64)
    activation: str = "silu"
    cond_embed_dim: int = 4
    seed: int = 0


@dataclass(frozen=True)
class PriorSection:
    steps: int = 2000
    batch: int = 128
    lr: float = 3e-3
    seed: int = 0


@dataclass(frozen=True)
class DistillSection:
    loss: str = "ucm"
    cfg_scale: float | None = None  # "default": 100 for vfds, 40 for ucm / vf_ism
    class_id: int = 1
    solver: str = "euler"
    nfe: int = 3
    inversion_scale: float = 1.0
    warmup: int | None = None  # "auto": 15% of steps for out-of-distribution assets
    steps: int = 800
    lr: float = 0.02
    optimizer: str = "adam"
    include_jacobian: bool = False
    seed: int = 0
    ism_delta: float = 0.05
    ism_steps: int = 2
    ism_scale_interval: bool = False
    coherence_every: int = 0
    coherence_trials: int = 8


@dataclass(frozen=True)
class AssetSection:
    kind: str = "latent"
    mode: str = "in_distribution"
    splats: int = 32
    start: tuple = ()  # explicit latent start vector; empty uses init_asset


@dataclass(frozen=True)
class ViewsSection:
    rotation: float = 0.39269908169872414  # pi / 8
    translation: float = 0.05


@dataclass(frozen=True)
class InvertSection:
    samples: int = 256
    oracle: bool = False
    class_id: int = 0  # 0 inverts the unconditional field
    seed: int = 0


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    prior: PriorSection = field(default_factory=PriorSection)
    distill: DistillSection = field(default_factory=DistillSection)
    asset: AssetSection = field(default_factory=AssetSection)
    views: ViewsSection = field(default_factory=ViewsSection)
    invert: InvertSection = field(default_factory=InvertSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -------------------------------------------------------------- builders

    def dataset_spec(self) -> DatasetSpec:
        d = self.dataset
        return DatasetSpec(d.name, d.size, d.seed, tuple(map(tuple, d.centers)), d.sigma, d.noise, d.image_size)

    def network_spec(self) -> NetworkSpec:
        ds = self.dataset_spec()
        n = self.network
        return NetworkSpec(ds.dim, tuple(n.hidden), ds.num_classes + 1, n.cond_embed_dim, n.activation)

    def view_ranges(self) -> ViewRanges:
        return ViewRanges(self.views.rotation, self.views.translation)

    def warmup_steps(self) -> int:
        d = self.distill
        if d.warmup is not None:
            return d.warmup
        return int(0.15 * d.steps) if self.asset.mode == "out_of_distribution" else 0

    def distill_config(self) -> DistillConfig:
        d = self.distill
        return DistillConfig(
            loss=d.loss,
            guidance_scale=d.cfg_scale,
            class_id=d.class_id,
            schedule=SolverSchedule.uniform(d.solver, d.nfe),
            inversion_scale=d.inversion_scale,
            warmup_steps=self.warmup_steps(),
            total_steps=d.steps,
            learning_rate=d.lr,
            include_jacobian=d.include_jacobian,
            optimizer=d.optimizer,
            seed=d.seed,
            vf_ism=VfIsmConfig(d.ism_delta, d.ism_steps, d.ism_scale_interval),
        )

    def override(self, section: str, **values) -> "ExperimentConfig":
        return replace(self, **{section: replace(getattr(self, section), **values)})

    def validate(self) -> "ExperimentConfig":
        """Build every derived object once so bad enum values surface as ConfigError."""
        try:
            self.dataset_spec()
            self.network_spec()
            self.view_ranges()
            self.distill_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.asset.kind not in ("latent", "splat"):
            raise ConfigError(f"unknown asset kind {self.asset.kind!r}")
        if self.asset.mode not in ("in_distribution", "out_of_distribution"):
            raise ConfigError(f"unknown asset mode {self.asset.mode!r}")
        return self


# ---------------------------------------------------------------- text form

_OPTIONAL_WORDS = {("distill", "cfg_scale"): "default", ("distill", "warmup"): "auto"}


def _section_default(name):
    return {f.name: f for f in fields(ExperimentConfig)}[name].default_factory()


def _parse_value(section: str, key: str, default, text: str):
    word = _OPTIONAL_WORDS.get((section, key))
    if word is not None:
        if text == word:
            return None
        kind = float if key == "cfg_scale" else int
        return kind(text)
    if isinstance(default, bool):
        if text not in ("true", "false"):
            raise ValueError(f"expected true or false, got {text!r}")
        return text == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",")] if text.strip() else []
        if key == "centers":
            return tuple(tuple(float(c) for c in item.split()) for item in items)
        if key == "hidden":
            return tuple(int(i) for i in items)
        return tuple(float(i) for i in items)
    raise TypeError(f"unsupported config field {section}.{key}")


def _format_value(section: str, key: str, value) -> str:
    word = _OPTIONAL_WORDS.get((section, key))
    if word is not None and value is None:
        return word
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if key == "centers":
            return ", ".join(" ".join(repr(float(c)) for c in pt) for pt in value)
        return ", ".join(repr(v) for v in value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    sections = {f.name: {} for f in fields(ExperimentConfig)}
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw!r}", lineno)
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"key {lhs!r} has no section", lineno)
        section, key = lhs.split(".", 1)
        if section not in sections:
            raise ConfigError(f"unknown section {section!r}", lineno)
        default_obj = _section_default(section)
        names = {f.name for f in fields(default_obj)}
        if key not in names:
            raise ConfigError(f"unknown key {lhs!r}", lineno)
        if lhs in seen:
            raise ConfigError(f"duplicate key {lhs!r} (first set on line {seen[lhs]})", lineno)
        seen[lhs] = lineno
        try:
            sections[section][key] = _parse_value(section, key, getattr(default_obj, key), rhs)
        except ValueError as exc:
            raise ConfigError(f"bad value for {lhs}: {exc}", lineno) from exc
    cfg = ExperimentConfig(**{name: replace(_section_default(name), **vals) for name, vals in sections.items()})
    return cfg.validate()


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in fields(cfg):
        obj = getattr(cfg, sec.name)
        for f in fields(obj):
            lines.append(f"{sec.name}.{f.name} = {_format_value(sec.name, f.name, getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------- presets

PRESETS = {
    # two-mode point prior; conditional distillation with pure class guidance
    "gauss2": ExperimentConfig(
        distill=DistillSection(cfg_scale=1.0),
        asset=AssetSection(start=(0.0, 0.0)),
        views=ViewsSection(0.0, 0.0),
        invert=InvertSection(oracle=True),
    ),
    "shapes16": ExperimentConfig(
        dataset=DatasetSection(name="shapes16", size=8000),
        network=NetworkSection(hidden=(256, 256), cond_embed_dim=8),
        prior=PriorSection(steps=3000, lr=1e-3),
        distill=DistillSection(steps=300),
        asset=AssetSection(kind="splat", mode="out_of_distribution"),
    ),
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
