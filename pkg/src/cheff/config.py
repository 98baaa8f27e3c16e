"""Pipeline configuration: an INI file with fixed sections and typed keys.

Every key has a default, so an empty file is a valid configuration.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints

from cheff.errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class PathsSection:
    ae: str = ""
    sdm: str = ""
    txt: str = ""
    sr: str = ""
    sr_fine: str = ""


@dataclass
class ImagesSection:
    lr_size: int = 32
    hr_size: int = 128


@dataclass
class AeSection:
    channels: tuple[int, ...] = (32, 64, 128)
    latent_channels: int = 3
    downsample_factor: int = 4
    res_layers: int = 1
    kl_weight: float = 1e-6
    norm_groups: int = 8
    learning_rate: float = 1e-4
    steps: int = 300
    batch_size: int = 16


@dataclass
class SdmSection:
    schedule: str = "linear"
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.0295
    base_filters: int = 32
    multipliers: tuple[int, ...] = (1, 2, 4)
    res_layers: int = 1
    attention_resolutions: tuple[int, ...] = (8, 4)
    attention_heads: int = 1
    norm_groups: int = 8
    learning_rate: float = 1e-4
    steps: int = 500
    batch_size: int = 32
    conditional: bool = False
    terminal_threshold: float = 1e-5


@dataclass
class TextSection:
    dim: int = 64
    depth: int = 2
    heads: int = 4
    max_len: int = 150


@dataclass
class SrSection:
    schedule: str = "cosine"
    timesteps: int = 2000
    base_filters: int = 16
    multipliers: tuple[int, ...] = (1, 2, 4, 8)
    res_layers: int = 1
    attention_resolutions: tuple[int, ...] = (16,)
    attention_heads: int = 1
    norm_groups: int = 8
    learning_rate: float = 5e-5
    steps: int = 500
    batch_size: int = 4
    finetune_learning_rate: float = 2e-5
    finetune_steps: int = 500


@dataclass
class SamplerSection:
    kind: str = "ddim"
    steps: int = 150
    eta: float = 0.0
    sigma: str = "beta_tilde"


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class PipelineConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    images: ImagesSection = field(default_factory=ImagesSection)
    ae: AeSection = field(default_factory=AeSection)
    sdm: SdmSection = field(default_factory=SdmSection)
    text: TextSection = field(default_factory=TextSection)
    sr: SrSection = field(default_factory=SrSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        lr, hr = self.images.lr_size, self.images.hr_size
        if lr < 1 or hr < 1:
            raise ConfigError("image sizes must be positive")
        if hr % lr:
            raise ConfigError(f"hr_size {hr} is not divisible by lr_size {lr}")
        if lr % self.ae.downsample_factor:
            raise ConfigError(f"lr_size {lr} is not divisible by the AE factor {self.ae.downsample_factor}")
        if self.sampler.kind not in ("ddim", "ddpm"):
            raise ConfigError(f"unknown sampler kind {self.sampler.kind!r}")
        if self.sampler.sigma not in ("beta", "beta_tilde"):
            raise ConfigError(f"unknown sigma choice {self.sampler.sigma!r}")
        if not 0.0 <= self.sampler.eta <= 1.0:
            raise ConfigError("sampler eta must lie in [0, 1]")
        for name in ("sdm", "sr"):
            sec = getattr(self, name)
            if sec.schedule not in ("linear", "cosine"):
                raise ConfigError(f"[{name}] unknown schedule {sec.schedule!r}")
            if self.sampler.kind == "ddim" and not 1 <= self.sampler.steps <= sec.timesteps:
                raise ConfigError(f"sampler steps {self.sampler.steps} outside 1..{sec.timesteps} for [{name}]")
        if self.run.seed < 0 or self.run.seed >= 2**64:
            raise ConfigError("seed must be a u64")

    @property
    def scale_factor(self) -> int:
        return self.images.hr_size // self.images.lr_size

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def with_seed(self, seed: int | None) -> PipelineConfig:
        if seed is None:
            return self
        cfg = dataclasses.replace(self, run=RunSection(int(seed)))
        return cfg


def _jsonable(v: Any) -> Any:
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def _parse_value(section: str, key: str, raw: str, kind) -> Any:
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == tuple[int, ...]:
            items = [p for p in raw.replace(",", " ").split() if p]
            if not items:
                raise ValueError("empty list")
            return tuple(int(p) for p in items)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}: {exc}") from None
    raise ConfigError(f"[{section}] {key}: unsupported type {kind}")


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\x00none")
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    sections = {f.name: f.type for f in fields(PipelineConfig)}
    hints = get_type_hints(PipelineConfig)
    values: dict[str, Any] = {}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
        cls = hints[name]
        types = get_type_hints(cls)
        kwargs = {}
        for key, raw in parser.items(name):
            if key not in types:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            kwargs[key] = _parse_value(name, key, raw, types[key])
        values[name] = cls(**kwargs)
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
