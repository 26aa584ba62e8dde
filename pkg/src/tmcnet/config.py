"""Flat ``key = value`` run configuration.

Every field of :class:`TrainConfig` is a valid key.  Lines starting with
``#`` are comments.  Tuples are written comma-separated (``fusion_stages =
2,3,4``) and booleans as ``true``/``false``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .cross import ALIGN_MODES
from .data import SplitSpec, SynthConfig
from .errors import ConfigError
from .segnet import ModelConfig

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    # optimisation
    lr: float = 3e-4
    batch_size: int = 8
    max_epochs: int = 40
    max_steps: int = 0              # 0 = no step cap
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    early_stop_patience: int = 20
    improve_threshold: float = 1e-5
    lam: float = 0.1
    seed: int = 0
    # mode flags
    mcm_on: bool = True
    align_on: bool = True
    align_mode: str = "paper-literal"
    text_ablation: bool = False
    freeze_text: bool = False
    augment: bool = True
    # model
    image_size: int = 32
    patch: int = 4
    base_channels: int = 8
    d: int = 16
    d_l: int = 32
    heads: int = 2
    text_blocks: int = 2
    fusion_stages: tuple[int, ...] = (2, 3, 4)
    dtype: str = "float32"
    # data
    data_dir: str = ""              # empty -> generate in memory
    n_cases: int = 600
    slices_per_case: int = 1
    ambiguous_fraction: float = 0.5
    data_seed: int = 0
    split_seed: int = 0
    eval_batch: int = 64

    def __post_init__(self):
        self.fusion_stages = _as_stages(self.fusion_stages)
        self.validate()

    def validate(self) -> None:
        for name in ("batch_size", "max_epochs", "plateau_patience", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.lr <= 0 or not 0 < self.plateau_factor < 1:
            raise ConfigError("lr must be positive and plateau_factor in (0, 1)")
        if self.align_mode not in ALIGN_MODES:
            raise ConfigError(f"align_mode must be one of {ALIGN_MODES}, got {self.align_mode!r}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    # ------------------------------------------------------------ derived
    def model_config(self) -> ModelConfig:
        return ModelConfig(image_size=self.image_size, patch=self.patch, base_channels=self.base_channels,
                           d=self.d, d_l=self.d_l, heads=self.heads, text_blocks=self.text_blocks,
                           fusion_stages=self.fusion_stages, mcm_on=self.mcm_on,
                           align_on=self.align_on, align_mode=self.align_mode)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(n_cases=self.n_cases, slices_per_case=self.slices_per_case,
                           image_size=self.image_size, ambiguous_fraction=self.ambiguous_fraction,
                           seed=self.data_seed)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(seed=self.split_seed)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ text I/O
    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        default = cls()
        parsed = {k: parse_value(v, type(getattr(default, k))) if isinstance(v, str) else v
                  for k, v in values.items()}
        return cls(**parsed)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "TrainConfig":
        values = parse_lines(Path(path).read_text(encoding="utf-8").splitlines(), str(path))
        values.update(overrides or {})
        return cls.from_dict(values)


def _as_stages(v) -> tuple[int, ...]:
    if isinstance(v, str):
        v = [s for s in v.replace(" ", "").split(",") if s]
    return tuple(int(s) for s in v)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def parse_value(text: str, kind: type):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind is tuple:
        return _as_stages(text)
    try:
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {kind.__name__}") from exc


def parse_lines(lines, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out
