"""Run configuration: one JSON file with a section per concern.

Schema version 1. Sections and keys (every key optional, defaults shown by
``pokefusion --print-defaults`` or :func:`default_config`):

``data``     n, styles, seed, manifest
``model``    every :class:`~pokefusion.model.DenoiserConfig` field
``train``    every :class:`~pokefusion.training.TrainConfig` field
``sample``   n, seed, alpha, omega, sampler, steps_used, captions
``eval``     experiment settings (pretraining, seeds, sweep grids, ...)

Unknown sections or keys are rejected. Command-line flags mirror the keys
one to one as ``--section.key value``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .diffusion import SAMPLERS
from .model import DenoiserConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass
class DataSection:
    n: int = 1000
    styles: int = 2
    seed: int = 0
    manifest: str = ""  # read an existing manifest.jsonl instead of generating

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("data.n must be >= 1")
        if not 1 <= self.styles <= 4:
            raise ValueError("data.styles must be in 1..4")


@dataclass
class SampleSection:
    n: int = 16
    seed: int = 0
    alpha: float = 0.5
    omega: float = 3.0
    sampler: str = "ddim_deterministic"
    steps_used: int = 50
    captions: list = field(default_factory=list)  # empty: cycle through all attribute combinations

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sample.n must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("sample.alpha must lie in [0, 1]")
        if self.omega < 0:
            raise ValueError("sample.omega must be >= 0")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sample.sampler must be one of {SAMPLERS}")


@dataclass
class EvalSection:
    target_style: int = 0
    eval_samples: int = 40
    eval_seed: int = 1234
    pretrain_steps: int = 6000
    pretrain_lr: float = 1e-3
    pretrain_seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    variants: list = field(default_factory=lambda: ["TEXT_ONLY", "STYLE_NO_FUSION", "FROZEN_CROSS_ATTN", "POKEFUSION"])
    trainable_override: str = ""  # force one trainable scope on every variant (sabotage / debugging)
    alphas: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    steps_grid: list = field(default_factory=lambda: [10, 25, 50])
    omega_grid: list = field(default_factory=lambda: [1.5, 3.0, 5.0])

    def __post_init__(self):
        if self.eval_samples < 1:
            raise ValueError("eval.eval_samples must be >= 1")
        if not self.seeds:
            raise ValueError("eval.seeds must not be empty")


SECTIONS = {"data": DataSection, "model": DenoiserConfig, "train": TrainConfig,
            "sample": SampleSection, "eval": EvalSection}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        out = {"version": SCHEMA_VERSION}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: Path) -> None:
        Path(path).write_text(self.dumps())


def _coerce(cls, key: str, value):
    """Bring a JSON / flag value to the field's declared type."""
    default = getattr(cls(), key)
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(f"{key}: expected a boolean, got {value!r}")
            return low in ("true", "1")
        return bool(value)
    if isinstance(default, tuple):
        return tuple(value)
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and not isinstance(value, int):
        raise ValueError(f"{key}: expected an integer, got {value!r}")
    return value


def from_dict(d: dict) -> RunConfig:
    d = dict(d)
    version = d.pop("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported config version {version} (expected {SCHEMA_VERSION})")
    extra = set(d) - set(SECTIONS)
    if extra:
        raise ValueError(f"unknown config sections {sorted(extra)}")
    built = {}
    for name, cls in SECTIONS.items():
        sec = d.get(name, {})
        if not isinstance(sec, dict):
            raise ValueError(f"section {name!r} must be an object")
        known = {f.name for f in fields(cls)}
        bad = set(sec) - known
        if bad:
            raise ValueError(f"unknown keys in {name!r}: {sorted(bad)}")
        built[name] = cls(**{k: _coerce(cls, k, v) for k, v in sec.items()})
    return RunConfig(**built)


def load(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be an object")
    return from_dict(raw)


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """``{"train.lr": "1e-3"}`` style overrides; values are parsed as JSON when possible."""
    d = cfg.to_dict()
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or key not in {f.name for f in fields(SECTIONS[section])}:
            raise ValueError(f"unknown config key {dotted!r}")
        try:
            value = json.loads(raw)
        except (json.JSONDecodeError, TypeError):
            value = raw
        d[section][key] = value
    return from_dict(d)


def flag_names() -> list[str]:
    return [f"{s}.{f.name}" for s, cls in SECTIONS.items() for f in fields(cls)]


def default_config() -> RunConfig:
    return RunConfig()
