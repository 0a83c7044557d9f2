"""Experiment configuration: schema, YAML loading and presets.

The schema is the set of dataclasses below; unknown keys anywhere are
errors. ``json_schema()`` publishes it in JSON-Schema form.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Literal

import yaml
from pydantic import ConfigDict, TypeAdapter, ValidationError, with_config

from .denoiser import DenoiserConfig
from .diffloss import DiffLossConfig
from .diffusion import NoiseSchedule, make_linear_schedule
from .exceptions import ConfigError
from .hspace import PerturbSpec
from .restorer import RestorerConfig
from .synthdata import DegradationSpec, ShapesDatasetSpec

_STRICT = ConfigDict(extra="forbid")

# Domain types double as config sections.
for _cls in (DenoiserConfig, RestorerConfig, DegradationSpec):
    _cls.__pydantic_config__ = _STRICT


@with_config(_STRICT)
@dataclass(frozen=True)
class DatasetConfig:
    resolution: int = 32
    n_classes: int = 8
    seed: int = 0
    n_train: int = 2048
    n_val: int = 256
    n_test: int = 512

    def spec(self, split: str) -> ShapesDatasetSpec:
        n = {"train": self.n_train, "val": self.n_val, "test": self.n_test}[split]
        return ShapesDatasetSpec(n_images=n, resolution=self.resolution, n_classes=self.n_classes,
                                 seed=self.seed, split=split)


@with_config(_STRICT)
@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@with_config(_STRICT)
@dataclass(frozen=True)
class OptimizerConfig:
    name: Literal["adam"] = "adam"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.lr}")


@with_config(_STRICT)
@dataclass(frozen=True)
class DDPMTrainConfig:
    max_steps: int = 20_000
    batch_size: int = 16
    lr: float = 2e-4
    eval_every: int = 500
    ckpt_every: int = 5_000
    stop_below: float | None = None
    n_samples: int = 16


@with_config(_STRICT)
@dataclass(frozen=True)
class DiffLossSection:
    enabled: bool = True
    lambda_sem: float = 0.01
    gamma: float = 0.001
    t_min: int = 1
    t_max: int | None = None
    variant: Literal["epsilon", "x0", "x_prev"] = "epsilon"
    weight_mode: Literal["constant", "timestep_adaptive"] = "constant"
    share_noise: bool = True

    def __post_init__(self):
        self.to_config()

    def to_config(self) -> DiffLossConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "enabled"}
        return DiffLossConfig(**kw)


@with_config(_STRICT)
@dataclass(frozen=True)
class ProbeTrainConfig:
    n_train: int = 3000
    n_test: int = 1000
    feature_dim: int = 64
    width: int = 32
    epochs: int = 8
    batch_size: int = 64
    lr: float = 1e-3
    gate: float = 0.90
    seed: int = 0


@with_config(_STRICT)
@dataclass(frozen=True)
class HSpaceConfig:
    t0_frac: float = 0.5
    deltas: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0)
    n_images: int = 64
    seed: int = 0
    restored_with_run: str | None = None
    restored_without_run: str | None = None

    def spec(self) -> PerturbSpec:
        return PerturbSpec(t0_frac=self.t0_frac, deltas=self.deltas, seed=self.seed)


@with_config(_STRICT)
@dataclass(frozen=True)
class ExperimentConfig:
    run_id: str
    seed: int = 0
    out_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    degradation: DegradationSpec = field(default_factory=DegradationSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    ddpm: DDPMTrainConfig = field(default_factory=DDPMTrainConfig)
    restorer: RestorerConfig = field(default_factory=lambda: RestorerConfig("plain_cnn", 32, 5, 100_000))
    denoiser_ckpt: str | None = None
    probe_ckpt: str | None = None
    diffloss: DiffLossSection = field(default_factory=DiffLossSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 16
    patch_size: int | None = None
    max_steps: int = 5_000
    eval_every: int = 1_000
    ckpt_every: int = 1_000
    probe: ProbeTrainConfig = field(default_factory=ProbeTrainConfig)
    hspace: HSpaceConfig = field(default_factory=HSpaceConfig)
    sweep_gammas: tuple[float, ...] = (0.0, 0.0005, 0.001, 0.005, 0.05)

    def __post_init__(self):
        if not self.run_id or "/" in self.run_id or self.run_id.startswith("."):
            raise ConfigError(f"run_id must be a plain directory name, got {self.run_id!r}")
        for name in ("seed", "batch_size", "max_steps"):
            value = getattr(self, name)
            if value < (0 if name == "seed" else 1):
                raise ConfigError(f"{name} has an invalid value {value!r}")
        if self.patch_size is not None and not 1 <= self.patch_size <= self.dataset.resolution:
            raise ConfigError(f"patch_size must lie in [1, dataset.resolution], got {self.patch_size}")
        if self.denoiser.resolution != self.dataset.resolution:
            raise ConfigError("denoiser.resolution must equal dataset.resolution")
        t_max = self.diffloss.t_max
        if t_max is not None and t_max > self.schedule.T:
            raise ConfigError(f"diffloss.t_max={t_max} exceeds schedule.T={self.schedule.T}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_ADAPTER = TypeAdapter(ExperimentConfig)


def json_schema() -> dict:
    return _ADAPTER.json_schema()


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if e["type"] == "unexpected_keyword_argument":
            msg = "unknown key"
        lines.append(f"  {loc}: {msg}")
    return "invalid configuration:\n" + "\n".join(lines)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    try:
        return _ADAPTER.validate_python(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return config_from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def override(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Return a re-validated copy with top-level or dotted (``section.key``) changes."""
    data = cfg.to_dict()
    for key, value in changes.items():
        parts = key.split("__") if "__" in key else key.split(".")
        node = data
        for p in parts[:-1]:
            node = node[p]
        node[parts[-1]] = value
    return config_from_dict(data)


def preset(name: str = "desk", run_id: str = "run", **changes) -> ExperimentConfig:
    """Named starting points.

    ``desk``: the documented defaults (T=1000, ~3M-parameter denoiser, 20K
    DDPM steps, 5K restoration steps).
    ``ci``: a minutes-scale variant (T=200 with proportionally larger betas,
    ~0.3M-parameter denoiser, 8K DDPM steps, 1K restoration steps at lr
    1e-3) used by the test-suite.
    """
    if name == "desk":
        cfg = ExperimentConfig(run_id=run_id)
    elif name == "ci":
        cfg = ExperimentConfig(
            run_id=run_id,
            dataset=DatasetConfig(n_train=2048, n_val=256, n_test=512),
            schedule=ScheduleConfig(T=200, beta_start=5e-4, beta_end=0.1),
            denoiser=DenoiserConfig(resolution=32, base_channels=16, depth=3, time_embed_dim=64, h_channels=64),
            ddpm=DDPMTrainConfig(max_steps=8000, batch_size=16, lr=2e-4, eval_every=1000, ckpt_every=2000),
            optimizer=OptimizerConfig(lr=1e-3),
            max_steps=1000,
            eval_every=500,
            ckpt_every=500,
            hspace=HSpaceConfig(n_images=64),
        )
    else:
        raise ConfigError(f"unknown preset {name!r}; expected 'desk' or 'ci'")
    return override(cfg, **changes) if changes else cfg


def write_config(cfg: ExperimentConfig, path) -> bytes:
    data = dump_config(cfg).encode()
    Path(path).write_bytes(data)
    return data


def schema_text() -> str:
    return json.dumps(json_schema(), indent=2, sort_keys=True) + "\n"


__all__ = [
    "DatasetConfig", "ScheduleConfig", "OptimizerConfig", "DDPMTrainConfig", "DiffLossSection",
    "ProbeTrainConfig", "HSpaceConfig", "ExperimentConfig", "config_from_dict", "load_config",
    "dump_config", "override", "preset", "json_schema", "schema_text", "write_config", "replace",
]
