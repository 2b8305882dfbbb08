"""Declarative run configuration: YAML file + dotted-key overrides.

One file fully determines a run; the resolved config is echoed into the run
manifest so any run can be reproduced from its manifest alone. Unknown keys
are a hard error.
"""

from __future__ import annotations

import dataclasses
import json
import platform
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .data import AugmentationSpec, DomainDataset
from .errors import ConfigError
from .losses import LossWeights
from .networks import NetSpec
from .training import AblationToggles, TrainConfig

PACKAGE_VERSION = "0.1.0"
MANIFEST_NAME = "run_manifest.json"


@dataclass
class PhaseSettings:
    iterations: int = 2000
    batch_size_b: int = 16
    max_a_batch: int = 8
    lr_generator: float = 2e-4
    lr_discriminator: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    checkpoint_every: int = 0
    log_every: int = 50


@dataclass
class EvaluationSettings:
    repeats: int = 20
    counts: list = field(default_factory=lambda: [1, 100])
    classifier_epochs: int = 4
    classifier_cache: str = ""  # default: <output_dir>/classifier.pt
    min_classifier_accuracy: float = 0.90
    eval_samples: int = 200  # held-out source images scored per run


@dataclass
class RunConfig:
    """Complete declarative description of a run."""

    output_dir: str = "runs/run"
    seed: int = 0
    dataset_a: DomainDataset = field(default_factory=lambda: DomainDataset(
        source="image-folder", root="", domain="A"))
    dataset_b: DomainDataset = field(default_factory=lambda: DomainDataset(
        source="image-folder", root="", domain="B"))
    network: NetSpec = field(default_factory=NetSpec)
    phase1: PhaseSettings = field(default_factory=PhaseSettings)
    phase2: PhaseSettings = field(default_factory=lambda: PhaseSettings(
        iterations=500, batch_size_b=16))
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    toggles: AblationToggles = field(default_factory=AblationToggles)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)
    literal_gan_sign: bool = False

    def train_config(self, phase: int) -> TrainConfig:
        settings = self.phase1 if phase == 1 else self.phase2
        return TrainConfig(
            phase=phase,
            iterations=settings.iterations,
            batch_size_b=settings.batch_size_b,
            max_a_batch=settings.max_a_batch,
            lr_generator=settings.lr_generator,
            lr_discriminator=settings.lr_discriminator,
            beta1=settings.beta1,
            beta2=settings.beta2,
            weights=self.weights,
            augment=self.augment,
            toggles=self.toggles,
            literal_gan_sign=self.literal_gan_sign,
            seed=self.seed,
            checkpoint_every=settings.checkpoint_every,
            log_every=settings.log_every,
        )

    def resolved(self) -> dict:
        return dataclasses.asdict(self)


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}, "
                          f"got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: "
                          f"{', '.join(sorted(unknown))}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config at {path or 'top level'}: {exc}") from exc


_NESTED_TYPES = {
    "dataset_a": DomainDataset,
    "dataset_b": DomainDataset,
    "network": NetSpec,
    "phase1": PhaseSettings,
    "phase2": PhaseSettings,
    "weights": LossWeights,
    "augment": AugmentationSpec,
    "toggles": AblationToggles,
    "evaluation": EvaluationSettings,
}


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        if name in _NESTED_TYPES:
            kwargs[name] = _build_dataclass(_NESTED_TYPES[name], value, name)
        else:
            kwargs[name] = value
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted-key overrides ("phase1.iterations=200") after file values."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        node = data
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} traverses a non-mapping")
        node[keys[-1]] = value
    return data


def load_run_config(path: Path | str,
                    overrides: Optional[list[str]] = None) -> RunConfig:
    """Load a YAML (or manifest JSON) config and apply overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark else ""
        raise ConfigError(f"cannot parse config {path}{where}: {exc}") from exc
    if data is None:
        data = {}
    # a run manifest nests the resolved config under "config"
    if isinstance(data, dict) and "config" in data and "command" in data:
        data = data["config"]
    data = apply_overrides(data, list(overrides or []))
    return config_from_dict(data)


def write_manifest(out_dir: Path | str, command: str, config: RunConfig,
                   extra: Optional[dict] = None) -> Path:
    """Echo the fully resolved config + seeds so the run is reproducible."""
    out_dir = Path(out_dir)
    manifest_dir = out_dir / "manifest"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "package_version": PACKAGE_VERSION,
        "python_version": platform.python_version(),
        "config": config.resolved(),
    }
    if extra:
        payload.update(extra)
    path = manifest_dir / MANIFEST_NAME
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return path
