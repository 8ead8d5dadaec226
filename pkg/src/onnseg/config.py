"""Run configuration: one JSON document drives every CLI verb."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .data import ClaheParams, PipelineConfig, SyntheticSpec
from .data.preprocess import MODALITY_CHANNELS
from .errors import ConfigurationError, ValidationError
from .nn import PRESETS, ModelConfig
from .objectives import LossWeights
from .train import AdamConfig, TrainConfig

DEFAULT_IMAGE_SIZE = {"tiny": 64, "densenet121": 256}


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class RunConfig:
    manifest: Optional[str] = None
    synthetic: Optional[dict] = None
    modality_mode: str = "dwi_adc_edwi"
    preset: str = "tiny"
    Q: int = 3
    image_size: Optional[int] = None
    normalization: str = "slice"
    clahe: dict = field(default_factory=lambda: asdict(ClaheParams()))
    drop_empty: bool = False
    workers: int = 1
    loss: dict = field(default_factory=lambda: asdict(LossWeights()))
    optimizer: dict = field(default_factory=lambda: asdict(OptimizerConfig()))
    batch_size: int = 4
    epochs: int = 50
    patience: Optional[int] = 20
    seed: int = 0
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    folds: int = 5
    threshold: float = 0.5
    out_dir: str = "runs/default"

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        d = dict(d)
        if "split_ratios" in d:
            d["split_ratios"] = tuple(d["split_ratios"])
        if d.get("manifest") and base_dir is not None and not Path(d["manifest"]).is_absolute():
            d["manifest"] = str((base_dir / d["manifest"]).resolve())
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent)

    def with_overrides(self, **kw) -> "RunConfig":
        cfg = replace(self, **{k: v for k, v in kw.items() if v is not None})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if (self.manifest is None) == (self.synthetic is None):
            raise ConfigurationError("config needs exactly one data source: 'manifest' or 'synthetic'")
        if self.manifest is not None and not Path(self.manifest).exists():
            raise ConfigurationError(f"manifest {self.manifest} does not exist")
        if self.modality_mode not in MODALITY_CHANNELS:
            raise ConfigurationError(
                f"modality_mode must be one of {sorted(MODALITY_CHANNELS)}, got {self.modality_mode!r}")
        if self.preset not in PRESETS:
            raise ConfigurationError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.optimizer.get("kind", "adam") != "adam":
            raise ConfigurationError(f"only the adam optimizer is supported, got {self.optimizer}")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be at least 2 (batch norm on pooled vectors)")
        if self.epochs < 0 or self.folds < 2:
            raise ConfigurationError("epochs must be >= 0 and folds >= 2")
        self.loss_weights()  # validates the sum
        self.synthetic_spec()

    # -- derived objects ----------------------------------------------------

    @property
    def size(self) -> int:
        return self.image_size or DEFAULT_IMAGE_SIZE[self.preset]

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def synthetic_spec(self) -> Optional[SyntheticSpec]:
        if self.synthetic is None:
            return None
        try:
            spec = SyntheticSpec.from_dict({"seed": self.seed, **self.synthetic})
            spec.validate()
            return spec
        except (TypeError, ValidationError) as exc:
            raise ConfigurationError(f"bad synthetic spec: {exc}") from None

    def pipeline(self) -> PipelineConfig:
        c = self.clahe
        return PipelineConfig(mode=self.modality_mode, size=self.size,
                              normalization=self.normalization,
                              clahe=ClaheParams(c["clip_limit"], tuple(c["tiles"]), c["bins"]),
                              drop_empty=self.drop_empty, workers=self.workers)

    def model(self) -> ModelConfig:
        return ModelConfig.preset(self.preset, in_channels=MODALITY_CHANNELS[self.modality_mode],
                                  Q=self.Q)

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(**self.loss)
        except (TypeError, ValidationError) as exc:
            raise ConfigurationError(f"bad loss weights: {exc}") from None

    def train_config(self) -> TrainConfig:
        o = {**asdict(OptimizerConfig()), **self.optimizer}
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           adam=AdamConfig(o["lr"], o["beta1"], o["beta2"], o["eps"]),
                           loss=self.loss_weights(), patience=self.patience)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["clahe"] = {**self.clahe, "tiles": list(self.clahe["tiles"])}
        d["resolved_image_size"] = self.size
        d["optimizer"] = {**asdict(OptimizerConfig()), **self.optimizer}
        if self.synthetic is not None:
            d["synthetic"] = self.synthetic_spec().to_dict()
        return d

    def echo(self, out_dir: Optional[Path] = None) -> Path:
        """Write the fully resolved config (every default included)."""
        out_dir = Path(out_dir or self.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path
