"""Experiment configuration: strict JSON schema, defaults and provenance echo."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data import CIFAR10_MEAN, CIFAR10_STD, MNIST_MEAN, MNIST_STD
from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True)


class DatasetConfig(_Strict):
    kind: Literal["mnist_idx", "cifar10_binary"]
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_files: list[str] = Field(default_factory=list)
    test_files: list[str] = Field(default_factory=list)
    subset: Optional[int] = Field(default=None, ge=1)
    test_subset: Optional[int] = Field(default=None, ge=1)
    subset_seed: int = 0
    mean: Optional[list[float]] = None
    std: Optional[list[float]] = None

    @model_validator(mode="after")
    def _fill(self):
        if self.kind == "mnist_idx":
            missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(self, k) is None]
            if missing:
                raise ValueError(f"mnist_idx needs {', '.join(missing)}")
            mean, std = MNIST_MEAN, MNIST_STD
        else:
            if not self.train_files or not self.test_files:
                raise ValueError("cifar10_binary needs train_files and test_files")
            mean, std = CIFAR10_MEAN, CIFAR10_STD
        if self.mean is None:
            self.mean = list(mean)
        if self.std is None:
            self.std = list(std)
        if len(self.mean) != len(mean) or len(self.std) != len(std):
            raise ValueError(f"mean/std need {len(mean)} entries")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")
        return self


class CriterionConfig(_Strict):
    r: float = Field(gt=0, le=1)
    inclusive_crossing: bool = False
    zero_eps: float = Field(default=0.0, ge=0)


class TrainSection(_Strict):
    mode: Literal["baseline", "decoupled", "joint"] = "baseline"
    epochs: int = Field(default=20, ge=0)
    batch_size: int = Field(default=128, ge=1)
    lr: Optional[float] = Field(default=None, gt=0)
    head_lr: float = Field(default=0.1, ge=0)
    milestones: list[int] = Field(default_factory=lambda: [8, 12, 15])
    lr_decay: float = Field(default=0.1, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=5e-4, ge=0)
    mask_source: Literal["predicted", "ground_truth"] = "predicted"
    pred_loss_reduction: Literal["mean", "sum"] = "mean"
    use_softmax: bool = True
    from_scratch: bool = False
    flip: bool = False

    @model_validator(mode="after")
    def _fill(self):
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if self.lr is None:
            # dense training starts at 0.1; gated fine-tuning of the backbone at 1e-2
            self.lr = 0.1 if self.mode == "baseline" else 1e-2
        return self


class ExperimentConfig(_Strict):
    architecture: Literal["mnist_net", "cifar_vgg_s"] = "mnist_net"
    dataset: DatasetConfig
    train: TrainSection = Field(default_factory=TrainSection)
    criterion: Optional[CriterionConfig] = None
    signature: Optional[str] = None
    pretrained: Optional[str] = None
    output_dir: Optional[str] = None
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.criterion is not None and self.signature is not None:
            raise ValueError("criterion and signature are mutually exclusive (ambiguous)")
        if self.train.mode != "baseline":
            if self.criterion is None and self.signature is None:
                raise ValueError(f"mode {self.train.mode!r} needs a criterion or a signature")
            if self.pretrained is None and not self.train.from_scratch:
                raise ValueError("gated training needs a pretrained checkpoint unless from_scratch")
        return self


_PATH_FIELDS = ("train_images", "train_labels", "test_images", "test_labels")


def _resolve(base, p):
    return p if p is None else str((base / p).resolve()) if not Path(p).is_absolute() else p


def _format_errors(err):
    msgs = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msgs.append(f"{loc}: {e['msg']}")
    return "; ".join(msgs)


def config_from_dict(data, base_dir="."):
    """Validate a config mapping; relative paths resolve against ``base_dir``."""
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(_format_errors(e)) from None
    base = Path(base_dir)
    ds = cfg.dataset
    for k in _PATH_FIELDS:
        setattr(ds, k, _resolve(base, getattr(ds, k)))
    ds.train_files = [_resolve(base, p) for p in ds.train_files]
    ds.test_files = [_resolve(base, p) for p in ds.test_files]
    cfg.signature = _resolve(base, cfg.signature)
    cfg.pretrained = _resolve(base, cfg.pretrained)
    cfg.output_dir = _resolve(base, cfg.output_dir)
    return cfg


def parse_config(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ConfigurationError(f"{path}: {e.strerror or e}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data, path.parent)


def config_to_dict(cfg):
    return cfg.model_dump(mode="json")


def echo_config(cfg, out_dir):
    """Write the fully defaulted config next to the run's outputs."""
    path = Path(out_dir) / "config.json"
    path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
    return path


def config_digest(cfg):
    """SHA-256 of the canonical config, ignoring where outputs go."""
    d = config_to_dict(cfg)
    d.pop("output_dir", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
