"""Run configuration: one flat record shared by every pipeline stage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class RunConfig:
    # data
    data_root: str = "data/shapes"
    train_split: str = "train"
    val_split: str = "val"
    image_size: int = 192
    n_classes: int = 3
    # model
    width: float = 1.0
    seed: int = 0
    # importance criterion
    criterion: str = "saliency"        # saliency | l1 | random
    taps: list[str] | None = None      # None: every prunable conv's activation
    n_samples: int = 50
    margin_ratio: float = 0.25
    decay_kind: str = "power"
    decay_s: float = 1.0
    use_boxes: bool = True
    importance_extent: str = "region"
    # detection loss
    lambda_cls: float = 1.0
    lambda_box: float = 5.0
    # pruning
    rate: float = 0.3
    # optimization
    epochs: int = 120
    finetune_epochs: int = 20
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # evaluation
    conf_thresh: float = 0.25
    nms_iou: float = 0.45

    def __post_init__(self) -> None:
        if not (0.0 <= self.rate < 1.0):
            raise ConfigurationError(f"rate must be in [0, 1), got {self.rate}")
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be >= 1, got {self.n_samples}")

    def to_json_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def fingerprint(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    @classmethod
    def from_file(cls, path: str | Path | None = None, **overrides) -> "RunConfig":
        """Config file values first, then non-None keyword overrides."""
        data: dict = {}
        if path is not None:
            data.update(json.loads(Path(path).read_text()))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for key, value in overrides.items():
            if key not in known:
                raise ConfigurationError(f"unknown config override {key!r}")
            if value is not None:
                data[key] = value
        return cls(**data)
