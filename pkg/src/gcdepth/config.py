"""Training configuration: schema, file loading, overrides and content hash.

Precedence is defaults < config file < command-line overrides; the merged
result is what gets hashed and embedded in checkpoints, so a run directory is
self-reproducing. Unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights


class ConfigError(ValueError):
    """Configuration schema violation (unknown key, bad value, missing input)."""


@dataclass
class TrainConfig:
    """Everything a training run needs; defaults follow the reference recipe."""

    stage: str = "coarse"
    dataset: str = ""
    out_dir: str = "runs"
    seed: int = 42

    height: int = 64
    width: int = 192
    batch_size: int = 12
    coarse_epochs: int = 15
    fine_epochs: int = 5
    coarse_lr: float = 1e-4
    fine_lr: float = 1e-5
    lr_schedule: str = "constant"       # constant | exp0.9
    weights: LossWeights = field(default_factory=LossWeights)
    alpha_on_l1: bool = True            # weigh L1 by alpha (swap for SSIM-weighted)

    min_depth: float = 0.1
    max_depth: float = 100.0
    backbone: str = "ref"
    base_channels: int = 16
    scales: tuple = (0, 1)

    automask: bool = True
    smoothness_in_coarse: str = "gds"   # gds | plain | none
    mask_reprojection: bool = True

    delta_d_fraction: float = 0.05      # of per-image max coarse depth
    delta_d_global_cap: bool = False    # use the 80-unit eval cap instead
    candidate_count: int = 32
    candidate_spacing: str = "linear"   # linear | inverse
    cost_box_filter: bool = False
    cost_source: str = "prev"           # prev | both
    fine_regularizer: str = "weighted"  # weighted | basic | filter | none
    filter_threshold: float = 0.15
    cache_weighting: bool = False       # cache per-sample lambda_cv in the fine stage

    checkpoint: str = ""                # coarse checkpoint path (fine stage)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.scales, list):
            self.scales = tuple(self.scales)
        if self.stage not in ("coarse", "fine", "baseline") and not self.stage.startswith("ablation"):
            raise ConfigError("unknown stage %r" % self.stage)
        if self.coarse_epochs < 1:
            raise ConfigError("coarse_epochs must be >= 1")
        if self.lr_schedule not in ("constant", "exp0.9"):
            raise ConfigError("unknown lr_schedule %r" % self.lr_schedule)
        if self.smoothness_in_coarse not in ("gds", "plain", "none"):
            raise ConfigError("unknown smoothness_in_coarse %r" % self.smoothness_in_coarse)
        if self.fine_regularizer not in ("weighted", "basic", "filter", "none"):
            raise ConfigError("unknown fine_regularizer %r" % self.fine_regularizer)
        if self.cost_source not in ("prev", "both"):
            raise ConfigError("unknown cost_source %r" % self.cost_source)
        if not 0 < self.delta_d_fraction:
            raise ConfigError("delta_d_fraction must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError("unknown config keys: %s" % ", ".join(sorted(unknown)))
        if "weights" in data and isinstance(data["weights"], dict):
            wknown = {f.name for f in dataclasses.fields(LossWeights)}
            wunknown = set(data["weights"]) - wknown
            if wunknown:
                raise ConfigError("unknown config keys: %s"
                                  % ", ".join("weights." + k for k in sorted(wunknown)))
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)


def load_config_file(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError("config file %s does not exist" % path)
    with open(path) as f:
        data = yaml.safe_load(f)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config file %s must hold a mapping" % path)
    # underscore keys are run metadata (e.g. _config_hash in an effective config)
    return {k: v for k, v in data.items() if not k.startswith("_")}


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value strings (e.g. weights.gamma=10) onto a config dict."""
    out = json.loads(json.dumps(data))  # deep copy of plain data
    for item in overrides:
        if "=" not in item:
            raise ConfigError("override %r is not of the form key=value" % item)
        key, _, value = item.partition("=")
        parts = key.strip().split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError("override %r walks through a non-mapping" % item)
        node[parts[-1]] = _parse_value(value.strip())
    return out


def build_config(path: Path | None = None, overrides: list[str] | None = None,
                 **direct) -> TrainConfig:
    """defaults <- file <- overrides <- direct kwargs, validated."""
    data = {}
    if path is not None:
        data.update(load_config_file(path))
    if overrides:
        data = apply_overrides(data, overrides)
    data.update(direct)
    return TrainConfig.from_dict(data)


def save_effective_config(config: TrainConfig, path: Path) -> None:
    payload = config.to_dict()
    payload["_config_hash"] = config.config_hash()
    Path(path).write_text(yaml.safe_dump(payload, sort_keys=True))
