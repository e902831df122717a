"""Text configuration: ``key = value`` lines, ``#`` comments, unknown keys
rejected, missing keys defaulted, everything validated with line numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .blocks import NetworkSpec
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: str = "lesion"                  # "liver" trains the baseline, "lesion" the full net
    network: NetworkSpec = field(default_factory=NetworkSpec)
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    iterations: int = 300
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    data_dir: str = "data"
    checkpoint_out: str = "model.fedckpt"
    p_pos: float = 0.9
    p_neg: float = 0.1
    liver_threshold: float = 0.5
    lesion_threshold: float = 0.3
    crop_to_liver_bbox: bool = False
    connectivity: int = 6
    # pooled over the batch by default: the per-slice form diverges when a
    # batch holds empty-target slices (its gradient grows without bound as
    # predictions shrink), which from-scratch desk-scale training cannot absorb
    jaccard_per_slice: bool = False
    grad_clip: float = 3.0                 # global grad-norm cap; 0 disables
    shuffle_buffer: int = 0

    def validate(self) -> None:
        if self.stage not in ("liver", "lesion"):
            raise ConfigError(f"stage must be 'liver' or 'lesion', got {self.stage!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.momentum < 0 or self.momentum >= 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be a u64, got {self.seed}")
        for key in ("p_pos", "p_neg", "liver_threshold", "lesion_threshold"):
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1], got {v}")
        if not self.data_dir or not self.checkpoint_out:
            raise ConfigError("data_dir and checkpoint_out must be non-empty paths")
        if self.connectivity not in (6, 26):
            raise ConfigError(f"connectivity must be 6 or 26, got {self.connectivity}")
        if self.grad_clip < 0:
            raise ConfigError(f"grad_clip must be >= 0, got {self.grad_clip}")
        if self.shuffle_buffer < 0:
            raise ConfigError(f"shuffle_buffer must be >= 0, got {self.shuffle_buffer}")
        try:
            self.network.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in raw.split(","))


# key -> (target, field, caster); target "cfg" / "net" / "loss"
_SCHEMA = {
    "stage": ("cfg", "stage", str),
    "lr": ("cfg", "lr", float),
    "momentum": ("cfg", "momentum", float),
    "weight_decay": ("cfg", "weight_decay", float),
    "batch_size": ("cfg", "batch_size", int),
    "iterations": ("cfg", "iterations", int),
    "seed": ("cfg", "seed", int),
    "data_dir": ("cfg", "data_dir", str),
    "checkpoint_out": ("cfg", "checkpoint_out", str),
    "p_pos": ("cfg", "p_pos", float),
    "p_neg": ("cfg", "p_neg", float),
    "liver_threshold": ("cfg", "liver_threshold", float),
    "lesion_threshold": ("cfg", "lesion_threshold", float),
    "crop_to_liver_bbox": ("cfg", "crop_to_liver_bbox", _parse_bool),
    "connectivity": ("cfg", "connectivity", int),
    "jaccard_per_slice": ("cfg", "jaccard_per_slice", _parse_bool),
    "grad_clip": ("cfg", "grad_clip", float),
    "shuffle_buffer": ("cfg", "shuffle_buffer", int),
    "in_channels": ("net", "in_channels", int),
    "base_channels": ("net", "base_channels", int),
    "channels_per_level": ("net", "channels_per_level", _parse_int_list),
    "se_reduction": ("net", "se_reduction", int),
    "enable_rcb": ("net", "enable_rcb", _parse_bool),
    "enable_ff": ("net", "enable_ff", _parse_bool),
    "enable_se": ("net", "enable_se", _parse_bool),
    "enable_duc": ("net", "enable_duc", _parse_bool),
    "out_stride_head_factor": ("net", "out_stride_head_factor", int),
    "omega1": ("loss", "omega1", float),
    "omega2": ("loss", "omega2", float),
    "epsilon": ("loss", "epsilon", float),
    "clamp_delta": ("loss", "clamp_delta", float),
}


def parse_config(path) -> TrainConfig:
    """Parse and fully validate a config file; every error names its line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()

    buckets: dict[str, dict] = {"cfg": {}, "net": {}, "loss": {}}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        target, attr, caster = _SCHEMA[key]
        try:
            buckets[target][attr] = caster(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(
                f"{path}:{lineno}: cannot parse {key!r} from {value!r}: {exc}") from exc

    if ("base_channels" in buckets["net"]
            and "channels_per_level" not in buckets["net"]):
        buckets["net"]["channels_per_level"] = None  # rederive from base_channels
    try:
        net = NetworkSpec(**buckets["net"])
        loss = LossWeights(**buckets["loss"])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg = TrainConfig(network=net, loss=loss, **buckets["cfg"])
    cfg.validate()
    return cfg


def config_for_stage(cfg: TrainConfig, stage: str) -> TrainConfig:
    """A copy of ``cfg`` switched to the given stage."""
    return replace(cfg, stage=stage)
