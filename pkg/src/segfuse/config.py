"""Pipeline configuration: one INI file, strictly validated.

Unknown sections or keys are rejected outright so a typo cannot silently
fall back to a default and ruin a reproduction run. Command-line
overrides use the same dotted addresses (``section.key=value``).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from typing import List, Optional

from .clustering import SplitParams
from .fusion import FusionConfig
from .sampler import SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass
class SuppressionConfig:
    iou_threshold: float = 0.45
    score_floor: float = 0.35


@dataclass
class TransportConfig:
    host: str = "127.0.0.1"
    port: int = 7455
    buffer_capacity: int = 8
    ack_timeout: float = 10.0
    connect_retries: int = 3


@dataclass
class ExportConfig:
    directory: str = "out"
    save_obj: bool = True
    save_checkpoint: bool = True
    split_instances: bool = True


@dataclass
class ClusteringConfig:
    eps: Optional[float] = None
    min_points: int = 10
    plane_threshold: Optional[float] = None
    ransac_iterations: int = 1000
    plane_min_fraction: float = 0.15
    max_planes: int = 0  # masks already strip background planes
    min_cluster_points: int = 50
    seed: int = 0

    def split_params(self) -> SplitParams:
        return SplitParams(
            eps=self.eps,
            min_points=self.min_points,
            plane_distance=self.plane_threshold,
            ransac_iterations=self.ransac_iterations,
            plane_min_fraction=self.plane_min_fraction,
            max_planes=self.max_planes,
            min_cluster_points=self.min_cluster_points,
            seed=self.seed,
        )


@dataclass
class PipelineConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    suppression: SuppressionConfig = field(default_factory=SuppressionConfig)
    compression_level: int = 1
    transport: TransportConfig = field(default_factory=TransportConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    export: ExportConfig = field(default_factory=ExportConfig)


_SECTIONS = {
    "sampler": lambda cfg: cfg.sampler,
    "suppression": lambda cfg: cfg.suppression,
    "container": None,  # handled specially: holds compression_level
    "transport": lambda cfg: cfg.transport,
    "fusion": lambda cfg: cfg.fusion,
    "odometry": lambda cfg: cfg.fusion.odometry,
    "clustering": lambda cfg: cfg.clustering,
    "export": lambda cfg: cfg.export,
}


def _coerce(current, raw: str, address: str):
    if isinstance(current, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{address}: expected a boolean, got {raw!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{address}: expected an integer, got {raw!r}") from exc
    if isinstance(current, float) or current is None:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{address}: expected a number, got {raw!r}") from exc
    if isinstance(current, str):
        return raw
    raise ConfigError(f"{address}: unsupported option type")


def _apply(cfg: PipelineConfig, section: str, key: str, raw: str) -> None:
    address = f"{section}.{key}"
    if section == "container":
        if key != "compression_level":
            raise ConfigError(f"unknown option {address}")
        cfg.compression_level = _coerce(cfg.compression_level, raw, address)
        if not 0 <= cfg.compression_level <= 9:
            raise ConfigError(f"{address}: must be in 0..9")
        return
    getter = _SECTIONS.get(section)
    if getter is None:
        raise ConfigError(f"unknown section [{section}]")
    target = getter(cfg)
    known = {f.name for f in fields(target) if f.name != "odometry"}
    if key not in known:
        raise ConfigError(f"unknown option {address}")
    setattr(target, key, _coerce(getattr(target, key), raw, address))


def load_config(path=None, overrides: Optional[List[str]] = None) -> PipelineConfig:
    """Build a PipelineConfig from an optional INI file plus overrides.

    Overrides look like ``sampler.enabled=false`` and win over the file.
    """
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            for key, raw in parser.items(section):
                _apply(cfg, section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        address, raw = item.split("=", 1)
        section, key = address.split(".", 1)
        _apply(cfg, section.strip(), key.strip(), raw.strip())
    # re-run dataclass validation that only happens in __post_init__
    cfg.sampler = SamplerConfig(**{f.name: getattr(cfg.sampler, f.name)
                                   for f in fields(cfg.sampler)})
    return cfg
