"""Run metrics: counters and timing shared by the client and the server.

Everything is written as plain JSON (plus JSON-lines for per-frame fusion
timing) so tests and operators can consume measurements without scraping
log text.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional


@dataclass
class ClientMetrics:
    frames_seen: int = 0
    frames_kept: int = 0
    frames_dropped: int = 0
    packets_sent: int = 0
    bytes_before_compression: int = 0
    bytes_on_wire: int = 0
    wall_time_s: float = 0.0
    ack_rtt_total_s: float = 0.0

    @property
    def capture_fps(self) -> float:
        return self.frames_seen / self.wall_time_s if self.wall_time_s > 0 else 0.0

    @property
    def transmit_fps(self) -> float:
        return self.packets_sent / self.wall_time_s if self.wall_time_s > 0 else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["role"] = "client"
        out["capture_fps"] = self.capture_fps
        out["transmit_fps"] = self.transmit_fps
        out["compression_ratio"] = (
            self.bytes_on_wire / self.bytes_before_compression
            if self.bytes_before_compression else 1.0
        )
        return out


@dataclass
class CategoryMetrics:
    frames: int = 0
    tracking_lost: int = 0
    init_time_s: float = 0.0
    steady_median_s: float = 0.0
    instances: int = 0
    status: str = "ok"
    first_timestamp: Optional[int] = None
    first_pose_hint: Optional[list] = None


@dataclass
class ServerMetrics:
    categories: Dict[str, CategoryMetrics] = field(default_factory=dict)
    packets_received: int = 0
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "role": "server",
            "packets_received": self.packets_received,
            "wall_time_s": self.wall_time_s,
            "categories": {k: asdict(v) for k, v in self.categories.items()},
        }


def write_json(data: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def write_frame_log(records, path) -> None:
    """One JSON line per fused frame: timestamp, wall time, residual."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({
                "timestamp": rec.timestamp,
                "wall_time_s": rec.wall_time_s,
                "tracked": rec.tracked,
                "residual": None if rec.residual != rec.residual else rec.residual,
                "iterations": rec.iterations,
            }, sort_keys=True) + "\n")


def read_frame_log(path) -> List[dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
