"""End-to-end orchestration: capture client, fusion server, offline runner.

The client walks a frame source (simulator or recorded dataset), samples
keyframes, suppresses duplicate masks, packs per-object crops, and streams
them ack-gated to the server. The server demultiplexes packets by category
into one fusion worker per label; on end-of-stream every worker finalizes
its model into category and per-instance meshes. The offline runner is the
same processing path minus the socket, for reproducing results from disk.
"""

from __future__ import annotations

import logging
import queue as queue_mod
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from . import container, transport
from .config import PipelineConfig
from .fusion import (
    FusionReport,
    VoxelBlockGrid,
    extract_mesh,
    fuse_stream,
    save_checkpoint,
    save_mesh_obj,
    save_mesh_ply,
)
from .clustering import split_instances
from .geometry import Pose, RGBDFrame
from .metrics import (
    CategoryMetrics,
    ClientMetrics,
    ServerMetrics,
    write_frame_log,
    write_json,
)
from .sampler import SamplerState, should_keep
from .segmentation import Detection, apply_masks, suppress_masks

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


def run_client(
    config: PipelineConfig,
    source: Iterable[Tuple[RGBDFrame, List[Detection]]],
    host: Optional[str] = None,
    port: Optional[int] = None,
) -> ClientMetrics:
    """Stream a frame source to the server; returns capture metrics.

    Transport failures are retried up to ``transport.connect_retries``
    times (with a fresh connection) before giving up.
    """
    tc = config.transport
    host = host if host is not None else tc.host
    port = port if port is not None else tc.port
    metrics = ClientMetrics()
    state = SamplerState()
    start = time.monotonic()

    client = _connect_with_retries(host, port, tc)
    try:
        for frame, detections in source:
            metrics.frames_seen += 1
            if not should_keep(frame, state, config.sampler):
                metrics.frames_dropped += 1
                continue
            metrics.frames_kept += 1
            kept = suppress_masks(detections, config.suppression.iou_threshold,
                                  config.suppression.score_floor)
            crops = apply_masks(frame, kept)
            metrics.bytes_before_compression += sum(
                c.rgb.nbytes + c.depth.nbytes for c in crops)
            packet = container.pack(
                crops,
                frame_timestamp=frame.timestamp,
                intrinsics=frame.intrinsics,
                compression_level=config.compression_level,
                pose_hint=frame.pose_hint,
            )
            metrics.bytes_on_wire += len(packet)
            for attempt in range(tc.connect_retries + 1):
                try:
                    receipt = client.send(packet)
                    break
                except transport.TransportError as exc:
                    if not exc.retriable or attempt == tc.connect_retries:
                        raise
                    log.warning("send failed (%s), reconnecting", exc)
                    client.close()
                    client = _connect_with_retries(host, port, tc)
            metrics.packets_sent += 1
            metrics.ack_rtt_total_s += receipt.round_trip_s
        client.send_end()
    finally:
        client.close()
    metrics.wall_time_s = time.monotonic() - start
    return metrics


def _connect_with_retries(host, port, tc) -> transport.PacketClient:
    last_error = None
    for attempt in range(tc.connect_retries + 1):
        try:
            return transport.PacketClient(host, port, ack_timeout=tc.ack_timeout)
        except transport.TransportError as exc:
            last_error = exc
            time.sleep(min(0.2 * (attempt + 1), 1.0))
    raise last_error


@dataclass
class _Worker:
    label: str
    thread: threading.Thread
    grid: Optional[VoxelBlockGrid] = None
    report: Optional[FusionReport] = None
    error: Optional[BaseException] = None
    instances: int = 0


class _QueueStream:
    """Iterates a demux queue and remembers whether the sentinel arrived."""

    def __init__(self, q: "queue_mod.Queue"):
        self.q = q
        self.exhausted = False

    def __iter__(self):
        while True:
            item = self.q.get()
            if item is None:
                self.exhausted = True
                return
            yield item

    def drain(self):
        if not self.exhausted:
            for _ in self:
                pass


@dataclass
class ServerResult:
    metrics: ServerMetrics
    out_dir: Path
    failed: List[str] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failed else EXIT_OK


def _finalize_category(label: str, grid: VoxelBlockGrid, report: FusionReport,
                       config: PipelineConfig, out_dir: Path) -> int:
    """Export the category mesh, instances, timings, and checkpoint."""
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh = extract_mesh(grid, weight_min=config.fusion.weight_min)
    save_mesh_ply(mesh, out_dir / f"{label}.ply")
    if config.export.save_obj:
        save_mesh_obj(mesh, out_dir / f"{label}.obj")
    if config.export.save_checkpoint:
        save_checkpoint(grid, out_dir / f"{label}.vbg")
    write_frame_log(report.records, out_dir / f"{label}_frames.jsonl")
    count = 0
    if config.export.split_instances:
        for instance_id, instance_mesh in split_instances(
                grid, config.clustering.split_params()):
            save_mesh_ply(instance_mesh, out_dir / f"{label}_instance_{instance_id:02d}.ply")
            if config.export.save_obj:
                save_mesh_obj(instance_mesh, out_dir / f"{label}_instance_{instance_id:02d}.obj")
            count += 1
    return count


def run_server(config: PipelineConfig, out_dir=None,
               host: Optional[str] = None, port: Optional[int] = None) -> ServerResult:
    """Serve one capture session: accept, demux, fuse, export, report.

    Returns after the client's end-of-stream. A worker failure is isolated
    to its category; the result then carries exit code 2.
    """
    tc = config.transport
    out = Path(out_dir if out_dir is not None else config.export.directory)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    workers: Dict[str, _Worker] = {}
    pose_hints: Dict[int, Optional[Pose]] = {}
    packet_count = [0]

    def record_hints(packet: container.SegmentPacket) -> None:
        packet_count[0] += 1
        pose_hints[packet.header.frame_timestamp] = packet.header.pose_hint

    def spawn(label: str, q: "queue_mod.Queue") -> None:
        def work():
            worker = workers[label]
            stream = _QueueStream(q)
            try:
                worker.grid, worker.report = fuse_stream(iter(stream), config.fusion,
                                                         pose_hints=pose_hints)
                worker.instances = _finalize_category(
                    label, worker.grid, worker.report, config, out)
            except BaseException as exc:  # isolate: one category must not sink the rest
                worker.error = exc
                log.error("category %r failed: %s", label, exc)
                # keep consuming so the demux (and the client) never block
                # on this category's full queue
                stream.drain()

        thread = threading.Thread(target=work, name=f"fusion-{label}", daemon=True)
        workers[label] = _Worker(label=label, thread=thread)
        thread.start()

    receiver = transport.PacketReceiver(
        host=host if host is not None else tc.host,
        port=port if port is not None else tc.port,
        buffer_capacity=tc.buffer_capacity,
    )
    demux = transport.CategoryDemux(receiver.buffer, on_new_category=spawn,
                                    on_packet=record_hints)
    try:
        demux.run_in_background()
        receiver.serve()
        demux.join()
        for worker in workers.values():
            worker.thread.join()
    finally:
        receiver.stop()

    metrics = ServerMetrics(wall_time_s=time.monotonic() - start,
                            packets_received=packet_count[0])
    failed = []
    for label, worker in sorted(workers.items()):
        cat = CategoryMetrics()
        if worker.error is not None or worker.report is None:
            cat.status = "failed"
            failed.append(label)
        else:
            report = worker.report
            cat.frames = len(report.records)
            cat.tracking_lost = report.lost_count
            cat.init_time_s = report.init_time_s
            steady = sorted(report.steady_times_s)
            cat.steady_median_s = steady[len(steady) // 2] if steady else 0.0
            cat.instances = worker.instances
            first = report.records[0]
            cat.first_timestamp = first.timestamp
            hint = pose_hints.get(first.timestamp)
            cat.first_pose_hint = None if hint is None else hint.matrix.tolist()
        metrics.categories[label] = cat
    write_json(metrics.to_dict(), out / "server_metrics.json")
    return ServerResult(metrics=metrics, out_dir=out, failed=failed)


def run_offline(dataset_dir, config: PipelineConfig, out_dir=None) -> ServerResult:
    """The loopless reproduction path: dataset in, meshes out.

    Identical processing to client+server minus the socket; with the same
    config and seeds it produces identical meshes to a loopback run.
    """
    from .simulator import DatasetSource

    source = DatasetSource(dataset_dir)
    source.validate()
    out = Path(out_dir if out_dir is not None else config.export.directory)
    out.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()

    state = SamplerState()
    streams: Dict[str, List] = {}
    pose_hints: Dict[int, Optional[Pose]] = {}
    packets = 0
    for frame, detections in source:
        if not should_keep(frame, state, config.sampler):
            continue
        packets += 1
        pose_hints[frame.timestamp] = frame.pose_hint
        kept = suppress_masks(detections, config.suppression.iou_threshold,
                              config.suppression.score_floor)
        for crop in apply_masks(frame, kept):
            streams.setdefault(crop.label, []).append(crop)

    metrics = ServerMetrics(packets_received=packets)
    failed = []
    for label in sorted(streams):
        cat = CategoryMetrics()
        try:
            grid, report = fuse_stream(iter(streams[label]), config.fusion,
                                       pose_hints=pose_hints)
            cat.instances = _finalize_category(label, grid, report, config, out)
            cat.frames = len(report.records)
            cat.tracking_lost = report.lost_count
            cat.init_time_s = report.init_time_s
            steady = sorted(report.steady_times_s)
            cat.steady_median_s = steady[len(steady) // 2] if steady else 0.0
            first = report.records[0]
            cat.first_timestamp = first.timestamp
            hint = pose_hints.get(first.timestamp)
            cat.first_pose_hint = None if hint is None else hint.matrix.tolist()
        except Exception as exc:
            log.error("category %r failed: %s", label, exc)
            cat.status = "failed"
            failed.append(label)
        metrics.categories[label] = cat
    metrics.wall_time_s = time.monotonic() - start
    write_json(metrics.to_dict(), out / "server_metrics.json")
    return ServerResult(metrics=metrics, out_dir=out, failed=failed)
