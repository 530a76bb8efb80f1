"""Self-describing binary container for segmented RGB-D crops.

One packet carries everything the server needs to process one frame:
camera intrinsics, an optional pose hint, and the per-category groups of
object crops, each with an rgb and a depth dataset. Datasets are
optionally deflate-compressed (levels 0-9, level 0 = stored) and carry a
CRC32 so corrupted files or streams fail loudly instead of decoding into
a wrong image. A second CRC32 over the whole packet guards the structural
fields. The byte layout is fixed and documented in docs/wire-format.md;
packets written to disk use the .3df extension.

An HDF5 export adapter mirrors the same category/object/dataset hierarchy
for interoperability; it is only available when h5py is installed.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .geometry import Intrinsics, Pose
from .segmentation import ObjectCrop

MAGIC = b"3DFU"
FORMAT_VERSION = 1
FILE_EXTENSION = ".3df"

_CODEC_RAW = 0
_CODEC_DEFLATE = 1
_DTYPE_TAGS = {np.dtype(np.uint8): 0, np.dtype(np.uint16): 1}
_TAG_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype(np.uint16)}


class PacketError(Exception):
    """Base for anything wrong with a packet's bytes."""


class PacketFormatError(PacketError):
    """Not a packet we understand (bad magic, unknown version)."""


class PacketCorruptionError(PacketError):
    """Structurally a packet, but its content fails validation."""


@dataclass(frozen=True)
class PacketHeader:
    frame_timestamp: int
    intrinsics: Intrinsics
    compression_level: int = 0
    pose_hint: Optional[Pose] = None

    def __post_init__(self):
        if not 0 <= self.compression_level <= 9:
            raise ValueError("compression_level must be in 0..9")


@dataclass
class SegmentPacket:
    """Decoded packet: header plus crops grouped by category label."""

    header: PacketHeader
    groups: Dict[str, List[ObjectCrop]] = field(default_factory=dict)

    def crops(self) -> List[ObjectCrop]:
        out = []
        for entries in self.groups.values():
            out.extend(entries)
        return out


class _Writer:
    def __init__(self):
        self.parts = []

    def raw(self, data: bytes):
        self.parts.append(data)

    def pack(self, fmt: str, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def string(self, s: str):
        data = s.encode("utf-8")
        if len(data) > 0xFFFF:
            raise ValueError("label too long")
        self.pack("H", len(data))
        self.raw(data)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise PacketCorruptionError("truncated packet")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values if len(values) > 1 else values[0]

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise PacketCorruptionError("truncated packet")
        out = self.data[self.pos:self.pos + size]
        self.pos += size
        return out

    def string(self) -> str:
        n = self.unpack("H")
        try:
            return self.raw(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PacketCorruptionError("label is not valid UTF-8") from exc


def _encode_dataset(w: _Writer, array: np.ndarray, level: int):
    dtype = np.dtype(array.dtype)
    if dtype not in _DTYPE_TAGS:
        raise ValueError(f"unsupported dataset dtype {dtype}")
    raw = np.ascontiguousarray(array).tobytes()
    codec = _CODEC_RAW
    stored = raw
    if level > 0:
        compressed = zlib.compress(raw, level)
        if len(compressed) < len(raw):
            codec = _CODEC_DEFLATE
            stored = compressed
    w.pack("B", array.ndim)
    for dim in array.shape:
        w.pack("I", dim)
    w.pack("BB", _DTYPE_TAGS[dtype], codec)
    w.pack("QQ", len(raw), len(stored))
    w.pack("I", zlib.crc32(stored))
    w.raw(stored)


def _decode_dataset(r: _Reader) -> np.ndarray:
    ndim = r.unpack("B")
    if not 1 <= ndim <= 4:
        raise PacketCorruptionError(f"implausible dataset rank {ndim}")
    shape = tuple(r.unpack("I") for _ in range(ndim))
    dtype_tag, codec = r.unpack("BB")
    if dtype_tag not in _TAG_DTYPES:
        raise PacketCorruptionError(f"unknown dtype tag {dtype_tag}")
    if codec not in (_CODEC_RAW, _CODEC_DEFLATE):
        raise PacketCorruptionError(f"unknown codec {codec}")
    raw_len, stored_len = r.unpack("QQ")
    crc = r.unpack("I")
    stored = r.raw(stored_len)
    if zlib.crc32(stored) != crc:
        raise PacketCorruptionError("dataset checksum mismatch")
    if codec == _CODEC_RAW:
        if stored_len != raw_len:
            raise PacketCorruptionError("stored length != raw length for raw codec")
        raw = stored
    else:
        try:
            raw = zlib.decompress(stored)
        except zlib.error as exc:
            raise PacketCorruptionError("deflate stream is invalid") from exc
        if len(raw) != raw_len:
            raise PacketCorruptionError("decompressed length mismatch")
    dtype = _TAG_DTYPES[dtype_tag]
    expected = int(np.prod(shape)) * dtype.itemsize
    if expected != raw_len:
        raise PacketCorruptionError("dataset dimensions do not match payload size")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def pack(
    crops: List[ObjectCrop],
    frame_timestamp: int,
    intrinsics: Intrinsics,
    compression_level: int = 0,
    pose_hint: Optional[Pose] = None,
) -> bytes:
    """Serialize one frame's crops into a packet.

    Crops are grouped by label in order of first appearance. Identical
    inputs and level give identical bytes.
    """
    header = PacketHeader(frame_timestamp, intrinsics, compression_level, pose_hint)
    groups: Dict[str, List[ObjectCrop]] = {}
    for crop in crops:
        groups.setdefault(crop.label, []).append(crop)

    w = _Writer()
    w.raw(MAGIC)
    w.pack("H", FORMAT_VERSION)
    w.pack("Q", header.frame_timestamp)
    intr = header.intrinsics
    w.pack("dddd", intr.fx, intr.fy, intr.cx, intr.cy)
    w.pack("II", intr.width, intr.height)
    w.pack("d", intr.depth_scale)
    w.pack("B", header.compression_level)
    if header.pose_hint is not None:
        w.pack("B", 1)
        w.pack("16d", *header.pose_hint.matrix.ravel())
    else:
        w.pack("B", 0)
    w.pack("I", len(groups))
    for label, entries in groups.items():
        w.string(label)
        w.pack("I", len(entries))
        for crop in entries:
            w.string(crop.label)
            w.pack("d", crop.confidence)
            w.pack("II", crop.bbox_origin[0], crop.bbox_origin[1])
            _encode_dataset(w, crop.rgb, compression_level)
            _encode_dataset(w, crop.depth, compression_level)
    body = w.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def unpack(data: bytes) -> SegmentPacket:
    """Exact inverse of :func:`pack`; raises on any malformed input."""
    if len(data) < len(MAGIC) + 2:
        raise PacketFormatError("too short to be a packet")
    if data[:4] != MAGIC:
        raise PacketFormatError("bad magic")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise PacketFormatError(f"unsupported format version {version}")
    if len(data) < 4 + 2 + 4:
        raise PacketCorruptionError("truncated packet")
    body, trailer = data[:-4], data[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise PacketCorruptionError("packet checksum mismatch")

    r = _Reader(body)
    r.raw(6)  # magic + version, validated above
    frame_timestamp = r.unpack("Q")
    fx, fy, cx, cy = r.unpack("dddd")
    width, height = r.unpack("II")
    depth_scale = r.unpack("d")
    compression_level = r.unpack("B")
    has_pose = r.unpack("B")
    pose = None
    if has_pose == 1:
        matrix = np.array(r.unpack("16d")).reshape(4, 4)
        try:
            pose = Pose(matrix)
        except ValueError as exc:
            raise PacketCorruptionError("pose hint is not a rigid transform") from exc
    elif has_pose != 0:
        raise PacketCorruptionError("bad pose flag")
    try:
        intrinsics = Intrinsics(fx, fy, cx, cy, width, height, depth_scale)
    except ValueError as exc:
        raise PacketCorruptionError("invalid intrinsics") from exc
    if not 0 <= compression_level <= 9:
        raise PacketCorruptionError("invalid compression level")

    header = PacketHeader(frame_timestamp, intrinsics, compression_level, pose)
    packet = SegmentPacket(header=header)
    group_count = r.unpack("I")
    for _ in range(group_count):
        label = r.string()
        if label in packet.groups:
            raise PacketCorruptionError(f"duplicate category group {label!r}")
        entry_count = r.unpack("I")
        entries = []
        for _ in range(entry_count):
            entry_label = r.string()
            confidence = r.unpack("d")
            bx, by = r.unpack("II")
            rgb = _decode_dataset(r)
            depth = _decode_dataset(r)
            if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
                raise PacketCorruptionError("rgb dataset has wrong shape or type")
            if depth.ndim != 2 or depth.dtype != np.uint16:
                raise PacketCorruptionError("depth dataset has wrong shape or type")
            if rgb.shape[:2] != depth.shape:
                raise PacketCorruptionError("rgb and depth dimensions differ")
            if not 0.0 <= confidence <= 1.0:
                raise PacketCorruptionError("confidence out of range")
            entries.append(
                ObjectCrop(
                    label=entry_label,
                    confidence=confidence,
                    rgb=rgb,
                    depth=depth,
                    bbox_origin=(bx, by),
                    frame_timestamp=frame_timestamp,
                    intrinsics=intrinsics,
                )
            )
        packet.groups[label] = entries
    if r.pos != len(body):
        raise PacketCorruptionError("trailing bytes after last group")
    return packet


def export_hdf5(packet: SegmentPacket, path) -> None:
    """Write the packet as an HDF5 file mirroring the packet hierarchy.

    Top-level groups are categories; each object is a numbered subgroup
    with `rgb` and `depth` datasets and label/confidence/bbox attributes.
    Requires h5py.
    """
    try:
        import h5py
    except ImportError as exc:
        raise RuntimeError("HDF5 export requires the h5py package") from exc

    level = packet.header.compression_level
    kwargs = {"compression": "gzip", "compression_opts": level} if level > 0 else {}
    with h5py.File(path, "w") as f:
        f.attrs["frame_timestamp"] = packet.header.frame_timestamp
        intr = packet.header.intrinsics
        f.attrs["intrinsics"] = [intr.fx, intr.fy, intr.cx, intr.cy]
        f.attrs["image_size"] = [intr.width, intr.height]
        f.attrs["depth_scale"] = intr.depth_scale
        if packet.header.pose_hint is not None:
            f.attrs["pose_hint"] = packet.header.pose_hint.matrix
        for label, entries in packet.groups.items():
            grp = f.create_group(label)
            for i, crop in enumerate(entries):
                obj = grp.create_group(f"object_{i:03d}")
                obj.attrs["label"] = crop.label
                obj.attrs["confidence"] = crop.confidence
                obj.attrs["bbox_origin"] = list(crop.bbox_origin)
                obj.attrs["dims"] = list(crop.rgb.shape)
                obj.create_dataset("rgb", data=crop.rgb, **kwargs)
                obj.create_dataset("depth", data=crop.depth, **kwargs)
