"""Regenerate the committed golden packet fixtures.

Run from the repository root:

    python scripts/make_golden_fixtures.py

Rewrites tests/fixtures/golden_*.3df together with the sha256 manifest the
container tests pin against. Only rerun when the wire format version bumps.
"""

import hashlib
from pathlib import Path

from segfuse import container, simulator
from segfuse.segmentation import apply_masks, suppress_masks

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def content_digest(packet: container.SegmentPacket) -> str:
    h = hashlib.sha256()
    h.update(str(packet.header.frame_timestamp).encode())
    for label, entries in packet.groups.items():
        h.update(label.encode())
        for crop in entries:
            h.update(crop.rgb.tobytes())
            h.update(crop.depth.tobytes())
    return h.hexdigest()


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    outputs = {}

    empty = container.pack([], frame_timestamp=0,
                           intrinsics=simulator.LOUNGE_INTRINSICS, compression_level=3)
    outputs["golden_empty.3df"] = empty

    scene = simulator.lounge_scene()
    pose = simulator.lounge_trajectory(steps=60).poses[0]
    frame, dets, _ = simulator.render(scene, pose, simulator.LOUNGE_INTRINSICS)
    crops = apply_masks(frame, suppress_masks(dets, score_floor=0.0))
    lounge = container.pack(crops, frame_timestamp=0,
                            intrinsics=simulator.LOUNGE_INTRINSICS,
                            compression_level=6, pose_hint=pose)
    outputs["golden_lounge.3df"] = lounge

    manifest_lines = []
    for name, data in sorted(outputs.items()):
        (FIXTURES / name).write_bytes(data)
        digest = hashlib.sha256(data).hexdigest()
        manifest_lines.append(f"{digest}  {name}")
        packet = container.unpack(data)
        (FIXTURES / (name + ".content")).write_text(content_digest(packet) + "\n")
        print(f"{name}: {len(data)} bytes, sha256 {digest[:16]}...")
    (FIXTURES / "golden.sha256").write_text("\n".join(manifest_lines) + "\n")


if __name__ == "__main__":
    main()
