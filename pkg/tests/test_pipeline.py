import json
import threading

import pytest

from segfuse import simulator
from segfuse.config import ConfigError, load_config
from segfuse.metrics import read_frame_log
from segfuse.pipeline import run_client, run_offline, run_server


def small_scene_source(steps=8, scene=None, noise=None):
    scene = scene or simulator.box_scene()
    traj = simulator.orbit((0.0, 0.55, 0.0), 1.6, steps, height=-0.9, sweep=0.1)
    return simulator.SimulatedSource(scene, traj, simulator.LOUNGE_INTRINSICS, noise)


def loopback(config, source, out_dir):
    """Run server and client against each other on an ephemeral port."""
    result_holder = {}

    # reserve a free port by binding momentarily
    import socket
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()

    def serve():
        result_holder["server"] = run_server(config, out_dir=out_dir,
                                             host="127.0.0.1", port=port)

    server_thread = threading.Thread(target=serve, daemon=True)
    server_thread.start()
    metrics = run_client(config, iter(source), host="127.0.0.1", port=port)
    server_thread.join(timeout=120)
    assert not server_thread.is_alive(), "server did not finish"
    return metrics, result_holder["server"]


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert cfg.sampler.similarity_threshold == 0.995
        assert cfg.suppression.iou_threshold == 0.45
        assert cfg.suppression.score_floor == 0.35
        assert cfg.transport.port == 7455
        assert cfg.fusion.voxel_size == 0.01
        assert cfg.compression_level == 1

    def test_file_and_overrides(self, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text(
            "[sampler]\nmode = pose\ndistance_threshold = 0.1\n"
            "[container]\ncompression_level = 7\n"
            "[fusion]\nvoxel_size = 0.02\n"
        )
        cfg = load_config(ini, overrides=["sampler.enabled=false"])
        assert cfg.sampler.mode == "pose"
        assert cfg.sampler.distance_threshold == 0.1
        assert cfg.sampler.enabled is False
        assert cfg.compression_level == 7
        assert cfg.fusion.voxel_size == 0.02

    def test_unknown_key_rejected(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[sampler]\nmod = pose\n")
        with pytest.raises(ConfigError):
            load_config(ini)

    def test_unknown_section_rejected(self, tmp_path):
        ini = tmp_path / "bad.ini"
        ini.write_text("[sampelr]\nmode = pose\n")
        with pytest.raises(ConfigError):
            load_config(ini)

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(overrides=["transport.port=not-a-number"])
        with pytest.raises(ConfigError):
            load_config(overrides=["container.compression_level=11"])
        with pytest.raises(ConfigError):
            load_config(overrides=["nonsense"])

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.ini")


class TestLoopback:
    def test_stream_and_reconstruct(self, tmp_path):
        cfg = load_config(overrides=[
            "sampler.enabled=false",
            "export.split_instances=false",
            "export.save_obj=false",
        ])
        metrics, result = loopback(cfg, small_scene_source(steps=6), tmp_path)
        assert metrics.packets_sent == 6
        assert result.exit_code == 0
        assert result.metrics.packets_received == 6
        assert (tmp_path / "chair.ply").exists()
        assert (tmp_path / "chair.vbg").exists()
        log = read_frame_log(tmp_path / "chair_frames.jsonl")
        assert len(log) == 6
        assert json.loads((tmp_path / "server_metrics.json").read_text())["role"] == "server"

    def test_stationary_stream_sampled_to_one_packet(self, tmp_path):
        cfg = load_config(overrides=["export.split_instances=false",
                                     "export.save_obj=false"])
        scene = simulator.box_scene()
        pose = simulator.orbit((0.0, 0.55, 0.0), 1.6, 1, height=-0.9).poses[0]
        source = simulator.SimulatedSource(scene, simulator.stationary(pose, 12),
                                           simulator.LOUNGE_INTRINSICS)
        metrics, result = loopback(cfg, source, tmp_path)
        assert metrics.frames_seen == 12
        assert metrics.packets_sent == 1
        assert metrics.frames_dropped == 11

    def test_metrics_byte_counters_match_container(self, tmp_path):
        from segfuse import container
        from segfuse.segmentation import apply_masks, suppress_masks

        cfg = load_config(overrides=["sampler.enabled=false",
                                     "export.split_instances=false",
                                     "export.save_obj=false"])
        source = list(small_scene_source(steps=4))
        expected_raw = 0
        expected_wire = 0
        for frame, dets in source:
            crops = apply_masks(frame, suppress_masks(
                dets, cfg.suppression.iou_threshold, cfg.suppression.score_floor))
            expected_raw += sum(c.rgb.nbytes + c.depth.nbytes for c in crops)
            expected_wire += len(container.pack(
                crops, frame_timestamp=frame.timestamp, intrinsics=frame.intrinsics,
                compression_level=cfg.compression_level, pose_hint=frame.pose_hint))
        metrics, _ = loopback(cfg, iter(source), tmp_path)
        assert metrics.bytes_before_compression == expected_raw
        assert metrics.bytes_on_wire == expected_wire


class TestOffline:
    def test_offline_equals_loopback(self, tmp_path):
        scene = simulator.box_scene()
        traj = simulator.orbit((0.0, 0.55, 0.0), 1.6, 6, height=-0.9, sweep=0.08)
        dataset = simulator.generate_dataset(scene, traj, tmp_path / "ds",
                                             simulator.LOUNGE_INTRINSICS)
        cfg = load_config(overrides=["sampler.enabled=false",
                                     "export.split_instances=false",
                                     "export.save_obj=false"])
        run_offline(dataset, cfg, out_dir=tmp_path / "offline")
        _, result = loopback(cfg, simulator.DatasetSource(dataset), tmp_path / "loop")
        assert result.exit_code == 0
        offline_ply = (tmp_path / "offline" / "chair.ply").read_bytes()
        loop_ply = (tmp_path / "loop" / "chair.ply").read_bytes()
        assert offline_ply == loop_ply

    def test_missing_dataset_rejected(self, tmp_path):
        cfg = load_config()
        with pytest.raises(FileNotFoundError):
            run_offline(tmp_path / "nothing", cfg)

    def test_missing_frame_files_listed(self, tmp_path):
        scene = simulator.box_scene()
        traj = simulator.orbit((0.0, 0.55, 0.0), 1.6, 3, height=-0.9, sweep=0.05)
        dataset = simulator.generate_dataset(scene, traj, tmp_path / "ds",
                                             simulator.LOUNGE_INTRINSICS)
        (dataset / "frames" / "000001_rgb.png").unlink()
        cfg = load_config(overrides=["sampler.enabled=false"])
        with pytest.raises(FileNotFoundError) as err:
            run_offline(dataset, cfg, out_dir=tmp_path / "out")
        assert "000001_rgb.png" in str(err.value)


class TestWorkerIsolation:
    def test_failing_category_does_not_block_others(self, tmp_path, monkeypatch):
        from segfuse import pipeline as pipeline_mod

        real_finalize = pipeline_mod._finalize_category

        def sabotaged(label, grid, report, config, out_dir):
            if label == "chair":
                raise RuntimeError("disk full (injected)")
            return real_finalize(label, grid, report, config, out_dir)

        monkeypatch.setattr(pipeline_mod, "_finalize_category", sabotaged)
        cfg = load_config(overrides=["sampler.enabled=false",
                                     "export.split_instances=false",
                                     "export.save_obj=false"])
        scene = simulator.lounge_scene()
        traj = simulator.Trajectory(simulator.lounge_trajectory(60).poses[:5])
        source = simulator.SimulatedSource(scene, traj, simulator.LOUNGE_INTRINSICS)
        metrics, result = loopback(cfg, source, tmp_path)
        assert result.exit_code == 2
        assert result.failed == ["chair"]
        assert result.metrics.categories["table"].status == "ok"
        assert (tmp_path / "table.ply").exists()
        assert not (tmp_path / "chair.ply").exists()

    def test_per_category_outputs_independent_of_other_categories(self, tmp_path):
        # identical frames; one run streams both categories, the other
        # filters the table out before packing
        cfg = load_config(overrides=["sampler.enabled=false",
                                     "export.split_instances=false",
                                     "export.save_obj=false"])
        scene = simulator.lounge_scene()
        traj = simulator.Trajectory(simulator.lounge_trajectory(60).poses[:6])
        frames = list(simulator.SimulatedSource(scene, traj, simulator.LOUNGE_INTRINSICS))
        chair_only = [(frame, [d for d in dets if d.label == "chair"])
                      for frame, dets in frames]
        loopback(cfg, iter(frames), tmp_path / "out_full")
        loopback(cfg, iter(chair_only), tmp_path / "out_chairs")
        a = (tmp_path / "out_full" / "chair.ply").read_bytes()
        b = (tmp_path / "out_chairs" / "chair.ply").read_bytes()
        assert a == b


class TestCli:
    def test_simulate_offline_split_inspect(self, tmp_path):
        from segfuse.cli import main

        ds = tmp_path / "ds"
        assert main(["simulate", "--scene", "chair", "--frames", "4",
                     "--out", str(ds)]) == 0
        out = tmp_path / "out"
        assert main(["offline", "--dataset", str(ds), "--out", str(out),
                     "--set", "sampler.enabled=false",
                     "--set", "export.split_instances=false"]) == 0
        assert (out / "chair.ply").exists()
        split_dir = tmp_path / "split"
        assert main(["split", "--grid", str(out / "chair.vbg"),
                     "--out", str(split_dir), "--max-planes", "0"]) == 0
        assert list(split_dir.glob("chair_instance_*.ply"))
        assert main(["inspect", str(out / "chair.vbg")]) == 0

    def test_unknown_scene_fails(self, tmp_path):
        from segfuse.cli import main

        with pytest.raises(SystemExit):
            main(["simulate", "--scene", "nope", "--out", str(tmp_path)])

    def test_config_error_exit_code(self, tmp_path):
        from segfuse.cli import main

        assert main(["offline", "--dataset", str(tmp_path),
                     "--set", "sampler.bogus=1"]) == 1
