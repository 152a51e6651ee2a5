import json

import numpy as np

from voxsim.cli import (EXIT_CONFIG, EXIT_IO, EXIT_OK, main, stage_seed,
                        worker_cap)
from voxsim.metrics import write_features


PIPELINE_CONFIG = {
    "synth": {
        "world": {"recipe": "straight", "extent": 60.0, "road_width": 9.6},
        "crop_dims": [120, 120, 16],
    },
    "simulate": {"horizon": 3},
}


class TestStageSeed:
    def test_deterministic_and_stage_dependent(self):
        assert stage_seed(42, "fuse") == stage_seed(42, "fuse")
        assert stage_seed(42, "fuse") != stage_seed(42, "topo")
        assert stage_seed(42, "fuse") != stage_seed(43, "fuse")

    def test_worker_cap_env(self, monkeypatch):
        monkeypatch.setenv("OCCSIM_THREADS", "4")
        assert worker_cap() == 4
        monkeypatch.setenv("OCCSIM_THREADS", "junk")
        assert worker_cap() == 1
        monkeypatch.setenv("OCCSIM_THREADS", "0")
        assert worker_cap() == 1


class TestExitCodes:
    def test_metrics_vendi_ok(self, tmp_path, capsys):
        feat = tmp_path / "a.feat"
        write_features(np.random.default_rng(0).normal(size=(6, 3)), feat)
        assert main(["metrics", "vendi", "--a", str(feat)]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["metric"] == "vendi" and out["value"] >= 1.0

    def test_metrics_missing_b_is_config_error(self, tmp_path):
        feat = tmp_path / "a.feat"
        write_features(np.ones((4, 2)), feat)
        assert main(["metrics", "mmd", "--a", str(feat)]) == EXIT_CONFIG

    def test_missing_map_is_io_error(self, tmp_path):
        code = main(["topo", "--map", str(tmp_path / "nope.occg"),
                     "--out", str(tmp_path / "g.json")])
        assert code == EXIT_IO

    def test_corrupt_map_is_io_error(self, tmp_path):
        bad = tmp_path / "bad.occg"
        bad.write_bytes(b"garbage" * 10)
        code = main(["topo", "--map", str(bad),
                     "--out", str(tmp_path / "g.json")])
        assert code == EXIT_IO

    def test_bad_config_json(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        code = main(["pipeline", "--config", str(cfg),
                     "--out-dir", str(tmp_path / "out")])
        assert code == EXIT_CONFIG

    def test_empty_frames_dir_is_config_error(self, tmp_path):
        (tmp_path / "frames").mkdir()
        code = main(["fuse", "--frames", str(tmp_path / "frames"),
                     "--poses", str(tmp_path / "traj.json"),
                     "--out", str(tmp_path / "map.occg")])
        assert code == EXIT_CONFIG


class TestPipeline:
    def test_end_to_end_manifest(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(PIPELINE_CONFIG))
        out_dir = tmp_path / "out"
        code = main(["pipeline", "--config", str(cfg), "--seed", "7",
                     "--out-dir", str(out_dir)])
        assert code == EXIT_OK
        manifest = json.loads((out_dir / "pipeline_manifest.json").read_text())
        stages = [s["stage"] for s in manifest["stages"]]
        assert stages == ["synth", "fuse", "topo", "lanes", "spawn", "simulate"]
        for s in manifest["stages"]:
            for art in s["artifacts"].values():
                assert len(art["sha256"]) == 64
        assert (out_dir / "map.occg").exists()
        assert (out_dir / "lanes.json").exists()
        assert (out_dir / "rollout" / "run_manifest.json").exists()

    def test_stage_chaining_via_subcommands(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(PIPELINE_CONFIG["synth"]))
        out = tmp_path / "synth"
        assert main(["synth", "--spec", str(spec), "--out", str(out),
                     "--seed", "1"]) == EXIT_OK
        capsys.readouterr()
        assert main(["fuse", "--frames", str(out / "frames"),
                     "--poses", str(out / "trajectory.json"),
                     "--out", str(tmp_path / "map.occg")]) == EXIT_OK
        capsys.readouterr()
        assert main(["topo", "--map", str(tmp_path / "map.occg"),
                     "--out", str(tmp_path / "graph.json")]) == EXIT_OK
        capsys.readouterr()
        assert main(["lanes", "--map", str(tmp_path / "map.occg"),
                     "--graph", str(tmp_path / "graph.json"),
                     "--out", str(tmp_path / "lanes.json")]) == EXIT_OK
        capsys.readouterr()
        lanes = json.loads((tmp_path / "lanes.json").read_text())
        assert len(lanes) >= 1
