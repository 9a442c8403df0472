"""Run-config parsing and command-line behavior."""

import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from crossrot.cli import main
from crossrot.harness import save_checkpoint
from crossrot.model import ModelConfig, RotationNet, toy_config
from crossrot.panorama import DatasetSpec, build_dataset
from crossrot.runconfig import ConfigError, echo_config, load_run_config, parse_run_config

TOY_SECTIONS = {
    "dataset": {"n_panoramas": 4, "crops_per_panorama": 8, "crop_size": 64,
                "pitch_limit_deg": 0.0, "seed": 5, "rel_yaw_limit_deg": 40.0,
                "pano_height": 128},
    "model": {"image_size": 64, "channels": 32, "blocks": 1, "encoder_layers": 1,
              "heads": 2, "ff_width": 192, "dropout": 0.0},
    "train": {"max_steps": 2, "batch_size": 4, "seed": 1},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset, config file and an untrained checkpoint shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg_path.write_text(json.dumps(TOY_SECTIONS))
    build_dataset(DatasetSpec(**TOY_SECTIONS["dataset"]), root / "data")
    net = RotationNet(ModelConfig(**TOY_SECTIONS["model"]), seed=0)
    save_checkpoint(root / "ckpt", net, step=0)
    return root


def first_pair_id(root: Path) -> str:
    line = (root / "data" / "index.jsonl").read_text().splitlines()[0]
    return json.loads(line)["pair_id"]


class TestRunConfig:
    def test_empty_document_gives_defaults(self):
        rc = parse_run_config({})
        assert rc.dataset.crops_per_panorama == 200
        assert rc.model.channels == 128
        assert rc.train.batch_size == 20

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="sectoin"):
            parse_run_config({"sectoin": {}})

    def test_unknown_key_named_in_error(self):
        with pytest.raises(ConfigError, match="pich_limit"):
            parse_run_config({"dataset": {"pich_limit": 3}})

    def test_bad_value_reported_with_section(self):
        with pytest.raises(ConfigError, match="train"):
            parse_run_config({"train": {"batch_size": 0}})

    def test_non_object_section_rejected(self):
        with pytest.raises(ConfigError):
            parse_run_config({"model": [1, 2]})

    def test_flags_beat_file_beat_defaults(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"train": {"seed": 5, "lr": 1e-3}}))
        rc = load_run_config(path, {"train": {"seed": 7, "max_steps": None}})
        assert rc.train.seed == 7          # flag wins
        assert rc.train.lr == 1e-3         # file wins over default
        assert rc.train.max_steps == 1000  # None override is ignored

    def test_echo_config_round_trips(self, tmp_path):
        rc = parse_run_config({"dataset": {"n_panoramas": 2}})
        out = echo_config(rc.as_dict(), tmp_path / "out")
        assert json.loads(out.read_text())["dataset"]["n_panoramas"] == 2

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            load_run_config(path)


class TestGenData:
    def test_minimal_config_builds_expected_count(self, workspace, tmp_path, capsys):
        code = main(["gen-data", "--config", str(workspace / "cfg.json"),
                     "--out", str(tmp_path / "d")])
        assert code == 0
        lines = (tmp_path / "d" / "index.jsonl").read_text().splitlines()
        assert len(lines) == 16  # 4 panoramas x 8 crops -> 4 pairs each
        out = capsys.readouterr().out
        assert "train:" in out and "test:" in out
        assert (tmp_path / "d" / "resolved_config.json").exists()

    def test_rerun_is_byte_identical(self, workspace, tmp_path):
        for name in ("one", "two"):
            assert main(["gen-data", "--config", str(workspace / "cfg.json"),
                         "--out", str(tmp_path / name)]) == 0

        def digest(d):
            h = hashlib.sha256()
            for p in sorted(Path(d).rglob("*")):
                if p.is_file():
                    h.update(p.name.encode() + p.read_bytes())
            return h.hexdigest()

        assert digest(tmp_path / "one") == digest(tmp_path / "two")

    def test_unknown_key_exits_1_naming_it(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"dataset": {"pich_limit": 3}}))
        code = main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")])
        assert code == 1
        err_lines = capsys.readouterr().err.strip().splitlines()
        assert len(err_lines) == 1
        payload = json.loads(err_lines[0])
        assert "pich_limit" in payload["error"]

    def test_flag_overrides_config_seed(self, workspace, tmp_path):
        assert main(["gen-data", "--config", str(workspace / "cfg.json"),
                     "--seed", "7", "--out", str(tmp_path / "d")]) == 0
        resolved = json.loads((tmp_path / "d" / "resolved_config.json").read_text())
        assert resolved["dataset"]["seed"] == 7


class TestTrainEvalCommands:
    def test_train_writes_artifacts(self, workspace, tmp_path, capsys):
        code = main(["train", "--config", str(workspace / "cfg.json"),
                     "--data", str(workspace / "data"), "--out", str(tmp_path / "run")])
        assert code == 0
        run = tmp_path / "run"
        for name in ("last.manifest.json", "last.weights.bin",
                     "train_log.csv", "resolved_config.json"):
            assert (run / name).exists(), name
        assert "final loss" in capsys.readouterr().out

    def test_train_then_resume_continues_steps(self, workspace, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["train", "--config", str(workspace / "cfg.json"),
                     "--data", str(workspace / "data"), "--out", str(run)]) == 0
        capsys.readouterr()
        code = main(["train", "--config", str(workspace / "cfg.json"),
                     "--data", str(workspace / "data"), "--out", str(run),
                     "--resume", str(run / "last"), "--max-steps", "4"])
        assert code == 0
        assert "trained 2 steps (through step 4)" in capsys.readouterr().out
        log = (run / "train_log.csv").read_text().splitlines()
        assert [row.split(",")[0] for row in log[1:]] == ["0", "1", "2", "3"]

    def test_eval_oracle_gt_prints_perfect_table(self, workspace, tmp_path, capsys):
        code = main(["eval", "--checkpoint", str(workspace / "ckpt"),
                     "--data", str(workspace / "data"), "--oracle-gt",
                     "--out", str(tmp_path / "ev")])
        assert code == 0
        out = capsys.readouterr().out
        table = [line.split() for line in out.splitlines()[1:]]
        assert all(row[2] == "0.000" and row[4] == "100.00" for row in table)
        assert (tmp_path / "ev" / "metrics.csv").exists()
        assert (tmp_path / "ev" / "per_pair.csv").exists()

    def test_eval_missing_checkpoint_exits_1(self, workspace, capsys):
        code = main(["eval", "--checkpoint", "/nonexistent/ck",
                     "--data", str(workspace / "data")])
        assert code == 1
        payload = json.loads(capsys.readouterr().err.strip())
        assert payload["kind"] == "IoFailure"

    def test_internal_error_exits_2(self, workspace, capsys, monkeypatch):
        import crossrot.harness

        def boom(*a, **k):
            raise RuntimeError("synthetic failure")

        monkeypatch.setattr(crossrot.harness, "evaluate", boom)
        code = main(["eval", "--checkpoint", str(workspace / "ckpt"),
                     "--data", str(workspace / "data")])
        assert code == 2
        payload = json.loads(capsys.readouterr().err.strip())
        assert payload["kind"] == "RuntimeError"


class TestInferAndViz:
    def test_infer_prints_valid_unit_quaternion(self, workspace, capsys):
        crop = next((workspace / "data" / "crops").glob("*.png"))
        code = main(["infer", "--checkpoint", str(workspace / "ckpt"),
                     "--image-a", str(crop), "--image-b", str(crop)])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1
        payload = json.loads(lines[0])
        q = np.array(payload["quat"])
        assert abs(np.linalg.norm(q) - 1.0) < 1e-9
        assert q[0] >= 0.0
        assert -180.0 <= payload["yaw_deg"] <= 180.0
        assert -90.0 <= payload["pitch_deg"] <= 90.0

    def test_attend_writes_heatmaps(self, workspace, tmp_path, capsys):
        pair = first_pair_id(workspace)
        code = main(["attend", "--checkpoint", str(workspace / "ckpt"),
                     "--pair", pair, "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "viz")])
        assert code == 0
        assert (tmp_path / "viz" / f"{pair}_a.png").exists()
        assert (tmp_path / "viz" / f"{pair}_b.png").exists()

    def test_footprint_writes_overlay(self, workspace, tmp_path):
        pair = first_pair_id(workspace)
        code = main(["footprint", "--checkpoint", str(workspace / "ckpt"),
                     "--pair", pair, "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "viz")])
        assert code == 0
        assert (tmp_path / "viz" / f"{pair}_footprint.png").exists()

    def test_unknown_pair_id_exits_1(self, workspace, tmp_path, capsys):
        code = main(["attend", "--checkpoint", str(workspace / "ckpt"),
                     "--pair", "p9999_000", "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "viz")])
        assert code == 1
        assert "p9999_000" in json.loads(capsys.readouterr().err.strip())["error"]

    def test_bad_usage_exits_1(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 1
        payload = json.loads(capsys.readouterr().err.strip())
        assert payload["kind"] == "usage"


class TestConsoleScript:
    def test_installed_entry_point_round_trip(self, workspace, tmp_path):
        env_run = subprocess.run(
            [sys.executable, "-m", "crossrot.cli", "eval",
             "--checkpoint", str(workspace / "ckpt"),
             "--data", str(workspace / "data"), "--oracle-gt"],
            capture_output=True, text=True, timeout=300)
        assert env_run.returncode == 0, env_run.stderr
        assert "overlap" in env_run.stdout
