import json
import subprocess
import sys

import pytest

from pdml.cli import parse_run_config, resolve_seed, run
from pdml.errors import ConfigError
from pdml.metrics import read_ppm

SMALL = {"epochs": 2, "batch_size": 8, "lr": 1e-3, "c1": 6, "c2": 6, "r": 4,
         "loss": {"mc_samples": 2, "pair_cap": 256}}


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert run(["synth", "--out", str(d), "--classes", "3", "--size", "16x16",
                "--bands", "6", "--grid", "2x2", "--seed", "1"]) == 0
    (d / "cfg.json").write_text(json.dumps(SMALL))
    return d


def _train(scene, out, *extra):
    return run(["train", "--cube", str(scene / "cube.hsc"), "--labels",
                str(scene / "labels.hsl"), "--config", str(scene / "cfg.json"),
                "--out", str(out), *extra])


class TestEndToEnd:
    def test_synth_train_eval(self, scene, tmp_path, capsys):
        assert _train(scene, tmp_path / "run") == 0
        for name in ("checkpoint.pdc", "history.jsonl", "split.json"):
            assert (tmp_path / "run" / name).exists()
        capsys.readouterr()
        code = run(["eval", "--checkpoint", str(tmp_path / "run" / "checkpoint.pdc"),
                    "--cube", str(scene / "cube.hsc"), "--labels", str(scene / "labels.hsl"),
                    "--embeddings", str(tmp_path / "emb.csv")])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert {"oa", "aa", "kappa"} <= set(out)
        assert all(0 <= out[k] <= 1 for k in ("oa", "aa"))
        assert (tmp_path / "emb.csv").read_text().startswith("label,m0,")

    def test_predict_map(self, scene, tmp_path):
        assert _train(scene, tmp_path / "run") == 0
        code = run(["predict-map", "--checkpoint", str(tmp_path / "run" / "checkpoint.pdc"),
                    "--cube", str(scene / "cube.hsc"), "--out", str(tmp_path / "map.ppm")])
        assert code == 0
        assert read_ppm((tmp_path / "map.ppm").read_bytes()).shape == (16, 16, 3)

    def test_history_byte_identical(self, scene, tmp_path):
        assert _train(scene, tmp_path / "a") == 0
        assert _train(scene, tmp_path / "b") == 0
        for name in ("history.jsonl", "checkpoint.pdc", "split.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_record_time_adds_wall_clock(self, scene, tmp_path):
        assert _train(scene, tmp_path / "t", "--record-time") == 0
        first = json.loads((tmp_path / "t" / "history.jsonl").read_text().splitlines()[0])
        assert "wall_ms" in first

    def test_gradcheck(self, capsys):
        cfg_code = run(["gradcheck", "--coords", "20"])
        report = json.loads(capsys.readouterr().out)
        assert cfg_code == 0 and report["max_rel_error"] < 1e-4

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "pdml.cli", "synth", "--out",
                               str(tmp_path), "--size", "8x8", "--grid", "2x2",
                               "--classes", "2", "--bands", "4"],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "cube.hsc").exists()


class TestErrors:
    def test_unknown_config_key(self, scene, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
        code = run(["train", "--cube", str(scene / "cube.hsc"), "--labels",
                    str(scene / "labels.hsl"), "--config", str(bad), "--out", str(tmp_path)])
        assert code == 2

    def test_unknown_loss_key(self):
        with pytest.raises(ConfigError):
            parse_run_config({"loss": {"gamma": 1}})

    def test_missing_input_file(self, tmp_path):
        code = run(["train", "--cube", str(tmp_path / "nope.hsc"), "--labels",
                    str(tmp_path / "nope.hsl"), "--out", str(tmp_path / "o")])
        assert code == 3

    def test_corrupt_cube(self, scene, tmp_path):
        (tmp_path / "c.hsc").write_bytes(b"HSC1" + b"\0" * 5)
        code = run(["train", "--cube", str(tmp_path / "c.hsc"), "--labels",
                    str(scene / "labels.hsl"), "--out", str(tmp_path / "o")])
        assert code == 3

    def test_bad_argument(self):
        assert run(["synth", "--out", "x", "--size", "big"]) == 2
        assert run(["nonsense"]) == 2


class TestSeedPrecedence:
    def test_flag_beats_env_beats_file(self, monkeypatch):
        monkeypatch.setenv("PDML_SEED", "7")
        assert resolve_seed(3, 1) == 3
        assert resolve_seed(None, 1) == 7
        monkeypatch.delenv("PDML_SEED")
        assert resolve_seed(None, 1) == 1

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv("PDML_SEED", "seven")
        with pytest.raises(ConfigError):
            resolve_seed(None, 0)

    def test_env_seed_reaches_training(self, scene, tmp_path, monkeypatch):
        monkeypatch.setenv("PDML_SEED", "11")
        assert _train(scene, tmp_path / "e") == 0
        monkeypatch.delenv("PDML_SEED")
        assert _train(scene, tmp_path / "f", "--seed", "11") == 0
        assert json.loads((tmp_path / "e" / "split.json").read_text())["seed"] == 11
        assert (tmp_path / "e" / "checkpoint.pdc").read_bytes() == (
            tmp_path / "f" / "checkpoint.pdc").read_bytes()
