import json
import subprocess
import sys

import pytest
import yaml

from simdepth import cli
from simdepth.config import config_from_dict, config_to_dict, load_config, save_config


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    rc = cli.main(["synth-data", "--out", str(out), "--scenes", "2", "--frames", "8",
                   "--seed", "1"])
    assert rc == 0
    return out


def write_config(path, data_root, out_dir, **overrides):
    cfg = {
        "data_root": str(data_root),
        "output_dir": str(out_dir),
        "steps": 2,
        "seed": 3,
        "checkpoint_every": 0,
        "calibration_steps": 2,
        "calibration_batch": 2,
    }
    cfg.update(overrides)
    path.write_text(yaml.safe_dump(cfg))
    return path


class TestSynthData:
    def test_layout_contract(self, dataset_dir):
        for domain in ("real", "virtual"):
            for seq in ("seq_0000", "seq_0001"):
                seq_dir = dataset_dir / domain / seq
                assert (seq_dir / "intrinsics.txt").exists()
                rgb = sorted(seq_dir.glob("rgb_*.png"))
                assert len(rgb) == 8
                depth = sorted(seq_dir.glob("depth_*.png"))
                sem = sorted(seq_dir.glob("sem_*.png"))
                if domain == "virtual":
                    assert len(depth) == 8 and len(sem) == 8
                else:
                    assert not depth and not sem
        assert (dataset_dir / "classes.txt").exists()

    def test_deterministic_under_seed(self, dataset_dir, tmp_path):
        rc = cli.main(["synth-data", "--out", str(tmp_path), "--scenes", "2",
                       "--frames", "8", "--seed", "1"])
        assert rc == 0
        a = (dataset_dir / "real" / "seq_0000" / "rgb_000003.png").read_bytes()
        b = (tmp_path / "real" / "seq_0000" / "rgb_000003.png").read_bytes()
        assert a == b


class TestConfigHandling:
    def test_missing_config_exits_2_naming_path(self, capsys):
        rc = cli.main(["train", "--config", "missing.cfg"])
        assert rc == 2
        assert "missing.cfg" in capsys.readouterr().err

    def test_unknown_key_exits_2_naming_key(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("steps: 1\nwarp_speed: 9\n")
        rc = cli.main(["train", "--config", str(path)])
        assert rc == 2
        assert "warp_speed" in capsys.readouterr().err

    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transmogrify"])
        assert exc.value.code == 2

    def test_roundtrip_semantically_identical(self, tmp_path):
        cfg = config_from_dict({"steps": 7, "beta_da": 3.5, "class_weights": {"sky": 0.0}},
                               profile="desk")
        path = tmp_path / "cfg.yaml"
        save_config(cfg, path)
        again = load_config(path)
        assert config_to_dict(again) == config_to_dict(cfg)

    def test_env_var_supplies_default_path(self, tmp_path, monkeypatch, dataset_dir):
        path = write_config(tmp_path / "cfg.yaml", dataset_dir, tmp_path / "run")
        monkeypatch.setenv(cli.CONFIG_ENV, str(path))
        rc = cli.main(["train", "--profile", "desk"])
        assert rc == 0

    def test_paper_hyperparameters_reachable(self):
        cfg = config_from_dict({})
        reachable = config_to_dict(cfg)
        for key in ("lr", "batch_size", "real_fraction", "smooth_weight", "beta_da",
                    "d_max", "brightness", "contrast", "saturation", "hue",
                    "flip_prob", "jitter_prob", "class_weights"):
            assert key in reachable


class TestPipeline:
    def test_full_pipeline(self, dataset_dir, tmp_path, capsys):
        run_dir = tmp_path / "run"
        cfg_path = write_config(tmp_path / "cfg.yaml", dataset_dir, run_dir,
                                psi_file=str(tmp_path / "psi.txt"))

        rc = cli.main(["calibrate", "--config", str(cfg_path), "--profile", "desk",
                       "--out", str(tmp_path / "psi.txt")])
        assert rc == 0
        assert float((tmp_path / "psi.txt").read_text()) > 0

        rc = cli.main(["train", "--config", str(cfg_path), "--profile", "desk"])
        assert rc == 0
        ckpt = run_dir / "checkpoint.pt"
        assert ckpt.exists()
        log_lines = [json.loads(line) for line in open(run_dir / "train_log.jsonl")]
        assert [rec["step"] for rec in log_lines] == [1, 2]

        report = tmp_path / "report.json"
        rc = cli.main(["evaluate", "--ckpt", str(ckpt), "--data", str(dataset_dir),
                       "--mode", "relative", "--report", str(report),
                       "--bins", "0,20,80", "--per-class", "--plots"])
        assert rc == 0
        payload = json.loads(report.read_text())
        assert "metrics" in payload and "binned" in payload and "per_class" in payload
        assert report.with_suffix(".txt").exists()
        assert report.with_name("report_binned.png").exists()

        rc = cli.main(["evaluate", "--ckpt", str(ckpt), "--data", str(dataset_dir),
                       "--mode", "absolute", "--report", str(tmp_path / "abs.json")])
        assert rc == 0  # psi embedded in the checkpoint via psi_file

        capsys.readouterr()
        rc = cli.main(["inspect", "--ckpt", str(ckpt)])
        out = capsys.readouterr().out
        assert rc == 0
        for group in ("encoder", "pyramid", "decoder", "pose", "domain"):
            assert group in out
        assert "psi" in out

    def test_absolute_mode_without_psi_fails(self, dataset_dir, tmp_path, capsys):
        run_dir = tmp_path / "run"
        cfg_path = write_config(tmp_path / "cfg.yaml", dataset_dir, run_dir, steps=1)
        assert cli.main(["train", "--config", str(cfg_path), "--profile", "desk"]) == 0
        rc = cli.main(["evaluate", "--ckpt", str(run_dir / "checkpoint.pt"),
                       "--data", str(dataset_dir), "--mode", "absolute",
                       "--report", str(tmp_path / "r.json")])
        assert rc == 2
        assert "psi" in capsys.readouterr().err


class TestConsoleEntrypoint:
    def test_usage_exit_code_via_subprocess(self):
        proc = subprocess.run([sys.executable, "-m", "simdepth.cli", "--nonsense"],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert "usage" in proc.stderr.lower()
