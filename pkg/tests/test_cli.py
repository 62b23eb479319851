import csv
import json
from importlib import resources

import pytest

from fedmosaic import cli
from fedmosaic.cli import (
    EXIT_CONFIG, EXIT_DIVERGED, EXIT_OK, ConfigValidationError, load_config, main, parse_config,
)
from fedmosaic.metrics import ROUND_COLUMNS

DEMO = """
[data]
num_classes = 3
dim = 4
per_class = 30
separation = 3.0
public_fraction = 0.4
test_per_client = 20

[data.partition]
scheme = "dirichlet"
num_clients = 3
alpha = 1.0

[protocol]
num_rounds = 8
sync_period = 2
batch_size = 8

[run]
modes = ["local_only", "fedmosaic"]
seeds = [0, 1]
"""

BUNDLED = ["pathological.toml", "practical_dirichlet.toml", "feature_shift.toml",
           "hybrid.toml", "flipped.toml"]


def write(tmp_path, text, name="demo.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestParse:
    def test_roundtrip(self):
        cfg = parse_config(DEMO)
        assert parse_config(cfg.to_toml()) == cfg

    @pytest.mark.parametrize("name", BUNDLED)
    def test_bundled_configs_roundtrip(self, name):
        text = resources.files("fedmosaic").joinpath("configs", name).read_text()
        cfg = parse_config(text)
        assert parse_config(cfg.to_toml()) == cfg

    def test_unknown_key_reports_line(self):
        text = DEMO.replace("batch_size = 8", "batch_size = 8\nbatchsize = 4")
        with pytest.raises(ConfigValidationError) as exc:
            parse_config(text)
        assert exc.value.line == text.splitlines().index("batchsize = 4") + 1

    def test_unknown_section(self):
        with pytest.raises(ConfigValidationError, match="unknown section"):
            parse_config(DEMO + "\n[extra]\nx = 1\n")

    def test_bad_scheme(self):
        with pytest.raises(ConfigValidationError, match="scheme"):
            parse_config(DEMO.replace('"dirichlet"', '"iid"'))

    def test_bad_mode(self):
        with pytest.raises(ConfigValidationError, match="mode"):
            parse_config(DEMO.replace('"fedmosaic"]', '"fedavg"]'))

    def test_syntax_error(self):
        with pytest.raises(ConfigValidationError):
            parse_config("[data\nx=1")

    def test_flipped_client_out_of_range(self):
        with pytest.raises(ConfigValidationError, match="flipped_label_client"):
            parse_config(DEMO + "\n[scenario]\nflipped_label_client = 7\n")

    def test_dp_section(self):
        cfg = parse_config(DEMO.replace("batch_size = 8",
                                        "batch_size = 8\n\n[protocol.dp]\nepsilon = 2.0"))
        assert cfg.protocol.dp.epsilon == 2.0 and cfg.protocol.dp.clip_max == 1.0


class TestMain:
    def test_full_run(self, tmp_path, capsys):
        path = write(tmp_path, DEMO)
        out = tmp_path / "out"
        assert main(["run", "--config", str(path), "--outdir", str(out)]) == EXIT_OK
        for mode in ("local_only", "fedmosaic"):
            for seed in ("0", "1"):
                d = out / mode / seed
                names = {p.name for p in d.iterdir()}
                assert {"run.json", "rounds.csv", "manifest.json", "report.json",
                        "report.txt"} <= names
                header = (d / "rounds.csv").read_text().splitlines()[0]
                assert tuple(header.split(",")) == ROUND_COLUMNS
        rows = list(csv.DictReader((out / "summary.csv").open()))
        assert {r["mode"] for r in rows} == {"local_only", "fedmosaic"}
        assert len(rows) == 2 * (3 + 1)
        assert all(r["num_seeds"] == "2" for r in rows)
        assert "summary.csv" in capsys.readouterr().out

    def test_modes_override(self, tmp_path):
        path = write(tmp_path, DEMO)
        out = tmp_path / "o"
        assert main(["run", "--config", str(path), "--outdir", str(out),
                     "--modes", "fedct_majority"]) == EXIT_OK
        assert {p.name for p in out.iterdir()} == {"fedct_majority", "summary.csv"}

    def test_bad_modes_flag(self, tmp_path):
        path = write(tmp_path, DEMO)
        assert main(["run", "--config", str(path), "--modes", "nope"]) == EXIT_CONFIG

    def test_dry_run(self, tmp_path, capsys):
        path = write(tmp_path, DEMO)
        out = tmp_path / "never"
        assert main(["run", "--config", str(path), "--outdir", str(out), "--dry-run"]) == EXIT_OK
        text = capsys.readouterr().out
        assert "m=3" in text and "|U|=" in text and "client 2" in text
        assert not out.exists()

    def test_missing_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.toml")]) == EXIT_CONFIG

    def test_config_error_exit(self, tmp_path, capsys):
        path = write(tmp_path, DEMO.replace("num_rounds = 8", "num_rounds = 0"))
        assert main(["run", "--config", str(path)]) == EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_divergence_exit_and_cleanup(self, tmp_path):
        path = write(tmp_path, DEMO.replace("num_rounds = 8", "num_rounds = 8\nstep_size = 1.5e308"))
        out = tmp_path / "div"
        assert main(["run", "--config", str(path), "--outdir", str(out)]) == EXIT_DIVERGED
        assert not (out / "summary.csv").exists()
        assert not any(p.is_file() for p in out.rglob("*"))

    def test_partial_output_removed(self, tmp_path, monkeypatch):
        path = write(tmp_path, DEMO)
        out = tmp_path / "partial"
        real = cli.run_experiment
        calls = {"n": 0}

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] == 3:
                raise ValueError("boom")
            return real(*args, **kw)

        monkeypatch.setattr(cli, "run_experiment", flaky)
        assert main(["run", "--config", str(path), "--outdir", str(out)]) == EXIT_CONFIG
        assert not any(p.is_file() for p in out.rglob("*"))

    def test_flipped_manifest(self, tmp_path):
        text = DEMO + "\n[scenario]\nflipped_label_client = 0\n"
        path = write(tmp_path, text)
        out = tmp_path / "f"
        assert main(["run", "--config", str(path), "--outdir", str(out),
                     "--modes", "local_only"]) == EXIT_OK
        man = json.loads((out / "local_only" / "0" / "manifest.json").read_text())
        assert man["flipped_label_client"] == 0
        clean = load_config(path)
        import dataclasses
        from fedmosaic.data import make_scenario
        spec, _ = clean.for_seed(0)
        unflipped = make_scenario(dataclasses.replace(spec, flipped_label_client=None))
        shifted = [unflipped.class_freq[0][(c - 1) % 3] for c in range(3)]
        assert man["class_counts"][0] == shifted
        assert man["class_counts"][1:] == unflipped.class_freq[1:].tolist()

    def test_module_entry(self, tmp_path):
        import subprocess
        import sys
        path = write(tmp_path, DEMO)
        res = subprocess.run([sys.executable, "-m", "fedmosaic", "run", "--config", str(path),
                              "--dry-run"], capture_output=True, text=True)
        assert res.returncode == 0 and "client 0" in res.stdout
