import json

import numpy as np
import pytest
import yaml

from mvlab.cli import EXIT_CONFIG, EXIT_FAILED_CHECK, EXIT_OK, main
from mvlab.experiments import (CRITERIA, EXPERIMENTS, ConfigError, Table, check_acceptance, config_schema,
                               default_config, load_config, load_manifests, parse_config, read_csv, run_experiment,
                               write_csv)

SMALL_ACW = {"experiment": "acw", "K": [0.5, 2.0], "T": 2.0, "ensemble": 4}


class TestConfig:
    def test_defaults_for_every_experiment(self):
        for name in EXPERIMENTS:
            cfg = default_config(name)
            assert cfg.experiment == name and cfg.seed == 0

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"experiment": "acw", "ensembel": 4})
        with pytest.raises(ConfigError):
            parse_config({"experiment": "mixing", "noise": {"d": 2, "colour": 1}})

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            parse_config({"experiment": "acw", "T": -1})
        with pytest.raises(ConfigError):
            parse_config({"experiment": "mixing", "noise": {"shells": {0: 1.0}}})
        with pytest.raises(ConfigError):
            default_config("nonsense")

    def test_yaml_and_overrides(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"K": [1.0], "T": 3.0}))
        cfg = load_config(p, experiment="acw", seed=5)
        assert cfg.K == [1.0] and cfg.T == 3.0 and cfg.seed == 5
        with pytest.raises(ConfigError):
            load_config(_write(tmp_path / "d.yaml", {"experiment": "steady"}), experiment="acw")

    def test_schema_lists_experiments(self):
        text = json.dumps(config_schema())
        for name in EXPERIMENTS:
            assert name in text


def _write(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


class TestResults:
    def test_csv_roundtrip(self, tmp_path):
        t = Table(["a", "b"], [[1, 0.1], [2, 1 / 3]])
        write_csv(tmp_path / "t.csv", t)
        back = read_csv(tmp_path / "t.csv")
        np.testing.assert_array_equal(back["a"], [1, 2])
        assert back["b"][1] == 1 / 3

    def test_rerun_is_byte_identical(self, tmp_path):
        a = run_experiment(SMALL_ACW, workers=1, out=tmp_path / "a")
        b = run_experiment(SMALL_ACW, workers=2, out=tmp_path / "b")
        for f in a["files"]:
            assert (tmp_path / "a/acw" / f).read_bytes() == (tmp_path / "b/acw" / f).read_bytes()

    def test_manifest_reproduces_run(self, tmp_path):
        first = run_experiment(SMALL_ACW, workers=1, out=tmp_path / "a")
        cfg = load_config(tmp_path / "a/acw/manifest.json")
        again = run_experiment(cfg, workers=1, out=tmp_path / "b")
        assert first["config"] == again["config"]
        assert (tmp_path / "a/acw/acw.csv").read_bytes() == (tmp_path / "b/acw/acw.csv").read_bytes()
        m = json.loads((tmp_path / "a/acw/manifest.json").read_text())
        assert m["schema_version"] == 1 and m["experiment"] == "acw"
        assert set(m["checks"]) == {"A1"}
        assert m["checks"]["A1"]["runtime_limit_seconds"] == 120

    def test_check_acceptance(self, tmp_path):
        report = check_acceptance([])
        assert list(report) == list(CRITERIA)
        assert all(r["status"] == "missing" for r in report.values())
        run_experiment(SMALL_ACW, workers=1, out=tmp_path)
        report = check_acceptance(load_manifests([tmp_path]))
        assert report["A1"]["status"] in ("pass", "fail") and report["A1"]["source"] == "acw"
        assert report["A2"]["status"] == "missing"
        with pytest.raises(ValueError):
            check_acceptance([{"schema_version": 99}])


class TestCli:
    def test_schema(self, capsys):
        assert main(["schema"]) == EXIT_OK
        assert "experiment" in capsys.readouterr().out

    def test_usage_errors(self):
        assert main([]) == EXIT_CONFIG
        assert main(["nonsense"]) == EXIT_CONFIG

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = _write(tmp_path / "bad.yaml", {"ensembel": 3})
        assert main(["acw", "--config", str(p)]) == EXIT_CONFIG
        assert "invalid config" in capsys.readouterr().err
        assert main(["acw", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG

    def test_run_check_and_plot(self, tmp_path, capsys):
        p = _write(tmp_path / "acw.yaml", {k: v for k, v in SMALL_ACW.items() if k != "experiment"})
        code = main(["acw", "--config", str(p), "--out", str(tmp_path), "--workers", "1", "--plot", "--check"])
        out = capsys.readouterr().out
        assert code in (EXIT_OK, EXIT_FAILED_CHECK)
        assert (tmp_path / "acw" / "acw.csv").exists() and (tmp_path / "acw" / "acw.png").exists()
        assert "A1:" in out
        # other criteria are missing, so the aggregate check fails
        assert main(["check", str(tmp_path)]) == EXIT_FAILED_CHECK
        assert "A2: MISSING" in capsys.readouterr().out
