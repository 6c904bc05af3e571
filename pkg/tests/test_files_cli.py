"""Model/filter file schema, report writing, and the CLI contract."""

import json
import os

import numpy as np
import pytest

from linfdeconv import cli, files
from linfdeconv.model import DeconvolutionFilter


class TestModelFiles:
    def test_builtins_present(self):
        names = files.builtin_model_names()
        assert {"example1", "pendulum", "unstable_demo"} <= set(names)

    def test_example1_roundtrip(self, example1):
        model, F = files.load_model("example1")
        assert F is None
        assert model.n_vertices == 2
        for loaded, expected in zip(model.vertices, example1.vertices):
            np.testing.assert_allclose(loaded.A, expected.A, atol=1e-15)
            np.testing.assert_allclose(loaded.D2, expected.D2, atol=1e-15)

    def test_pendulum_matches_constructor(self, pendulum):
        model, F = files.load_model("pendulum")
        np.testing.assert_allclose(model.vertices[0].A, pendulum.base.A, atol=1e-12)
        np.testing.assert_allclose(model.vertices[0].D2, pendulum.base.D2, atol=1e-12)
        np.testing.assert_array_equal(F, pendulum.F)

    def test_unknown_keys_rejected(self, tmp_path):
        doc = json.loads(
            open(files._resolve("unstable_demo")).read()
        )
        doc["extra"] = 1
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(files.ModelFileError, match="extra"):
            files.load_model(str(p))

    def test_unknown_vertex_keys_rejected(self, tmp_path):
        doc = json.loads(open(files._resolve("example1")).read())
        doc["vertices"][0]["A_typo"] = [[1.0]]
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(files.ModelFileError, match="A_typo"):
            files.load_model(str(p))

    def test_dims_mismatch_rejected(self, tmp_path):
        doc = json.loads(open(files._resolve("unstable_demo")).read())
        doc["dims"]["n"] = 7
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(doc))
        with pytest.raises(files.ModelFileError, match="dims"):
            files.load_model(str(p))

    def test_missing_model(self):
        with pytest.raises(FileNotFoundError):
            files.load_model("never_heard_of_it")


class TestFilterFiles:
    def test_save_load_roundtrip(self, tmp_path, filter_quadratic_published):
        p = tmp_path / "f.json"
        files.save_filter(str(p), filter_quadratic_published)
        loaded = files.load_filter(str(p))
        np.testing.assert_array_equal(loaded.Af, filter_quadratic_published.Af)
        np.testing.assert_array_equal(loaded.Df, filter_quadratic_published.Df)

    def test_full_precision_roundtrip(self, tmp_path):
        filt = DeconvolutionFilter(
            Af=[[-1.0 / 3.0]], Bf=[[np.pi]], Cf=[[np.e]], Df=[[1.0 / 7.0]],
        )
        p = tmp_path / "f.json"
        files.save_filter(str(p), filt)
        loaded = files.load_filter(str(p))
        assert loaded.Af[0, 0] == filt.Af[0, 0]  # bit-exact through JSON
        assert loaded.Bf[0, 0] == filt.Bf[0, 0]

    def test_unknown_keys_rejected(self, tmp_path):
        p = tmp_path / "f.json"
        p.write_text(json.dumps({"Af": [[1]], "Bf": [[1]], "Cf": [[1]],
                                 "Df": [[1]], "oops": 2}))
        with pytest.raises(files.ModelFileError, match="oops"):
            files.load_filter(str(p))

    def test_fingerprint_stable(self, filter_quadratic_published):
        a = files.filter_fingerprint(filter_quadratic_published)
        b = files.filter_fingerprint(filter_quadratic_published)
        assert a == b and len(a) == 12


class TestCliSynth:
    def test_unstable_model_exits_negative(self, tmp_path, capsys):
        code = cli.main([
            "synth", "--model", "unstable_demo", "--method", "quadratic",
            "--lambda", "1.0", "--out", str(tmp_path),
        ])
        assert code == 2
        assert "no admissible filter" in capsys.readouterr().err

    def test_quadratic_reproduction(self, tmp_path, capsys):
        code = cli.main([
            "synth", "--model", "example1", "--method", "quadratic",
            "--lambda", "2.5", "--out", str(tmp_path),
        ])
        assert code == 0
        report = json.loads((tmp_path / "synth_report.json").read_text())
        assert report["gamma"] == pytest.approx(0.7278, rel=3e-2)
        assert report["certified"] is True
        filt = files.load_filter(str(tmp_path / "filter.json"))
        assert filt.Af.shape == (2, 2)

    def test_improved_reproduction(self, tmp_path):
        code = cli.main([
            "synth", "--model", "example1", "--method", "improved",
            "--lambda", "2.7", "--epsilon", "1e-3", "--out", str(tmp_path),
        ])
        assert code == 0
        report = json.loads((tmp_path / "synth_report.json").read_text())
        assert report["gamma"] == pytest.approx(0.6932, rel=3e-2)

    def test_epsilon_rejected_for_quadratic(self, tmp_path):
        code = cli.main([
            "synth", "--model", "example1", "--method", "quadratic",
            "--lambda", "2.5", "--epsilon", "1e-3", "--out", str(tmp_path),
        ])
        assert code == 1

    def test_missing_model_is_usage_error(self, tmp_path):
        code = cli.main([
            "synth", "--model", "nope.json", "--lambda", "1.0",
            "--out", str(tmp_path),
        ])
        assert code == 1

    def test_reports_byte_identical_except_timestamp(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        for d in (a_dir, b_dir):
            code = cli.main([
                "synth", "--model", "example1", "--method", "quadratic",
                "--lambda", "2.5", "--out", str(d),
            ])
            assert code == 0

        def body(d):
            lines = (d / "synth_report.json").read_text().splitlines()
            return [ln for ln in lines if "generated_at" not in ln]

        assert body(a_dir) == body(b_dir)
        assert (a_dir / "filter.json").read_text() == (b_dir / "filter.json").read_text()


class TestCliAnalyze:
    @pytest.fixture(scope="class")
    def published_filter_file(self, tmp_path_factory, filter_quadratic_published):
        p = tmp_path_factory.mktemp("filters") / "published.json"
        files.save_filter(str(p), filter_quadratic_published)
        return str(p)

    def test_published_filter_certifies(self, tmp_path, published_filter_file):
        code = cli.main([
            "analyze", "--model", "example1", "--filter", published_filter_file,
            "--gamma", str(0.7278 * 1.05), "--lambda", "2.5",
            "--out", str(tmp_path),
        ])
        assert code == 0

    def test_corrupted_filter_uncertified(self, tmp_path, filter_quadratic_published):
        broken = DeconvolutionFilter(
            Af=-np.asarray(filter_quadratic_published.Af),  # sign flip
            Bf=filter_quadratic_published.Bf,
            Cf=filter_quadratic_published.Cf,
            Df=filter_quadratic_published.Df,
        )
        p = tmp_path / "broken.json"
        files.save_filter(str(p), broken)
        code = cli.main([
            "analyze", "--model", "example1", "--filter", str(p),
            "--gamma", "0.77", "--lambda", "2.5", "--out", str(tmp_path),
        ])
        assert code == 2

    def test_rate_above_admissible_range(self, tmp_path, published_filter_file, capsys):
        code = cli.main([
            "analyze", "--model", "example1", "--filter", published_filter_file,
            "--gamma", "1.0", "--lambda", "50.0", "--out", str(tmp_path),
        ])
        assert code == 2
        assert "admissible interval" in capsys.readouterr().err


class TestCliSimulate:
    @pytest.fixture(scope="class")
    def improved_filter_file(self, tmp_path_factory, filter_improved_published):
        p = tmp_path_factory.mktemp("filters") / "improved.json"
        files.save_filter(str(p), filter_improved_published)
        return str(p)

    def test_ratio_below_certified_level(self, tmp_path, improved_filter_file, capsys):
        code = cli.main([
            "simulate", "--model", "example1", "--filter", improved_filter_file,
            "--gamma", "0.6932", "--trials", "60", "--dt", "1e-3",
            "--horizon", "8.0", "--out", str(tmp_path),
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "ratio =" in out
        report = json.loads((tmp_path / "simulate_report.json").read_text())
        for entry in report["estimates"]:
            assert entry["ratio"] <= 0.6932

    def test_zero_disturbance_marker(self, tmp_path, improved_filter_file, capsys):
        code = cli.main([
            "simulate", "--model", "example1", "--filter", improved_filter_file,
            "--disturbance", "sinusoid:amplitude=0,frequency=1",
            "--trials", "10", "--dt", "1e-3", "--horizon", "2.0",
            "--vertex", "0", "--out", str(tmp_path),
        ])
        assert code == 0
        assert "undefined" in capsys.readouterr().out

    def test_csv_header_names_run(self, tmp_path, improved_filter_file):
        cli.main([
            "simulate", "--model", "example1", "--filter", improved_filter_file,
            "--trials", "10", "--dt", "1e-3", "--horizon", "2.0",
            "--vertex", "1", "--seed", "3", "--out", str(tmp_path),
        ])
        head = (tmp_path / "trajectory_v1.csv").read_text().splitlines()[0]
        assert head.startswith("# model=example1")
        assert "seed=3" in head and "filter=" in head

    def test_bad_disturbance_is_usage_error(self, tmp_path, improved_filter_file):
        code = cli.main([
            "simulate", "--model", "example1", "--filter", improved_filter_file,
            "--disturbance", "chirp:rate=1", "--out", str(tmp_path),
        ])
        assert code == 1


class TestCliFaultDemo:
    def test_default_reproduction(self, tmp_path, capsys):
        code = cli.main([
            "fault-demo", "--dt", "1e-3", "--horizon", "10.0",
            "--out", str(tmp_path),
        ])
        assert code == 0
        out = capsys.readouterr().out
        assert "mu = 0.8453" in out
        report = json.loads((tmp_path / "fault_report.json").read_text())
        assert report["mu"] == pytest.approx(0.8453)
        assert report["certified"] is True
        csv_lines = (tmp_path / "fault_demo.csv").read_text().splitlines()
        assert csv_lines[1].split(",")[:3] == ["t", "f0", "fhat0"]

    def test_zero_weight_passthrough(self, tmp_path):
        code = cli.main([
            "fault-demo", "--h1", "0", "--dt", "1e-3", "--horizon", "6.0",
            "--out", str(tmp_path),
        ])
        assert code == 0
        report = json.loads((tmp_path / "fault_report.json").read_text())
        assert report["weight_H"] == [[0.0, 1.0]]

    def test_fault_none_runs(self, tmp_path):
        code = cli.main([
            "fault-demo", "--fault", "none", "--dt", "1e-3",
            "--horizon", "6.0", "--out", str(tmp_path),
        ])
        assert code == 0

    def test_model_without_fault_direction_rejected(self, tmp_path):
        code = cli.main([
            "fault-demo", "--model", "example1", "--out", str(tmp_path),
        ])
        assert code == 1


class TestAtomicWrites:
    def test_no_partial_files_left(self, tmp_path):
        files.write_report(str(tmp_path / "r.json"), {"x": 1.0}, "t0")
        leftovers = [f for f in os.listdir(tmp_path) if f.startswith(".tmp")]
        assert leftovers == []
        assert json.loads((tmp_path / "r.json").read_text())["x"] == 1.0
