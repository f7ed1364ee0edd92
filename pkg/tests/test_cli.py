import os

import numpy as np
import pytest

from nsdarcy.cli import (CSV_HEADER, ExperimentConfig, KeyMismatch,
                         ParseError, Row, TableArtifact, ValidationError,
                         diff_tables, main, parse_config, parse_schedule_spec,
                         parse_tol_spec, read_table, run_experiment)

pytestmark = pytest.mark.usefixtures("clean_threads_env")


@pytest.fixture
def clean_threads_env(monkeypatch):
    monkeypatch.delenv("NSDARCY_THREADS", raising=False)


def small_artifact():
    rows = [Row(0, "1/2", "u", "H1", 0.5, None),
            Row(0, "1/2", "p", "L2", 0.25, None),
            Row(1, "1/4", "u", "H1", 0.25, 1.0),
            Row(1, "1/4", "p", "L2", 0.0625, 2.0)]
    return TableArtifact(rows=rows, metadata={"algorithm": "coupled"})


class TestConfig:
    def test_defaults(self):
        cfg = parse_config()
        assert cfg == ExperimentConfig()
        assert (cfg.algorithm, cfg.order, cfg.solver) == ("coupled", 1,
                                                          "direct")
        assert cfg.schedule == "square:n0=2,levels=2"
        assert (cfg.picard_tol, cfg.linear_tol, cfg.ichol_droptol) == \
            (1e-7, 1e-9, 1e-3)
        assert cfg.threads == 1

    def test_file_and_overrides(self, tmp_path):
        cfg_file = tmp_path / "exp.cfg"
        cfg_file.write_text("# comment line\n"
                            "algorithm = B\n"
                            "order=2   # trailing comment\n"
                            "\n"
                            "picard_tol = 1e-9\n")
        cfg = parse_config(str(cfg_file),
                           overrides={"order": "1", "solver": None})
        assert cfg.algorithm == "B"
        assert cfg.order == 1          # flag beats file
        assert cfg.solver == "direct"  # absent flag leaves the file value
        assert cfg.picard_tol == 1e-9

    def test_missing_equals_sign(self, tmp_path):
        bad = tmp_path / "exp.cfg"
        bad.write_text("algorithm B\n")
        with pytest.raises(ParseError, match="exp.cfg:1"):
            parse_config(str(bad))

    @pytest.mark.parametrize("overrides", [
        {"flux_capacitor": "1"},
        {"order": "two"},
        {"order": "3"},
        {"algorithm": "E"},
        {"solver": "multigrid"},
        {"picard_tol": "-1e-7"},
        {"schedule": "bogus:n0=2,levels=1"},
        {"schedule": "square:levels=1"},
        {"schedule": "square:n0=2048,levels=1"},
    ])
    def test_rejected_values(self, overrides):
        with pytest.raises(ValidationError):
            parse_config(overrides=overrides)

    def test_threads_env(self, monkeypatch):
        monkeypatch.setenv("NSDARCY_THREADS", "4")
        assert parse_config().threads == 4
        monkeypatch.setenv("NSDARCY_THREADS", "zero")
        with pytest.raises(ValidationError, match="NSDARCY_THREADS"):
            parse_config()
        monkeypatch.setenv("NSDARCY_THREADS", "0")
        with pytest.raises(ValidationError, match="NSDARCY_THREADS"):
            parse_config()


class TestScheduleSpec:
    def test_square(self):
        (sched,) = parse_schedule_spec("square:n0=2,levels=2")
        assert list(sched) == [2, 4, 16]

    def test_cube_then_square(self):
        (sched,) = parse_schedule_spec("cube_then_square:n0=2,levels=2")
        assert list(sched) == [2, 8, 64]

    def test_pairs(self):
        scheds = parse_schedule_spec("pairs:2:6,3:16,4:32,5:56")
        assert [list(s) for s in scheds] == [[2, 6], [3, 16], [4, 32],
                                             [5, 56]]

    @pytest.mark.parametrize("spec", ["pairs:", "pairs:6:2", "square:",
                                      "square:n0=two,levels=1"])
    def test_bad_specs(self, spec):
        with pytest.raises(ValidationError):
            parse_schedule_spec(spec)


class TestTableIO:
    def test_header_is_fixed(self):
        assert CSV_HEADER == "level,h,variable,norm,error,rate"
        assert small_artifact().body_lines()[0] == CSV_HEADER

    def test_roundtrip(self, tmp_path):
        art = small_artifact()
        path = tmp_path / "errors.csv"
        art.write_csv(str(path))
        back = read_table(str(path))
        assert back.metadata == {"algorithm": "coupled"}
        assert [r.key for r in back.rows] == [r.key for r in art.rows]
        assert [r.rate for r in back.rows] == [r.rate for r in art.rows]
        # errors survive the 4-significant-digit format exactly
        assert back.body_lines() == art.body_lines()

    def test_body_excludes_metadata(self, tmp_path):
        a, b = small_artifact(), small_artifact()
        b.metadata = {"timestamp": "differs", "tool": "other"}
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        a.write_csv(str(pa))
        b.write_csv(str(pb))
        strip = lambda p: [ln for ln in p.read_text().splitlines()
                           if not ln.startswith("#")]
        assert strip(pa) == strip(pb)

    def test_missing_header_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ParseError, match="missing header"):
            read_table(str(bad))

    def test_short_row_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text(CSV_HEADER + "\n0,1/2,u,H1,5.000E-01\n")
        with pytest.raises(ParseError, match="6 fields"):
            read_table(str(bad))


class TestRunExperiment:
    def test_coupled_sweep(self, tmp_path):
        cfg = parse_config(overrides={"schedule": "square:n0=2,levels=1",
                                      "out": str(tmp_path / "res")})
        art = run_experiment(cfg)
        assert len(art.rows) == 14  # 7 reported keys x 2 levels
        assert sorted({r.h for r in art.rows}) == ["1/2", "1/4"]
        level0 = [r for r in art.rows if r.level == 0]
        level1 = [r for r in art.rows if r.level == 1]
        assert all(r.rate is None for r in level0)
        assert all(r.rate is not None for r in level1)
        out = tmp_path / "res"
        assert (out / "errors.csv").is_file()
        assert (out / "errors.txt").is_file()
        assert (out / "plot.gp").is_file()
        assert (out / "err_phi_H1.dat").is_file()
        back = read_table(str(out / "errors.csv"))
        assert back.metadata["algorithm"] == "coupled"
        assert back.body_lines() == art.body_lines()

    def test_multilevel_reports_intermediates(self, tmp_path):
        cfg = parse_config(overrides={"algorithm": "D",
                                      "schedule": "square:n0=2,levels=1",
                                      "out": str(tmp_path / "res")})
        art = run_experiment(cfg)
        names = {r.variable for r in art.rows}
        assert {"u", "phi", "u_star", "phi_star"} <= names
        stars = [r for r in art.rows if r.variable.endswith("_star")]
        assert {r.level for r in stars} == {1}  # coarse level is coupled
        assert len(art.rows) == 14 + 7
        # plot data only tracks final-stage quantities
        assert not (tmp_path / "res" / "err_u_star_H1.dat").exists()

    def test_pair_schedules_report_finest_levels(self, tmp_path):
        cfg = parse_config(overrides={"algorithm": "A",
                                      "schedule": "pairs:2:4,3:6",
                                      "out": str(tmp_path / "res")})
        art = run_experiment(cfg)
        finals = [r for r in art.rows if not r.variable.endswith("_star")]
        assert sorted({r.h for r in finals}) == ["1/4", "1/6"]
        assert {r.level for r in finals} == {0, 1}
        assert len(art.rows) == 28

    def test_dry_run_solves_nothing(self, tmp_path, capsys):
        out = tmp_path / "res"
        cfg = parse_config(overrides={"schedule": "square:n0=2,levels=1",
                                      "out": str(out)})
        cfg.dry_run = True
        art = run_experiment(cfg)
        assert art.rows == []
        assert not out.exists()
        printed = capsys.readouterr().out
        assert "level 0: n=2" in printed
        assert "velocity=" in printed and "head=" in printed

    def test_rerun_is_byte_reproducible(self, tmp_path):
        bodies = []
        for name in ("one", "two"):
            cfg = parse_config(overrides={"schedule": "square:n0=2,levels=1",
                                          "out": str(tmp_path / name)})
            run_experiment(cfg)
            lines = (tmp_path / name / "errors.csv").read_text().splitlines()
            bodies.append([ln for ln in lines if not ln.startswith("#")])
        assert bodies[0] == bodies[1]


class TestDiff:
    def test_tol_spec_forms(self):
        assert parse_tol_spec("0.02") == {"default": 0.02}
        assert parse_tol_spec("H1=0.01, u:L2=0.05") == {"H1": 0.01,
                                                        "u:L2": 0.05}
        with pytest.raises(ValidationError):
            parse_tol_spec(" , ")

    def test_exact_match_passes(self):
        report = diff_tables(small_artifact(), small_artifact(), 1e-12)
        assert report.passed
        assert all(ok for *_, ok in report.checked)
        assert report.unchecked == [] and report.missing == []

    def test_tolerance_precedence(self):
        a, b = small_artifact(), small_artifact()
        for r in b.rows:
            r.error *= 1.05
        tol = {"u:H1": 0.10, "H1": 0.001, "default": 0.001}
        report = diff_tables(a, b, tol)
        by_key = {key: (t, ok) for key, _, t, ok in report.checked}
        assert by_key[(0, "1/2", "u", "H1")] == (0.10, True)
        assert by_key[(0, "1/2", "p", "L2")] == (0.001, False)
        assert not report.passed

    def test_rows_without_tolerance_are_reported(self):
        report = diff_tables(small_artifact(), small_artifact(),
                             {"H1": 0.01})
        assert report.passed  # the checked subset passes
        assert len(report.unchecked) == 2  # both p:L2 rows skipped

    def test_missing_rows(self):
        a, b = small_artifact(), small_artifact()
        b.rows = b.rows[:2]
        report = diff_tables(a, b, 0.01)
        assert len(report.missing) == 2
        with pytest.raises(KeyMismatch):
            diff_tables(a, b, 0.01, strict=True)

    def test_disjoint_tables_raise(self):
        a = small_artifact()
        b = TableArtifact(rows=[Row(5, "1/64", "v", "L2", 1.0, None)])
        with pytest.raises(KeyMismatch):
            diff_tables(a, b, 0.01)


class TestMain:
    def test_run_and_diff_exit_zero(self, tmp_path, capsys):
        out = tmp_path / "res"
        assert main(["run", "--schedule", "square:n0=2,levels=1",
                     "--out", str(out)]) == 0
        assert "wrote" in capsys.readouterr().out
        csv = str(out / "errors.csv")
        assert main(["diff", csv, csv, "--tol", "0.01"]) == 0
        assert capsys.readouterr().out.strip().endswith("PASS")

    def test_diff_failure_exits_one(self, tmp_path, capsys):
        art = small_artifact()
        other = small_artifact()
        for r in other.rows:
            r.error *= 1.5
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        art.write_csv(str(pa))
        other.write_csv(str(pb))
        assert main(["diff", str(pa), str(pb), "--tol", "0.02"]) == 1
        assert "FAIL" in capsys.readouterr().out

    def test_usage_errors_exit_two(self, tmp_path, capsys):
        assert main(["run", "--schedule", "bogus:n0=2,levels=1",
                     "--out", str(tmp_path)]) == 2
        assert "error:" in capsys.readouterr().err
        bad = tmp_path / "bad.csv"
        bad.write_text("not,a,table\n")
        assert main(["diff", str(bad), str(bad), "--tol", "0.01"]) == 2

    def test_environment_failures_exit_three(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.csv")
        assert main(["diff", missing, missing, "--tol", "0.01"]) == 3
        assert "failure" in capsys.readouterr().err

    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "res"
        assert main(["run", "--schedule", "square:n0=3,levels=1",
                     "--dry-run", "--out", str(out)]) == 0
        assert "subdivisions [3, 9]" in capsys.readouterr().out
        assert not out.exists()
