import csv
import json
import sys

import pytest
import yaml

import sumi as cli
from datagen import StreamSpec, TaskSpec, write_samples
from harness import (
    RATIO_GRID,
    CellResult,
    ConfigError,
    ExperimentReport,
    FrozenStream,
    ablation_table,
    ablation_variants,
    aggregate,
    config_from_dict,
    emit_report,
    expand_variants,
    format_summary,
    load_config,
    load_report,
    parse_vary,
    ratio_sweep,
    run_experiment,
    source_model,
    task_for_seed,
    worker_count,
)
from checkpoint_ledger import CheckpointLedger
from objective import AdaptConfig

SMALL = {
    "task": {"num_classes": 4, "input_dims": [8, 8], "n_train": 300, "n_test": 96},
    "model": {"hidden_dim": 16, "representation_dim": 8},
    "training": {"epochs": 3, "min_accuracy": None},
    "adapt": {"learning_rate": 0.001},
    "streams": ["strong=0.5@5"],
    "adapters": ["source"],
    "seeds": [0],
}


def small_config(**changes):
    raw = {**SMALL, **changes}
    return config_from_dict(raw)


def cell(adapter, seed, accuracy, status="ok", stream="s"):
    return CellResult(stream=stream, adapter=adapter, seed=seed, status=status, accuracy=accuracy,
                      domain_accuracy={"none": accuracy} if accuracy is not None else {})


class TestConfig:
    def test_defaults(self):
        config = config_from_dict({})
        assert config.seeds == [0, 1, 2, 3, 4]
        assert config.adapters == ["source", "entropy-min", "gated-entropy-min", "sumi"]
        assert [s.label for s in config.streams] == ["strong=0.5@5"]

    def test_model_follows_task(self):
        config = small_config()
        assert config.model.input_dims == (8, 8)
        assert config.model.num_classes == 4

    def test_shipped_default_file_loads(self):
        config = load_config(cli.DEFAULT_CONFIG)
        assert config.adapt == AdaptConfig()
        assert config.adapt.learning_rate == 1e-4
        assert config.task == TaskSpec()
        assert config.training.min_accuracy == 0.9

    def test_desk_preset_changes_only_the_adapt_step_and_mis_window(self):
        default, desk = load_config(cli.DEFAULT_CONFIG), load_config(cli.DESK_CONFIG)
        assert desk.task == default.task == TaskSpec()
        assert (desk.model, desk.training) == (default.model, default.training)
        assert [s.label for s in desk.streams] == ["strong=0.5@5"]
        assert desk.seeds == [0, 1, 2, 3, 4]
        changed = {k for k, v in desk.adapt.to_dict().items() if default.adapt.to_dict()[k] != v}
        assert changed == {"learning_rate", "t0"}
        assert desk.adapt.t0 == "0.75iter"

    def test_yaml_file_with_overrides(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump(SMALL))
        config = load_config(path, {"seeds": [3, 4], "adapt": {"beta": 0.9}})
        assert config.seeds == [3, 4]
        assert config.adapt.beta == 0.9
        assert config.adapt.learning_rate == 0.001

    @pytest.mark.parametrize("raw,match", [
        ({"tsk": {}}, "unknown config section"),
        ({"adapt": {"gama_m": 1.0}}, "gama_m"),
        ({"adapt": {"beta": 1.5}}, "beta"),
        ({"adapters": ["tent"]}, "unknown adapter"),
        ({"seeds": []}, "seed"),
        ({"streams": ["none@5", "none@5"]}, "unique"),
        ({"vary": {"depth": [1, 2]}}, "depth"),
        ({"adapt": {"t0": "half"}}, "t0"),
        ({"model": {"num_classes": 3}}, "does not match"),
    ])
    def test_invalid(self, raw, match):
        with pytest.raises(ConfigError, match=match):
            config_from_dict(raw)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.yaml")

    def test_stream_entries(self):
        config = small_config(streams=[
            "noise-u1:0.5,mix:0.5@3",
            {"ratios": {"both": 1.0}, "severity": "mixed", "order": "weak-first"},
            {"file": "frozen/stream.csv", "name": "frozen"},
        ])
        first, second, third = config.streams
        assert isinstance(second, StreamSpec) and second.order == "weak-first"
        assert isinstance(third, FrozenStream) and third.label == "frozen"
        assert first.severity == 3

    def test_t0_fraction_accepted(self):
        assert small_config(adapt={"t0": "0.75iter"}).adapt.t0 == "0.75iter"

    def test_parse_vary(self):
        assert parse_vary("beta=0.6,0.9") == ("beta", [0.6, 0.9])
        assert parse_vary("t0=0.5iter") == ("t0", ["0.5iter"])
        with pytest.raises(ConfigError):
            parse_vary("beta")

    def test_worker_count(self, monkeypatch):
        assert worker_count() == 1
        monkeypatch.setenv("SUMI_THREADS", "3")
        assert worker_count() == 3
        monkeypatch.setenv("SUMI_THREADS", "zero")
        with pytest.raises(ConfigError):
            worker_count()


class TestVariants:
    def test_ablation_rows(self):
        names = [v.name for v in ablation_variants()]
        assert names == ["sumi[none]", "sumi[iqr]", "sumi[ua]", "sumi[mis]",
                         "sumi[iqr+ua]", "sumi[iqr+mis]", "sumi[ua+mis]", "sumi[iqr+ua+mis]"]
        full = ablation_variants()[-1].apply(AdaptConfig())
        assert full.use_iqr and full.use_ua and full.use_mis
        bare = ablation_variants()[0].apply(AdaptConfig())
        assert not (bare.use_iqr or bare.use_ua or bare.use_mis)

    def test_vary_is_a_cartesian_product(self):
        config = small_config(adapters=["sumi"], vary={"beta": [0.6, 0.9], "lam": [0.0, 5.0]})
        variants = expand_variants(config)
        assert len(variants) == 4
        assert variants[0].name == "sumi[beta=0.6,lam=0.0]"
        assert variants[0].apply(config.adapt).lam == 0.0

    def test_ratio_sweep_streams(self):
        config = ratio_sweep(small_config(), severity="mixed")
        assert len(config.streams) == len(RATIO_GRID) == 10
        assert config.streams[0].label == "strong=0@mixed"
        assert config.streams[-1].label == "strong=0.9@mixed"


class TestAggregate:
    def test_mean_and_sample_std(self):
        rows = aggregate([cell("sumi", 0, 0.5), cell("sumi", 1, 0.7), cell("source", 0, 0.4)])
        by_adapter = {r["adapter"]: r for r in rows}
        assert by_adapter["sumi"]["mean_accuracy"] == pytest.approx(0.6)
        assert by_adapter["sumi"]["std_accuracy"] == pytest.approx(0.1414213562, abs=1e-9)
        assert by_adapter["source"]["std_accuracy"] == 0.0

    def test_failures_are_counted_not_averaged(self):
        rows = aggregate([cell("sumi", 0, 0.5), cell("sumi", 1, None, status="failed")])
        assert rows[0]["n_seeds"] == 1 and rows[0]["n_failed"] == 1
        assert rows[0]["mean_accuracy"] == 0.5

    def test_summary_table(self):
        report = ExperimentReport(config={}, cells=[], summary=aggregate([cell("sumi", 0, 0.5)]))
        assert "50.00" in format_summary(report)
        assert format_summary(ExperimentReport(config={}, cells=[], summary=[])) == "(no cells)"


class TestReports:
    def test_header_only_csv_for_empty_report(self, tmp_path):
        emit_report(ExperimentReport(config={}, cells=[], summary=[]), tmp_path)
        rows = list(csv.reader((tmp_path / "cells.csv").read_text().splitlines()))
        assert rows == [["stream", "adapter", "seed", "status", "accuracy", "mean_selected", "clean_accuracy"]]

    def test_json_round_trip(self, tmp_path):
        report = ExperimentReport(config={"seeds": [0]}, cells=[cell("sumi", 0, 0.5)],
                                  summary=aggregate([cell("sumi", 0, 0.5)]))
        emit_report(report, tmp_path)
        loaded = load_report(tmp_path)
        assert loaded.cells == report.cells
        assert loaded.summary == report.summary

    def test_rejects_foreign_json(self, tmp_path):
        (tmp_path / "report.json").write_text(json.dumps({"schema": "other"}))
        with pytest.raises(ValueError):
            load_report(tmp_path)

    def test_domain_columns(self, tmp_path):
        a = cell("sumi", 0, 0.5)
        a.domain_accuracy = {"mix@5": 0.25, "none": 0.75}
        emit_report(ExperimentReport(config={}, cells=[a], summary=aggregate([a])), tmp_path, formats=("csv",))
        header, row = list(csv.reader((tmp_path / "cells.csv").read_text().splitlines()))
        assert header[-2:] == ["acc[mix@5]", "acc[none]"]
        assert row[-2:] == ["0.25", "0.75"]
        assert not (tmp_path / "report.json").exists()


class TestRunExperiment:
    def test_single_cell(self, tmp_path):
        config = small_config(out=str(tmp_path / "run"))
        report = run_experiment(config)
        assert len(report.cells) == 1
        only = report.cells[0]
        assert only.ok and 0.0 <= only.accuracy <= 1.0
        assert set(only.domain_accuracy) <= {"noise-u1@5", "noise-u2@5", "both@5", "miss-u1@5", "miss-u2@5", "mix@5"}
        rows = list(csv.reader((tmp_path / "run" / "cells.csv").read_text().splitlines()))
        assert len(rows) == 2
        assert (tmp_path / "run" / "trace.jsonl").read_text().count("\n") == 6

    def test_grid_size_and_order(self):
        config = small_config(adapters=["sumi", "source"], seeds=[1, 0],
                              streams=["strong=0.5@5", "noise-u1@2"])
        report = run_experiment(config)
        assert len(report.cells) == 2 * 2 * 2
        assert [c.key for c in report.cells] == sorted(c.key for c in report.cells)

    def test_reruns_are_byte_identical(self, tmp_path):
        out = tmp_path / "run"
        config = small_config(adapters=["source", "sumi"], seeds=[0, 1], out=str(out))
        run_experiment(config)
        first = {name: (out / name).read_bytes() for name in ("report.json", "cells.csv", "summary.csv")}
        run_experiment(small_config(adapters=["source", "sumi"], seeds=[0, 1], out=str(out), cache=False))
        second = {name: (out / name).read_bytes() for name in first}
        config = small_config(adapters=["source", "sumi"], seeds=[0, 1], out=str(out))
        run_experiment(config, workers=3)
        third = {name: (out / name).read_bytes() for name in first}
        assert first["cells.csv"] == second["cells.csv"] == third["cells.csv"]
        assert first["summary.csv"] == second["summary.csv"] == third["summary.csv"]
        assert first == third

    def test_ablation_gives_eight_rows(self):
        report = run_experiment(small_config(ablation=True))
        table = ablation_table(report)
        assert len(table) == 8
        assert {(r["iqr"], r["ua"], r["mis"]) for r in table} == {
            (a, b, c) for a in (False, True) for b in (False, True) for c in (False, True)}

    def test_failed_cells_are_marked(self, tmp_path):
        config = small_config(streams=["strong=0.5@5", {"file": str(tmp_path / "missing.csv"), "name": "gone"}])
        report = run_experiment(config)
        by_stream = {c.stream: c for c in report.cells}
        assert by_stream["strong=0.5@5"].ok
        assert by_stream["gone"].status == "failed"
        assert "FileNotFoundError" in by_stream["gone"].error
        assert not report.ok

    def test_source_training_failure_marks_every_cell(self):
        report = run_experiment(small_config(training={"epochs": 0, "min_accuracy": 0.99}, adapters=["source", "sumi"]))
        assert all(c.status == "failed" and "floor" in c.error for c in report.cells)
        assert report.summary[0]["mean_accuracy"] is None

    def test_frozen_stream(self, tmp_path):
        config = small_config()
        bundle = source_model(config, 0)
        path = write_samples(tmp_path / "frozen.csv", bundle.test[:32], num_classes=4)
        report = run_experiment(small_config(streams=[{"file": str(path), "name": "frozen"}]))
        assert report.cells[0].ok
        assert report.cells[0].run.mode == "weak"
        assert report.cells[0].run.n_samples == 32

    def test_t0_fraction_resolves_per_stream(self):
        report = run_experiment(small_config(adapters=["sumi"], adapt={"t0": "0.5iter"}))
        run = report.cells[0].run
        assert run.config["t0"] == run.iterations // 2

    def test_checkpoint_cache_is_reused(self, tmp_path):
        ledger = CheckpointLedger(tmp_path / "ledger")
        config = small_config()
        first = source_model(config, 0, ledger)
        second = source_model(config, 0, ledger)
        assert first.clean_accuracy == second.clean_accuracy
        assert ledger.get_stats()["total_hits"] == 1
        assert all(first.model.params[k].tobytes() == second.model.params[k].tobytes() for k in first.model.params)
        assert task_for_seed(config, 7).seed == 7


class TestCli:
    @pytest.fixture
    def config_file(self, tmp_path):
        path = tmp_path / "small.yaml"
        path.write_text(yaml.safe_dump({**SMALL, "out": str(tmp_path / "cli")}))
        return path

    def run(self, monkeypatch, *argv):
        monkeypatch.setattr(sys, "argv", ["sumi.py", *argv])
        return cli.main()

    def test_overrides_only_from_given_flags(self):
        args = cli.argparse.Namespace(seed="1,2", adapter=None, stream=["both@3"], out=None, quantile_mode="order",
                                      schedule="exp", balance_term="on", lr=None, batch_size=8, iterations=None,
                                      no_cache=True)
        assert cli.build_overrides(args) == {
            "seeds": [1, 2],
            "streams": ["both@3"],
            "adapt": {"quantile_mode": "order-stat", "schedule": "exponential", "balance_term": True, "batch_size": 8},
            "cache": False,
        }

    def test_adapt_writes_reports(self, monkeypatch, config_file, tmp_path, capsys):
        assert self.run(monkeypatch, "adapt", "--config", str(config_file), "--adapter", "source,sumi") == 0
        out = capsys.readouterr().out
        assert "✓ 2 cell(s) completed" in out
        assert (tmp_path / "cli" / "report.json").exists()

    def test_failures_give_nonzero_exit(self, monkeypatch, config_file, tmp_path, capsys):
        missing = tmp_path / "missing.yaml"
        assert self.run(monkeypatch, "adapt", "--config", str(missing)) == 2
        code = self.run(monkeypatch, "adapt", "--config", str(config_file), "--stream", "fog@2")
        assert code == 2
        assert "Config error" in capsys.readouterr().out

    def test_report_subcommand(self, monkeypatch, config_file, tmp_path, capsys):
        self.run(monkeypatch, "adapt", "--config", str(config_file))
        capsys.readouterr()
        assert self.run(monkeypatch, "report", str(tmp_path / "cli"), "--format", "json") == 0
        rows = json.loads(capsys.readouterr().out)
        assert rows[0]["adapter"] == "source"

    def test_sweep_needs_an_axis(self, monkeypatch, config_file):
        assert self.run(monkeypatch, "sweep", "--config", str(config_file)) == 2

    def test_failed_cells_give_exit_one(self, monkeypatch, tmp_path, capsys):
        path = tmp_path / "failing.yaml"
        path.write_text(yaml.safe_dump({**SMALL, "training": {"epochs": 0, "min_accuracy": 0.99}}))
        assert self.run(monkeypatch, "adapt", "--config", str(path)) == 1
        assert "✗ 1 of 1 cell(s) failed" in capsys.readouterr().out
