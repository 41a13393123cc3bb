import math

import numpy as np
import pytest

from itd_tool.acoustics import SimGrid, sample_records, write_manifest
from itd_tool.audio import MonoClip, StereoClip
from itd_tool.bench import (EvalCase, EvalReport, EvalRow, SweepConfig, evaluate, gen_dataset, load_cases,
                            simulated_cases, sweep)
from itd_tool.embedder import init_model
from itd_tool.errors import ErrorKind, ItdError
from itd_tool.estimator import EstimatorConfig


def _blank_case(clip_id, truth_ms, left_gain=1.0, right_gain=1.0, spacing=None):
    noise = np.random.default_rng(0).standard_normal(64)
    clip = StereoClip(MonoClip(noise * left_gain), MonoClip(noise * right_gain))
    return EvalCase(clip_id, clip, truth_ms, spacing)


class TestEvalReport:
    """Summary statistics and CSV output."""

    def test_centered_truths(self):
        report = EvalReport("gcc", [EvalRow("a", 0.0, 2.0), EvalRow("b", 0.0, 0.0)])
        summary = report.summary
        assert summary["mae_ms"] == pytest.approx(1.0)
        assert summary["rmse_ms"] == pytest.approx(math.sqrt(2.0))
        assert math.isnan(summary["lr_accuracy"])
        assert summary["n"] == 2

    def test_lr_accuracy(self):
        rows = [EvalRow("a", 0.5, 0.1), EvalRow("b", -0.5, 0.2), EvalRow("c", 0.01, -0.3)]
        assert EvalReport("gcc", rows).summary["lr_accuracy"] == pytest.approx(0.5)

    def test_empty(self):
        summary = EvalReport("gcc").summary
        assert summary["n"] == 0
        assert math.isnan(summary["mae_ms"])

    def test_csv(self, tmp_path):
        report = EvalReport("random", [EvalRow("000001", 0.25, -0.25)])
        lines = report.to_csv(tmp_path / "out" / "eval.csv").read_text().splitlines()
        assert lines[0] == "# itd-tool eval v1 method=random"
        assert lines[1] == "clip_id,truth_ms,pred_ms,abs_err_ms"
        assert lines[2] == "000001,0.25,-0.25,0.5"
        assert "# mae_ms,0.5" in lines
        assert lines[-1] == "# n,1"


class TestDatasets:
    """Rendering and reading labeled datasets."""

    @pytest.fixture
    def grid(self):
        return SimGrid(rooms=(1,), count=2, snrs=(None, 10.0), rt60s=(0.0,), duration=0.1)

    def test_gen_dataset(self, grid, tmp_path):
        manifest = gen_dataset(grid, tmp_path, seed=3)
        assert manifest == tmp_path / "manifest.jsonl"
        assert len(manifest.read_text().splitlines()) == 4
        assert len(list((tmp_path / "wav").glob("*.wav"))) == 4
        cases = load_cases(tmp_path)
        assert [len(case.clip) for case in cases] == [1600] * 4
        assert cases[0].mic_spacing == pytest.approx(0.3)

    def test_deterministic(self, grid, tmp_path):
        a = gen_dataset(grid, tmp_path / "a", seed=3)
        b = gen_dataset(grid, tmp_path / "b", seed=3)
        assert a.read_text() == b.read_text()
        for wav in (tmp_path / "a" / "wav").iterdir():
            assert wav.read_bytes() == (tmp_path / "b" / "wav" / wav.name).read_bytes()

    def test_unwritable_output(self, grid, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ItdError) as err:
            gen_dataset(grid, blocker, seed=0)
        assert err.value.kind is ErrorKind.FAILED

    def test_rows_without_wav_are_rendered(self, grid, tmp_path):
        manifest = write_manifest(sample_records(grid, 0), tmp_path / "manifest.jsonl")
        cases = load_cases(manifest, render_samples=2000)
        assert len(cases) == 4
        assert all(len(case.clip) == 2000 for case in cases)


class TestEvaluate:
    """Running methods over cases."""

    def test_gcc_exact_on_integer_delays(self):
        grid = SimGrid(count=3, snrs=(None,), rt60s=(0.0,), duration=0.2, integer_delays=True)
        report = evaluate("gcc", simulated_cases(grid, seed=4))
        assert report.summary["n"] == 9
        for row in report.rows:
            assert round(row.pred_ms * 16) == round(row.truth_ms * 16)

    def test_rows_sorted_by_clip_id(self):
        cases = [_blank_case("b", 0.1), _blank_case("a", -0.1)]
        assert [row.clip_id for row in evaluate("random", cases).rows] == ["a", "b"]

    def test_random_is_chance(self):
        cases = [_blank_case(f"{i:04d}", 0.5 if i % 2 else -0.5) for i in range(1000)]
        report = evaluate("random", cases, seed=1)
        assert report.summary["lr_accuracy"] == pytest.approx(0.5, abs=0.05)
        assert all(abs(row.pred_ms) <= 26 / 16 for row in report.rows)

    def test_random_is_seeded(self):
        cases = [_blank_case(f"{i}", 0.5) for i in range(5)]
        first = [row.pred_ms for row in evaluate("random", cases, seed=2).rows]
        assert first == [row.pred_ms for row in evaluate("random", cases, seed=2).rows]

    @pytest.mark.parametrize("left, right, expected", [(1.0, 2.0, 1.0), (2.0, 1.0, -1.0)],
                             ids=["right louder", "left louder"])
    def test_iid(self, left, right, expected):
        report = evaluate("iid", [_blank_case("a", 0.0, left, right, spacing=0.3)])
        assert report.rows[0].pred_ms == pytest.approx(expected)

    def test_model(self, tiny_params):
        grid = SimGrid(rooms=(2,), count=2, snrs=(None,), rt60s=(0.0,), duration=0.05)
        config = EstimatorConfig(window=256, step=16, input_len=400)
        report = evaluate("model", simulated_cases(grid, seed=0), config, tiny_params)
        assert report.summary["n"] == 2
        assert all(abs(row.pred_ms) <= 1e3 * 16 / 16000 for row in report.rows)

    def test_model_needs_params(self):
        with pytest.raises(ItdError) as err:
            evaluate("model", [_blank_case("a", 0.0)])
        assert err.value.kind is ErrorKind.INVALID_INPUT

    def test_unknown_method(self):
        with pytest.raises(ItdError, match="method"):
            evaluate("music", [_blank_case("a", 0.0)])


class TestSweepConfig:
    """Off-axis conditions of each sweep."""

    @pytest.mark.parametrize("axis, value, snrs, rt60s", [
        ("snr", 5.0, (5.0,), (0.1,)),
        ("rt60", 0.7, (30.0,), (0.7,)),
        ("mixture", 0.3, (30.0,), (0.1,)),
        ("votes", 32, (10.0,), (0.5,)),
        ("duration", 2.0, (10.0,), (0.5,)),
    ], ids=["snr", "rt60", "mixture", "votes", "duration"])
    def test_conditions(self, axis, value, snrs, rt60s):
        grid, _ = SweepConfig(axis=axis).condition(value)
        assert grid.snrs == snrs and grid.rt60s == rt60s

    def test_mixture(self):
        grid, est = SweepConfig(axis="mixture").condition(0.3)
        assert grid.mixture_intensities == (0.3,)
        assert grid.n_samples == est.input_len == 8000

    def test_votes(self):
        _, est = SweepConfig(axis="votes").condition(32)
        assert est.votes == 32 and est.input_len == 8000

    def test_duration_in_windows(self):
        grid, est = SweepConfig(axis="duration").condition(2.0)
        assert est.input_len == grid.n_samples == 2048

    def test_default_values(self):
        assert SweepConfig(axis="rt60").values == (0.1, 0.3, 0.5, 0.7, 0.9)

    @pytest.mark.parametrize("kwargs", [{"axis": "distance"}, {"methods": ("music",)}, {"methods": ()}],
                             ids=["unknown axis", "unknown method", "no methods"])
    def test_invalid(self, kwargs):
        with pytest.raises(ItdError):
            SweepConfig(**kwargs)

    def test_from_mapping(self):
        config = SweepConfig.from_mapping({"axis": "votes", "estimator": {"window": 512}})
        assert config.estimator.window == 512


class TestSweep:
    """Sweep runs."""

    @pytest.fixture
    def config(self):
        return SweepConfig(axis="snr", values=(0.0, 10.0), methods=("gcc", "random"), count=1, rooms=(1,),
                           seed=5)

    def test_rows(self, config, tmp_path):
        out = tmp_path / "sweep.csv"
        rows = sweep(config, out_csv=out)
        assert [(row.value, row.method) for row in rows] == [(0.0, "gcc"), (0.0, "random"),
                                                            (10.0, "gcc"), (10.0, "random")]
        assert all(row.summary["n"] == 1 for row in rows)
        lines = out.read_text().splitlines()
        assert lines[0] == "# itd-tool sweep v1"
        assert lines[1] == "axis,value,method,mae_ms,rmse_ms,lr_accuracy,n"
        assert len(lines) == 6

    def test_single_condition_matches_evaluate(self):
        (row,) = sweep(SweepConfig(axis="snr", values=(10.0,), count=2, rooms=(1,), seed=5))
        grid, est = SweepConfig(axis="snr", count=2, rooms=(1,)).condition(10.0)
        report = evaluate("gcc", simulated_cases(grid, 5), est, seed=5)
        assert row.summary == report.summary


@pytest.mark.slow
class TestGccReferenceLevels:
    """GCC-PHAT accuracy on a few hundred simulated scenes."""

    def test_integer_delays_recovered(self):
        grid = SimGrid(count=67, snrs=(None,), rt60s=(0.0,), duration=1220 / 16000, integer_delays=True)
        report = evaluate("gcc", simulated_cases(grid, seed=21))
        assert report.summary["n"] >= 200
        exact = [round(row.pred_ms * 16) == round(row.truth_ms * 16) for row in report.rows]
        assert np.mean(exact) >= 0.99

    def test_fractional_delays_within_half_a_sample(self):
        grid = SimGrid(count=67, snrs=(None,), rt60s=(0.0,), duration=1220 / 16000)
        report = evaluate("gcc", simulated_cases(grid, seed=22))
        assert report.summary["mae_ms"] < 0.5 / 16

    def test_noisy_reverberant_mae_bracket(self):
        grid = SimGrid(count=50, snrs=(10.0,), rt60s=(0.5,), duration=1220 / 16000)
        report = evaluate("gcc", simulated_cases(grid, seed=23), EstimatorConfig(votes=128, agg="mean"))
        assert 0.08 <= report.summary["mae_ms"] <= 0.32

    def test_mixture_rmse_grows_with_intensity(self):
        rows = sweep(SweepConfig(axis="mixture", values=(0.1, 0.3, 0.5, 0.7, 0.9), count=50, seed=24))
        rmse = [row.summary["rmse_ms"] for row in rows]
        inversions = sum(later < earlier for earlier, later in zip(rmse, rmse[1:]))
        assert inversions <= 1
        assert rmse[-1] > rmse[0]
