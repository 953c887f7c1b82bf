"""Sweep grids: cell enumeration, seed salting, winner selection, discovery."""

import math
from dataclasses import replace

import numpy as np
import pytest

from dpfedsim.config import parse_sweep, validate_config
from dpfedsim.engine import RoundRecord, train
from dpfedsim.metrics import render_csv
from dpfedsim.sweep import (
    METRIC_WINDOW,
    SUMMARY_HEADER,
    SweepCell,
    _settled_clip_values,
    cell_config,
    discover_clip_range,
    discovered_fixed_clips,
    enumerate_cells,
    last_window_metric,
    render_summary_csv,
    run_sweep,
    select_best,
)


def base_raw(**overrides):
    raw = {
        "task": {"kind": "synthetic", "num_users": 40, "examples_per_user": [4, 8],
                 "input_dim": 3, "spread": 3.0},
        "model": {"kind": "linear", "input_dim": 3},
        "rounds": 20,
        "sample_prob": 0.4,
        "master_seed": 11,
        "eval_fraction": 0.25,
        "eval_period": 5,
    }
    raw.update(overrides)
    return raw


def sweep_spec(grids=None, **overrides):
    raw = base_raw(**overrides)
    for key, value in (grids or {}).items():
        raw[f"sweep.{key}"] = value
    return parse_sweep(raw)


def fake_records(metrics):
    return [
        RoundRecord(round_index=i, clip_before=1.0, clip_after=1.0,
                    frac_below_exact=0.5, frac_below_noisy=0.5,
                    mean_preclip_norm=1.0, eval_loss=m, eval_metric=m,
                    sampled_count=3)
        for i, m in enumerate(metrics)
    ]


class TestLastWindowMetric:
    def test_mean_of_trailing_window(self):
        records = fake_records([float(i) for i in range(1, 151)])
        assert last_window_metric(records) == pytest.approx(np.mean(range(51, 151)))
        assert METRIC_WINDOW == 100

    def test_clamps_to_short_runs(self):
        records = fake_records([2.0, 4.0])
        assert last_window_metric(records) == 3.0

    def test_skips_non_eval_rounds(self):
        records = fake_records([math.nan, 1.0, math.nan, 3.0])
        assert last_window_metric(records) == 2.0

    def test_all_nan_is_nan(self):
        assert math.isnan(last_window_metric(fake_records([math.nan] * 5)))
        assert math.isnan(last_window_metric([]))


class TestCellConfig:
    def test_adaptive_cell(self):
        spec = sweep_spec()
        config = cell_config(spec.base, "adaptive", 0.7, 0.03, 2.0, index=5)
        assert config.clip_mode == "adaptive"
        assert config.clip_quantile == 0.7
        assert config.noise_multiplier == 0.03
        assert config.server_lr == 2.0 * spec.base.server_lr
        assert config.master_seed == 11 + 5
        assert config.data_seed == 11

    def test_fixed_cell_strips_sigma_b(self):
        spec = sweep_spec(sigma_b=1.0, noise_multiplier=0.01)
        config = cell_config(spec.base, "fixed", 0.25, 0.01, 1.0, index=2)
        assert config.clip_mode == "fixed"
        assert config.clip_value == 0.25
        assert config.sigma_b is None

    def test_seed_salting_wraps(self):
        spec = sweep_spec(master_seed=2**64 - 1)
        config = cell_config(spec.base, "adaptive", 0.5, 0.0, 1.0, index=3)
        assert config.master_seed == 2
        assert config.data_seed == 2**64 - 1

    def test_shared_dataset_across_cells(self):
        spec = sweep_spec(master_seed=9)
        a = cell_config(spec.base, "adaptive", 0.5, 0.0, 1.0, index=0)
        b = cell_config(spec.base, "fixed", 1.0, 0.1, 2.0, index=7)
        assert a.data_seed == b.data_seed == 9
        assert a.master_seed != b.master_seed

    def test_unknown_setting(self):
        spec = sweep_spec()
        with pytest.raises(ValueError):
            cell_config(spec.base, "soft", 0.5, 0.0, 1.0, index=0)


class TestEnumerateCells:
    def test_grid_size_and_indices(self):
        spec = sweep_spec(grids={
            "quantiles": [0.3, 0.7],
            "noise_multipliers": [0.0, 0.1],
            "server_lr_multipliers": [1.0, 4.0],
        })
        cells = enumerate_cells(spec, fixed_clips=(0.5,))
        assert len(cells) == (2 + 1) * 2 * 2
        assert [c.index for c in cells] == list(range(12))
        assert [c.setting for c in cells] == ["adaptive"] * 8 + ["fixed"] * 4
        params = {(c.setting, c.clip_param, c.noise_multiplier, c.lr_multiplier)
                  for c in cells}
        assert len(params) == 12
        for cell in cells:
            assert cell.config.master_seed == spec.base.master_seed + cell.index

    def test_no_fixed_clips(self):
        spec = sweep_spec(grids={
            "quantiles": [0.5],
            "noise_multipliers": [0.0],
            "server_lr_multipliers": [1.0, 2.0],
        })
        assert len(enumerate_cells(spec, ())) == 2


class TestSelectBest:
    def two_lr_cells(self, spec):
        return enumerate_cells(spec, ())

    def test_regression_minimizes_metric(self):
        spec = sweep_spec(grids={
            "quantiles": [0.5], "noise_multipliers": [0.0],
            "server_lr_multipliers": [1.0, 2.0],
        })
        cells = self.two_lr_cells(spec)
        rows = select_best(spec, cells, {0: fake_records([0.8]), 1: fake_records([0.2])})
        assert rows[0].best_lr_multiplier == 2.0
        assert rows[0].best_metric == 0.2
        assert rows[0].best_cell == 1

    def test_classification_maximizes_metric(self):
        raw_model = {"kind": "logistic", "input_dim": 3, "output_dim": 3}
        raw_task = {"kind": "synthetic", "num_users": 40, "examples_per_user": [4, 8],
                    "input_dim": 3, "task": "classification", "num_classes": 3}
        spec = sweep_spec(grids={
            "quantiles": [0.5], "noise_multipliers": [0.0],
            "server_lr_multipliers": [1.0, 2.0],
        }, model=raw_model, task=raw_task)
        cells = self.two_lr_cells(spec)
        rows = select_best(spec, cells, {0: fake_records([0.8]), 1: fake_records([0.2])})
        assert rows[0].best_lr_multiplier == 1.0
        assert rows[0].best_metric == 0.8

    def test_tie_goes_to_smallest_multiplier(self):
        spec = sweep_spec(grids={
            "quantiles": [0.5], "noise_multipliers": [0.0],
            "server_lr_multipliers": [4.0, 1.0, 2.0],
        })
        cells = self.two_lr_cells(spec)
        results = {c.index: fake_records([0.5]) for c in cells}
        rows = select_best(spec, cells, results)
        assert rows[0].best_lr_multiplier == 1.0

    def test_nan_cells_lose_to_real_metrics(self):
        spec = sweep_spec(grids={
            "quantiles": [0.5], "noise_multipliers": [0.0],
            "server_lr_multipliers": [1.0, 2.0],
        })
        cells = self.two_lr_cells(spec)
        rows = select_best(
            spec, cells, {0: fake_records([math.nan]), 1: fake_records([0.9])}
        )
        assert rows[0].best_cell == 1

    def test_all_nan_keeps_first_cell(self):
        spec = sweep_spec(grids={
            "quantiles": [0.5], "noise_multipliers": [0.0],
            "server_lr_multipliers": [1.0, 2.0],
        })
        cells = self.two_lr_cells(spec)
        rows = select_best(
            spec, cells, {0: fake_records([math.nan]), 1: fake_records([math.nan])}
        )
        assert rows[0].best_cell == 0
        assert math.isnan(rows[0].best_metric)

    def test_row_order_follows_grid_order(self):
        spec = sweep_spec(grids={
            "quantiles": [0.3, 0.7], "noise_multipliers": [0.0, 0.1],
            "server_lr_multipliers": [1.0],
        })
        cells = enumerate_cells(spec, (0.5,))
        results = {c.index: fake_records([0.5]) for c in cells}
        rows = select_best(spec, cells, results)
        assert [(r.setting, r.clip_param, r.noise_multiplier) for r in rows] == [
            ("adaptive", 0.3, 0.0), ("adaptive", 0.3, 0.1),
            ("adaptive", 0.7, 0.0), ("adaptive", 0.7, 0.1),
            ("fixed", 0.5, 0.0), ("fixed", 0.5, 0.1),
        ]


class TestSettledClipValues:
    def rec(self, i, frac, clip):
        return RoundRecord(round_index=i, clip_before=clip, clip_after=clip,
                           frac_below_exact=frac, frac_below_noisy=frac,
                           mean_preclip_norm=1.0, eval_loss=math.nan,
                           eval_metric=math.nan, sampled_count=2)

    def test_trajectory_from_first_settled_round(self):
        records = [self.rec(0, 0.0, 1.0), self.rec(1, 0.3, 2.0),
                   self.rec(2, 0.52, 3.0), self.rec(3, 0.9, 4.0)]
        assert _settled_clip_values(records, 0.5) == [3.0, 4.0]

    def test_nan_rounds_do_not_settle(self):
        records = [self.rec(0, math.nan, 1.0), self.rec(1, 0.5, 2.0)]
        assert _settled_clip_values(records, 0.5) == [2.0]

    def test_never_settled_is_empty(self):
        records = [self.rec(i, 0.0, 1.0) for i in range(5)]
        assert _settled_clip_values(records, 0.9) == []


class TestDiscovery:
    def discovery_spec(self):
        return sweep_spec(
            grids={"quantiles": [0.5], "noise_multipliers": [0.0],
                   "server_lr_multipliers": [1.0]},
            rounds=120,
            sample_prob=0.5,
            task={"kind": "synthetic", "num_users": 60, "examples_per_user": [4, 8],
                  "input_dim": 3, "spread": 5.0},
            eval_fraction=0.0,
        )

    def test_discovered_range_brackets_the_norms(self):
        low, high = discover_clip_range(self.discovery_spec())
        assert 0.0 < low < high

    def test_discovered_clips_are_geometric(self):
        clips = discovered_fixed_clips(self.discovery_spec())
        assert len(clips) == 5
        assert all(a < b for a, b in zip(clips, clips[1:]))
        ratios = [b / a for a, b in zip(clips, clips[1:])]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)
        low, high = discover_clip_range(self.discovery_spec())
        assert clips[0] == pytest.approx(low, rel=1e-12)
        assert clips[-1] == pytest.approx(high, rel=1e-12)


class TestRunSweep:
    def test_single_cell_equals_direct_train(self, tmp_path):
        spec = sweep_spec(grids={
            "quantiles": [0.5], "noise_multipliers": [0.01],
            "server_lr_multipliers": [1.0],
        })
        rows = run_sweep(spec, out_dir=str(tmp_path))
        assert len(rows) == 1
        direct = train(cell_config(spec.base, "adaptive", 0.5, 0.01, 1.0, index=0))
        assert rows[0].best_metric == last_window_metric(direct.records)
        cell_csv = (tmp_path / "cells" / "cell_0000.csv").read_text()
        assert cell_csv == render_csv(direct.records)

    def test_summary_files_written(self, tmp_path):
        spec = sweep_spec(grids={
            "quantiles": [0.3, 0.7], "noise_multipliers": [0.0],
            "server_lr_multipliers": [1.0],
        })
        rows = run_sweep(spec, out_dir=str(tmp_path))
        summary = (tmp_path / "summary.csv").read_text()
        assert summary.splitlines()[0] == SUMMARY_HEADER
        assert len(summary.splitlines()) == 1 + len(rows)
        assert sorted(p.name for p in (tmp_path / "cells").glob("*.csv")) == [
            "cell_0000.csv", "cell_0001.csv",
        ]
        import json

        document = json.loads((tmp_path / "summary.json").read_text())
        assert len(document["resolved"]["rows"]) == len(rows)

    def test_workers_reproduce_serial_results(self, tmp_path):
        spec = sweep_spec(grids={
            "quantiles": [0.3, 0.7], "noise_multipliers": [0.01],
            "server_lr_multipliers": [1.0],
        })
        serial_dir = tmp_path / "serial"
        parallel_dir = tmp_path / "parallel"
        serial_rows = run_sweep(spec, out_dir=str(serial_dir), workers=1)
        parallel_rows = run_sweep(spec, out_dir=str(parallel_dir), workers=2)
        assert serial_rows == parallel_rows
        for name in ("cells/cell_0000.csv", "cells/cell_0001.csv", "summary.csv"):
            assert (serial_dir / name).read_bytes() == (parallel_dir / name).read_bytes()

    def test_discovery_adds_fixed_settings(self, tmp_path):
        spec = replace(
            sweep_spec(grids={
                "quantiles": [0.5], "noise_multipliers": [0.0],
                "server_lr_multipliers": [1.0],
            }, rounds=120, sample_prob=0.5,
                task={"kind": "synthetic", "num_users": 60,
                      "examples_per_user": [4, 8], "input_dim": 3, "spread": 5.0},
                eval_fraction=0.0),
            discover_fixed_clips=True,
        )
        rows = run_sweep(spec)
        assert [r.setting for r in rows] == ["adaptive"] + ["fixed"] * 5
        fixed_params = [r.clip_param for r in rows if r.setting == "fixed"]
        assert all(a < b for a, b in zip(fixed_params, fixed_params[1:]))
