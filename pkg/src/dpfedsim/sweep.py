"""Hyperparameter sweeps: clip settings x noise levels x server LRs.

Every combination is an independent training run ("cell") with its own
salted master seed; all cells share one dataset via the data seed.  For
each (clip setting, noise level) the summary keeps the best server LR by
the validation metric averaged over the last 100 rounds, with ties going
to the smallest multiplier.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, replace

import numpy as np

from .config import DISCOVERED_CLIP_COUNT, RunConfig, SweepSpec, resolved_data_seed, to_raw
from .engine import RoundRecord, train
from .metrics import format_float, resolved_summary, write_metrics_csv, write_run_json
from .models import LossKind

logger = logging.getLogger(__name__)

METRIC_WINDOW = 100

SUMMARY_HEADER = "setting,clip_param,noise_multiplier,best_lr_multiplier,best_metric,best_cell"

# Fraction of the target quantile band considered "settled" when choosing
# fixed-clip ranges: rounds before the tracked fraction first comes within
# this distance of gamma are disregarded.
WARMUP_TOLERANCE = 0.05


@dataclass(frozen=True)
class SweepCell:
    index: int
    setting: str
    clip_param: float
    noise_multiplier: float
    lr_multiplier: float
    config: RunConfig


@dataclass(frozen=True)
class SummaryRow:
    setting: str
    clip_param: float
    noise_multiplier: float
    best_lr_multiplier: float
    best_metric: float
    best_cell: int


def last_window_metric(records: list[RoundRecord], window: int = METRIC_WINDOW) -> float:
    """Mean eval metric over the trailing window (clamped to the run length)."""
    tail = records[max(0, len(records) - window):]
    values = [r.eval_metric for r in tail if not math.isnan(r.eval_metric)]
    return float(np.mean(values)) if values else math.nan


def cell_config(
    base: RunConfig, setting: str, clip_param: float, z: float, lr_multiplier: float, index: int
) -> RunConfig:
    common = dict(
        noise_multiplier=z,
        server_lr=base.server_lr * lr_multiplier,
        master_seed=(base.master_seed + index) % 2**64,
        data_seed=resolved_data_seed(base),
        output_dir=None,
    )
    if setting == "adaptive":
        return replace(base, clip_mode="adaptive", clip_quantile=clip_param, **common)
    if setting == "fixed":
        return replace(base, clip_mode="fixed", clip_value=clip_param, sigma_b=None, **common)
    raise ValueError(f"unknown clip setting {setting!r}")


def enumerate_cells(spec: SweepSpec, fixed_clips: tuple[float, ...]) -> list[SweepCell]:
    settings = [("adaptive", g) for g in spec.quantiles]
    settings += [("fixed", c) for c in fixed_clips]
    cells = []
    for setting, param in settings:
        for z in spec.noise_multipliers:
            for mult in spec.server_lr_multipliers:
                index = len(cells)
                cells.append(
                    SweepCell(
                        index=index,
                        setting=setting,
                        clip_param=param,
                        noise_multiplier=z,
                        lr_multiplier=mult,
                        config=cell_config(spec.base, setting, param, z, mult, index),
                    )
                )
    return cells


def _settled_clip_values(records: list[RoundRecord], gamma: float) -> list[float]:
    """Clip trajectory after the warmup rule: disregard rounds until the
    exact below-fraction first lands within the tolerance of gamma."""
    for start, record in enumerate(records):
        frac = record.frac_below_exact
        if not math.isnan(frac) and abs(frac - gamma) <= WARMUP_TOLERANCE:
            return [r.clip_after for r in records[start:]]
    return []


def discover_clip_range(spec: SweepSpec) -> tuple[float, float]:
    """Fixed-clip range from two noiseless adaptive runs.

    The minimum is the smallest settled clip of a 0.1-quantile run and
    the maximum the largest settled clip of a 0.9-quantile run.
    """
    bounds = []
    for gamma, pick in ((0.1, min), (0.9, max)):
        probe = replace(
            spec.base,
            clip_mode="adaptive",
            clip_quantile=gamma,
            noise_multiplier=0.0,
            sigma_b=0.0,
            data_seed=resolved_data_seed(spec.base),
            output_dir=None,
        )
        records = train(probe).records
        settled = _settled_clip_values(records, gamma)
        if not settled:
            raise RuntimeError(
                f"clip-range discovery never settled within {WARMUP_TOLERANCE} of "
                f"quantile {gamma}; increase rounds"
            )
        bounds.append(pick(settled))
    low, high = bounds
    if not low < high:
        raise RuntimeError(f"degenerate discovered clip range [{low}, {high}]")
    return low, high


def discovered_fixed_clips(spec: SweepSpec) -> tuple[float, ...]:
    low, high = discover_clip_range(spec)
    return tuple(float(c) for c in np.geomspace(low, high, DISCOVERED_CLIP_COUNT))


def _execute_cell(args: tuple[SweepCell, str | None]) -> tuple[int, list[RoundRecord]]:
    cell, cells_dir = args
    result = train(cell.config)
    if cells_dir is not None:
        stem = f"cell_{cell.index:04d}"
        write_metrics_csv(result.records, os.path.join(cells_dir, f"{stem}.csv"))
        write_run_json(
            result.records,
            os.path.join(cells_dir, f"{stem}.json"),
            to_raw(cell.config, resolved_sigma_b=result.privacy.sigma_b
                   if cell.config.clip_mode == "adaptive" else None),
            resolved_summary(result, cell.config),
        )
    return cell.index, result.records


def select_best(spec: SweepSpec, cells: list[SweepCell], results: dict[int, list[RoundRecord]]):
    maximize = spec.base.model.loss is LossKind.CROSS_ENTROPY
    groups: dict[tuple, list[SweepCell]] = {}
    order: list[tuple] = []
    for cell in cells:
        key = (cell.setting, cell.clip_param, cell.noise_multiplier)
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(cell)
    rows = []
    for key in order:
        best_cell = None
        best_metric = math.nan
        for cell in sorted(groups[key], key=lambda c: c.lr_multiplier):
            metric = last_window_metric(results[cell.index])
            if best_cell is None:
                best_cell, best_metric = cell, metric
                continue
            if math.isnan(metric):
                continue
            better = metric > best_metric if maximize else metric < best_metric
            if math.isnan(best_metric) or better:
                best_cell, best_metric = cell, metric
        rows.append(
            SummaryRow(
                setting=key[0],
                clip_param=key[1],
                noise_multiplier=key[2],
                best_lr_multiplier=best_cell.lr_multiplier,
                best_metric=best_metric,
                best_cell=best_cell.index,
            )
        )
    return rows


def render_summary_csv(rows: list[SummaryRow]) -> str:
    lines = [SUMMARY_HEADER]
    for row in rows:
        lines.append(
            ",".join(
                [
                    row.setting,
                    format_float(row.clip_param),
                    format_float(row.noise_multiplier),
                    format_float(row.best_lr_multiplier),
                    format_float(row.best_metric),
                    str(row.best_cell),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def run_sweep(spec: SweepSpec, out_dir: str | None = None, workers: int = 1) -> list[SummaryRow]:
    """Execute the grid and pick per-(setting, z) winners.

    Cells run independently (optionally in parallel processes); their
    metrics land under ``<out_dir>/cells/`` as they complete, so a failed
    grid still leaves the finished cells on disk.
    """
    fixed_clips = spec.fixed_clips
    if spec.discover_fixed_clips:
        fixed_clips = fixed_clips + discovered_fixed_clips(spec)
    cells = enumerate_cells(spec, fixed_clips)
    logger.info("sweep: %d cells (%d clip settings)", len(cells),
                len(spec.quantiles) + len(fixed_clips))
    cells_dir = None
    if out_dir is not None:
        cells_dir = os.path.join(out_dir, "cells")
        os.makedirs(cells_dir, exist_ok=True)
    results: dict[int, list[RoundRecord]] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_execute_cell, (cell, cells_dir)): cell for cell in cells}
            for future in as_completed(futures):
                cell = futures[future]
                try:
                    index, records = future.result()
                except Exception as exc:
                    raise RuntimeError(
                        f"sweep cell {cell.index} ({cell.setting} {cell.clip_param}, "
                        f"z={cell.noise_multiplier}, lr x{cell.lr_multiplier}) failed: {exc}"
                    ) from exc
                results[index] = records
    else:
        for cell in cells:
            index, records = _execute_cell((cell, cells_dir))
            results[index] = records
    rows = select_best(spec, cells, results)
    if out_dir is not None:
        with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as handle:
            handle.write(render_summary_csv(rows))
        write_run_json([], os.path.join(out_dir, "summary.json"), to_raw(spec.base), {
            "server_lr_multipliers": list(spec.server_lr_multipliers),
            "quantiles": list(spec.quantiles),
            "fixed_clips": list(fixed_clips),
            "noise_multipliers": list(spec.noise_multipliers),
            "rows": [
                {
                    "setting": r.setting,
                    "clip_param": r.clip_param,
                    "noise_multiplier": r.noise_multiplier,
                    "best_lr_multiplier": r.best_lr_multiplier,
                    "best_metric": None if math.isnan(r.best_metric) else r.best_metric,
                    "best_cell": r.best_cell,
                }
                for r in rows
            ],
        })
    return rows
