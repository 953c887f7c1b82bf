"""Metrics output: per-round CSV plus a JSON mirror with the config echo.

Floats are written with 17 significant digits so that parsing the file
recovers the exact binary values; two runs of the same config therefore
produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import os

from .config import RunConfig, resolved_data_seed
from .engine import RoundRecord, TrainResult

CSV_HEADER = (
    "round,clip_before,clip_after,frac_below_exact,frac_below_noisy,"
    "mean_preclip_norm,eval_loss,eval_metric,sampled_count"
)

_FLOAT_FIELDS = (
    "clip_before",
    "clip_after",
    "frac_below_exact",
    "frac_below_noisy",
    "mean_preclip_norm",
    "eval_loss",
    "eval_metric",
)


def format_float(value: float) -> str:
    return format(value, ".17g")


def render_csv(records: list[RoundRecord]) -> str:
    lines = [CSV_HEADER]
    for r in records:
        fields = [str(r.round_index)]
        fields += [format_float(getattr(r, name)) for name in _FLOAT_FIELDS]
        fields.append(str(r.sampled_count))
        lines.append(",".join(fields))
    return "\n".join(lines) + "\n"


def write_metrics_csv(records: list[RoundRecord], path: str) -> None:
    with open(path, "w", newline="") as handle:
        handle.write(render_csv(records))


def read_metrics_csv(path: str) -> list[RoundRecord]:
    """Parse a metrics CSV back into records (inverse of the writer)."""
    with open(path, newline="") as handle:
        lines = [line.rstrip("\n") for line in handle if line.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: not a metrics CSV (bad header)")
    records = []
    for line in lines[1:]:
        parts = line.split(",")
        records.append(
            RoundRecord(
                round_index=int(parts[0]),
                **{name: float(parts[1 + i]) for i, name in enumerate(_FLOAT_FIELDS)},
                sampled_count=int(parts[8]),
            )
        )
    return records


def _json_value(value: float):
    # NaN is not valid JSON; mirror it as null.
    return None if isinstance(value, float) and math.isnan(value) else value


def records_to_json(records: list[RoundRecord]) -> list[dict]:
    out = []
    for r in records:
        row = {"round": r.round_index, "sampled_count": r.sampled_count}
        row.update({name: _json_value(getattr(r, name)) for name in _FLOAT_FIELDS})
        out.append(row)
    return out


def write_run_json(
    records: list[RoundRecord], path: str, config_echo: dict, resolved: dict
) -> None:
    document = {
        "config": config_echo,
        "resolved": resolved,
        "records": records_to_json(records),
    }
    with open(path, "w") as handle:
        json.dump(document, handle, indent=2, sort_keys=True)
        handle.write("\n")


def resolved_summary(result: TrainResult, config: RunConfig) -> dict:
    """Derived quantities worth echoing next to the config: the actual
    noise split, population, and seeds that shaped the run."""
    return {
        "z_delta": result.privacy.z_delta,
        "sigma_b": result.privacy.sigma_b,
        "noise_multiplier": result.privacy.z,
        "shifted_bits": result.privacy.shifted_bits,
        "population": result.num_users,
        "expected_cohort": result.privacy.expected_cohort,
        "momentum": config.momentum,
        "data_seed": resolved_data_seed(config),
    }


def emit_metrics(
    records: list[RoundRecord], out_dir: str, config_echo: dict, resolved: dict, stem: str = "metrics"
) -> tuple[str, str]:
    """Write ``<stem>.csv`` and ``<stem>.json`` under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    json_path = os.path.join(out_dir, f"{stem}.json")
    write_metrics_csv(records, csv_path)
    write_run_json(records, json_path, config_echo, resolved)
    return csv_path, json_path
