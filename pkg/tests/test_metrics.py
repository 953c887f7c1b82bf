"""Metrics files: exact-round-trip CSV and the JSON mirror."""

import json
import math

import pytest

from dpfedsim.config import to_raw, validate_config
from dpfedsim.engine import RoundRecord, train
from dpfedsim.metrics import (
    CSV_HEADER,
    emit_metrics,
    format_float,
    read_metrics_csv,
    records_to_json,
    render_csv,
    resolved_summary,
    write_metrics_csv,
    write_run_json,
)

GOLDEN_RAW = {
    "task": {"kind": "synthetic", "num_users": 10, "examples_per_user": [6, 6],
             "input_dim": 3, "spread": 2.0},
    "model": {"kind": "linear", "input_dim": 3},
    "rounds": 3,
    "sample_prob": 0.5,
    "noise_multiplier": 0.1,
    "master_seed": 77,
    "eval_period": 1,
    "eval_fraction": 0.2,
}

# Recorded once from the run above and frozen byte for byte.
GOLDEN_CSV = (
    "round,clip_before,clip_after,frac_below_exact,frac_below_noisy,"
    "mean_preclip_norm,eval_loss,eval_metric,sampled_count\n"
    "0,0.10000000000000001,0.10372821795589518,0,0.31697998166192792,"
    "0.18336669069981704,0.4060358083128438,0.81207161662568761,2\n"
    "1,0.10372821795589518,0.10252802381055062,0.66666666666666663,"
    "0.55819012707639148,0.07946173825718629,0.40265056572746316,"
    "0.80530113145492632,3\n"
    "2,0.10252802381055062,0.10650833595176337,0,0.30956455153242735,"
    "0.16108204044673319,0.39766401927587969,0.79532803855175938,2\n"
)


def sample_record(**overrides):
    fields = dict(
        round_index=4,
        clip_before=0.1,
        clip_after=0.1 * math.exp(-0.02),
        frac_below_exact=0.625,
        frac_below_noisy=0.6,
        mean_preclip_norm=1.0 / 3.0,
        eval_loss=math.nan,
        eval_metric=math.nan,
        sampled_count=8,
    )
    fields.update(overrides)
    return RoundRecord(**fields)


class TestFloatFormat:
    def test_17_digits_round_trip(self):
        for value in (0.1, 1.0 / 3.0, math.pi, 1e-300, 123456.789, 5e-324):
            assert float(format_float(value)) == value

    def test_integral_floats_stay_short(self):
        assert format_float(0.0) == "0"
        assert format_float(1.0) == "1"


class TestCsv:
    def test_header_exact(self):
        assert CSV_HEADER == (
            "round,clip_before,clip_after,frac_below_exact,frac_below_noisy,"
            "mean_preclip_norm,eval_loss,eval_metric,sampled_count"
        )

    def test_empty_records_is_header_only(self):
        assert render_csv([]) == CSV_HEADER + "\n"

    def test_single_record_layout(self):
        text = render_csv([sample_record()])
        lines = text.splitlines()
        assert len(lines) == 2
        parts = lines[1].split(",")
        assert parts[0] == "4"
        assert parts[-1] == "8"
        assert float(parts[1]) == 0.1
        assert parts[6] == "nan"

    def test_write_read_round_trip_exact(self, tmp_path):
        records = [
            sample_record(),
            sample_record(round_index=5, clip_before=1.0 / 7.0, eval_loss=0.25,
                          eval_metric=0.75, sampled_count=0),
        ]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(records, str(path))
        back = read_metrics_csv(str(path))
        assert len(back) == 2
        for original, parsed in zip(records, back):
            assert parsed.round_index == original.round_index
            assert parsed.sampled_count == original.sampled_count
            for name in ("clip_before", "clip_after", "frac_below_exact",
                         "frac_below_noisy", "mean_preclip_norm"):
                assert getattr(parsed, name) == getattr(original, name)
        assert math.isnan(back[0].eval_loss)
        assert back[1].eval_loss == 0.25

    def test_reader_rejects_foreign_files(self, tmp_path):
        path = tmp_path / "other.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError, match="header"):
            read_metrics_csv(str(path))

    def test_golden_run_csv_bytes(self):
        result = train(validate_config(GOLDEN_RAW))
        assert render_csv(result.records) == GOLDEN_CSV

    def test_rerender_is_byte_identical(self, tmp_path):
        result = train(validate_config(GOLDEN_RAW))
        first = tmp_path / "a.csv"
        second = tmp_path / "b.csv"
        write_metrics_csv(result.records, str(first))
        write_metrics_csv(train(validate_config(GOLDEN_RAW)).records, str(second))
        assert first.read_bytes() == second.read_bytes()

    def test_csv_parse_recovers_exact_binary_values(self, tmp_path):
        result = train(validate_config(GOLDEN_RAW))
        path = tmp_path / "metrics.csv"
        write_metrics_csv(result.records, str(path))
        assert read_metrics_csv(str(path)) == result.records


class TestJson:
    def test_nan_becomes_null(self):
        rows = records_to_json([sample_record()])
        assert rows[0]["eval_loss"] is None
        assert rows[0]["eval_metric"] is None
        assert rows[0]["frac_below_exact"] == 0.625

    def test_run_json_document_shape(self, tmp_path):
        config = validate_config(GOLDEN_RAW)
        result = train(config)
        path = tmp_path / "metrics.json"
        resolved = resolved_summary(result, config)
        write_run_json(result.records, str(path), to_raw(config), resolved)
        document = json.loads(path.read_text())
        assert set(document) == {"config", "resolved", "records"}
        assert len(document["records"]) == 3
        assert document["records"][0]["round"] == 0
        assert document["resolved"]["population"] == 10
        assert document["resolved"]["expected_cohort"] == 5.0
        # The echoed config replays to the identical run.
        replay = train(validate_config(document["config"]))
        assert replay.records == result.records

    def test_resolved_summary_reports_noise_split(self):
        config = validate_config(GOLDEN_RAW)
        result = train(config)
        resolved = resolved_summary(result, config)
        assert resolved["noise_multiplier"] == 0.1
        assert resolved["sigma_b"] == 0.25  # q*n/20 = 5/20
        assert resolved["z_delta"] > 0.1
        assert resolved["data_seed"] == 77
        assert resolved["momentum"] == 0.9

    def test_json_is_strict(self, tmp_path):
        """No NaN literals leak into the file."""
        config = validate_config(GOLDEN_RAW)
        result = train(config)
        path = tmp_path / "metrics.json"
        write_run_json(result.records, str(path),
                       to_raw(config), resolved_summary(result, config))
        json.loads(path.read_text(), parse_constant=lambda name: pytest.fail(name))


class TestEmit:
    def test_emit_writes_both_files(self, tmp_path):
        config = validate_config(GOLDEN_RAW)
        result = train(config)
        out = tmp_path / "run1"
        csv_path, json_path = emit_metrics(
            result.records, str(out), to_raw(config),
            resolved_summary(result, config),
        )
        assert csv_path.endswith("metrics.csv")
        assert json_path.endswith("metrics.json")
        assert (out / "metrics.csv").read_text() == GOLDEN_CSV
        assert json.loads((out / "metrics.json").read_text())["records"]

    def test_emit_custom_stem(self, tmp_path):
        csv_path, json_path = emit_metrics([], str(tmp_path), {}, {}, stem="cell_003")
        assert csv_path.endswith("cell_003.csv")
        assert (tmp_path / "cell_003.csv").read_text() == CSV_HEADER + "\n"
