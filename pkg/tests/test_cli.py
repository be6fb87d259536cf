from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from chime_sim.cli import main
from chime_sim.engine import REPORT_CSV_COLUMNS


def _toy_run(model: Path, out: Path, *extra: str) -> int:
    return main(
        [
            "run",
            "--model",
            str(model),
            "--prompt-tokens",
            "4",
            "--image",
            "none",
            "--output-tokens",
            "3",
            "--out",
            str(out),
            *extra,
        ]
    )


def test_run_writes_report(tmp_path: Path, toy_model_file: Path) -> None:
    assert _toy_run(toy_model_file, tmp_path / "a", "--dump-plan", "--trace") == 0

    report = json.loads((tmp_path / "a" / "report.json").read_text(encoding="utf-8"))
    phase_columns = {"encode_ns", "connect_ns", "prefill_ns", "decode_ns"}
    assert set(REPORT_CSV_COLUMNS) - phase_columns <= set(report)
    assert report["model"] == "toy"
    assert report["policy"] == "Heterogeneous"
    assert report["throughput_token_per_s"] > 0
    assert (tmp_path / "a" / "plan.json").exists()
    trace = (tmp_path / "a" / "trace.jsonl").read_text(encoding="utf-8").splitlines()
    assert trace and json.loads(trace[0])["event"] == "start"
    with (tmp_path / "a" / "report.csv").open(encoding="utf-8") as handle:
        assert next(csv.reader(handle)) == list(REPORT_CSV_COLUMNS)


def test_rerun_and_plan_replay_are_byte_identical(tmp_path: Path, toy_model_file: Path) -> None:
    assert _toy_run(toy_model_file, tmp_path / "a", "--dump-plan") == 0
    assert _toy_run(toy_model_file, tmp_path / "b") == 0
    assert _toy_run(toy_model_file, tmp_path / "c", "--plan", str(tmp_path / "a" / "plan.json")) == 0

    first = (tmp_path / "a" / "report.json").read_bytes()
    assert (tmp_path / "b" / "report.json").read_bytes() == first
    assert (tmp_path / "c" / "report.json").read_bytes() == first


def test_exit_codes(tmp_path: Path, toy_model_file: Path) -> None:
    bad_config = tmp_path / "bad.json"
    bad_config.write_text(json.dumps({"model": str(toy_model_file), "bogus": 1}), encoding="utf-8")
    small_rram = tmp_path / "small-rram.json"
    small_rram.write_text(json.dumps({"name": "small", "rram": {"layers": 1, "layer_capacity_bytes": 40000}}), encoding="utf-8")

    assert main(["run", "--config", str(bad_config)]) == 2
    assert main(["run", "--out", str(tmp_path)]) == 2
    assert main(["run", "--model", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == 3
    assert _toy_run(toy_model_file, tmp_path / "cap", "--hw", str(small_rram)) == 4
    assert _toy_run(toy_model_file, tmp_path / "spill", "--hw", str(small_rram), "--ffn-overflow", "spill") == 0


def test_empty_sweep_writes_nothing(tmp_path: Path, toy_model_file: Path) -> None:
    code = main(
        ["sweep", "--model", str(toy_model_file), "--image", "none", "--axis", "seqlen", "--values", "", "--out", str(tmp_path / "s")]
    )

    assert code == 8
    assert not (tmp_path / "s" / "sweep.csv").exists()


def test_sweep_writes_csv_and_json(tmp_path: Path, toy_model_file: Path) -> None:
    out = tmp_path / "s"
    code = main(
        [
            "sweep",
            "--model",
            str(toy_model_file),
            "--image",
            "none",
            "--prompt-tokens",
            "4",
            "--axis",
            "seqlen",
            "--values",
            "2,3,oops",
            "--out",
            str(out),
        ]
    )

    assert code == 0
    with (out / "sweep.csv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["output_tokens"] for row in rows] == ["2", "3"]
    points = json.loads((out / "sweep.json").read_text(encoding="utf-8"))
    assert [point["value"] for point in points] == ["2", "3", "oops"]
    assert points[2]["report"] is None and points[2]["error"].startswith("ConfigError")


def test_compare(tmp_path: Path, toy_model_file: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert _toy_run(toy_model_file, tmp_path / "a") == 0
    report = str(tmp_path / "a" / "report.json")

    assert main(["compare", "--report", report, "--baseline", report, "--baseline", "jetson", "--out", str(tmp_path)]) == 0

    with (tmp_path / "comparison.csv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["baseline"] for row in rows] == ["report", "jetson"]
    assert float(rows[0]["speedup"]) == pytest.approx(1.0)
    assert "vs jetson" in capsys.readouterr().out
    assert main(["compare", "--report", report, "--baseline", "tpu"]) == 7


def test_figdata(tmp_path: Path, toy_model_file: Path) -> None:
    config = tmp_path / "toy-experiment.json"
    config.write_text(json.dumps({"model": "toy.json", "image": None, "prompt_tokens": 4}), encoding="utf-8")

    code = main(["figdata", "--figure", "fig9", "--configs", str(config), "--values", "2,4,8", "--out", str(tmp_path / "figs")])

    assert code == 0
    with (tmp_path / "figs" / "fig9.csv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    latencies = [float(row["latency_ms"]) for row in rows]
    assert [row["output_tokens"] for row in rows] == ["2", "4", "8"]
    assert latencies == sorted(latencies)


def _write(path: Path, data: dict) -> Path:
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.mark.parametrize(
    "experiment",
    [
        {"prompt_tokens": "4"},
        {"output_tokens": 3.5},
        {"image": ["512", 512]},
        {"ffn_overflow": "drop"},
        {"options": {"tensor_utilization": "high"}},
        {"options": {"kv_block_tokens": 16.5}},
        {"options": "fast"},
    ],
)
def test_wrongly_typed_experiment_values_exit_2(tmp_path: Path, toy_model_file: Path, experiment: dict) -> None:
    config = _write(tmp_path / "exp.json", {"model": "toy.json", "out_dir": str(tmp_path / "out"), **experiment})

    assert main(["run", "--config", str(config)]) == 2
    assert not (tmp_path / "out" / "report.json").exists()


def test_wrongly_typed_hardware_values_exit_2(tmp_path: Path, toy_model_file: Path) -> None:
    for section in ({"dram": {"tiers": "5"}}, {"rram": {"read_latency_ns": None}}, {"link": {"latency_ns": "20"}}):
        hw = _write(tmp_path / "hw.json", {"name": "typo", **section})
        assert _toy_run(toy_model_file, tmp_path / "typo", "--hw", str(hw)) == 2


def test_figdata_with_explicitly_empty_lists(tmp_path: Path, toy_model_file: Path) -> None:
    config = _write(tmp_path / "toy-experiment.json", {"model": "toy.json", "image": None, "prompt_tokens": 4})
    out = tmp_path / "figs"

    assert main(["figdata", "--figure", "fig7", "--configs", "--out", str(out)]) == 8
    assert main(["figdata", "--figure", "fig9", "--configs", str(config), "--values", "", "--out", str(out)]) == 8
    assert main(["figdata", "--figure", "fig9", "--configs", str(config), "--values", "2,x", "--out", str(out)]) == 2
    assert not (out / "fig7.csv").exists()
    assert not (out / "fig9.csv").exists()


def test_figdata_keeps_failed_runs_in_error_column(tmp_path: Path, toy_model_file: Path) -> None:
    _write(tmp_path / "small-rram.json", {"name": "small", "rram": {"layers": 1, "layer_capacity_bytes": 40000}})
    good = _write(tmp_path / "good.json", {"model": "toy.json", "image": None, "prompt_tokens": 4, "output_tokens": 3})
    bad = _write(
        tmp_path / "bad.json",
        {"model": "toy.json", "hw": "small-rram.json", "image": None, "prompt_tokens": 4, "output_tokens": 3},
    )

    code = main(["figdata", "--figure", "fig7", "--configs", str(good), str(bad), "--out", str(tmp_path / "figs")])

    assert code == 6
    with (tmp_path / "figs" / "fig7.csv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["model"] for row in rows] == ["toy", "toy"]
    assert rows[0]["error"] == "" and float(rows[0]["throughput_token_per_s"]) > 0
    assert rows[1]["error"].startswith("CapacityError")
    assert rows[1]["throughput_token_per_s"] == ""


def test_help_lists_exit_codes(capsys: pytest.CaptureFixture[str]) -> None:
    with pytest.raises(SystemExit):
        main(["--help"])

    out = " ".join(capsys.readouterr().out.split())
    assert "2 config" in out
    assert "8 empty" in out
