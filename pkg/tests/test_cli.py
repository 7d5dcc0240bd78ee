"""End-to-end exercises of the command line entry points.

Everything runs through click's CliRunner against real temp directories, so
these tests double as the pipeline smoke test: generate -> train -> predict
-> evaluate, plus the scaling experiment. Volumes are 32^3 with 16^3 patches
to keep each invocation in the seconds range.
"""

import json
import struct

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from planseg.cli import main
from planseg.data import load_dataset
from planseg.plans import (
    DERIVED_FIELDS,
    PlanFile,
    RawConfiguration,
    load_plans,
    resolve_configuration,
    serialize_plans,
)
from planseg.topology import descriptor_from_config

torch.set_num_threads(1)

runner = CliRunner()


def run_cli(*args, env=None, expect=0):
    result = runner.invoke(main, [str(a) for a in args], env=env, catch_exceptions=False)
    if expect is not None:
        assert result.exit_code == expect, result.output
    return result


PLANS_DOC = {
    "plans_name": "cli_suite",
    "configurations": {
        "tiny": {
            "patch_size": [16, 16, 16],
            "features_base": 2,
            "batch_size": 2,
            "num_epochs": 1,
            "mirror_axes": [],
            "inference_step_fraction": 1.0,
            "oversample_foreground_fraction": 0.5,
        },
        "tiny_b4": {"inherits_from": "tiny", "batch_size": 4},
        "bs80": {"inherits_from": "tiny", "batch_size": 80},
    },
}


@pytest.fixture(scope="module")
def plans_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("plans") / "plans.json"
    path.write_text(json.dumps(PLANS_DOC, indent=2))
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "mini"
    result = run_cli(
        "generate", "--out", out, "--seed", 0, "--patients", 6, "--cases", 8,
        "--shape", "32,32,32", "--lesions", "1,2",
    )
    assert "wrote 8 cases" in result.output
    return out


@pytest.fixture(scope="module")
def train_out(tmp_path_factory, plans_path, data_dir):
    out = tmp_path_factory.mktemp("runs") / "tiny_run"
    run_cli(
        "train", "--plans", plans_path, "--config", "tiny", "--data", data_dir,
        "--out", out, "--seed", 0, "--fold", 0, "--iterations", 2,
    )
    return out


@pytest.fixture(scope="module")
def pred_dir(tmp_path_factory, data_dir, train_out):
    out = tmp_path_factory.mktemp("preds") / "single"
    run_cli(
        "predict", "--data", data_dir,
        "--checkpoints", train_out / "fold_0" / "checkpoint_final.ckpt",
        "--step-fraction", "1.0", "--mirror-axes", "", "--out", out,
    )
    return out


def test_plan_resolve_prints_plans_json(plans_path):
    result = run_cli("plan", "--plans", plans_path, "--config", "tiny")
    config = resolve_configuration(load_plans(plans_path), "tiny")
    body = config.to_dict()
    for key in DERIVED_FIELDS:
        body.pop(key)
    expected = serialize_plans(PlanFile("cli_suite", {"tiny": RawConfiguration(None, body)}))
    assert result.output == expected
    # and the printout is itself a loadable plans document
    doc = json.loads(result.output)
    assert doc["configurations"]["tiny"]["batch_size"] == 2


def test_plan_derive_includes_topology_fields(plans_path):
    result = run_cli("plan", "--plans", plans_path, "--config", "tiny", "--derive")
    body = json.loads(result.output)["configurations"]["tiny"]
    config = resolve_configuration(load_plans(plans_path), "tiny")
    desc = descriptor_from_config(config)
    assert body["strides_per_stage"] == [list(s) for s in desc.strides_per_stage]
    assert body["kernel_sizes"] == [list(k) for k in desc.kernel_sizes]
    assert body["blocks_per_stage_encoder"] == list(desc.blocks_per_stage_encoder)
    assert len(body["strides_per_stage"]) == 3  # 16^3 patch plans 3 stages


def test_plan_diff_is_one_line_per_field(plans_path):
    result = run_cli("plan", "--plans", plans_path, "--config", "tiny", "--diff", "bs80")
    lines = result.output.splitlines()
    assert lines == ["batch_size: 2 -> 80"]


def test_plan_unknown_config_exits_validation(plans_path):
    result = run_cli("plan", "--plans", plans_path, "--config", "nope", expect=2)
    assert "nope" in result.output


def test_plan_set_overrides_key(plans_path):
    result = run_cli(
        "plan", "--plans", plans_path, "--config", "tiny", "--set", "batch_size=8",
    )
    assert json.loads(result.output)["configurations"]["tiny"]["batch_size"] == 8

    result = run_cli(
        "plan", "--plans", plans_path, "--config", "tiny", "--set", "bogus=1", expect=2,
    )
    assert "bogus" in result.output


def test_plan_write_back_materializes_config(plans_path, tmp_path):
    target = tmp_path / "resolved.json"
    run_cli(
        "plan", "--plans", plans_path, "--config", "tiny",
        "--set", "batch_size=8", "--write-back", target,
    )
    reloaded = resolve_configuration(load_plans(target), "tiny")
    assert reloaded.batch_size == 8
    assert reloaded.patch_size == (16, 16, 16)


def test_generate_dataset_layout(data_dir):
    volumes = load_dataset(data_dir)
    assert len(volumes) == 8
    assert len({v.patient_id for v in volumes}) == 6
    for vol in volumes:
        assert vol.channels[0].shape == (32, 32, 32)
        assert vol.segmentation.any()  # lesion range starts at 1
    assert (data_dir / "dataset.json").exists()


def test_train_fold_outputs(train_out):
    fold_dir = train_out / "fold_0"
    for name in ("checkpoint_final.ckpt", "checkpoint_latest.ckpt", "checkpoint_best.ckpt"):
        assert (fold_dir / name).exists()
    records = [json.loads(line) for line in (fold_dir / "training_log.jsonl").read_text().splitlines()]
    assert len(records) == 1
    assert records[0]["epoch"] == 0
    assert records[0]["divergence_flag"] is False


def test_predict_writes_prediction_bundle(pred_dir, data_dir):
    volumes = load_dataset(data_dir)
    case_dir = pred_dir / volumes[0].case_id
    raw = (case_dir / "probabilities.raw").read_bytes()
    assert len(raw) == 2 * 32 ** 3 * 4
    # class-major blocks, each Fortran ordered; sums to one voxelwise
    per_class = [
        np.frombuffer(raw[c * 32 ** 3 * 4:(c + 1) * 32 ** 3 * 4], dtype="<f4").reshape(
            (32, 32, 32), order="F")
        for c in range(2)
    ]
    np.testing.assert_allclose(per_class[0] + per_class[1], 1.0, atol=1e-4)

    seg = np.frombuffer((case_dir / "segmentation.raw").read_bytes(), dtype=np.uint8)
    assert seg.size == 32 ** 3
    assert set(np.unique(seg)) <= {0, 1}

    meta = json.loads((case_dir / "prediction.json").read_text())
    assert meta["case_id"] == volumes[0].case_id
    assert meta["config_name"] == "tiny"
    assert len(meta["checkpoints"]) == 1
    assert meta["step_fraction"] == 1.0
    assert meta["mirror_axes"] == []
    assert meta["wall_clock_seconds"] > 0


def test_ensemble_alias_ten_checkpoints(tmp_path, data_dir, train_out, pred_dir):
    final = train_out / "fold_0" / "checkpoint_final.ckpt"
    members = []
    for i in range(10):
        member = tmp_path / f"ens{i}.ckpt"
        member.write_bytes(final.read_bytes())
        members.append(str(member))

    volumes = load_dataset(data_dir)
    case = volumes[0].case_id
    out = tmp_path / "ens_out"
    run_cli(
        "ensemble", "--data", data_dir, "--cases", case,
        "--checkpoints", ",".join(members),
        "--step-fraction", "1.0", "--mirror-axes", "", "--out", out,
    )
    meta = json.loads((out / case / "prediction.json").read_text())
    assert len(meta["checkpoints"]) == 10
    assert len(set(meta["checkpoints"])) == 10

    # averaging ten identical members must reproduce the single-model output
    ens_bytes = (out / case / "probabilities.raw").read_bytes()
    single_bytes = (pred_dir / case / "probabilities.raw").read_bytes()
    assert ens_bytes == single_bytes


def test_evaluate_report_outputs(tmp_path, pred_dir, data_dir):
    out = tmp_path / "eval"
    result = run_cli("evaluate", "--pred-dir", pred_dir, "--gt-dir", data_dir, "--out", out)
    assert "evaluated 8 cases" in result.output

    report = json.loads((out / "eval_report.json").read_text())
    assert len(report["cases"]) == 8
    assert 0.0 <= report["mean_dice_challenge"] <= 1.0
    for case in report["cases"]:
        assert case["fp_volume_ml"] >= 0.0
        assert case["fn_volume_ml"] >= 0.0

    csv_lines = (out / "eval_report.csv").read_text().splitlines()
    assert len(csv_lines) == 1 + 8
    assert (out / "eval_report.png").stat().st_size > 0


def test_evaluate_without_matches_fails(tmp_path, data_dir):
    empty = tmp_path / "no_preds"
    empty.mkdir()
    result = run_cli("evaluate", "--pred-dir", empty, "--gt-dir", data_dir,
                     "--out", tmp_path / "eval", expect=1)
    assert "no predictions" in result.output


def test_workers_env_var(tmp_path, plans_path, data_dir, train_out):
    final = train_out / "fold_0" / "checkpoint_final.ckpt"
    volumes = load_dataset(data_dir)
    run_cli(
        "predict", "--data", data_dir, "--cases", volumes[0].case_id,
        "--checkpoints", final, "--step-fraction", "1.0", "--mirror-axes", "",
        "--out", tmp_path / "out",
        env={"PLANSEG_NUM_WORKERS": "2"},
    )
    result = run_cli(
        "predict", "--data", data_dir, "--cases", volumes[0].case_id,
        "--checkpoints", final, "--step-fraction", "1.0", "--mirror-axes", "",
        "--out", tmp_path / "out2",
        env={"PLANSEG_NUM_WORKERS": "soup"}, expect=2,
    )
    assert "--workers" in result.output


def test_scaling_study_outputs(tmp_path, plans_path, data_dir):
    out = tmp_path / "study"
    result = run_cli(
        "experiment", "scaling", "--plans", plans_path, "--configs", "tiny,tiny_b4",
        "--seeds", "0", "--data", data_dir, "--out", out,
        "--num-folds", 2, "--iterations", 2,
    )
    assert "2 cells" in result.output

    csv_lines = (out / "scaling_results.csv").read_text().splitlines()
    assert csv_lines[0].startswith("config,encoder,batch,")
    assert len(csv_lines) == 3
    for line, name, batch in zip(csv_lines[1:], ["tiny", "tiny_b4"], [2, 4]):
        fields = line.split(",")
        assert fields[0] == name
        assert fields[1] == "plain"
        assert int(fields[2]) == batch
        assert 0.0 <= float(fields[7]) <= 1.0  # dice_challenge populated
        assert fields[9] == ""  # no error

    plot_data = json.loads((out / "plot_data.json").read_text())
    points = [p for series in plot_data["series"] for p in series["points"]]
    assert {p["batch"] for p in points} == {2, 4}
    assert (out / "scaling_study.png").stat().st_size > 0
    # per-cell cross-validation artifacts land under the study directory
    assert (out / "tiny_seed0" / "fold_0" / "checkpoint_final.ckpt").exists()


def test_scaling_empty_grid_fails(tmp_path, plans_path, data_dir):
    result = run_cli(
        "experiment", "scaling", "--plans", plans_path, "--configs", ",",
        "--seeds", "0", "--data", data_dir, "--out", tmp_path / "study", expect=2,
    )
    assert "empty experiment grid" in result.output


def test_commands_write_only_under_out(tmp_path, monkeypatch, plans_path):
    scratch = tmp_path / "cwd"
    scratch.mkdir()
    monkeypatch.chdir(scratch)
    out = tmp_path / "gen"
    run_cli("generate", "--out", out, "--seed", 1, "--patients", 2,
            "--shape", "32,32,32", "--lesions", "0,1")
    run_cli("plan", "--plans", plans_path, "--config", "tiny")
    assert list(scratch.iterdir()) == []
