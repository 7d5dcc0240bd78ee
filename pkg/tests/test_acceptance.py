"""Acceptance gate: one test per release criterion.

Each test exercises the corresponding subsystem end to end and registers a
PASS/FAIL line that conftest prints in the terminal summary. The scaling
study and the pipeline smoke test run the real CLI and dominate the suite's
wall clock; everything else is oracle comparisons at full tolerance.
"""

import functools
import itertools
import json

import numpy as np
import pytest
import torch
from click.testing import CliRunner

import conftest
import oracles
from generators import random_plan_doc
from planseg.cli import main
from planseg.inference import compute_tiling, ensemble, predict_volume
from planseg.metrics import aggregate, dice, evaluate_case, fp_fn_volumes
from planseg.networks import build_network, linearize
from planseg.plans import (
    PlanFile,
    RawConfiguration,
    diff_configurations,
    parse_plans,
    resolve_configuration,
    serialize_plans,
)
from planseg.topology import TopologyDescriptor, compute_receptive_field, plan_topology
from planseg.training import deep_supervision_weights, training_loss
from probes import finite_difference_worst_error, probe_receptive_field, two_stage_descriptor
from test_inference import constant_net, make_volume
from test_networks import random_topologies

torch.set_num_threads(1)

runner = CliRunner()


def criterion(name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                conftest.record_acceptance(name, False)
                raise
            conftest.record_acceptance(name, True)
        return wrapper
    return decorate


def run_cli(*args, expect=0):
    result = runner.invoke(main, [str(a) for a in args], catch_exceptions=False)
    assert result.exit_code == expect, result.output
    return result


@criterion("plans engine: 200-file round-trip + inheritance; single-line batch override diff")
def test_acceptance_plans_engine():
    rng = np.random.default_rng(1001)
    for _ in range(200):
        doc = random_plan_doc(rng)
        plan = parse_plans(json.dumps(doc))
        text = serialize_plans(plan)
        again = parse_plans(text)
        assert serialize_plans(again) == text
        for name in plan.configurations:
            assert resolve_configuration(plan, name) == resolve_configuration(again, name)

    # the one-key batch-size override resolves to exactly one differing field
    plan = parse_plans(json.dumps({
        "plans_name": "study",
        "configurations": {
            "bs2": {"patch_size": [16, 16, 16]},
            "bs80": {"inherits_from": "bs2", "batch_size": 80},
        },
    }))
    diff = diff_configurations(
        resolve_configuration(plan, "bs2"), resolve_configuration(plan, "bs80"))
    assert diff == [("batch_size", 2, 80)]


@criterion("tiling: 500 random triples match brute force; monotone in step fraction")
def test_acceptance_tiling():
    for image, patch, fraction, axis0 in [
        ((256, 200, 128), (128, 128, 128), 0.5, [0, 64, 128]),
        ((200, 256, 128), (128, 128, 128), 0.5, [0, 36, 72]),
    ]:
        plan = compute_tiling(image, patch, fraction)
        assert sorted({p[0] for p in plan.positions}) == axis0

    rng = np.random.default_rng(1002)
    for _ in range(500):
        image = tuple(int(rng.integers(8, 200)) for _ in range(3))
        patch = tuple(int(rng.integers(4, a + 1)) for a in image)
        fraction = float(rng.uniform(0.05, 1.0))
        plan = compute_tiling(image, patch, fraction)
        expected = list(itertools.product(
            *[oracles.axis_positions(i, p, fraction) for i, p in zip(image, patch)]))
        assert list(plan.positions) == expected
        assert oracles.coverage_ok(image, patch, plan.positions)
        fine = len(compute_tiling(image, patch, 0.5).positions)
        coarse = len(compute_tiling(image, patch, 0.6).positions)
        assert coarse <= fine


@criterion("metrics: dice and FPV/FNV match flood-fill oracle on 100 masks; conventions")
def test_acceptance_metrics():
    rng = np.random.default_rng(1003)
    for _ in range(100):
        shape = tuple(int(rng.integers(1, 17)) for _ in range(3))
        density = rng.choice([0.0, 0.05, 0.2, 0.5])
        pred = (rng.random(shape) < density).astype(np.uint8)
        gt = (rng.random(shape) < rng.choice([0.0, 0.05, 0.2, 0.5])).astype(np.uint8)
        spacing = tuple(float(rng.uniform(0.5, 3.0)) for _ in range(3))

        got = dice(pred, gt)
        denom = int(pred.sum()) + int(gt.sum())
        if denom == 0:
            assert got is None
        else:
            assert got == 2.0 * int((pred & gt).sum()) / denom
        assert dice(gt, pred) == got

        assert fp_fn_volumes(pred, gt, spacing) == oracles.fp_fn_volumes_oracle(pred, gt, spacing)

    # aggregation conventions on the two-case set: perfect + both-empty
    ones = np.ones((4, 4, 4), np.uint8)
    zeros = np.zeros((4, 4, 4), np.uint8)
    report = aggregate([
        evaluate_case("a", ones, ones, (1, 1, 1)),
        evaluate_case("b", zeros, zeros, (1, 1, 1)),
    ])
    assert report.mean_dice_challenge == 0.5
    assert report.mean_dice_nnunet == 1.0


@criterion("networks: shape invariants, finite-difference gradients, receptive field probe")
def test_acceptance_network_contracts():
    cases = random_topologies()
    assert len(cases) >= 10
    for i, (patch, topo) in enumerate(cases):
        net = build_network(topo, seed=i)
        x = torch.randn(1, topo.num_input_channels, *patch,
                        generator=torch.Generator().manual_seed(i))
        with torch.no_grad():
            outputs = net(x)
        levels = list(range(topo.num_stages)) if topo.deep_supervision else [0]
        assert len(outputs) == len(levels)
        cum = topo.cumulative_strides()
        for out, level in zip(outputs, levels):
            expected = tuple(p // c for p, c in zip(patch, cum[level]))
            assert out.shape == (1, topo.num_classes, *expected)

    # gradient of the training loss vs central differences on the tiny instance
    topo = two_stage_descriptor("plain", (2, 2))
    net = build_network(topo, seed=2).double()
    gen = torch.Generator().manual_seed(102)
    x = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64, generator=gen)
    labels = torch.randint(0, 2, (1, 8, 8, 8), generator=gen)
    worst = finite_difference_worst_error(
        net, lambda: training_loss(net(x), labels, deep_supervision_weights(1)),
        np.random.default_rng(2), samples=25,
    )
    assert worst < 1e-2, worst

    # receptive field recurrence against the impulse probe
    probed = 0
    for patch, topo in cases[:6]:
        assert probe_receptive_field(topo) == compute_receptive_field(topo)
        probed += 1
    for topo in (
        two_stage_descriptor("plain", (2, 2)),
        two_stage_descriptor("residual", (1, 1)),
        plan_topology((8, 8, 8), (1.0, 1.0, 1.0), "residual", 2, 2, features_base=4),
        plan_topology((12, 12, 12), (1.0, 1.0, 1.0), "plain", 2, 2, features_base=2),
    ):
        assert probe_receptive_field(topo) == compute_receptive_field(topo)
        probed += 1
    assert probed >= 10


@criterion("inference: TTA invariance, ensemble idempotence, tiling invariance, normalization")
def test_acceptance_inference_invariants():
    rng = np.random.default_rng(1005)

    # TTA on a mirror-equivariant (linear, stride-1) network
    topo = TopologyDescriptor(
        num_stages=2, features_per_stage=(4, 8),
        strides_per_stage=((1, 1, 1), (1, 1, 1)), kernel_sizes=((3, 3, 3), (3, 3, 3)),
        encoder_type="plain", blocks_per_stage_encoder=(2, 2), convs_per_stage_decoder=(2,),
        deep_supervision=False, num_input_channels=2, num_classes=2,
    )
    net = build_network(topo, seed=0)
    linearize(net, weight=0.05, keep_norm=False)
    vol = make_volume(tuple(rng.normal(size=(20, 24, 18)).astype(np.float32) for _ in range(2)))
    plain = predict_volume(net, vol, 0.5, (), (16, 16, 16))
    mirrored = predict_volume(net, vol, 0.5, (0, 1, 2), (16, 16, 16))
    assert np.abs(plain - mirrored).max() <= 1e-5

    # ensemble of identical members reproduces the member bitwise
    probs = rng.random((2, 9, 8, 7)).astype(np.float32)
    assert np.array_equal(ensemble([probs]), probs)
    assert np.array_equal(ensemble([probs, probs, probs]), probs)

    # constant network is invariant to tiling and gaussian blending
    cnet = constant_net()
    cvol = make_volume(tuple(rng.normal(size=(24, 20, 18)).astype(np.float32) for _ in range(2)))
    cprobs = predict_volume(cnet, cvol, 0.5, (0, 1, 2), (16, 16, 16))
    expected = torch.softmax(torch.tensor([0.3, 1.7]), 0).numpy()
    for c in range(2):
        assert np.abs(cprobs[c] - expected[c]).max() <= 1e-6

    # probabilities sum to one under mirroring and overlap
    rtopo = plan_topology((16, 16, 16), (1.0, 1.0, 1.0), "plain", 2, 2, features_base=4)
    rnet = build_network(rtopo, seed=1)
    rvol = make_volume(tuple(rng.normal(size=(20, 22, 26)).astype(np.float32) for _ in range(2)))
    rprobs = predict_volume(rnet, rvol, 0.5, (1, 2), (16, 16, 16))
    assert np.abs(rprobs.sum(axis=0) - 1.0).max() <= 1e-4


SCALING_BASE = {
    "features_base": 4,
    "num_epochs": 20,
    "mirror_axes": [],
    "inference_step_fraction": 1.0,
    "oversample_foreground_fraction": 0.5,
    "initial_learning_rate": 0.0003,
}

SCALING_CONFIGS = {
    "res_b2_p32": {**SCALING_BASE, "encoder_type": "residual", "batch_size": 2,
                   "patch_size": [32, 32, 32]},
    "res_b8_p32": {**SCALING_BASE, "encoder_type": "residual", "batch_size": 8,
                   "patch_size": [32, 32, 32]},
    "res_b2_p48": {**SCALING_BASE, "encoder_type": "residual", "batch_size": 2,
                   "patch_size": [48, 48, 48]},
    "plain_b8_p32": {**SCALING_BASE, "encoder_type": "plain", "batch_size": 8,
                     "patch_size": [32, 32, 32]},
}


@criterion("scaling study: batch/patch/encoder orderings hold for majority of 3 seeds")
def test_acceptance_scaling_study(tmp_path):
    plans_path = tmp_path / "plans.json"
    plans_path.write_text(json.dumps(
        {"plans_name": "scaling", "configurations": SCALING_CONFIGS}, indent=2))
    data_dir = tmp_path / "data"
    run_cli("generate", "--out", data_dir, "--seed", 0, "--patients", 20,
            "--cases", 24, "--shape", "64,64,64", "--lesions", "2,4")

    out = tmp_path / "study"
    run_cli(
        "experiment", "scaling", "--plans", plans_path,
        "--configs", ",".join(SCALING_CONFIGS), "--seeds", "0,1,2",
        "--data", data_dir, "--out", out, "--num-folds", 2, "--iterations", 20,
    )

    lines = (out / "scaling_results.csv").read_text().splitlines()
    assert len(lines) == 1 + 12
    scores = {}
    for line in lines[1:]:
        fields = line.split(",")
        assert fields[9] == "", line
        scores[(fields[0], int(fields[6]))] = float(fields[7])

    def majority(better, baseline):
        wins = sum(scores[(better, s)] >= scores[(baseline, s)] - 0.02 for s in (0, 1, 2))
        return wins >= 2

    assert majority("res_b8_p32", "res_b2_p32"), scores    # batch 8 vs batch 2
    assert majority("res_b2_p48", "res_b2_p32"), scores    # patch 48 vs patch 32
    assert majority("res_b8_p32", "plain_b8_p32"), scores  # residual vs plain
    assert (out / "plot_data.json").exists()
    assert (out / "scaling_study.png").stat().st_size > 0


@criterion("end-to-end smoke: generate -> 5-fold train -> 10-checkpoint ensemble -> evaluate")
def test_acceptance_end_to_end_smoke(tmp_path):
    plans_path = tmp_path / "plans.json"
    plans_path.write_text(json.dumps({
        "plans_name": "smoke",
        "configurations": {"smoke": {
            "patch_size": [16, 16, 16], "features_base": 2, "batch_size": 2,
            "num_epochs": 1, "mirror_axes": [], "inference_step_fraction": 1.0,
        }},
    }, indent=2))
    data_dir = tmp_path / "data"
    run_cli("generate", "--out", data_dir, "--seed", 3, "--patients", 8,
            "--cases", 10, "--shape", "32,32,32", "--lesions", "1,2")

    run_dir = tmp_path / "cv"
    run_cli("train", "--plans", plans_path, "--config", "smoke", "--data", data_dir,
            "--out", run_dir, "--seed", 0, "--all-folds", "--num-folds", 5,
            "--iterations", 4)
    checkpoints = sorted(
        str(p) for p in run_dir.glob("fold_*/checkpoint_*.ckpt")
        if p.name in ("checkpoint_best.ckpt", "checkpoint_final.ckpt")
    )
    assert len(checkpoints) == 10

    listing = json.loads((data_dir / "dataset.json").read_text())
    cases = sorted(entry["case_id"] for entry in listing["cases"])[:3]
    pred_dir = tmp_path / "preds"
    run_cli("ensemble", "--data", data_dir, "--cases", ",".join(cases),
            "--checkpoints", ",".join(checkpoints), "--step-fraction", 0.6,
            "--mirror-axes", "1,2", "--out", pred_dir)
    for case in cases:
        meta = json.loads((pred_dir / case / "prediction.json").read_text())
        assert len(meta["checkpoints"]) == 10
        assert meta["step_fraction"] == 0.6
        assert meta["mirror_axes"] == [1, 2]
        assert meta["wall_clock_seconds"] > 0  # logged, not enforced

    eval_dir = tmp_path / "eval"
    run_cli("evaluate", "--pred-dir", pred_dir, "--gt-dir", data_dir, "--out", eval_dir)
    report = json.loads((eval_dir / "eval_report.json").read_text())
    assert len(report["cases"]) == 3
    assert 0.0 <= report["mean_dice_challenge"] <= 1.0
    for case in report["cases"]:
        assert set(case) >= {"case_id", "dice", "fp_volume_ml", "fn_volume_ml",
                             "gt_empty", "pred_empty"}
    assert (eval_dir / "eval_report.csv").exists()
    assert (eval_dir / "eval_report.png").stat().st_size > 0
