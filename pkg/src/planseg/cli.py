"""Command-line surface: plan, generate, train, predict/ensemble, evaluate,
experiment scaling.

Every command is deterministic under --seed in single-worker mode and writes
only below its --out directory. Validation failures exit with code 2.
"""

from __future__ import annotations

import csv
import json
import time
from pathlib import Path

import click
import torch

from . import data, figures, inference, metrics, training
from .checkpoint import load_checkpoint, restore_network
from .data import NormalizationStats
from .plans import (
    DERIVED_FIELDS,
    SCHEMA_FIELDS,
    PlanFile,
    PlansError,
    RawConfiguration,
    load_plans,
    resolve_configuration,
    diff_configurations,
    save_plans,
    serialize_plans,
)

VALIDATION_EXIT = 2


def _fail(message: str, code: int = VALIDATION_EXIT):
    click.echo(f"error: {message}", err=True)
    raise SystemExit(code)


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip() != "")


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip() != "")


workers_option = click.option(
    "--workers", type=int, default=1, envvar="PLANSEG_NUM_WORKERS", show_default=True,
    help="compute threads (defaults from PLANSEG_NUM_WORKERS)",
)


@click.group()
def main():
    """Plans-file-driven 3D segmentation workbench."""


@main.command("plan")
@click.option("--plans", "plans_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_name", required=True, help="configuration name to resolve")
@click.option("--derive", is_flag=True, help="include planner-derived topology fields in the output")
@click.option("--diff", "diff_name", default=None, help="print field diffs against another configuration")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="override a key before resolving (repeatable)")
@click.option("--write-back", type=click.Path(dir_okay=False), default=None,
              help="write the materialized configuration into this plans file")
def cmd_plan(plans_path, config_name, derive, diff_name, overrides, write_back):
    """Resolve and validate a configuration; print it as plans JSON."""
    try:
        plan_file = load_plans(plans_path)
        if overrides:
            raw = plan_file.configurations.setdefault(config_name, RawConfiguration())
            for item in overrides:
                if "=" not in item:
                    _fail(f"--set expects KEY=VALUE, got {item!r}")
                key, text = item.split("=", 1)
                if key not in SCHEMA_FIELDS:
                    _fail(f"unknown configuration key {key!r}")
                try:
                    value = json.loads(text)
                except json.JSONDecodeError:
                    value = text
                raw.overrides[key] = value

        if diff_name is not None:
            a = resolve_configuration(plan_file, config_name)
            b = resolve_configuration(plan_file, diff_name)
            for field_name, va, vb in diff_configurations(a, b):
                click.echo(f"{field_name}: {va!r} -> {vb!r}")
            return

        config = resolve_configuration(plan_file, config_name)
        body = config.to_dict()
        if not derive:
            for k in DERIVED_FIELDS:
                body.pop(k, None)
        printed = serialize_plans(
            PlanFile(plan_file.plans_name, {config_name: RawConfiguration(None, body)})
        )
        click.echo(printed, nl=False)
        if write_back:
            plan_file.configurations[config_name] = RawConfiguration(None, body)
            save_plans(plan_file, write_back)
    except PlansError as e:
        _fail(str(e))


@main.command("generate")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--patients", type=int, default=8, show_default=True)
@click.option("--cases", type=int, default=None, help="total cases (default: one per patient)")
@click.option("--shape", default="64,64,64", show_default=True)
@click.option("--lesions", default="0,3", show_default=True, help="lesion count range LO,HI")
@click.option("--spacing", default="1.0,1.0,1.0", show_default=True)
def cmd_generate(out, seed, patients, cases, shape, lesions, spacing):
    """Write a synthetic MVOL dataset."""
    try:
        spec = {"total": cases} if cases is not None else 1
        volumes = data.generate_synthetic_dataset(
            patients, spec, _parse_ints(shape), _parse_ints(lesions), seed,
            spacing=_parse_floats(spacing),
        )
        data.save_dataset(out, volumes)
    except (data.ParameterError, ValueError) as e:
        _fail(str(e))
    n_empty = sum(1 for v in volumes if not v.segmentation.any())
    click.echo(f"wrote {len(volumes)} cases ({patients} patients, {n_empty} empty) to {out}")


def _resolve_or_fail(plans_path, config_name):
    try:
        return resolve_configuration(load_plans(plans_path), config_name)
    except PlansError as e:
        _fail(str(e))


@main.command("train")
@click.option("--plans", "plans_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_name", required=True)
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--fold", type=int, default=None, help="train a single fold")
@click.option("--all-folds", is_flag=True, help="run full cross-validation")
@click.option("--num-folds", type=int, default=5, show_default=True)
@click.option("--iterations", type=int, default=training.DEFAULT_ITERATIONS_PER_EPOCH,
              show_default=True, help="optimizer steps per epoch")
@click.option("--resume", "resume_from", type=click.Path(exists=True, dir_okay=False), default=None)
@workers_option
def cmd_train(plans_path, config_name, data_dir, out, seed, fold, all_folds,
              num_folds, iterations, resume_from, workers):
    """Train one fold or the full cross-validation."""
    torch.set_num_threads(max(1, workers))
    config = _resolve_or_fail(plans_path, config_name)
    try:
        dataset = data.load_dataset(data_dir)
    except data.MVOLFormatError as e:
        _fail(str(e))
    out = Path(out)

    if all_folds:
        result = training.run_cross_validation(
            config, dataset, seed, out, num_folds=num_folds, iterations_per_epoch=iterations,
        )
        (out / "cv_result.json").write_text(json.dumps(result.to_json(), indent=2) + "\n")
        metrics.save_report(result.report, out / "eval_report.json", out / "eval_report.csv")
        figures.render_eval_figure(result.report, out / "eval_report.png")
        click.echo(
            f"cv done: challenge dice {result.report.mean_dice_challenge:.4f}, "
            f"nnunet dice {result.report.mean_dice_nnunet}"
        )
        return

    if fold is None:
        _fail("pass --fold K or --all-folds")
    try:
        assignment = data.assign_folds(dataset, num_folds, seed)
        state = training.train_fold(
            config, dataset, assignment, fold, seed, out / f"fold_{fold}",
            iterations_per_epoch=iterations, resume_from=resume_from,
            config_name=config_name,
        )
    except (data.AssignmentError, PlansError, ValueError) as e:
        _fail(str(e))
    click.echo(
        f"fold {fold}: {state.epoch} epochs, best val dice {state.best_validation_dice:.4f}, "
        f"final checkpoint {state.final_checkpoint}"
    )


@main.command("predict")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--cases", default=None, help="comma-separated case ids (default: all)")
@click.option("--checkpoints", required=True, help="comma-separated checkpoint paths to ensemble")
@click.option("--step-fraction", type=float, default=0.5, show_default=True)
@click.option("--mirror-axes", default="0,1,2", show_default=True,
              help="comma-separated axes; empty string disables mirroring")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@workers_option
def cmd_predict(data_dir, cases, checkpoints, step_fraction, mirror_axes, out, workers):
    """Sliding-window ensemble prediction over listed checkpoints."""
    torch.set_num_threads(max(1, workers))
    ckpt_paths = [p.strip() for p in checkpoints.split(",") if p.strip()]
    if not ckpt_paths:
        _fail("--checkpoints lists no files")
    mirrors = _parse_ints(mirror_axes)

    try:
        models = []
        for p in ckpt_paths:
            ck = load_checkpoint(p)
            models.append((ck, restore_network(ck)))
        volumes = data.load_dataset(data_dir)
    except (OSError, ValueError) as e:
        _fail(str(e))

    if cases is not None:
        wanted = {c.strip() for c in cases.split(",") if c.strip()}
        missing = wanted - {v.case_id for v in volumes}
        if missing:
            _fail(f"cases not in dataset: {sorted(missing)}")
        volumes = [v for v in volumes if v.case_id in wanted]

    out = Path(out)
    for vol in volumes:
        t0 = time.monotonic()
        maps = []
        for ck, net in models:
            stats = NormalizationStats.from_json(ck.extra["normalization_stats"])
            normed = data.normalize(vol, stats)
            patch_size = tuple(ck.extra["config"]["patch_size"])
            try:
                maps.append(
                    inference.predict_volume(net, normed, step_fraction, mirrors, patch_size)
                )
            except inference.ParameterError as e:
                _fail(str(e))
        probs = inference.ensemble(maps)
        seg = inference.segment(probs)
        meta = {
            "case_id": vol.case_id,
            "config_name": models[0][0].extra.get("config_name", ""),
            "checkpoints": [Path(p).as_posix() for p in ckpt_paths],
            "step_fraction": step_fraction,
            "mirror_axes": list(mirrors),
            "wall_clock_seconds": time.monotonic() - t0,
        }
        inference.save_prediction(out, vol.case_id, probs, seg, meta)
        click.echo(f"{vol.case_id}: {meta['wall_clock_seconds']:.2f}s, "
                   f"{int(seg.sum())} foreground voxels")
    click.echo(f"predicted {len(volumes)} cases with {len(ckpt_paths)} models -> {out}")


@main.command("evaluate")
@click.option("--pred-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
def cmd_evaluate(pred_dir, gt_dir, out):
    """Compare predictions against ground truth; write the EvalReport."""
    try:
        gt_volumes = data.load_dataset(gt_dir)
    except data.MVOLFormatError as e:
        _fail(str(e))
    case_metrics = []
    for vol in gt_volumes:
        case_dir = Path(pred_dir) / vol.case_id
        if not (case_dir / "segmentation.raw").exists():
            continue
        pred = inference.load_prediction_segmentation(case_dir, vol.shape)
        case_metrics.append(metrics.evaluate_case(vol.case_id, pred, vol.segmentation, vol.spacing))
    if not case_metrics:
        _fail(f"no predictions under {pred_dir} match cases in {gt_dir}", code=1)

    report = metrics.aggregate(case_metrics)
    out = Path(out)
    metrics.save_report(report, out / "eval_report.json", out / "eval_report.csv")
    figures.render_eval_figure(report, out / "eval_report.png")
    nn = "undefined" if report.mean_dice_nnunet is None else f"{report.mean_dice_nnunet:.4f}"
    click.echo(
        f"evaluated {len(case_metrics)} cases: challenge dice {report.mean_dice_challenge:.4f}, "
        f"nnunet dice {nn}, fp {report.mean_fp_volume:.4f} ml, fn {report.mean_fn_volume:.4f} ml"
    )


@main.group("experiment")
def cmd_experiment():
    """Multi-configuration studies."""


CSV_COLUMNS = ["config", "encoder", "batch", "patch_x", "patch_y", "patch_z",
               "seed", "dice_challenge", "dice_nnunet", "error"]


def _write_rows(rows: list[dict], csv_path: Path) -> None:
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({
                "config": r["config"],
                "encoder": r["encoder"],
                "batch": r["batch"],
                "patch_x": r["patch"][0],
                "patch_y": r["patch"][1],
                "patch_z": r["patch"][2],
                "seed": r["seed"],
                "dice_challenge": "" if r["dice_challenge"] is None else f"{r['dice_challenge']:.6f}",
                "dice_nnunet": "" if r["dice_nnunet"] is None else f"{r['dice_nnunet']:.6f}",
                "error": r.get("error", ""),
            })


@cmd_experiment.command("scaling")
@click.option("--plans", "plans_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--configs", required=True, help="comma-separated configuration names")
@click.option("--seeds", default="0", show_default=True, help="comma-separated seeds")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--num-folds", type=int, default=5, show_default=True)
@click.option("--iterations", type=int, default=training.DEFAULT_ITERATIONS_PER_EPOCH, show_default=True)
@workers_option
def cmd_scaling(plans_path, configs, seeds, data_dir, out, num_folds, iterations, workers):
    """Cross-validate each configuration x seed; emit CSV, plot data, and a figure."""
    torch.set_num_threads(max(1, workers))
    names = [n.strip() for n in configs.split(",") if n.strip()]
    seed_list = list(_parse_ints(seeds))
    if not names or not seed_list:
        _fail("empty experiment grid")

    try:
        plan_file = load_plans(plans_path)
        resolved = {n: resolve_configuration(plan_file, n) for n in names}
        dataset = data.load_dataset(data_dir)
    except (PlansError, data.MVOLFormatError) as e:
        _fail(str(e))

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "scaling_results.csv"

    rows = []
    failures = 0
    for name in names:
        config = resolved[name]
        for seed in seed_list:
            row = {
                "config": name,
                "encoder": config.encoder_type,
                "batch": config.batch_size,
                "patch": list(config.patch_size),
                "seed": seed,
                "dice_challenge": None,
                "dice_nnunet": None,
            }
            t0 = time.monotonic()
            try:
                result = training.run_cross_validation(
                    config, dataset, seed, out / f"{name}_seed{seed}",
                    num_folds=num_folds, iterations_per_epoch=iterations,
                )
                row["dice_challenge"] = result.report.mean_dice_challenge
                row["dice_nnunet"] = result.report.mean_dice_nnunet
                click.echo(f"{name} seed {seed}: challenge dice {row['dice_challenge']:.4f} "
                           f"({time.monotonic() - t0:.0f}s)")
            except Exception as e:  # partial failures are recorded, not fatal
                failures += 1
                row["error"] = str(e)
                click.echo(f"{name} seed {seed}: FAILED ({e})", err=True)
            rows.append(row)
            _write_rows(rows, csv_path)

    plot_data = {
        "x": "batch_size",
        "y": "pooled_cv_dice",
        "series": [
            {
                "encoder": enc,
                "patch": list(patch),
                "points": [
                    {"batch": r["batch"], "seed": r["seed"],
                     "dice_challenge": r["dice_challenge"], "dice_nnunet": r["dice_nnunet"]}
                    for r in rows
                    if r["encoder"] == enc and tuple(r["patch"]) == patch and "error" not in r
                ],
            }
            for enc, patch in sorted({(r["encoder"], tuple(r["patch"])) for r in rows})
        ],
    }
    (out / "plot_data.json").write_text(json.dumps(plot_data, indent=2) + "\n")
    figures.render_scaling_figure(rows, out / "scaling_study.png")

    if failures:
        click.echo(f"{failures} grid cells failed", err=True)
        raise SystemExit(1)
    click.echo(f"scaling study complete: {len(rows)} cells -> {csv_path}")


main.add_command(cmd_predict, name="ensemble")


if __name__ == "__main__":
    main()
