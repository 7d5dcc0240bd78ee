"""Per-fold training and the cross-validation driver.

Loss is deep-supervised soft Dice + cross entropy with 2^-r resolution
weights. Optimizer is SGD (nesterov, momentum 0.99) under a poly learning
rate schedule. Divergence (non-finite loss) is recorded, training resumes
from the last checkpoint at half the learning rate. Per-epoch RNG streams
derive from (seed, fold, epoch) so a resumed run replays exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, load_checkpoint, restore_momentum, restore_network, save_checkpoint
from .data import (
    FoldAssignment,
    NormalizationStats,
    Volume,
    assign_folds,
    compute_stats_with_fallback,
    normalize,
    sample_patch,
)
from .inference import predict_volume, segment
from .metrics import CaseMetrics, EvalReport, aggregate, evaluate_case
from .networks import SegmentationNetwork, build_network
from .plans import PlanValidationError, ResolvedConfiguration
from .topology import descriptor_from_config

MOMENTUM = 0.99
POLY_EXPONENT = 0.9
GRADIENT_CLIP_NORM = 12.0
DICE_SMOOTHING = 1e-5
VALIDATION_PATCHES = 10
DEFAULT_ITERATIONS_PER_EPOCH = 50


class DivergenceSignal(RuntimeError):
    """Raised when logits or loss become non-finite."""


def deep_supervision_weights(num_outputs: int) -> tuple[float, ...]:
    """Per-resolution loss weights, proportional to 2^-r, normalized to sum 1."""
    raw = [2.0 ** (-r) for r in range(num_outputs)]
    total = sum(raw)
    return tuple(w / total for w in raw)


def poly_learning_rate(lr0: float, epoch: int, num_epochs: int) -> float:
    return lr0 * (1.0 - epoch / num_epochs) ** POLY_EXPONENT


def one_hot_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B,X,Y,Z) integer labels -> (B,C,X,Y,Z) float one-hot."""
    return F.one_hot(labels.long(), num_classes).permute(0, 4, 1, 2, 3).to(torch.float32)


def downsample_targets(onehot: torch.Tensor, factor) -> torch.Tensor:
    """Region-preserving label downsampling: max-pool the one-hot encoding.

    A low-resolution voxel is positive for every class present in its window,
    so boundary voxels become multi-hot on purpose.
    """
    if tuple(factor) == (1, 1, 1):
        return onehot
    return F.max_pool3d(onehot, kernel_size=tuple(factor), stride=tuple(factor))


def soft_dice_term(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - mean over classes of the batch-pooled soft Dice coefficient."""
    axes = (0, 2, 3, 4)
    intersection = (probs * target).sum(axes)
    denominator = probs.sum(axes) + target.sum(axes)
    coeff = (2.0 * intersection + DICE_SMOOTHING) / (denominator + DICE_SMOOTHING)
    return 1.0 - coeff.mean()


def cross_entropy_term(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over voxels of -sum_c target_c * log softmax(logits)_c."""
    logp = F.log_softmax(logits, dim=1)
    return -(target * logp).sum(dim=1).mean()


def training_loss(logits_list, labels: torch.Tensor, weights) -> torch.Tensor:
    """Deep-supervised Dice + cross-entropy loss.

    Targets at each resolution come from max-pooling the full-resolution
    one-hot labels by the shape ratio. Non-finite logits raise
    DivergenceSignal rather than propagating NaNs into the step.
    """
    if len(logits_list) != len(weights):
        raise ValueError(f"{len(logits_list)} outputs but {len(weights)} weights")
    num_classes = logits_list[0].shape[1]
    onehot = one_hot_labels(labels, num_classes)
    total = logits_list[0].new_zeros(())
    for logit, w in zip(logits_list, weights):
        if not torch.isfinite(logit).all():
            raise DivergenceSignal("non-finite logits")
        factor = tuple(labels.shape[a + 1] // logit.shape[a + 2] for a in range(3))
        target = downsample_targets(onehot, factor)
        probs = torch.softmax(logit, dim=1)
        total = total + w * (soft_dice_term(probs, target) + cross_entropy_term(logit, target))
    return total


def _augment(patch: np.ndarray, label: np.ndarray, rng: np.random.Generator):
    """Random mirroring on all axes plus +-10% per-channel intensity scaling."""
    for a in range(3):
        if rng.random() < 0.5:
            patch = np.flip(patch, axis=a + 1)
            label = np.flip(label, axis=a)
    factors = rng.uniform(0.9, 1.1, size=patch.shape[0])
    patch = patch * factors[:, None, None, None]
    return np.ascontiguousarray(patch, dtype=np.float32), np.ascontiguousarray(label)


def sample_batch(
    volumes: list[Volume],
    config: ResolvedConfiguration,
    rng: np.random.Generator,
    augment: bool = True,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One training batch; the first round(B*fraction) samples are foreground-forced."""
    num_forced = int(round(config.batch_size * config.oversample_foreground_fraction))
    xs, ys = [], []
    for i in range(config.batch_size):
        vol = volumes[int(rng.integers(len(volumes)))]
        patch, label = sample_patch(vol, config.patch_size, force_foreground=i < num_forced, rng=rng)
        if augment:
            patch, label = _augment(patch, label, rng)
        xs.append(patch)
        ys.append(label)
    return (
        torch.from_numpy(np.stack(xs)),
        torch.from_numpy(np.stack(ys).astype(np.int64)),
    )


def pseudo_dice(
    net: SegmentationNetwork,
    volumes: list[Volume],
    config: ResolvedConfiguration,
    rng: np.random.Generator,
    num_patches: int = VALIDATION_PATCHES,
) -> float:
    """Foreground Dice pooled over sampled validation patches (argmax, hard)."""
    net.eval()
    tp = fp = fn = 0
    with torch.no_grad():
        for _ in range(num_patches):
            vol = volumes[int(rng.integers(len(volumes)))]
            patch, label = sample_patch(vol, config.patch_size, force_foreground=True, rng=rng)
            logits = net(torch.from_numpy(patch).unsqueeze(0))[0]
            pred = logits.argmax(dim=1)[0].numpy()
            gt = label.astype(bool)
            hit = pred.astype(bool)
            tp += int((hit & gt).sum())
            fp += int((hit & ~gt).sum())
            fn += int((~hit & gt).sum())
    net.train()
    return (2.0 * tp + DICE_SMOOTHING) / (2.0 * tp + fp + fn + DICE_SMOOTHING)


@dataclass
class TrainingState:
    fold: int
    seed: int
    epoch: int
    network: SegmentationNetwork
    stats: NormalizationStats
    best_validation_dice: float
    history: list[dict] = field(default_factory=list)
    checkpoint_dir: Path | None = None

    @property
    def final_checkpoint(self) -> Path:
        return Path(self.checkpoint_dir) / "checkpoint_final.ckpt"

    @property
    def best_checkpoint(self) -> Path:
        return Path(self.checkpoint_dir) / "checkpoint_best.ckpt"


def _fresh_optimizer(net: SegmentationNetwork, lr: float) -> torch.optim.SGD:
    return torch.optim.SGD(net.parameters(), lr=lr, momentum=MOMENTUM, nesterov=True)


def _checkpoint_extra(config, config_name, stats, history, best, lr_scale) -> dict:
    return {
        "config": dataclasses.asdict(config),
        "config_name": config_name,
        "normalization_stats": stats.to_json(),
        "history": history,
        "best_validation_dice": best,
        "lr_scale": lr_scale,
    }


def train_fold(
    config: ResolvedConfiguration,
    dataset: list[Volume],
    fold_assignment: FoldAssignment,
    fold: int,
    seed: int,
    out_dir: Path,
    iterations_per_epoch: int = DEFAULT_ITERATIONS_PER_EPOCH,
    resume_from: Path | None = None,
    stop_after_epoch: int | None = None,
    config_name: str = "",
) -> TrainingState:
    """Train one fold's network; writes checkpoints and a JSONL epoch log.

    Normalization statistics are computed from this fold's training split and
    stored in every checkpoint so inference can reproduce them. stop_after_epoch
    ends the run early (exclusive bound) without altering the schedule, for
    resumption via resume_from.
    """
    if not (0 <= fold < fold_assignment.num_folds):
        raise ValueError(f"fold {fold} outside [0, {fold_assignment.num_folds})")
    num_channels = len(config.normalization_schemes)
    if any(len(v.channels) != num_channels for v in dataset):
        raise PlanValidationError(
            "normalization_schemes",
            f"config expects {num_channels} channels but dataset disagrees",
        )

    by_id = {v.case_id: v for v in dataset}
    train_ids = fold_assignment.training_cases(fold)
    val_ids = fold_assignment.cases_in_fold(fold)
    train_raw = [by_id[c] for c in train_ids]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "training_log.jsonl"
    latest_path = out_dir / "checkpoint_latest.ckpt"
    best_path = out_dir / "checkpoint_best.ckpt"
    final_path = out_dir / "checkpoint_final.ckpt"

    descriptor = descriptor_from_config(config, num_input_channels=num_channels)
    init_seed = seed + 7919 * fold

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        net = restore_network(ckpt)
        optimizer = _fresh_optimizer(net, config.initial_learning_rate)
        restore_momentum(ckpt, net, optimizer)
        stats = NormalizationStats.from_json(ckpt.extra["normalization_stats"])
        history = list(ckpt.extra["history"])
        best = ckpt.extra["best_validation_dice"]
        lr_scale = ckpt.extra["lr_scale"]
        start_epoch = ckpt.epoch + 1
    else:
        net = build_network(descriptor, init_seed)
        optimizer = _fresh_optimizer(net, config.initial_learning_rate)
        stats = compute_stats_with_fallback(train_raw)
        history = []
        best = -1.0
        lr_scale = 1.0
        start_epoch = 0
        log_path.write_text("")

    train_vols = [normalize(v, stats) for v in train_raw]
    val_vols = [normalize(by_id[c], stats) for c in val_ids] or train_vols
    weights = deep_supervision_weights(descriptor.num_stages if config.deep_supervision else 1)

    end_epoch = config.num_epochs if stop_after_epoch is None else min(stop_after_epoch, config.num_epochs)
    epoch = start_epoch - 1
    for epoch in range(start_epoch, end_epoch):
        lr = poly_learning_rate(config.initial_learning_rate, epoch, config.num_epochs) * lr_scale
        for group in optimizer.param_groups:
            group["lr"] = lr
        rng = np.random.default_rng((seed, fold, epoch))

        net.train()
        losses = []
        diverged = False
        for _ in range(iterations_per_epoch):
            x, y = sample_batch(train_vols, config, rng)
            optimizer.zero_grad()
            try:
                loss = training_loss(net(x), y, weights)
            except DivergenceSignal:
                diverged = True
                break
            if not torch.isfinite(loss):
                diverged = True
                break
            loss.backward()
            torch.nn.utils.clip_grad_norm_(net.parameters(), GRADIENT_CLIP_NORM)
            optimizer.step()
            losses.append(float(loss.detach()))

        if diverged:
            lr_scale *= 0.5
            if latest_path.exists():
                ckpt = load_checkpoint(latest_path)
                net = restore_network(ckpt)
                optimizer = _fresh_optimizer(net, lr)
                restore_momentum(ckpt, net, optimizer)
            else:
                net = build_network(descriptor, init_seed)
                optimizer = _fresh_optimizer(net, lr)

        val_dice = pseudo_dice(net, val_vols, config, rng)
        record = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else None,
            "val_dice": val_dice,
            "lr": lr,
            "divergence_flag": diverged,
        }
        history.append(record)
        with open(log_path, "a") as f:
            f.write(json.dumps(record) + "\n")

        extra = _checkpoint_extra(config, config_name, stats, history, max(best, val_dice), lr_scale)
        save_checkpoint(latest_path, net, seed=init_seed, epoch=epoch, optimizer=optimizer, extra=extra)
        if val_dice > best:
            best = val_dice
            save_checkpoint(best_path, net, seed=init_seed, epoch=epoch, optimizer=optimizer, extra=extra)

    extra = _checkpoint_extra(config, config_name, stats, history, best, lr_scale)
    save_checkpoint(final_path, net, seed=init_seed, epoch=epoch, optimizer=optimizer, extra=extra)

    return TrainingState(
        fold=fold,
        seed=seed,
        epoch=epoch + 1,
        network=net,
        stats=stats,
        best_validation_dice=best,
        history=history,
        checkpoint_dir=out_dir,
    )


@dataclass
class CVResult:
    fold_mean_dice: list[float | None]
    report: EvalReport
    cases: list[CaseMetrics]

    def to_json(self) -> dict:
        return {
            "fold_mean_dice_nnunet": self.fold_mean_dice,
            "mean_dice_challenge": self.report.mean_dice_challenge,
            "mean_dice_nnunet": self.report.mean_dice_nnunet,
            "num_cases": len(self.cases),
        }


def run_cross_validation(
    config: ResolvedConfiguration,
    dataset: list[Volume],
    seed: int,
    out_dir: Path,
    num_folds: int = 5,
    iterations_per_epoch: int = DEFAULT_ITERATIONS_PER_EPOCH,
) -> CVResult:
    """Train all folds, predict each fold's validation cases, aggregate metrics."""
    assignment = assign_folds(dataset, num_folds, seed)
    by_id = {v.case_id: v for v in dataset}
    out_dir = Path(out_dir)

    all_cases: list[CaseMetrics] = []
    fold_means: list[float | None] = []
    for fold in range(num_folds):
        state = train_fold(
            config, dataset, assignment, fold, seed,
            out_dir / f"fold_{fold}", iterations_per_epoch=iterations_per_epoch,
        )
        fold_cases = []
        for cid in assignment.cases_in_fold(fold):
            vol = normalize(by_id[cid], state.stats)
            probs = predict_volume(
                state.network, vol, config.inference_step_fraction,
                config.mirror_axes, config.patch_size,
            )
            pred = segment(probs)
            fold_cases.append(evaluate_case(cid, pred, by_id[cid].segmentation, vol.spacing))
        defined = [c.dice for c in fold_cases if c.dice is not None]
        fold_means.append(float(np.mean(defined)) if defined else None)
        all_cases.extend(fold_cases)

    report = aggregate(all_cases)
    return CVResult(fold_mean_dice=fold_means, report=report, cases=all_cases)
