"""Sliding-window full-volume prediction.

Tiles a (padded) volume with a step-size fraction of the patch, weights each
tile's softmax by a Gaussian importance map, optionally averages over mirror
subsets (test-time augmentation), and ensembles multiple models by voxelwise
probability averaging.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import Volume
from .networks import SegmentationNetwork


class ParameterError(ValueError):
    """Invalid tiling/inference parameters."""


class InferenceError(RuntimeError):
    """Network produced unusable output during prediction."""


@dataclass(frozen=True)
class TilingPlan:
    patch_size: tuple[int, int, int]
    positions: tuple[tuple[int, int, int], ...]
    step_fraction: float

    @property
    def num_tiles(self) -> int:
        return len(self.positions)


def _axis_positions(image: int, patch: int, step_fraction: float) -> list[int]:
    if image == patch:
        return [0]
    target = patch * step_fraction
    n = int(np.ceil((image - patch) / target)) + 1
    spacing = (image - patch) / (n - 1)
    seen = []
    for i in range(n):
        p = int(round(i * spacing))
        if not seen or p != seen[-1]:
            seen.append(p)
    return seen


def compute_tiling(image_shape, patch_size, step_fraction: float) -> TilingPlan:
    """Tile corner positions per the step-fraction rule, axes independent.

    Per axis: n = ceil((image - patch) / (patch * fraction)) + 1 tiles, evenly
    spread over [0, image - patch] and rounded to integers.
    """
    if not (0.0 < step_fraction <= 1.0):
        raise ParameterError(f"step_fraction must be in (0, 1], got {step_fraction}")
    image_shape = tuple(int(s) for s in image_shape)
    patch_size = tuple(int(p) for p in patch_size)
    for a in range(3):
        if patch_size[a] <= 0:
            raise ParameterError(f"patch axis {a} must be positive")
        if image_shape[a] < patch_size[a]:
            raise ParameterError(
                f"image axis {a} ({image_shape[a]}) smaller than patch ({patch_size[a]}); pad first"
            )
    per_axis = [_axis_positions(image_shape[a], patch_size[a], step_fraction) for a in range(3)]
    positions = tuple(itertools.product(*per_axis))
    return TilingPlan(patch_size=patch_size, positions=positions, step_fraction=step_fraction)


def gaussian_importance_map(patch_size) -> np.ndarray:
    """Separable Gaussian tile weight, sigma = patch/8, max scaled to 1.

    Zeros (none expected at these sigmas, but guarded) are raised to the
    smallest positive value so accumulated weights never vanish.
    """
    patch_size = tuple(int(p) for p in patch_size)
    axes = []
    for p in patch_size:
        center = (p - 1) / 2.0
        sigma = p / 8.0
        x = np.arange(p, dtype=np.float64)
        axes.append(np.exp(-((x - center) ** 2) / (2.0 * sigma**2)))
    m = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    m /= m.max()
    m = m.astype(np.float32)
    positive = m[m > 0]
    if positive.size < m.size:
        m[m == 0] = positive.min()
    return m


def _mirror_subsets(mirror_axes) -> list[tuple[int, ...]]:
    axes = sorted(mirror_axes)
    out = []
    for r in range(len(axes) + 1):
        out.extend(itertools.combinations(axes, r))
    return out


def _pad_amounts(shape, patch_size):
    pads = []
    for a in range(3):
        missing = max(0, patch_size[a] - shape[a])
        pads.append((missing // 2, missing - missing // 2))
    return pads


def predict_volume(
    net: SegmentationNetwork,
    volume: Volume,
    step_fraction: float,
    mirror_axes,
    patch_size,
) -> np.ndarray:
    """Sliding-window probabilities for one (already normalized) volume.

    Returns a (num_classes, X, Y, Z) float32 array; per-voxel class sums are 1
    up to accumulation rounding. Each tile is averaged over all subsets of
    mirror_axes (2^k forward passes), weighted by the Gaussian map.
    """
    mirror_axes = tuple(sorted(set(int(a) for a in mirror_axes)))
    if any(a not in (0, 1, 2) for a in mirror_axes):
        raise ParameterError(f"mirror_axes must be within {{0,1,2}}, got {mirror_axes}")
    patch_size = tuple(int(p) for p in patch_size)

    x = np.stack([c.astype(np.float32) for c in volume.channels])
    pads = _pad_amounts(x.shape[1:], patch_size)
    x = np.pad(x, [(0, 0)] + pads, mode="constant")
    padded_shape = x.shape[1:]

    plan = compute_tiling(padded_shape, patch_size, step_fraction)
    gauss = gaussian_importance_map(patch_size)
    subsets = _mirror_subsets(mirror_axes)

    num_classes = net.descriptor.num_classes
    accum = np.zeros((num_classes,) + padded_shape, dtype=np.float32)
    weight = np.zeros(padded_shape, dtype=np.float32)

    net.eval()
    with torch.no_grad():
        x_t = torch.from_numpy(x)
        for corner in plan.positions:
            sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_size))
            tile = x_t[(slice(None),) + sl].unsqueeze(0)
            prob_sum = torch.zeros((1, num_classes) + patch_size)
            for subset in subsets:
                dims = [a + 2 for a in subset]
                flipped = torch.flip(tile, dims) if dims else tile
                logits = net(flipped)[0]
                if not torch.isfinite(logits).all():
                    raise InferenceError(f"non-finite logits at tile corner {corner}")
                prob = torch.softmax(logits, dim=1)
                prob_sum += torch.flip(prob, dims) if dims else prob
            tile_prob = (prob_sum / len(subsets))[0].numpy()
            accum[(slice(None),) + sl] += tile_prob * gauss
            weight[sl] += gauss

    probs = accum / weight[None]
    unpad = tuple(slice(p0, s - p1) for (p0, p1), s in zip(pads, padded_shape))
    return probs[(slice(None),) + unpad]


def ensemble(maps: list[np.ndarray]) -> np.ndarray:
    """Voxelwise arithmetic mean of class-probability maps."""
    if not maps:
        raise ValueError("ensemble requires at least one probability map")
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"probability map shapes differ: {shapes}")
    out = np.zeros_like(maps[0], dtype=np.float64)
    for m in maps:
        out += m
    return (out / len(maps)).astype(np.float32)


def segment(probs: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; ties resolve to the lower class index."""
    return np.argmax(probs, axis=0).astype(np.uint8)


def save_prediction(out_dir: Path, case_id: str, probs: np.ndarray, seg: np.ndarray, meta: dict) -> Path:
    """Write one case's prediction: class-major f32le probabilities, u8 labels,
    and a prediction.json with run metadata (checkpoints, step, mirrors, timing)."""
    case_dir = Path(out_dir) / case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    with open(case_dir / "probabilities.raw", "wb") as f:
        for c in range(probs.shape[0]):
            f.write(probs[c].astype("<f4").ravel(order="F").tobytes())
    seg.astype(np.uint8).ravel(order="F").tofile(case_dir / "segmentation.raw")
    (case_dir / "prediction.json").write_text(json.dumps(meta, indent=2) + "\n")
    return case_dir


def load_prediction_segmentation(case_dir: Path, shape) -> np.ndarray:
    raw = np.fromfile(Path(case_dir) / "segmentation.raw", dtype=np.uint8)
    return raw.reshape(tuple(shape), order="F")
