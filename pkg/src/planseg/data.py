"""Synthetic two-channel dataset pipeline.

Generates CT-like + PET-like volume pairs with ellipsoidal lesions and a
patient grouping, computes foreground-based normalization statistics, assigns
patient-stratified folds, samples training patches, and reads/writes the MVOL
on-disk format (header.json + raw little-endian arrays, x-fastest order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates


class ParameterError(ValueError):
    """Invalid generation parameters."""


class StatsError(ValueError):
    """Normalization statistics cannot be computed as requested."""


class AssignmentError(ValueError):
    """Fold assignment is impossible."""


class MVOLFormatError(ValueError):
    """On-disk volume directory violates the MVOL layout."""


CHANNEL_NAMES = ("ct", "pet")
STD_EPSILON = 1e-8
EMPTY_CASE_PROBABILITY = 0.1


@dataclass
class Volume:
    case_id: str
    patient_id: str
    channels: tuple[np.ndarray, np.ndarray]
    spacing: tuple[float, float, float]
    segmentation: np.ndarray | None = None

    def __post_init__(self):
        shapes = {c.shape for c in self.channels}
        if self.segmentation is not None:
            shapes.add(self.segmentation.shape)
        if len(shapes) != 1:
            raise ValueError(f"{self.case_id}: channels/segmentation shapes differ: {shapes}")
        if len(next(iter(shapes))) != 3:
            raise ValueError(f"{self.case_id}: volumes must be 3D")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"{self.case_id}: spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.channels[0].shape


@dataclass(frozen=True)
class ChannelStats:
    clip_lower: float
    clip_upper: float
    mean: float
    std: float

    def __post_init__(self):
        if self.clip_lower > self.clip_upper:
            raise ValueError("clip_lower must not exceed clip_upper")
        if self.std <= 0:
            raise ValueError("std must be positive")


@dataclass(frozen=True)
class NormalizationStats:
    channels: tuple[ChannelStats, ...]

    def to_json(self) -> list[dict]:
        return [vars(c).copy() for c in self.channels]

    @classmethod
    def from_json(cls, obj) -> "NormalizationStats":
        return cls(tuple(ChannelStats(**c) for c in obj))


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_case: dict[str, int]
    num_folds: int

    def cases_in_fold(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.fold_of_case.items() if f == fold)

    def training_cases(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.fold_of_case.items() if f != fold)


def _smooth_field(rng: np.random.Generator, shape, low: float, high: float, grid: int = 5) -> np.ndarray:
    """Low-frequency random field via trilinear interpolation of a coarse grid."""
    coarse = rng.uniform(low, high, size=(grid, grid, grid))
    axes = [np.linspace(0.0, grid - 1.0, n) for n in shape]
    coords = np.meshgrid(*axes, indexing="ij")
    return map_coordinates(coarse, coords, order=1, mode="nearest").astype(np.float32)


def _ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        acc = acc + ((g - c) / r) ** 2
    return acc <= 1.0


def _parse_cases_per_patient(spec, num_patients: int):
    """Returns a callable rng -> per-patient case counts (length num_patients)."""
    if isinstance(spec, int):
        if spec < 1:
            raise ParameterError("cases_per_patient must be >= 1")
        return lambda rng: [spec] * num_patients
    if isinstance(spec, dict) and set(spec) == {"total"}:
        total = spec["total"]
        if total < num_patients:
            raise ParameterError("total cases must be >= num_patients")
        base = total // num_patients
        extra = total % num_patients

        def dealt(rng):
            counts = [base] * num_patients
            for i in rng.permutation(num_patients)[:extra]:
                counts[i] += 1
            return counts

        return dealt
    if isinstance(spec, (tuple, list)) and len(spec) == 2:
        lo, hi = spec
        if not (1 <= lo <= hi):
            raise ParameterError(f"bad cases_per_patient range {spec}")
        return lambda rng: [int(rng.integers(lo, hi + 1)) for _ in range(num_patients)]
    raise ParameterError(f"unrecognized cases_per_patient spec: {spec!r}")


def generate_synthetic_dataset(
    num_patients: int,
    cases_per_patient,
    volume_shape,
    lesion_count_range,
    seed: int,
    spacing=(1.0, 1.0, 1.0),
) -> list[Volume]:
    """Deterministic synthetic dataset with patient structure.

    CT channel: smooth tissue background around [-100, 200] plus noise, with a
    mild intensity bump inside lesions. PET channel: low background near 0-2
    with hot ellipsoidal lesions in [4, 15]. Roughly 10% of cases are forced
    empty so both Dice aggregation conventions stay distinguishable.
    """
    if num_patients < 1:
        raise ParameterError("num_patients must be >= 1")
    volume_shape = tuple(int(s) for s in volume_shape)
    if len(volume_shape) != 3 or any(s < 32 for s in volume_shape):
        raise ParameterError(f"volume_shape must be 3 ints each >= 32, got {volume_shape}")
    lo, hi = lesion_count_range
    if not (0 <= lo <= hi):
        raise ParameterError(f"bad lesion_count_range {lesion_count_range}")

    root = np.random.default_rng(seed)
    counts = _parse_cases_per_patient(cases_per_patient, num_patients)(root)
    case_seeds = np.random.SeedSequence(seed).spawn(sum(counts))

    volumes = []
    k = 0
    for p in range(num_patients):
        patient_id = f"pat{p:04d}"
        for j in range(counts[p]):
            rng = np.random.default_rng(case_seeds[k])
            case_id = f"{patient_id}_case{j}"
            volumes.append(
                _generate_case(rng, case_id, patient_id, volume_shape, (lo, hi), spacing)
            )
            k += 1
    return volumes


def _generate_case(rng, case_id, patient_id, shape, lesion_range, spacing) -> Volume:
    ct = _smooth_field(rng, shape, -60.0, 160.0) + rng.normal(0.0, 8.0, shape)
    pet = np.abs(_smooth_field(rng, shape, 0.0, 1.5)) + rng.normal(0.0, 0.05, shape)
    pet = np.clip(pet, 0.0, None)

    seg = np.zeros(shape, dtype=np.uint8)
    lo, hi = lesion_range
    if rng.random() < EMPTY_CASE_PROBABILITY:
        n_lesions = 0
    else:
        n_lesions = int(rng.integers(lo, hi + 1))
    max_r = max(2, min(shape) // 6)
    for _ in range(n_lesions):
        radii = rng.uniform(2.0, max_r, size=3)
        center = [rng.uniform(r, s - 1 - r) for r, s in zip(radii, shape)]
        mask = _ellipsoid_mask(shape, center, radii)
        seg[mask] = 1
        pet[mask] = rng.uniform(4.0, 15.0) + rng.normal(0.0, 0.3, int(mask.sum()))
        ct[mask] += rng.uniform(20.0, 50.0)

    return Volume(
        case_id=case_id,
        patient_id=patient_id,
        channels=(ct.astype(np.float32), pet.astype(np.float32)),
        spacing=tuple(float(s) for s in spacing),
        segmentation=seg,
    )


def _channel_stats(values: np.ndarray) -> ChannelStats:
    lower, upper = np.percentile(values, [0.5, 99.5], method="linear")
    within = values[(values >= lower) & (values <= upper)]
    mean = float(within.mean())
    std = float(max(within.std(), STD_EPSILON))
    return ChannelStats(float(lower), float(upper), mean, std)


def compute_normalization_stats(training_volumes: list[Volume]) -> NormalizationStats:
    """Per-channel clip/mean/std over pooled foreground voxels of the split.

    Clip bounds are the 0.5 and 99.5 linear-interpolation percentiles of the
    pooled foreground multiset; mean/std are taken over in-bounds values only.
    """
    num_channels = len(training_volumes[0].channels)
    pooled = [[] for _ in range(num_channels)]
    for v in training_volumes:
        if v.segmentation is None:
            continue
        mask = v.segmentation == 1
        if not mask.any():
            continue
        for c in range(num_channels):
            pooled[c].append(v.channels[c][mask])
    if not pooled[0]:
        raise StatsError(
            "no foreground voxels in training split; fall back to whole-volume statistics"
        )
    return NormalizationStats(
        tuple(_channel_stats(np.concatenate(chunks)) for chunks in pooled)
    )


def compute_whole_volume_stats(training_volumes: list[Volume]) -> NormalizationStats:
    """Fallback: same statistics over every voxel of the split."""
    num_channels = len(training_volumes[0].channels)
    stats = []
    for c in range(num_channels):
        values = np.concatenate([v.channels[c].ravel() for v in training_volumes])
        stats.append(_channel_stats(values))
    return NormalizationStats(tuple(stats))


def compute_stats_with_fallback(training_volumes: list[Volume]) -> NormalizationStats:
    try:
        return compute_normalization_stats(training_volumes)
    except StatsError:
        return compute_whole_volume_stats(training_volumes)


def normalize(volume: Volume, stats: NormalizationStats) -> Volume:
    """Clip each channel to its bounds, then subtract mean and divide by std."""
    out = []
    for arr, s in zip(volume.channels, stats.channels):
        clipped = np.clip(arr, s.clip_lower, s.clip_upper)
        out.append(((clipped - s.mean) / s.std).astype(np.float32))
    return Volume(
        case_id=volume.case_id,
        patient_id=volume.patient_id,
        channels=tuple(out),
        spacing=volume.spacing,
        segmentation=volume.segmentation,
    )


def assign_folds(volumes: list[Volume], num_folds: int, seed: int) -> FoldAssignment:
    """Shuffle patients under the seed, deal them round-robin to folds."""
    if num_folds < 2:
        raise AssignmentError("num_folds must be >= 2")
    patients = sorted({v.patient_id for v in volumes})
    if len(patients) < num_folds:
        raise AssignmentError(f"{len(patients)} patients < {num_folds} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    fold_of_patient = {patients[int(i)]: pos % num_folds for pos, i in enumerate(order)}
    return FoldAssignment(
        fold_of_case={v.case_id: fold_of_patient[v.patient_id] for v in volumes},
        num_folds=num_folds,
    )


def _pad_to_patch(arr: np.ndarray, patch_size, value=0):
    pads = []
    for a in range(3):
        missing = max(0, patch_size[a] - arr.shape[a])
        pads.append((missing // 2, missing - missing // 2))
    if any(p != (0, 0) for p in pads):
        arr = np.pad(arr, pads, mode="constant", constant_values=value)
    return arr


def sample_patch(
    volume: Volume,
    patch_size,
    force_foreground: bool,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Crop one training patch; returns (channels (2,px,py,pz), labels (px,py,pz)).

    Volumes smaller than the patch are zero-padded symmetrically first. With
    force_foreground and a nonempty segmentation, a foreground voxel is drawn
    uniformly and the patch corner uniformly among corners containing it;
    otherwise the corner is uniform over all valid positions.
    """
    patch_size = tuple(int(p) for p in patch_size)
    channels = [_pad_to_patch(c, patch_size) for c in volume.channels]
    seg = volume.segmentation
    seg = np.zeros(channels[0].shape, np.uint8) if seg is None else _pad_to_patch(seg, patch_size)
    shape = channels[0].shape

    corner = []
    fg = np.argwhere(seg == 1) if force_foreground else None
    if fg is not None and len(fg) > 0:
        voxel = fg[int(rng.integers(len(fg)))]
        for a in range(3):
            lo = max(0, int(voxel[a]) - patch_size[a] + 1)
            hi = min(shape[a] - patch_size[a], int(voxel[a]))
            corner.append(int(rng.integers(lo, hi + 1)))
    else:
        corner = [int(rng.integers(0, shape[a] - patch_size[a] + 1)) for a in range(3)]

    sl = tuple(slice(c, c + p) for c, p in zip(corner, patch_size))
    patch = np.stack([ch[sl] for ch in channels]).astype(np.float32)
    return patch, seg[sl].copy()


# --- MVOL on-disk format ---

def save_volume(root: Path, volume: Volume) -> Path:
    root = Path(root)
    case_dir = root / volume.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    header = {
        "case_id": volume.case_id,
        "patient_id": volume.patient_id,
        "shape": list(volume.shape),
        "spacing": list(volume.spacing),
        "channel_names": list(CHANNEL_NAMES[: len(volume.channels)]),
        "dtype": "f32le",
    }
    (case_dir / "header.json").write_text(json.dumps(header, indent=2) + "\n")
    for i, arr in enumerate(volume.channels):
        arr.astype("<f4").ravel(order="F").tofile(case_dir / f"channel_{i}.raw")
    if volume.segmentation is not None:
        volume.segmentation.astype(np.uint8).ravel(order="F").tofile(case_dir / "segmentation.raw")
    return case_dir


def load_volume(case_dir: Path) -> Volume:
    case_dir = Path(case_dir)
    header_path = case_dir / "header.json"
    if not header_path.exists():
        raise MVOLFormatError(f"{case_dir}: missing header.json")
    header = json.loads(header_path.read_text())
    if header.get("dtype") != "f32le":
        raise MVOLFormatError(f"{case_dir}: unsupported dtype tag {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    count = int(np.prod(shape))

    channels = []
    for i in range(len(header["channel_names"])):
        raw = np.fromfile(case_dir / f"channel_{i}.raw", dtype="<f4")
        if raw.size != count:
            raise MVOLFormatError(f"{case_dir}: channel_{i}.raw has {raw.size} values, expected {count}")
        channels.append(raw.reshape(shape, order="F"))

    seg_path = case_dir / "segmentation.raw"
    seg = None
    if seg_path.exists():
        raw = np.fromfile(seg_path, dtype=np.uint8)
        if raw.size != count:
            raise MVOLFormatError(f"{case_dir}: segmentation.raw has {raw.size} values, expected {count}")
        seg = raw.reshape(shape, order="F")

    return Volume(
        case_id=header["case_id"],
        patient_id=header["patient_id"],
        channels=tuple(channels),
        spacing=tuple(header["spacing"]),
        segmentation=seg,
    )


def save_dataset(root: Path, volumes: list[Volume]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for v in volumes:
        save_volume(root, v)
    listing = {
        "cases": [{"case_id": v.case_id, "patient_id": v.patient_id} for v in volumes],
        "num_cases": len(volumes),
        "num_patients": len({v.patient_id for v in volumes}),
    }
    (root / "dataset.json").write_text(json.dumps(listing, indent=2) + "\n")


def load_dataset(root: Path) -> list[Volume]:
    root = Path(root)
    listing_path = root / "dataset.json"
    if not listing_path.exists():
        raise MVOLFormatError(f"{root}: missing dataset.json")
    listing = json.loads(listing_path.read_text())
    return [load_volume(root / entry["case_id"]) for entry in listing["cases"]]
