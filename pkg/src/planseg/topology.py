"""Network topology planning: per-stage structure, receptive field, memory.

The planner derives strides/kernels/features from the patch size alone, so
growing the patch (within the same downsampling depth) changes nothing about
the network itself. Footprint estimates are a coarse linear proxy whose only
job is to order candidate batch sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

DEFAULT_FEATURES_BASE = 32
DEFAULT_FEATURES_CAP = 320
MAX_DOWNSAMPLES = 5
RESIDUAL_BLOCK_SCHEDULE = (1, 3, 4, 6)  # extended with 6s for deeper nets
PLAIN_CONVS_PER_STAGE = 2
DECODER_CONVS_PER_STAGE = 2


class PlanningError(ValueError):
    """Patch size cannot be planned (too small or indivisible)."""


class InfeasibleBudgetError(ValueError):
    """Memory budget below the batch-1 footprint."""


@dataclass(frozen=True)
class TopologyDescriptor:
    """Per-stage network structure, independent of the patch size."""

    num_stages: int
    features_per_stage: tuple[int, ...]
    strides_per_stage: tuple[tuple[int, int, int], ...]
    kernel_sizes: tuple[tuple[int, int, int], ...]
    encoder_type: str
    blocks_per_stage_encoder: tuple[int, ...]
    convs_per_stage_decoder: tuple[int, ...]
    deep_supervision: bool
    num_input_channels: int
    num_classes: int

    def cumulative_strides(self) -> tuple[tuple[int, int, int], ...]:
        """Cumulative downsampling factor at each stage, per axis."""
        out = []
        cum = (1, 1, 1)
        for stride in self.strides_per_stage:
            cum = tuple(c * s for c, s in zip(cum, stride))
            out.append(cum)
        return tuple(out)


@dataclass(frozen=True)
class FootprintEstimate:
    """Coarse activation/parameter accounting for one configuration."""

    activation_voxels: int
    parameter_count: int
    training_bytes: int


def _validate_descriptor(topo: TopologyDescriptor) -> None:
    if topo.num_stages < 2:
        raise PlanningError("descriptor needs at least 2 stages")
    n = topo.num_stages
    if not (
        len(topo.features_per_stage) == n
        and len(topo.strides_per_stage) == n
        and len(topo.kernel_sizes) == n
        and len(topo.blocks_per_stage_encoder) == n
        and len(topo.convs_per_stage_decoder) == n - 1
    ):
        raise PlanningError("per-stage field lengths inconsistent with num_stages")


def plan_topology(
    patch_size,
    spacing,
    encoder_type: str,
    num_input_channels: int,
    num_classes: int,
    features_base: int = DEFAULT_FEATURES_BASE,
    features_cap: int = DEFAULT_FEATURES_CAP,
    deep_supervision: bool = True,
) -> TopologyDescriptor:
    """Derive the per-stage topology for a given patch size.

    Per axis the number of downsamplings is min(floor(log2(patch/4)), 5);
    a stage downsamples an axis only while that axis still supports it, so
    anisotropic patches get anisotropic strides. All kernels are 3x3x3 and
    features double per stage up to the cap.
    """
    patch_size = tuple(int(p) for p in patch_size)
    if len(patch_size) != 3:
        raise PlanningError(f"patch_size must have 3 axes, got {patch_size!r}")
    if any(p < 8 for p in patch_size):
        raise PlanningError(f"every patch axis must be >= 8, got {patch_size}")
    if encoder_type not in ("plain", "residual"):
        raise PlanningError(f"unknown encoder_type {encoder_type!r}")

    downsamples = [min(int(math.floor(math.log2(p / 4))), MAX_DOWNSAMPLES) for p in patch_size]
    num_stages = max(downsamples) + 1

    strides = [(1, 1, 1)]
    for s in range(1, num_stages):
        strides.append(tuple(2 if s <= d else 1 for d in downsamples))

    for axis in range(3):
        total = 1
        for st in strides:
            total *= st[axis]
        if patch_size[axis] % total != 0:
            raise PlanningError(
                f"patch axis {axis} ({patch_size[axis]}) is not divisible by its "
                f"cumulative stride {total}"
            )

    features = tuple(min(features_base * 2**s, features_cap) for s in range(num_stages))
    kernels = tuple((3, 3, 3) for _ in range(num_stages))
    if encoder_type == "plain":
        blocks = tuple(PLAIN_CONVS_PER_STAGE for _ in range(num_stages))
    else:
        schedule = RESIDUAL_BLOCK_SCHEDULE + (RESIDUAL_BLOCK_SCHEDULE[-1],) * num_stages
        blocks = schedule[:num_stages]
    decoder_convs = tuple(DECODER_CONVS_PER_STAGE for _ in range(num_stages - 1))

    return TopologyDescriptor(
        num_stages=num_stages,
        features_per_stage=features,
        strides_per_stage=tuple(strides),
        kernel_sizes=kernels,
        encoder_type=encoder_type,
        blocks_per_stage_encoder=blocks,
        convs_per_stage_decoder=decoder_convs,
        deep_supervision=deep_supervision,
        num_input_channels=num_input_channels,
        num_classes=num_classes,
    )


def descriptor_from_config(config, num_input_channels=None, num_classes: int = 2) -> TopologyDescriptor:
    """Build the descriptor a ResolvedConfiguration pins down."""
    if num_input_channels is None:
        num_input_channels = len(config.normalization_schemes)
    num_stages = len(config.strides_per_stage)
    features = tuple(
        min(config.features_base * 2**s, config.features_cap) for s in range(num_stages)
    )
    topo = TopologyDescriptor(
        num_stages=num_stages,
        features_per_stage=features,
        strides_per_stage=config.strides_per_stage,
        kernel_sizes=config.kernel_sizes,
        encoder_type=config.encoder_type,
        blocks_per_stage_encoder=config.blocks_per_stage_encoder,
        convs_per_stage_decoder=config.convs_per_stage_decoder,
        deep_supervision=config.deep_supervision,
        num_input_channels=num_input_channels,
        num_classes=num_classes,
    )
    _validate_descriptor(topo)
    return topo


def encoder_conv_layers(topo: TopologyDescriptor) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
    """Encoder convolutions in forward order as (kernel, stride) pairs.

    Mirrors network construction exactly: plain stages put the stage stride on
    their first 3x3x3 conv; residual stages use a 1x1x1 projection for stride
    and channel changes, followed by stride-1 residual blocks of two convs.
    """
    layers = []
    in_ch = topo.num_input_channels
    for s in range(topo.num_stages):
        stride = topo.strides_per_stage[s]
        kernel = topo.kernel_sizes[s]
        out_ch = topo.features_per_stage[s]
        n = topo.blocks_per_stage_encoder[s]
        if topo.encoder_type == "plain":
            layers.append((kernel, stride))
            layers.extend((kernel, (1, 1, 1)) for _ in range(n - 1))
        else:
            if stride != (1, 1, 1) or in_ch != out_ch:
                layers.append(((1, 1, 1), stride))
            for _ in range(n):
                layers.append((kernel, (1, 1, 1)))
                layers.append((kernel, (1, 1, 1)))
        in_ch = out_ch
    return layers


def compute_receptive_field(topo: TopologyDescriptor) -> tuple[int, int, int]:
    """Encoder-path receptive field at the bottleneck, per axis.

    Standard recurrence over every encoder conv: rf += (k - 1) * jump, then
    jump *= stride. The decoder is ignored.
    """
    _validate_descriptor(topo)
    rf = [1, 1, 1]
    jump = [1, 1, 1]
    for kernel, stride in encoder_conv_layers(topo):
        for a in range(3):
            rf[a] += (kernel[a] - 1) * jump[a]
            jump[a] *= stride[a]
    return tuple(rf)


def count_parameters(topo: TopologyDescriptor) -> int:
    """Analytic learnable-parameter count of the network a descriptor implies.

    Counts convs (weights + bias), instance-norm affine pairs, transposed
    convs, and 1x1x1 segmentation heads; must match the built network exactly.
    """
    _validate_descriptor(topo)

    def conv(cin, cout, kernel):
        return cin * cout * kernel[0] * kernel[1] * kernel[2] + cout

    def norm(c):
        return 2 * c

    total = 0
    in_ch = topo.num_input_channels
    for s in range(topo.num_stages):
        out_ch = topo.features_per_stage[s]
        stride = topo.strides_per_stage[s]
        kernel = topo.kernel_sizes[s]
        n = topo.blocks_per_stage_encoder[s]
        if topo.encoder_type == "plain":
            total += conv(in_ch, out_ch, kernel) + norm(out_ch)
            total += (n - 1) * (conv(out_ch, out_ch, kernel) + norm(out_ch))
        else:
            if stride != (1, 1, 1) or in_ch != out_ch:
                total += conv(in_ch, out_ch, (1, 1, 1))
            total += n * (2 * (norm(out_ch) + conv(out_ch, out_ch, kernel)))
        in_ch = out_ch

    for s in range(topo.num_stages - 2, -1, -1):
        deep_ch = topo.features_per_stage[s + 1]
        skip_ch = topo.features_per_stage[s]
        up_kernel = topo.strides_per_stage[s + 1]
        total += deep_ch * skip_ch * up_kernel[0] * up_kernel[1] * up_kernel[2] + skip_ch
        kernel = topo.kernel_sizes[s]
        n = topo.convs_per_stage_decoder[s]
        total += conv(2 * skip_ch, skip_ch, kernel) + norm(skip_ch)
        total += (n - 1) * (conv(skip_ch, skip_ch, kernel) + norm(skip_ch))

    head_stages = range(topo.num_stages) if topo.deep_supervision else (0,)
    for s in head_stages:
        total += topo.features_per_stage[s] * topo.num_classes + topo.num_classes
    return total


def _voxels_per_stage(topo: TopologyDescriptor, patch_size) -> list[int]:
    voxels = []
    for cum in topo.cumulative_strides():
        v = 1
        for a in range(3):
            v *= math.ceil(patch_size[a] / cum[a])
        voxels.append(v)
    return voxels


def estimate_footprint(topo: TopologyDescriptor, patch_size, batch_size: int) -> FootprintEstimate:
    """Linear activation/parameter memory proxy for one training step.

    activation_voxels sums feature-map elements over encoder and decoder
    stages at batch 1; training_bytes adds gradient/workspace copies of the
    activations and four float copies of the parameters (params, grads, two
    optimizer slots).
    """
    _validate_descriptor(topo)
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    voxels = _voxels_per_stage(topo, patch_size)
    activation_voxels = 0
    for s in range(topo.num_stages):
        activation_voxels += topo.features_per_stage[s] * voxels[s]
    for s in range(topo.num_stages - 1):
        activation_voxels += topo.features_per_stage[s] * voxels[s]
    params = count_parameters(topo)
    training_bytes = 4 * batch_size * activation_voxels * 3 + 4 * params * 4
    return FootprintEstimate(
        activation_voxels=activation_voxels,
        parameter_count=params,
        training_bytes=training_bytes,
    )


def max_batch_size(topo: TopologyDescriptor, patch_size, budget_bytes: int) -> int:
    """Largest batch size whose estimated training footprint fits the budget."""
    base = estimate_footprint(topo, patch_size, 1)
    if base.training_bytes > budget_bytes:
        raise InfeasibleBudgetError(
            f"budget {budget_bytes} below batch-1 footprint {base.training_bytes}"
        )
    per_batch = 4 * base.activation_voxels * 3
    fixed = 4 * base.parameter_count * 4
    return (budget_bytes - fixed) // per_batch
