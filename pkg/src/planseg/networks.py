"""3D segmentation networks built from a topology descriptor.

Two encoder families share one decoder: plain stages stack conv-norm-nonlin
units, residual stages use a 1x1x1 stride/channel projection followed by
pre-activation residual blocks. Deep supervision attaches a 1x1x1 head at
every resolution, bottleneck included.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .topology import TopologyDescriptor, PlanningError, count_parameters

LEAKY_SLOPE = 0.01


class ConstructionError(ValueError):
    """Descriptor cannot be turned into a network."""


class ShapeError(ValueError):
    """Input spatial shape incompatible with the network's strides."""


def _same_padding(kernel):
    return tuple(k // 2 for k in kernel)


class ConvUnit(nn.Module):
    """conv(3x3x3) -> instance norm -> leaky ReLU."""

    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1, 1)):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel, stride=stride, padding=_same_padding(kernel))
        self.norm = nn.InstanceNorm3d(out_ch, affine=True)
        self.act = nn.LeakyReLU(LEAKY_SLOPE, inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class PlainStage(nn.Module):
    """Stack of conv units; the first one carries the stage stride."""

    def __init__(self, in_ch, out_ch, kernel, stride, num_convs):
        super().__init__()
        units = [ConvUnit(in_ch, out_ch, kernel, stride)]
        units += [ConvUnit(out_ch, out_ch, kernel) for _ in range(num_convs - 1)]
        self.units = nn.Sequential(*units)

    def forward(self, x):
        return self.units(x)


class ResidualBlock(nn.Module):
    """Pre-activation residual block: two norm-nonlin-conv units plus skip."""

    def __init__(self, channels, kernel):
        super().__init__()
        pad = _same_padding(kernel)
        self.norm1 = nn.InstanceNorm3d(channels, affine=True)
        self.conv1 = nn.Conv3d(channels, channels, kernel, padding=pad)
        self.norm2 = nn.InstanceNorm3d(channels, affine=True)
        self.conv2 = nn.Conv3d(channels, channels, kernel, padding=pad)
        self.act = nn.LeakyReLU(LEAKY_SLOPE, inplace=False)

    def forward(self, x):
        h = self.conv1(self.act(self.norm1(x)))
        h = self.conv2(self.act(self.norm2(h)))
        return x + h


class ResidualStage(nn.Module):
    """Optional 1x1x1 stride/channel projection, then residual blocks."""

    def __init__(self, in_ch, out_ch, kernel, stride, num_blocks):
        super().__init__()
        if stride != (1, 1, 1) or in_ch != out_ch:
            self.projection = nn.Conv3d(in_ch, out_ch, 1, stride=stride)
        else:
            self.projection = nn.Identity()
        self.blocks = nn.Sequential(*[ResidualBlock(out_ch, kernel) for _ in range(num_blocks)])

    def forward(self, x):
        return self.blocks(self.projection(x))


class DecoderStage(nn.Module):
    """Transposed-conv upsampling, skip concatenation, conv units."""

    def __init__(self, deep_ch, skip_ch, kernel, up_stride, num_convs):
        super().__init__()
        self.up = nn.ConvTranspose3d(deep_ch, skip_ch, up_stride, stride=up_stride)
        units = [ConvUnit(2 * skip_ch, skip_ch, kernel)]
        units += [ConvUnit(skip_ch, skip_ch, kernel) for _ in range(num_convs - 1)]
        self.units = nn.Sequential(*units)

    def forward(self, deep, skip):
        up = self.up(deep)
        return self.units(torch.cat([up, skip], dim=1))


class SegmentationNetwork(nn.Module):
    """U-Net built from a TopologyDescriptor.

    forward() returns logits at every supervised resolution: index 0 is the
    full-resolution primary output; with deep supervision, index r has shape
    input/cumulative_stride(r), the last one sitting at the bottleneck.
    """

    def __init__(self, descriptor: TopologyDescriptor):
        super().__init__()
        try:
            from .topology import _validate_descriptor

            _validate_descriptor(descriptor)
        except PlanningError as e:
            raise ConstructionError(str(e)) from e
        self.descriptor = descriptor

        d = descriptor
        stages = []
        in_ch = d.num_input_channels
        for s in range(d.num_stages):
            out_ch = d.features_per_stage[s]
            if d.encoder_type == "plain":
                stages.append(
                    PlainStage(in_ch, out_ch, d.kernel_sizes[s], d.strides_per_stage[s],
                               d.blocks_per_stage_encoder[s])
                )
            else:
                stages.append(
                    ResidualStage(in_ch, out_ch, d.kernel_sizes[s], d.strides_per_stage[s],
                                  d.blocks_per_stage_encoder[s])
                )
            in_ch = out_ch
        self.encoder_stages = nn.ModuleList(stages)

        decoders = []
        for s in range(d.num_stages - 1):
            decoders.append(
                DecoderStage(
                    d.features_per_stage[s + 1],
                    d.features_per_stage[s],
                    d.kernel_sizes[s],
                    d.strides_per_stage[s + 1],
                    d.convs_per_stage_decoder[s],
                )
            )
        self.decoder_stages = nn.ModuleList(decoders)

        head_levels = list(range(d.num_stages)) if d.deep_supervision else [0]
        self.head_levels = head_levels
        self.heads = nn.ModuleDict(
            {str(s): nn.Conv3d(d.features_per_stage[s], d.num_classes, 1) for s in head_levels}
        )

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def check_input_shape(self, spatial) -> None:
        cum = self.descriptor.cumulative_strides()[-1]
        for a in range(3):
            if spatial[a] % cum[a] != 0:
                raise ShapeError(
                    f"input axis {a} ({spatial[a]}) not divisible by cumulative stride {cum[a]}"
                )

    def encode(self, x) -> list[torch.Tensor]:
        """Per-stage encoder outputs; the last entry is the bottleneck."""
        feats = []
        for stage in self.encoder_stages:
            x = stage(x)
            feats.append(x)
        return feats

    def forward(self, x) -> list[torch.Tensor]:
        self.check_input_shape(x.shape[2:])
        skips = self.encode(x)
        d = self.descriptor

        outputs: dict[int, torch.Tensor] = {}
        y = skips[-1]
        if d.deep_supervision:
            outputs[d.num_stages - 1] = self.heads[str(d.num_stages - 1)](y)
        for s in range(d.num_stages - 2, -1, -1):
            y = self.decoder_stages[s](y, skips[s])
            if s == 0 or d.deep_supervision:
                outputs[s] = self.heads[str(s)](y)
        return [outputs[r] for r in sorted(outputs)]


def _init_parameters(net: nn.Module) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm3d) and m.affine:
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_network(topo: TopologyDescriptor, seed: int) -> SegmentationNetwork:
    """Construct a network with deterministic, seed-controlled initialization."""
    torch.manual_seed(seed)
    net = SegmentationNetwork(topo)
    _init_parameters(net)
    expected = count_parameters(topo)
    actual = net.parameter_count
    if actual != expected:
        raise ConstructionError(
            f"built network has {actual} parameters, planner predicts {expected}"
        )
    return net


def linearize(net: SegmentationNetwork, weight: float = 0.05, keep_norm: bool = True) -> SegmentationNetwork:
    """Turn a network into a constant-weight instance for probing.

    Sets every conv / transposed-conv weight to `weight`, all biases to zero,
    and (with keep_norm=False) swaps instance norms for identities so the
    network becomes linear with nonnegative responses.
    """
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                m.weight.fill_(weight)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm3d) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
    if not keep_norm:
        for module in net.modules():
            for name, child in list(module.named_children()):
                if isinstance(child, nn.InstanceNorm3d):
                    setattr(module, name, nn.Identity())
    return net
