"""Binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then a flat payload of named little-endian float32 tensors. The
header carries the topology descriptor, seed, epoch counter, arbitrary JSON
metadata, and the tensor directory (name, shape, byte offset).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .networks import SegmentationNetwork, build_network
from .topology import TopologyDescriptor

MAGIC = b"PSEGCKPT"
VERSION = 1

PARAM_PREFIX = "param."
MOMENTUM_PREFIX = "momentum."


class CheckpointError(ValueError):
    """File is not a readable checkpoint."""


def _descriptor_to_json(topo: TopologyDescriptor) -> dict:
    return dataclasses.asdict(topo)


def _descriptor_from_json(obj: dict) -> TopologyDescriptor:
    def triples(v):
        return tuple(tuple(x) for x in v)

    return TopologyDescriptor(
        num_stages=obj["num_stages"],
        features_per_stage=tuple(obj["features_per_stage"]),
        strides_per_stage=triples(obj["strides_per_stage"]),
        kernel_sizes=triples(obj["kernel_sizes"]),
        encoder_type=obj["encoder_type"],
        blocks_per_stage_encoder=tuple(obj["blocks_per_stage_encoder"]),
        convs_per_stage_decoder=tuple(obj["convs_per_stage_decoder"]),
        deep_supervision=obj["deep_supervision"],
        num_input_channels=obj["num_input_channels"],
        num_classes=obj["num_classes"],
    )


@dataclass
class Checkpoint:
    descriptor: TopologyDescriptor
    seed: int
    epoch: int
    parameters: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    extra: dict


def _momentum_buffers(net: SegmentationNetwork, optimizer: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    by_id = {id(p): name for name, p in net.named_parameters()}
    out = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            buf = state.get("momentum_buffer")
            if buf is not None and id(p) in by_id:
                out[by_id[id(p)]] = buf
    return out


def save_checkpoint(
    path,
    net: SegmentationNetwork,
    seed: int,
    epoch: int,
    optimizer: torch.optim.Optimizer | None = None,
    extra: dict | None = None,
) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for name, value in net.state_dict().items():
        tensors.append((PARAM_PREFIX + name, value.detach().cpu().numpy().astype("<f4")))
    if optimizer is not None:
        for name, buf in _momentum_buffers(net, optimizer).items():
            tensors.append((MOMENTUM_PREFIX + name, buf.detach().cpu().numpy().astype("<f4")))

    directory = []
    offset = 0
    for name, arr in tensors:
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {
        "descriptor": _descriptor_to_json(net.descriptor),
        "seed": seed,
        "epoch": epoch,
        "extra": extra or {},
        "tensors": directory,
    }
    header_bytes = json.dumps(header).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for _, arr in tensors:
            f.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        prefix = f.read(12)
        if len(prefix) < 12:
            raise CheckpointError(f"{path}: truncated before header")
        (version,) = struct.unpack("<I", prefix[:4])
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (header_len,) = struct.unpack("<Q", prefix[4:])
        header_bytes = f.read(header_len)
        if len(header_bytes) < header_len:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header: {e}") from e
        payload = f.read()

    parameters = {}
    momentum = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        name = entry["name"]
        if name.startswith(PARAM_PREFIX):
            parameters[name[len(PARAM_PREFIX):]] = arr
        elif name.startswith(MOMENTUM_PREFIX):
            momentum[name[len(MOMENTUM_PREFIX):]] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor namespace {name!r}")

    return Checkpoint(
        descriptor=_descriptor_from_json(header["descriptor"]),
        seed=header["seed"],
        epoch=header["epoch"],
        parameters=parameters,
        momentum=momentum,
        extra=header.get("extra", {}),
    )


def restore_network(ckpt: Checkpoint) -> SegmentationNetwork:
    """Rebuild the network a checkpoint describes and load its weights."""
    net = build_network(ckpt.descriptor, ckpt.seed)
    state = {k: torch.from_numpy(v) for k, v in ckpt.parameters.items()}
    net.load_state_dict(state, strict=True)
    return net


def restore_momentum(ckpt: Checkpoint, net: SegmentationNetwork, optimizer: torch.optim.Optimizer) -> None:
    """Install saved momentum buffers into a freshly built optimizer."""
    by_name = dict(net.named_parameters())
    for name, arr in ckpt.momentum.items():
        p = by_name[name]
        optimizer.state[p]["momentum_buffer"] = torch.from_numpy(arr.copy())
