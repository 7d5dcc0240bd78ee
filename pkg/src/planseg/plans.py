"""Plans file: parsing, inheritance resolution, validation, serialization.

A plans file is a JSON document with named configurations. A configuration
may inherit from another one in the same file and override a sparse set of
keys; everything an experiment needs (batch size, patch size, encoder type,
inference settings, ...) is a key in this file, so method changes are config
edits, never code edits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from typing import Any


class PlansError(Exception):
    """Base class for plans-file errors."""


class PlansParseError(PlansError):
    """Malformed JSON; message carries line/column."""


class PlansSchemaError(PlansError):
    """Structurally valid JSON that violates the plans schema."""


class UnknownConfigurationError(PlansError):
    """Requested configuration name does not exist."""


class InheritanceCycleError(PlansError):
    """The inherits_from graph contains a cycle."""

    def __init__(self, chain: list[str]):
        self.chain = list(chain)
        super().__init__("inheritance cycle: " + " -> ".join(chain))


class PlanValidationError(PlansError):
    """A resolved configuration violates an invariant."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class ResolvedConfiguration:
    """A configuration after inheritance resolution, defaulting and validation.

    This is the single source of truth consumed by training and inference.
    """

    batch_size: int = 2
    patch_size: tuple[int, int, int] = (128, 128, 128)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    normalization_schemes: tuple[str, ...] = ("CT", "CT")
    encoder_type: str = "plain"
    features_base: int = 32
    features_cap: int = 320
    blocks_per_stage_encoder: tuple[int, ...] = ()
    convs_per_stage_decoder: tuple[int, ...] = ()
    kernel_sizes: tuple[tuple[int, int, int], ...] = ()
    strides_per_stage: tuple[tuple[int, int, int], ...] = ()
    deep_supervision: bool = True
    oversample_foreground_fraction: float = 1.0 / 3.0
    num_epochs: int = 25
    initial_learning_rate: float = 0.01
    inference_step_fraction: float = 0.5
    mirror_axes: tuple[int, ...] = (0, 1, 2)

    @property
    def num_stages(self) -> int:
        return len(self.strides_per_stage)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = _jsonify(v)
        return out


# Keys a configuration object may carry. Everything in the resolved schema is
# overridable; this is deliberate (the whole workflow is editing one key at a
# time and rerunning).
SCHEMA_FIELDS: tuple[str, ...] = tuple(f.name for f in fields(ResolvedConfiguration))

# Filled by the topology planner when a configuration omits them.
DERIVED_FIELDS: tuple[str, ...] = (
    "kernel_sizes",
    "strides_per_stage",
    "blocks_per_stage_encoder",
    "convs_per_stage_decoder",
)

_INHERITS_KEY = "inherits_from"


@dataclass
class RawConfiguration:
    """Sparse overrides of one named configuration, kept verbatim."""

    inherits_from: str | None = None
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass
class PlanFile:
    """Parsed plans document: a name plus named raw configurations."""

    plans_name: str
    configurations: dict[str, RawConfiguration]


def _jsonify(v):
    if isinstance(v, tuple):
        return [_jsonify(x) for x in v]
    return v


def _reject_duplicate_keys(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise PlansSchemaError(f"duplicate key '{k}' in JSON object")
        seen[k] = v
    return seen


def parse_plans(text: str) -> PlanFile:
    """Parse a plans JSON document. No inheritance resolution is performed.

    Raises :class:`PlansParseError` on malformed JSON (with line/column),
    :class:`PlansSchemaError` on unknown or duplicate keys, and
    :class:`InheritanceCycleError` on cyclic inheritance.
    """
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as e:
        raise PlansParseError(
            f"malformed JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from e

    if not isinstance(doc, dict):
        raise PlansSchemaError("top level must be a JSON object")
    unknown = set(doc) - {"plans_name", "configurations"}
    if unknown:
        raise PlansSchemaError(f"unknown top-level key(s): {sorted(unknown)}")
    for required in ("plans_name", "configurations"):
        if required not in doc:
            raise PlansSchemaError(f"missing top-level key '{required}'")
    if not isinstance(doc["plans_name"], str):
        raise PlansSchemaError("'plans_name' must be a string")
    if not isinstance(doc["configurations"], dict):
        raise PlansSchemaError("'configurations' must be an object")

    configurations: dict[str, RawConfiguration] = {}
    for name, body in doc["configurations"].items():
        if not isinstance(name, str) or not name:
            raise PlansSchemaError("configuration names must be non-empty strings")
        if not isinstance(body, dict):
            raise PlansSchemaError(f"configuration '{name}' must be an object")
        unknown = set(body) - set(SCHEMA_FIELDS) - {_INHERITS_KEY}
        if unknown:
            raise PlansSchemaError(
                f"configuration '{name}' has unknown key(s): {sorted(unknown)}"
            )
        parent = body.get(_INHERITS_KEY)
        if parent is not None and not isinstance(parent, str):
            raise PlansSchemaError(
                f"configuration '{name}': '{_INHERITS_KEY}' must be a string"
            )
        overrides = {k: v for k, v in body.items() if k != _INHERITS_KEY}
        configurations[name] = RawConfiguration(inherits_from=parent, overrides=overrides)

    plan = PlanFile(plans_name=doc["plans_name"], configurations=configurations)
    _check_inheritance_graph(plan)
    return plan


def _check_inheritance_graph(plan: PlanFile) -> None:
    for name, raw in plan.configurations.items():
        parent = raw.inherits_from
        if parent is not None and parent not in plan.configurations:
            raise PlansSchemaError(
                f"configuration '{name}' inherits from unknown configuration '{parent}'"
            )
    for name in plan.configurations:
        inheritance_chain(plan, name)  # raises on cycles


def inheritance_chain(plan: PlanFile, name: str) -> list[str]:
    """Chain from root ancestor to `name` (inclusive). Raises on cycles."""
    if name not in plan.configurations:
        raise UnknownConfigurationError(f"no configuration named '{name}'")
    chain = [name]
    seen = {name}
    current = plan.configurations[name].inherits_from
    while current is not None:
        if current not in plan.configurations:
            raise PlansSchemaError(
                f"configuration '{chain[-1]}' inherits from unknown configuration '{current}'"
            )
        if current in seen:
            raise InheritanceCycleError(list(reversed(chain)) + [current])
        chain.append(current)
        seen.add(current)
        current = plan.configurations[current].inherits_from
    chain.reverse()
    return chain


def _deep_merge(base: dict, override: dict) -> dict:
    """Child scalars and lists replace; nested maps merge key by key."""
    merged = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _deep_merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def _as_int_triple(name, v):
    if (
        not isinstance(v, (list, tuple))
        or len(v) != 3
        or not all(isinstance(x, int) and not isinstance(x, bool) for x in v)
    ):
        raise PlanValidationError(name, f"must be 3 integers, got {v!r}")
    return tuple(v)


def _as_real_triple(name, v):
    if (
        not isinstance(v, (list, tuple))
        or len(v) != 3
        or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)
    ):
        raise PlanValidationError(name, f"must be 3 reals, got {v!r}")
    return tuple(float(x) for x in v)


def _coerce(name: str, value: Any) -> Any:
    """Coerce a JSON value to the internal (tuple-based) representation."""
    if name in ("batch_size", "features_base", "features_cap", "num_epochs"):
        if not isinstance(value, int) or isinstance(value, bool):
            raise PlanValidationError(name, f"must be an integer, got {value!r}")
        return value
    if name in ("initial_learning_rate", "oversample_foreground_fraction", "inference_step_fraction"):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise PlanValidationError(name, f"must be a real number, got {value!r}")
        return float(value)
    if name == "deep_supervision":
        if not isinstance(value, bool):
            raise PlanValidationError(name, f"must be a boolean, got {value!r}")
        return value
    if name == "encoder_type":
        if value not in ("plain", "residual"):
            raise PlanValidationError(name, f"must be 'plain' or 'residual', got {value!r}")
        return value
    if name == "patch_size":
        return _as_int_triple(name, value)
    if name == "spacing":
        return _as_real_triple(name, value)
    if name == "normalization_schemes":
        if not isinstance(value, (list, tuple)) or not all(isinstance(s, str) for s in value):
            raise PlanValidationError(name, "must be a list of scheme tags")
        return tuple(value)
    if name in ("blocks_per_stage_encoder", "convs_per_stage_decoder"):
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in value
        ):
            raise PlanValidationError(name, "must be a list of integers")
        return tuple(value)
    if name in ("kernel_sizes", "strides_per_stage"):
        if not isinstance(value, (list, tuple)):
            raise PlanValidationError(name, "must be a list of 3-tuples")
        return tuple(_as_int_triple(name, x) for x in value)
    if name == "mirror_axes":
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in value
        ):
            raise PlanValidationError(name, "must be a list of integers")
        return tuple(value)
    raise PlansSchemaError(f"unknown configuration key '{name}'")


def resolve_configuration(plan: PlanFile, name: str) -> ResolvedConfiguration:
    """Resolve `name` through its inheritance chain, default, and validate.

    Walks the chain root-first, merging each configuration's overrides
    (scalars and lists replace, maps deep-merge), fills schema defaults,
    derives missing per-stage topology fields from the patch size, and
    validates every invariant.
    """
    chain = inheritance_chain(plan, name)
    merged: dict[str, Any] = {}
    for link in chain:
        merged = _deep_merge(merged, plan.configurations[link].overrides)

    values = {k: _coerce(k, v) for k, v in merged.items()}

    defaults = ResolvedConfiguration()
    for f in fields(ResolvedConfiguration):
        if f.name in values or f.name in DERIVED_FIELDS:
            continue
        values.setdefault(f.name, getattr(defaults, f.name))

    if any(k not in values for k in DERIVED_FIELDS):
        from .topology import PlanningError, plan_topology

        try:
            topo = plan_topology(
                values["patch_size"],
                values["spacing"],
                values["encoder_type"],
                num_input_channels=len(values["normalization_schemes"]),
                num_classes=2,
                features_base=values["features_base"],
                features_cap=values["features_cap"],
            )
        except PlanningError as e:
            raise PlanValidationError("patch_size", str(e)) from e
        derived = {
            "kernel_sizes": topo.kernel_sizes,
            "strides_per_stage": topo.strides_per_stage,
            "blocks_per_stage_encoder": topo.blocks_per_stage_encoder,
            "convs_per_stage_decoder": topo.convs_per_stage_decoder,
        }
        for k, v in derived.items():
            values.setdefault(k, v)

    config = ResolvedConfiguration(**values)
    validate_configuration(config)
    return config


def validate_configuration(config: ResolvedConfiguration) -> None:
    """Check every ResolvedConfiguration invariant; raise naming the field."""
    if config.batch_size < 1:
        raise PlanValidationError("batch_size", "must be a positive integer")
    if any(p < 1 for p in config.patch_size):
        raise PlanValidationError("patch_size", "axes must be positive")
    if any(s <= 0 for s in config.spacing):
        raise PlanValidationError("spacing", "must be positive")
    if not config.normalization_schemes:
        raise PlanValidationError("normalization_schemes", "needs one tag per channel")
    for tag in config.normalization_schemes:
        if tag != "CT":
            raise PlanValidationError(
                "normalization_schemes", f"unsupported scheme tag {tag!r} (supported: 'CT')"
            )
    if config.features_base < 1:
        raise PlanValidationError("features_base", "must be positive")
    if config.features_cap < 1:
        raise PlanValidationError("features_cap", "must be positive")
    if config.num_epochs < 1:
        raise PlanValidationError("num_epochs", "must be positive")
    if config.initial_learning_rate <= 0:
        raise PlanValidationError("initial_learning_rate", "must be positive")
    if not (0.0 <= config.oversample_foreground_fraction <= 1.0):
        raise PlanValidationError("oversample_foreground_fraction", "must be in [0, 1]")
    if not (0.0 < config.inference_step_fraction <= 1.0):
        raise PlanValidationError("inference_step_fraction", "must be in (0, 1]")
    if len(set(config.mirror_axes)) != len(config.mirror_axes) or any(
        a not in (0, 1, 2) for a in config.mirror_axes
    ):
        raise PlanValidationError("mirror_axes", "must be a subset of {0, 1, 2}")

    num_stages = len(config.strides_per_stage)
    if num_stages < 2:
        raise PlanValidationError("strides_per_stage", "need at least 2 stages")
    if len(config.kernel_sizes) != num_stages:
        raise PlanValidationError(
            "kernel_sizes",
            f"{len(config.kernel_sizes)} entries for {num_stages} stages",
        )
    if config.strides_per_stage[0] != (1, 1, 1):
        raise PlanValidationError("strides_per_stage", "stage 0 must have stride (1,1,1)")
    if any(s < 1 for stride in config.strides_per_stage for s in stride):
        raise PlanValidationError("strides_per_stage", "strides must be positive")
    if any(k < 1 for ks in config.kernel_sizes for k in ks):
        raise PlanValidationError("kernel_sizes", "kernels must be positive")
    if len(config.blocks_per_stage_encoder) != num_stages:
        raise PlanValidationError(
            "blocks_per_stage_encoder",
            f"{len(config.blocks_per_stage_encoder)} entries for {num_stages} stages",
        )
    if any(b < 1 for b in config.blocks_per_stage_encoder):
        raise PlanValidationError("blocks_per_stage_encoder", "must be positive")
    if len(config.convs_per_stage_decoder) != num_stages - 1:
        raise PlanValidationError(
            "convs_per_stage_decoder",
            f"{len(config.convs_per_stage_decoder)} entries for {num_stages - 1} decoder stages",
        )
    if any(c < 1 for c in config.convs_per_stage_decoder):
        raise PlanValidationError("convs_per_stage_decoder", "must be positive")

    for axis in range(3):
        total = 1
        for stride in config.strides_per_stage:
            total *= stride[axis]
        if config.patch_size[axis] % total != 0:
            raise PlanValidationError(
                "patch_size",
                f"axis {axis} ({config.patch_size[axis]}) not divisible by "
                f"cumulative stride {total}",
            )


def diff_configurations(
    a: ResolvedConfiguration, b: ResolvedConfiguration
) -> list[tuple[str, Any, Any]]:
    """Fields whose resolved values differ, as (field, value_in_a, value_in_b)."""
    out = []
    for f in fields(ResolvedConfiguration):
        va, vb = getattr(a, f.name), getattr(b, f.name)
        if va != vb:
            out.append((f.name, va, vb))
    return out


def serialize_plans(plan: PlanFile) -> str:
    """Serialize with deterministic key ordering; round-trips through parse."""
    configs = {}
    for name in sorted(plan.configurations):
        raw = plan.configurations[name]
        body: dict[str, Any] = {}
        if raw.inherits_from is not None:
            body[_INHERITS_KEY] = raw.inherits_from
        for key in SCHEMA_FIELDS:
            if key in raw.overrides:
                body[key] = _jsonify(raw.overrides[key])
        configs[name] = body
    doc = {"plans_name": plan.plans_name, "configurations": configs}
    return json.dumps(doc, indent=2) + "\n"


def load_plans(path) -> PlanFile:
    with open(path, "r", encoding="utf-8") as f:
        return parse_plans(f.read())


def save_plans(plan: PlanFile, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_plans(plan))
