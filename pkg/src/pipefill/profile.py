"""Cost model for trainable backbones and frozen model components.

A model profile records, for every layer, the measured forward/backward
compute time, inter-layer communication sizes, gradient size, and output
size at a set of profiled batch sizes. Profiles are plain JSON documents
(schema in ``docs/profile-schema.json``); times are seconds, sizes are
bytes, batch-size keys are positive integers.

Costs at unprofiled batch sizes are linearly interpolated between the two
bracketing profiled keys. Querying outside the profiled range raises
``ExtrapolationError`` instead of extrapolating: the profile simply does
not cover that micro-batch or partial-batch size.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_left
from dataclasses import dataclass, field

from .errors import ExtrapolationError, ParseError, ValidationError

#: Per-layer cost maps, in document order.
COST_FIELDS = (
    "fwd_time",
    "bwd_time",
    "fwd_comm_bytes",
    "bwd_comm_bytes",
    "grad_bytes",
    "out_bytes",
)

_TIME_FIELDS = ("fwd_time", "bwd_time")

PROFILE_FORMAT = "model-profile/v1"


@dataclass(frozen=True)
class CommCosts:
    """Bandwidth (bytes/s) and latency (s) per communication type.

    ``ar`` is all-reduce (gradient synchronization), ``p2p`` is
    point-to-point (inter-stage activation transfer). Bandwidths must be
    strictly positive; latencies may be zero.
    """

    bandwidth_ar: float
    latency_ar: float
    bandwidth_p2p: float
    latency_p2p: float

    def __post_init__(self):
        for name in ("bandwidth_ar", "bandwidth_p2p"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"CommCosts.{name} must be strictly positive, got {value!r}")
        for name in ("latency_ar", "latency_p2p"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValidationError(f"CommCosts.{name} must be non-negative, got {value!r}")


@dataclass(frozen=True)
class ClusterConfig:
    """Device count plus communication parameters of the cluster."""

    world_size: int
    comm: CommCosts

    def __post_init__(self):
        if not (isinstance(self.world_size, int) and self.world_size >= 1):
            raise ValidationError(f"ClusterConfig.world_size must be >= 1, got {self.world_size!r}")


@dataclass(frozen=True)
class LayerCost:
    """Profiled costs of one layer, each as a map batch_size -> value.

    ``fwd_comm_bytes``/``bwd_comm_bytes`` measure the transfer between this
    layer and the next one, so the last layer's entries describe the data
    crossing a stage boundary placed directly after it.
    """

    fwd_time: dict[int, float]
    bwd_time: dict[int, float]
    fwd_comm_bytes: dict[int, int]
    bwd_comm_bytes: dict[int, int]
    grad_bytes: dict[int, int]
    out_bytes: dict[int, int]


@dataclass(frozen=True)
class ComponentProfile:
    """An ordered chain of layers; execution order equals list order."""

    name: str
    layers: tuple[LayerCost, ...]
    trainable: bool

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass(frozen=True)
class ModelProfile:
    """Whole-model cost profile.

    ``backbones`` are the trainable components that get pipelined (one, or
    two for a cascaded model). ``frozen`` components run forward-only and
    are the bubble-filling material. ``frozen_deps`` is an acyclic edge
    list ``(producer_name, consumer_name)`` over frozen components.
    ``selfcond_prob`` is the probability that a training iteration runs the
    extra self-conditioning forward pass.
    """

    backbones: tuple[ComponentProfile, ...]
    frozen: tuple[ComponentProfile, ...] = ()
    frozen_deps: tuple[tuple[str, str], ...] = ()
    selfcond_prob: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "backbones", tuple(self.backbones))
        object.__setattr__(self, "frozen", tuple(self.frozen))
        object.__setattr__(self, "frozen_deps", tuple(tuple(e) for e in self.frozen_deps))

    def frozen_dep_indices(self) -> list[tuple[int, int]]:
        """Dependency edges as (producer_index, consumer_index) pairs."""
        pos = {c.name: i for i, c in enumerate(self.frozen)}
        return [(pos[a], pos[b]) for a, b in self.frozen_deps]


def cost_at(layer: LayerCost, fieldname: str, batch) -> float:
    """Evaluate one cost map at ``batch``, interpolating linearly.

    ``batch`` may be fractional (bubble filling divides a batch across idle
    devices); profiled keys themselves are integers. Exact keys return the
    stored value; values between two keys interpolate linearly; values
    outside the profiled range raise ``ExtrapolationError``.
    """
    if fieldname not in COST_FIELDS:
        raise ValueError(f"unknown cost field {fieldname!r}")
    if not batch > 0:
        raise ValueError(f"batch must be positive, got {batch!r}")
    values = getattr(layer, fieldname)
    exact = values.get(int(batch)) if float(batch).is_integer() else None
    if exact is not None:
        return exact
    keys = sorted(values)
    if batch < keys[0] or batch > keys[-1]:
        raise ExtrapolationError(
            f"batch {batch} outside profiled range [{keys[0]}, {keys[-1]}] for {fieldname}"
        )
    hi = bisect_left(keys, batch)
    k0, k1 = keys[hi - 1], keys[hi]
    v0, v1 = values[k0], values[k1]
    return v0 + (v1 - v0) * (batch - k0) / (k1 - k0)


def _validate_layer(comp: ComponentProfile, index: int, layer: LayerCost):
    where = f"layer {index} of component {comp.name!r}"
    key_set = None
    for name in COST_FIELDS:
        values = getattr(layer, name)
        if not isinstance(values, dict) or not values:
            raise ValidationError(f"{where}: {name} map must be non-empty")
        for k, v in values.items():
            if not isinstance(k, int) or isinstance(k, bool) or k <= 0:
                raise ValidationError(f"{where}: {name} key {k!r} is not a positive integer")
            if name in _TIME_FIELDS:
                if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                    raise ValidationError(f"{where}: {name}[{k}] must be a finite non-negative time")
            else:
                if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                    raise ValidationError(f"{where}: {name}[{k}] must be a non-negative integer byte count")
        if key_set is None:
            key_set = set(values)
        elif set(values) != key_set:
            raise ValidationError(f"{where}: {name} has different batch keys than the other cost maps")
    if not comp.trainable and any(v != 0 for v in layer.bwd_time.values()):
        raise ValidationError(f"{where}: non-trainable layers must have zero bwd_time")


def _find_cycle(names: list[str], edges: list[tuple[str, str]]) -> list[str] | None:
    adjacent: dict[str, list[str]] = {n: [] for n in names}
    for a, b in edges:
        adjacent[a].append(b)
    state = dict.fromkeys(names, 0)  # 0 unvisited, 1 on stack, 2 done
    stack: list[str] = []

    def visit(node):
        state[node] = 1
        stack.append(node)
        for nxt in adjacent[node]:
            if state[nxt] == 1:
                return stack[stack.index(nxt):] + [nxt]
            if state[nxt] == 0:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        state[node] = 2
        return None

    for name in names:
        if state[name] == 0:
            found = visit(name)
            if found:
                return found
    return None


def validate_profile(profile: ModelProfile) -> ModelProfile:
    """Check every ModelProfile invariant; raise ValidationError naming the
    violated invariant and the offending component or layer."""
    if not 1 <= len(profile.backbones) <= 2:
        raise ValidationError(
            f"model must have 1 or 2 trainable backbones for planning, got {len(profile.backbones)}"
        )
    if not (isinstance(profile.selfcond_prob, (int, float)) and 0.0 <= profile.selfcond_prob <= 1.0):
        raise ValidationError(f"selfcond_prob must be in [0, 1], got {profile.selfcond_prob!r}")
    seen: set[str] = set()
    for comp in profile.backbones + profile.frozen:
        if comp.name in seen:
            raise ValidationError(f"duplicate component name {comp.name!r}")
        seen.add(comp.name)
        if not comp.layers:
            raise ValidationError(f"component {comp.name!r} has no layers")
    for comp in profile.backbones:
        if not comp.trainable:
            raise ValidationError(f"backbone {comp.name!r} must be trainable")
        for i, layer in enumerate(comp.layers):
            _validate_layer(comp, i, layer)
    frozen_names = [c.name for c in profile.frozen]
    for comp in profile.frozen:
        if comp.trainable:
            raise ValidationError(f"frozen component {comp.name!r} must not be trainable")
        for i, layer in enumerate(comp.layers):
            _validate_layer(comp, i, layer)
    for a, b in profile.frozen_deps:
        for name in (a, b):
            if name not in frozen_names:
                raise ValidationError(f"frozen_deps edge ({a!r}, {b!r}) names unknown frozen component {name!r}")
    cycle = _find_cycle(frozen_names, list(profile.frozen_deps))
    if cycle:
        raise ValidationError("frozen_deps must be acyclic, found cycle: " + " -> ".join(cycle))
    return profile


def _layer_from_dict(raw, where: str) -> LayerCost:
    if not isinstance(raw, dict):
        raise ParseError(f"{where}: layer entry must be an object")
    fields = {}
    for name in COST_FIELDS:
        if name not in raw:
            raise ParseError(f"{where}: missing cost map {name!r}")
        values = raw[name]
        if not isinstance(values, dict):
            raise ParseError(f"{where}: {name} must be an object of batch -> value")
        parsed = {}
        for k, v in values.items():
            try:
                key = int(k)
            except (TypeError, ValueError):
                raise ParseError(f"{where}: {name} key {k!r} is not an integer") from None
            parsed[key] = v
        fields[name] = parsed
    unknown = set(raw) - set(COST_FIELDS)
    if unknown:
        raise ParseError(f"{where}: unknown layer fields {sorted(unknown)}")
    return LayerCost(**fields)


def _component_from_dict(raw, trainable: bool) -> ComponentProfile:
    if not isinstance(raw, dict) or "name" not in raw or "layers" not in raw:
        raise ParseError("component entry must be an object with 'name' and 'layers'")
    name = raw["name"]
    if not isinstance(name, str) or not name:
        raise ParseError(f"component name must be a non-empty string, got {name!r}")
    declared = raw.get("trainable", trainable)
    if declared is not trainable:
        raise ParseError(f"component {name!r}: trainable flag {declared!r} does not match its section")
    layers = raw["layers"]
    if not isinstance(layers, list):
        raise ParseError(f"component {name!r}: layers must be a list")
    parsed = tuple(
        _layer_from_dict(layer, f"layer {i} of component {name!r}") for i, layer in enumerate(layers)
    )
    return ComponentProfile(name=name, layers=parsed, trainable=trainable)


def profile_from_dict(doc) -> ModelProfile:
    """Build and validate a ModelProfile from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ParseError("profile document must be a JSON object")
    if doc.get("format") != PROFILE_FORMAT:
        raise ParseError(f"unsupported profile format {doc.get('format')!r}, expected {PROFILE_FORMAT!r}")
    for key in ("backbones",):
        if key not in doc:
            raise ParseError(f"profile document missing {key!r}")
    backbones = doc["backbones"]
    frozen = doc.get("frozen", [])
    deps = doc.get("frozen_deps", [])
    if not isinstance(backbones, list) or not isinstance(frozen, list) or not isinstance(deps, list):
        raise ParseError("'backbones', 'frozen' and 'frozen_deps' must be lists")
    edges = []
    for edge in deps:
        if not (isinstance(edge, list) and len(edge) == 2 and all(isinstance(x, str) for x in edge)):
            raise ParseError(f"frozen_deps entry {edge!r} must be a [producer, consumer] name pair")
        edges.append((edge[0], edge[1]))
    prob = doc.get("selfcond_prob", 0.0)
    if not isinstance(prob, (int, float)) or isinstance(prob, bool):
        raise ParseError(f"selfcond_prob must be a number, got {prob!r}")
    profile = ModelProfile(
        backbones=tuple(_component_from_dict(c, True) for c in backbones),
        frozen=tuple(_component_from_dict(c, False) for c in frozen),
        frozen_deps=tuple(edges),
        selfcond_prob=float(prob),
    )
    return validate_profile(profile)


def profile_to_dict(profile: ModelProfile) -> dict:
    def layer_doc(layer):
        return {
            name: {str(k): v for k, v in sorted(getattr(layer, name).items())}
            for name in COST_FIELDS
        }

    def comp_doc(comp):
        return {
            "name": comp.name,
            "trainable": comp.trainable,
            "layers": [layer_doc(layer) for layer in comp.layers],
        }

    return {
        "format": PROFILE_FORMAT,
        "selfcond_prob": profile.selfcond_prob,
        "backbones": [comp_doc(c) for c in profile.backbones],
        "frozen": [comp_doc(c) for c in profile.frozen],
        "frozen_deps": [list(e) for e in profile.frozen_deps],
    }


def load_profile(path) -> ModelProfile:
    """Load and validate a profile document from ``path``."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise ParseError(f"cannot read profile {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"profile {path} is not valid JSON: {exc}") from exc
    return profile_from_dict(doc)


def save_profile(profile: ModelProfile, path) -> None:
    """Write ``profile`` to ``path``; the result re-loads bit-exactly."""
    validate_profile(profile)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(profile_to_dict(profile), handle, indent=2, sort_keys=True)
        handle.write("\n")
