"""Per-op merge rules: which counterpart op absorbs M separate instances.

The whole merging story rests on one observation: for these ops, a weight
tensor only ever binds to activations produced by the model it belongs to.
So M instances can run as one op if we pack per-model operands along an
axis the op treats independently:

* ops with channel-wise weight binding (conv, the norms) pack on the
  channel axis and become grouped variants with M times the groups,
* matmuls pack on a model axis and become batched matmuls,
* weightless elementwise and spatial ops work under either packing,
* ops that reduce along an axis (softmax) work under any packing that
  does not pack their reduction axis.

Structural ops (Concat, Reshape, Transpose, Pack, Unpack) reorganize the
very axes packing relies on, so graphs containing them are rejected; the
table still carries an entry for each so every kind's status is queryable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArchitectureMismatchError, UnsupportedOpError
from .ir import MergeDim, OpKind, TensorSpec, channel_axis
from .engine import TensorValue

BATCH_STACK = "batch-stack"
CHANNEL_CONCAT = "channel-concat"


@dataclass(frozen=True)
class WeightRecipe:
    """How one weight slot of a merged op is assembled from M tensors.

    Both recipes lay models out model-major; ``new_axis`` marks the one case
    (plain matmul becoming a batch matmul) where the model axis is new
    rather than an existing leading axis.
    """

    slot: str
    mode: str  # BATCH_STACK or CHANNEL_CONCAT
    new_axis: bool = False


@dataclass(frozen=True)
class MergeRule:
    """Merge behavior of one op kind. ``target`` is None when not mergeable."""

    source: OpKind
    target: OpKind | None
    dim: MergeDim
    recipes: tuple[WeightRecipe, ...] = ()
    note: str = ""

    @property
    def mergeable(self) -> bool:
        return self.target is not None


def _identity(kind: OpKind, note: str) -> MergeRule:
    return MergeRule(kind, kind, MergeDim.DONT_CARE, (), note)


def _structural(kind: OpKind) -> MergeRule:
    return MergeRule(kind, None, MergeDim.DONT_CARE, (),
                     "not mergeable: rearranges the axes packing relies on")


_CONV_RECIPES = (WeightRecipe("kernel", CHANNEL_CONCAT), WeightRecipe("bias", CHANNEL_CONCAT))
_NORM_RECIPES = (WeightRecipe("gamma", CHANNEL_CONCAT), WeightRecipe("beta", CHANNEL_CONCAT))

RULES: dict[OpKind, MergeRule] = {
    OpKind.CONV2D: MergeRule(
        OpKind.CONV2D, OpKind.GROUPED_CONV2D, MergeDim.CHANNEL, _CONV_RECIPES,
        "becomes a grouped conv with M groups"),
    OpKind.GROUPED_CONV2D: MergeRule(
        OpKind.GROUPED_CONV2D, OpKind.GROUPED_CONV2D, MergeDim.CHANNEL, _CONV_RECIPES,
        "group count scales from G to M*G"),
    OpKind.MATMUL: MergeRule(
        OpKind.MATMUL, OpKind.BATCH_MATMUL, MergeDim.BATCH,
        (WeightRecipe("weight", BATCH_STACK, new_axis=True),
         WeightRecipe("bias", BATCH_STACK, new_axis=True)),
        "weights stack on a new leading model axis"),
    OpKind.BATCH_MATMUL: MergeRule(
        OpKind.BATCH_MATMUL, OpKind.BATCH_MATMUL, MergeDim.BATCH,
        (WeightRecipe("weight", BATCH_STACK), WeightRecipe("bias", BATCH_STACK)),
        "batch count scales from b to M*b"),
    OpKind.LAYER_NORM: MergeRule(
        OpKind.LAYER_NORM, OpKind.GROUP_NORM, MergeDim.CHANNEL, _NORM_RECIPES,
        "becomes a group norm with M groups"),
    OpKind.GROUP_NORM: MergeRule(
        OpKind.GROUP_NORM, OpKind.GROUP_NORM, MergeDim.CHANNEL, _NORM_RECIPES,
        "group count scales from G to M*G"),
    OpKind.BATCH_NORM: MergeRule(
        OpKind.BATCH_NORM, OpKind.BATCH_NORM, MergeDim.CHANNEL,
        (WeightRecipe("gamma", CHANNEL_CONCAT), WeightRecipe("beta", CHANNEL_CONCAT),
         WeightRecipe("running_mean", CHANNEL_CONCAT),
         WeightRecipe("running_var", CHANNEL_CONCAT)),
        "per-channel affine; all four vectors concatenate"),
    OpKind.RELU: _identity(OpKind.RELU, "elementwise; packing-agnostic"),
    OpKind.TANH: _identity(OpKind.TANH, "elementwise; packing-agnostic"),
    OpKind.SOFTMAX: _identity(
        OpKind.SOFTMAX, "reduction axis must not be the packed axis"),
    OpKind.MAX_POOL2D: _identity(OpKind.MAX_POOL2D, "spatial only; packing-agnostic"),
    OpKind.MEAN_POOL2D: _identity(OpKind.MEAN_POOL2D, "spatial only; packing-agnostic"),
    OpKind.ADD: _identity(OpKind.ADD, "elementwise; packing-agnostic"),
    OpKind.MUL: _identity(OpKind.MUL, "elementwise; packing-agnostic"),
    OpKind.CONCAT: _structural(OpKind.CONCAT),
    OpKind.RESHAPE: _structural(OpKind.RESHAPE),
    OpKind.TRANSPOSE: _structural(OpKind.TRANSPOSE),
    OpKind.PACK: _structural(OpKind.PACK),
    OpKind.UNPACK: _structural(OpKind.UNPACK),
}

assert set(RULES) == set(OpKind), "every op kind needs exactly one rule"


def rule_for(kind: OpKind) -> MergeRule:
    """The merge rule for a kind; structural kinds raise UnsupportedOpError."""
    rule = RULES[kind]
    if not rule.mergeable:
        raise UnsupportedOpError(f"{kind.value} cannot appear in a graph to be merged: {rule.note}")
    return rule


def forbidden_dims(kind: OpKind, attrs: dict, input_spec: TensorSpec) -> set[MergeDim]:
    """Packings that would break this node by packing its reduction axis.

    Only softmax constrains anything today: channel packing is out when it
    reduces over the channel axis, and batch packing is out when a rank-4
    tensor (whose batch packing flattens models into axis 0) reduces over
    the batch axis.
    """
    if kind is not OpKind.SOFTMAX:
        return set()
    rank = input_spec.rank
    ax = attrs["axis"] % rank
    out: set[MergeDim] = set()
    if ax == channel_axis(rank):
        out.add(MergeDim.CHANNEL)
    if rank == 4 and ax == 0:
        out.add(MergeDim.BATCH)
    return out


def merged_attrs(kind: OpKind, attrs: dict, num_models: int) -> dict:
    """Attributes of the merged counterpart op."""
    out = dict(attrs)
    if kind is OpKind.CONV2D:
        out["groups"] = num_models
    elif kind is OpKind.GROUPED_CONV2D:
        out["groups"] = attrs["groups"] * num_models
    elif kind is OpKind.MATMUL:
        out["batch_count"] = num_models
    elif kind is OpKind.BATCH_MATMUL:
        out["batch_count"] = attrs["batch_count"] * num_models
    elif kind is OpKind.LAYER_NORM:
        out["groups"] = num_models
    elif kind is OpKind.GROUP_NORM:
        out["groups"] = attrs["groups"] * num_models
    return out


def merge_weight_slot(recipe: WeightRecipe, values: list[TensorValue]) -> TensorValue:
    """Merge M per-model tensors for one weight slot, model-major.

    All inputs must share one spec; with M=1 the tensor passes through
    unchanged except for a new-axis recipe, which still adds its leading
    axis of extent 1.
    """
    first = values[0].spec
    for i, v in enumerate(values[1:], start=1):
        if v.spec.dims != first.dims or v.spec.dtype != first.dtype:
            raise ArchitectureMismatchError(
                f"slot {recipe.slot!r}: model 0 has {first.dims} ({first.dtype}) but "
                f"model {i} has {v.spec.dims} ({v.spec.dtype})")
    if recipe.new_axis:
        merged = np.stack([v.data for v in values], axis=0)
    else:
        merged = np.concatenate([v.data for v in values], axis=0)
    return TensorValue(TensorSpec(first.dtype, tuple(merged.shape)), merged)


def merge_weights(rule: MergeRule, slot_values: list[list[TensorValue]]) -> list[TensorValue]:
    """Merge all present weight slots of one op across M models.

    ``slot_values[s]`` holds model 0..M-1's tensor for slot s, in the slot
    order of the kind (optional trailing slots may be absent).
    """
    if len(slot_values) > len(rule.recipes):
        raise ArchitectureMismatchError(
            f"{rule.source.value} has at most {len(rule.recipes)} weight slots, "
            f"got {len(slot_values)}")
    return [merge_weight_slot(rule.recipes[s], vals) for s, vals in enumerate(slot_values)]


def rules_as_json() -> dict:
    """The full rule table as a JSON-ready document (for `rules dump`)."""
    entries = []
    for kind in OpKind:
        rule = RULES[kind]
        entries.append({
            "source": kind.value,
            "target": rule.target.value if rule.target else None,
            "mergeable": rule.mergeable,
            "dim": rule.dim.value,
            "weights": [{"slot": r.slot, "recipe": r.mode} for r in rule.recipes],
            "note": rule.note,
        })
    return {"schema": 1, "kinds_covered": len(entries), "rules": entries}
