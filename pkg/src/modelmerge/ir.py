"""Graph intermediate representation.

A model is a directed acyclic graph of single-output ops. Edges are string
references of the form ``"<producer>:<outputIndex>"`` where the producer is
either a node id or a graph-input name; the output index is always 0 because
every node produces exactly one tensor. Weights are not part of the graph:
nodes carry weight *names* and the values live in a :class:`WeightStore`
(see :mod:`modelmerge.engine`), which is what lets one graph describe many
models that differ only in parameter values.

Layout conventions, used consistently everywhere:

* 2-D tensors are ``(N, D)`` with D the channel axis,
* 3-D tensors are ``(N, S, D)`` with D the channel axis,
* 4-D tensors are ``(N, C, H, W)`` with C the channel axis.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .errors import ShapeError, ValidationError

DTYPES = ("f32", "f64")


class OpKind(str, Enum):
    """Every op the IR can express."""

    CONV2D = "Conv2D"
    GROUPED_CONV2D = "GroupedConv2D"
    MATMUL = "MatMul"
    BATCH_MATMUL = "BatchMatMul"
    LAYER_NORM = "LayerNorm"
    GROUP_NORM = "GroupNorm"
    BATCH_NORM = "BatchNorm"
    RELU = "ReLU"
    TANH = "Tanh"
    SOFTMAX = "Softmax"
    MAX_POOL2D = "MaxPool2D"
    MEAN_POOL2D = "MeanPool2D"
    ADD = "Add"
    MUL = "Mul"
    CONCAT = "Concat"
    RESHAPE = "Reshape"
    TRANSPOSE = "Transpose"
    PACK = "Pack"
    UNPACK = "Unpack"


class Layout(str, Enum):
    """Which axis of a tensor carries per-model packing, if any.

    Tensors in an unmerged graph are always UNLAID. The merger tags packed
    tensors so downstream tooling can recover slice positions.
    """

    UNLAID = "unlaid"
    BATCH_MAJOR = "batch"
    CHANNEL_MAJOR = "channel"


class MergeDim(str, Enum):
    """The axis a merged op packs its models on.

    BATCH stacks per-model tensors on a model axis (batch-matmul style),
    CHANNEL concatenates along the channel axis (grouped-conv style), and
    DONT_CARE marks ops that work under either packing.
    """

    BATCH = "batch"
    CHANNEL = "channel"
    DONT_CARE = "dontcare"


@dataclass(frozen=True)
class TensorSpec:
    """Dtype, shape, and packing layout of one tensor."""

    dtype: str
    dims: tuple[int, ...]
    layout: Layout = Layout.UNLAID

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ShapeError(f"unknown dtype {self.dtype!r}, expected one of {DTYPES}")
        if len(self.dims) < 1:
            raise ShapeError("rank must be >= 1")
        if any(d < 1 for d in self.dims):
            raise ShapeError(f"all dims must be >= 1, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    def with_layout(self, layout: Layout) -> "TensorSpec":
        return TensorSpec(self.dtype, self.dims, layout)

    def with_dims(self, dims: tuple[int, ...]) -> "TensorSpec":
        return TensorSpec(self.dtype, dims, self.layout)


def channel_axis(rank: int) -> int:
    """Index of the channel axis under the package-wide layout conventions."""
    try:
        return {2: 1, 3: 2, 4: 1}[rank]
    except KeyError:
        raise ShapeError(f"no channel axis defined for rank {rank}") from None


@dataclass(frozen=True)
class OpNode:
    """One op in a graph.

    ``inputs`` are edge references ("producer:0"), ``weights`` are names to be
    resolved against a WeightStore at execution time, and ``attrs`` holds the
    kind-specific attributes (stride, eps, groups, ...). ``output_spec`` is
    declared rather than inferred so a serialized graph is self-describing;
    validate() cross-checks it against the inputs.
    """

    id: str
    kind: OpKind
    inputs: tuple[str, ...]
    output_spec: TensorSpec
    weights: tuple[str, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("node id must be a non-empty string")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "weights", tuple(self.weights))


@dataclass
class Graph:
    """A whole model: ops, named inputs, ordered outputs, free-form metadata.

    Treated as immutable after construction; the merger always builds new
    graphs rather than rewriting existing ones.
    """

    nodes: tuple[OpNode, ...]
    graph_inputs: dict[str, TensorSpec]
    graph_outputs: tuple[str, ...]
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = tuple(self.nodes)
        self.graph_outputs = tuple(self.graph_outputs)

    def node_map(self) -> dict[str, OpNode]:
        return {n.id: n for n in self.nodes}

    def producers(self) -> set[str]:
        """All valid edge producers: node ids plus graph-input names."""
        return {n.id for n in self.nodes} | set(self.graph_inputs)

    def edge_count(self) -> int:
        return sum(len(n.inputs) for n in self.nodes)


def make_ref(producer: str) -> str:
    """Edge reference to a producer's (single) output."""
    return f"{producer}:0"


def parse_ref(ref: str) -> tuple[str, int]:
    """Split an edge reference into (producer, output index)."""
    producer, sep, idx = ref.rpartition(":")
    if not sep or not idx.isdigit():
        raise ValueError(f"malformed edge reference {ref!r}")
    return producer, int(idx)


# --------------------------------------------------------------------------
# Arity and attribute requirements per kind
# --------------------------------------------------------------------------

# input arity: exact int, or a callable(node) -> (ok, expected description)
_INPUT_ARITY: dict[OpKind, int] = {
    OpKind.CONV2D: 1,
    OpKind.GROUPED_CONV2D: 1,
    OpKind.MATMUL: 1,
    OpKind.BATCH_MATMUL: 1,
    OpKind.LAYER_NORM: 1,
    OpKind.GROUP_NORM: 1,
    OpKind.BATCH_NORM: 1,
    OpKind.RELU: 1,
    OpKind.TANH: 1,
    OpKind.SOFTMAX: 1,
    OpKind.MAX_POOL2D: 1,
    OpKind.MEAN_POOL2D: 1,
    OpKind.ADD: 2,
    OpKind.MUL: 2,
    OpKind.RESHAPE: 1,
    OpKind.TRANSPOSE: 1,
    OpKind.UNPACK: 1,
    # Concat and Pack are variadic; handled separately.
}

# weight arity: tuple of admissible counts
_WEIGHT_ARITY: dict[OpKind, tuple[int, ...]] = {
    OpKind.CONV2D: (1, 2),
    OpKind.GROUPED_CONV2D: (1, 2),
    OpKind.MATMUL: (1, 2),
    OpKind.BATCH_MATMUL: (1, 2),
    OpKind.LAYER_NORM: (2,),
    OpKind.GROUP_NORM: (2,),
    OpKind.BATCH_NORM: (4,),
}

_REQUIRED_ATTRS: dict[OpKind, tuple[str, ...]] = {
    OpKind.CONV2D: ("kernel", "stride", "padding"),
    OpKind.GROUPED_CONV2D: ("kernel", "stride", "padding", "groups"),
    OpKind.BATCH_MATMUL: ("batch_count",),
    OpKind.LAYER_NORM: ("eps",),
    OpKind.GROUP_NORM: ("eps", "groups"),
    OpKind.BATCH_NORM: ("eps",),
    OpKind.SOFTMAX: ("axis",),
    OpKind.MAX_POOL2D: ("kernel", "stride"),
    OpKind.MEAN_POOL2D: ("kernel", "stride"),
    OpKind.CONCAT: ("axis",),
    OpKind.RESHAPE: ("dims",),
    OpKind.TRANSPOSE: ("perm",),
    OpKind.PACK: ("count", "dim", "stacked"),
    OpKind.UNPACK: ("count", "dim", "stacked", "index"),
}

# Weight slot names in storage order, for error messages and merge recipes.
WEIGHT_SLOTS: dict[OpKind, tuple[str, ...]] = {
    OpKind.CONV2D: ("kernel", "bias"),
    OpKind.GROUPED_CONV2D: ("kernel", "bias"),
    OpKind.MATMUL: ("weight", "bias"),
    OpKind.BATCH_MATMUL: ("weight", "bias"),
    OpKind.LAYER_NORM: ("gamma", "beta"),
    OpKind.GROUP_NORM: ("gamma", "beta"),
    OpKind.BATCH_NORM: ("gamma", "beta", "running_mean", "running_var"),
}


def pool_output_extent(extent: int, kernel: int, stride: int) -> int:
    """Output extent of a pooling axis; overhanging windows are rejected."""
    if extent < kernel:
        raise ShapeError(f"pool kernel {kernel} larger than input extent {extent}")
    if (extent - kernel) % stride != 0:
        raise ShapeError(
            f"pool windows overhang: extent {extent}, kernel {kernel}, stride {stride}"
        )
    return (extent - kernel) // stride + 1


def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    padded = extent + 2 * padding
    if padded < kernel:
        raise ShapeError(f"conv kernel {kernel} larger than padded extent {padded}")
    return (padded - kernel) // stride + 1


# --------------------------------------------------------------------------
# Shape inference
# --------------------------------------------------------------------------


def infer_output_spec(
    kind: OpKind,
    attrs: dict[str, Any],
    input_specs: list[TensorSpec],
    weight_specs: list[TensorSpec] | None = None,
) -> TensorSpec:
    """Compute a node's output spec from its input (and weight) specs.

    When ``weight_specs`` is None, weight-dependent extents (conv output
    channels, matmul output width) are taken from ``attrs["_declared"]``,
    which validate() uses to cross-check a declared spec without having the
    weights at hand. Raises ShapeError when the operands cannot combine.
    """
    declared: TensorSpec | None = attrs.get("_declared")

    def _weight(i: int) -> TensorSpec | None:
        if weight_specs is not None and i < len(weight_specs):
            return weight_specs[i]
        return None

    def _same_dtype(*specs: TensorSpec):
        dtypes = {s.dtype for s in specs}
        if len(dtypes) != 1:
            raise ShapeError(f"mixed dtypes {sorted(dtypes)}")

    x = input_specs[0]

    if kind in (OpKind.CONV2D, OpKind.GROUPED_CONV2D):
        if x.rank != 4:
            raise ShapeError(f"conv input must be rank 4, got {x.dims}")
        k, s, p = attrs["kernel"], attrs["stride"], attrs["padding"]
        groups = attrs["groups"] if kind is OpKind.GROUPED_CONV2D else 1
        n, c_in, h, w = x.dims
        if c_in % groups != 0:
            raise ShapeError(f"groups {groups} does not divide input channels {c_in}")
        kern = _weight(0)
        if kern is not None:
            _same_dtype(x, kern)
            if kern.rank != 4 or kern.dims[1] != c_in // groups:
                raise ShapeError(
                    f"kernel {kern.dims} incompatible with input channels "
                    f"{c_in} in {groups} group(s)"
                )
            if kern.dims[2] != k or kern.dims[3] != k:
                raise ShapeError(f"kernel dims {kern.dims} disagree with attr kernel={k}")
            c_out = kern.dims[0]
        elif declared is not None:
            c_out = declared.dims[1] if declared.rank == 4 else 0
        else:
            raise ShapeError("cannot infer conv output channels without weights")
        if c_out % groups != 0 or c_out < 1:
            raise ShapeError(f"groups {groups} does not divide output channels {c_out}")
        h_out = conv_output_extent(h, k, s, p)
        w_out = conv_output_extent(w, k, s, p)
        return TensorSpec(x.dtype, (n, c_out, h_out, w_out), x.layout)

    if kind is OpKind.MATMUL:
        if x.rank not in (2, 3):
            raise ShapeError(f"matmul input must be rank 2 or 3, got {x.dims}")
        wspec = _weight(0)
        if wspec is not None:
            _same_dtype(x, wspec)
            if wspec.rank != 2 or wspec.dims[0] != x.dims[-1]:
                raise ShapeError(f"weight {wspec.dims} incompatible with input {x.dims}")
            d_out = wspec.dims[1]
        elif declared is not None:
            d_out = declared.dims[-1]
        else:
            raise ShapeError("cannot infer matmul output width without weights")
        return TensorSpec(x.dtype, x.dims[:-1] + (d_out,), x.layout)

    if kind is OpKind.BATCH_MATMUL:
        if x.rank not in (3, 4):
            raise ShapeError(f"batch matmul input must be rank 3 or 4, got {x.dims}")
        b = attrs["batch_count"]
        if x.dims[0] != b:
            raise ShapeError(f"input batch extent {x.dims[0]} != batch_count {b}")
        wspec = _weight(0)
        if wspec is not None:
            _same_dtype(x, wspec)
            if wspec.rank != 3 or wspec.dims[0] != b or wspec.dims[1] != x.dims[-1]:
                raise ShapeError(f"weight {wspec.dims} incompatible with input {x.dims}")
            d_out = wspec.dims[2]
        elif declared is not None:
            d_out = declared.dims[-1]
        else:
            raise ShapeError("cannot infer batch matmul output width without weights")
        return TensorSpec(x.dtype, x.dims[:-1] + (d_out,), x.layout)

    if kind in (OpKind.LAYER_NORM, OpKind.GROUP_NORM, OpKind.BATCH_NORM):
        c = x.dims[channel_axis(x.rank)]
        if kind is OpKind.GROUP_NORM:
            groups = attrs["groups"]
            if groups < 1 or c % groups != 0:
                raise ShapeError(f"groups {groups} does not divide channels {c}")
        if weight_specs is not None:
            for wspec in weight_specs:
                _same_dtype(x, wspec)
                if wspec.dims != (c,):
                    raise ShapeError(f"norm weight {wspec.dims} != ({c},)")
        return x

    if kind in (OpKind.RELU, OpKind.TANH):
        return x

    if kind is OpKind.SOFTMAX:
        axis = attrs["axis"]
        if not -x.rank <= axis < x.rank:
            raise ShapeError(f"softmax axis {axis} out of range for rank {x.rank}")
        return x

    if kind in (OpKind.MAX_POOL2D, OpKind.MEAN_POOL2D):
        if x.rank != 4:
            raise ShapeError(f"pool input must be rank 4, got {x.dims}")
        k, s = attrs["kernel"], attrs["stride"]
        n, c, h, w = x.dims
        return TensorSpec(x.dtype, (n, c, pool_output_extent(h, k, s), pool_output_extent(w, k, s)), x.layout)

    if kind in (OpKind.ADD, OpKind.MUL):
        y = input_specs[1]
        _same_dtype(x, y)
        if x.dims != y.dims:
            raise ShapeError(f"elementwise operands differ: {x.dims} vs {y.dims}")
        return x

    if kind is OpKind.CONCAT:
        axis = attrs["axis"]
        if not -x.rank <= axis < x.rank:
            raise ShapeError(f"concat axis {axis} out of range for rank {x.rank}")
        ax = axis % x.rank
        total = 0
        for s in input_specs:
            _same_dtype(x, s)
            if s.rank != x.rank:
                raise ShapeError("concat operands must share rank")
            for i, (a, b) in enumerate(zip(s.dims, x.dims)):
                if i != ax and a != b:
                    raise ShapeError(f"concat operands differ off-axis: {s.dims} vs {x.dims}")
            total += s.dims[ax]
        dims = list(x.dims)
        dims[ax] = total
        return TensorSpec(x.dtype, tuple(dims), x.layout)

    if kind is OpKind.RESHAPE:
        dims = tuple(int(d) for d in attrs["dims"])
        target = TensorSpec(x.dtype, dims, x.layout)
        if target.size != x.size:
            raise ShapeError(f"reshape changes element count: {x.dims} -> {dims}")
        return target

    if kind is OpKind.TRANSPOSE:
        perm = tuple(int(p) for p in attrs["perm"])
        if sorted(perm) != list(range(x.rank)):
            raise ShapeError(f"perm {perm} is not a permutation of rank {x.rank}")
        return TensorSpec(x.dtype, tuple(x.dims[p] for p in perm), x.layout)

    if kind is OpKind.PACK:
        count, dim, stacked = attrs["count"], MergeDim(attrs["dim"]), attrs["stacked"]
        if count != len(input_specs):
            raise ShapeError(f"pack count {count} != {len(input_specs)} inputs")
        for s in input_specs:
            _same_dtype(x, s)
            if s.dims != x.dims:
                raise ShapeError(f"pack operands differ: {s.dims} vs {x.dims}")
        if dim is MergeDim.CHANNEL:
            ax = channel_axis(x.rank)
            dims = list(x.dims)
            dims[ax] *= count
            return TensorSpec(x.dtype, tuple(dims), Layout.CHANNEL_MAJOR)
        if stacked:
            return TensorSpec(x.dtype, (count,) + x.dims, Layout.BATCH_MAJOR)
        return TensorSpec(x.dtype, (count * x.dims[0],) + x.dims[1:], Layout.BATCH_MAJOR)

    if kind is OpKind.UNPACK:
        count, dim, stacked = attrs["count"], MergeDim(attrs["dim"]), attrs["stacked"]
        index = attrs["index"]
        if not 0 <= index < count:
            raise ShapeError(f"unpack index {index} out of range for count {count}")
        if dim is MergeDim.CHANNEL:
            ax = channel_axis(x.rank)
            if x.dims[ax] % count != 0:
                raise ShapeError(f"count {count} does not divide packed channels {x.dims[ax]}")
            dims = list(x.dims)
            dims[ax] //= count
            return TensorSpec(x.dtype, tuple(dims), Layout.UNLAID)
        if stacked:
            if x.dims[0] != count:
                raise ShapeError(f"packed model axis {x.dims[0]} != count {count}")
            if x.rank < 2:
                raise ShapeError("stacked unpack input must have rank >= 2")
            return TensorSpec(x.dtype, x.dims[1:], Layout.UNLAID)
        if x.dims[0] % count != 0:
            raise ShapeError(f"count {count} does not divide packed batch {x.dims[0]}")
        return TensorSpec(x.dtype, (x.dims[0] // count,) + x.dims[1:], Layout.UNLAID)

    raise ShapeError(f"no shape rule for kind {kind.value}")


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    """One validation finding. ``node`` is None for graph-level problems."""

    rule: str
    message: str
    node: str | None = None

    def __str__(self) -> str:
        where = f" at '{self.node}'" if self.node else ""
        return f"[{self.rule}]{where} {self.message}"


def validate(graph: Graph) -> list[Diagnostic]:
    """Check a graph for structural problems.

    Returns one diagnostic per violation; an empty list means the graph is
    well formed. Weight values are not consulted, so weight-dependent extents
    in declared output specs are trusted here and enforced at execution time.
    """
    diags: list[Diagnostic] = []

    if not graph.graph_outputs:
        diags.append(Diagnostic("no-outputs", "graph declares no outputs"))

    seen: set[str] = set()
    for node in graph.nodes:
        if node.id in seen:
            diags.append(Diagnostic("duplicate-id", "node id appears twice", node.id))
        seen.add(node.id)
    for name in graph.graph_inputs:
        if name in seen:
            diags.append(Diagnostic("duplicate-id", "input name collides with a node id", name))

    producers = graph.producers()
    node_map = graph.node_map()

    # Per-node local checks: reference resolution, arity, attributes.
    resolvable: dict[str, list[str]] = {}  # node id -> parent producer names
    for node in graph.nodes:
        parents = []
        ok = True
        for ref in node.inputs:
            try:
                producer, idx = parse_ref(ref)
            except ValueError:
                diags.append(Diagnostic("bad-ref", f"malformed edge reference {ref!r}", node.id))
                ok = False
                continue
            if producer not in producers:
                diags.append(Diagnostic("bad-ref", f"unknown producer {producer!r}", node.id))
                ok = False
                continue
            if idx != 0:
                diags.append(Diagnostic("bad-ref", f"output index {idx} on single-output producer", node.id))
                ok = False
            parents.append(producer)
        if ok:
            resolvable[node.id] = parents

        expected = _INPUT_ARITY.get(node.kind)
        if expected is not None and len(node.inputs) != expected:
            diags.append(Diagnostic(
                "arity", f"{node.kind.value} takes {expected} input(s), got {len(node.inputs)}", node.id))
        elif node.kind is OpKind.CONCAT and len(node.inputs) < 2:
            diags.append(Diagnostic("arity", "Concat takes at least 2 inputs", node.id))
        elif node.kind is OpKind.PACK:
            count = node.attrs.get("count")
            if isinstance(count, int) and len(node.inputs) != count:
                diags.append(Diagnostic(
                    "arity", f"Pack count {count} != {len(node.inputs)} inputs", node.id))

        admissible = _WEIGHT_ARITY.get(node.kind, (0,))
        if len(node.weights) not in admissible:
            slots = WEIGHT_SLOTS.get(node.kind, ())
            diags.append(Diagnostic(
                "weight-arity",
                f"{node.kind.value} expects {' or '.join(map(str, admissible))} weight(s) "
                f"{slots}, got {len(node.weights)}",
                node.id))

        for attr in _REQUIRED_ATTRS.get(node.kind, ()):
            if attr not in node.attrs:
                diags.append(Diagnostic("missing-attr", f"{node.kind.value} requires attr {attr!r}", node.id))

    # Output references.
    for ref in graph.graph_outputs:
        try:
            producer, idx = parse_ref(ref)
        except ValueError:
            diags.append(Diagnostic("bad-ref", f"malformed output reference {ref!r}"))
            continue
        if producer not in producers:
            diags.append(Diagnostic("bad-ref", f"output references unknown producer {producer!r}"))
        elif idx != 0:
            diags.append(Diagnostic("bad-ref", f"output index {idx} on single-output producer"))

    # Cycle detection over node-to-node edges (inputs from graph inputs are
    # acyclic by construction). Reports one diagnostic per cycle found.
    color: dict[str, int] = {}  # 0 unseen / 1 on stack / 2 done

    def _walk(nid: str) -> str | None:
        color[nid] = 1
        for parent in resolvable.get(nid, ()):
            if parent not in node_map:
                continue
            c = color.get(parent, 0)
            if c == 1:
                return parent
            if c == 0:
                hit = _walk(parent)
                if hit is not None:
                    color[nid] = 2
                    return hit
        color[nid] = 2
        return None

    for node in sorted(graph.nodes, key=lambda n: n.id):
        if color.get(node.id, 0) == 0:
            hit = _walk(node.id)
            if hit is not None:
                diags.append(Diagnostic("cycle", f"cycle detected at {hit}", hit))

    has_cycle = any(d.rule == "cycle" for d in diags)

    # Reachability: every output must trace back to at least one graph input.
    for ref in graph.graph_outputs:
        try:
            producer, _ = parse_ref(ref)
        except ValueError:
            continue
        if producer in graph.graph_inputs:
            continue
        if producer not in node_map:
            continue
        stack, visited, reached = [producer], set(), False
        while stack:
            cur = stack.pop()
            if cur in visited:
                continue
            visited.add(cur)
            if cur in graph.graph_inputs:
                reached = True
                break
            for parent in resolvable.get(cur, ()):
                stack.append(parent)
        if not reached:
            diags.append(Diagnostic("unreachable", f"output {ref!r} is not reachable from any graph input"))

    # Shape consistency, in dependency order; skipped when structure is broken.
    flagged = {d.node for d in diags if d.node is not None}
    if not has_cycle:
        spec_map: dict[str, TensorSpec] = dict(graph.graph_inputs)
        try:
            order = topological_order(graph)
        except ValidationError:
            order = []
        for node in order:
            if node.id not in resolvable or node.id in flagged:
                continue
            input_specs = []
            for ref in node.inputs:
                producer, _ = parse_ref(ref)
                spec = spec_map.get(producer)
                if spec is None:
                    break
                input_specs.append(spec)
            if len(input_specs) != len(node.inputs):
                continue  # upstream problem already reported
            missing = [a for a in _REQUIRED_ATTRS.get(node.kind, ()) if a not in node.attrs]
            if missing:
                continue
            try:
                attrs = dict(node.attrs)
                attrs["_declared"] = node.output_spec
                expected = infer_output_spec(node.kind, attrs, input_specs, None)
            except (ShapeError, ValueError) as exc:
                diags.append(Diagnostic("shape", str(exc), node.id))
                continue
            if expected.dims != node.output_spec.dims or expected.dtype != node.output_spec.dtype:
                diags.append(Diagnostic(
                    "shape",
                    f"declared output {node.output_spec.dims} ({node.output_spec.dtype}) but "
                    f"inputs imply {expected.dims} ({expected.dtype})",
                    node.id))
            spec_map[node.id] = node.output_spec

    return diags


def topological_order(graph: Graph) -> list[OpNode]:
    """Dependency order over nodes, deterministic: ties break by ascending id.

    Raises ValidationError naming a node on a cycle when no such order exists.
    """
    node_map = graph.node_map()
    indegree: dict[str, int] = {n.id: 0 for n in graph.nodes}
    children: dict[str, list[str]] = {n.id: [] for n in graph.nodes}
    for node in graph.nodes:
        for ref in node.inputs:
            producer, _ = parse_ref(ref)
            if producer in node_map:
                indegree[node.id] += 1
                children[producer].append(node.id)

    ready = [nid for nid, deg in indegree.items() if deg == 0]
    heapq.heapify(ready)
    order: list[OpNode] = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(node_map[nid])
        for child in children[nid]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, child)

    if len(order) != len(graph.nodes):
        stuck = [nid for nid, deg in indegree.items() if deg > 0]
        if stuck:
            worst = min(stuck)
            raise ValidationError([Diagnostic("cycle", f"cycle detected at {worst}", worst)])
        raise ValidationError([Diagnostic("duplicate-id", "node ids are not unique")])
    return order
