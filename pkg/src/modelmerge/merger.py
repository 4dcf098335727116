"""Merge M structurally identical models into one wide graph.

The merger walks the shared graph once in deterministic topological order.
Every node gets a packing axis: ops with a constrained axis (conv, norms,
matmuls) dictate theirs; packing-agnostic ops inherit the most frequent
axis among their parents (ties prefer channel, since channel packing keeps
batch semantics untouched). Chains of agnostic ops at the graph root,
which have no resolved parent to inherit from, are settled by a finalize
pass from their first axis-constrained descendant and default to batch.

Wherever an edge connects nodes with different packing axes, a glue
junction (transpose plus reshape, plus an extra reshape for rank-4
tensors whose batch packing is flattened) converts the layout. Per-model
inputs enter through explicit Pack nodes and leave through per-model
Unpack nodes, so the merged graph is an ordinary self-contained Graph.

Structure depends only on the source graph and tensor specs; weight
values are concatenated but never inspected.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any

from .errors import ArchitectureMismatchError, MergeConstraintError, ValidationError
from .ir import (
    Graph,
    Layout,
    MergeDim,
    OpKind,
    OpNode,
    TensorSpec,
    channel_axis,
    infer_output_spec,
    make_ref,
    parse_ref,
    topological_order,
    validate,
)
from .engine import TensorValue, WeightStore
from .rules import forbidden_dims, merge_weight_slot, merged_attrs, rule_for


@dataclass(frozen=True)
class ReshapeGlue:
    """One layout-conversion junction inserted on an edge."""

    index: int
    producer: str  # source-graph producer (node id or input name)
    src_dim: MergeDim
    dst_dim: MergeDim
    node_ids: tuple[str, ...]  # realizing IR nodes, in dataflow order


@dataclass
class MergeStats:
    """Instrumentation from one merge.

    ``node_visits`` counts source nodes processed (exactly once each).
    ``edge_inspections`` counts every time the merger examines an edge:
    once per edge while wiring the merged graph, plus once per in-edge of
    a packing-agnostic node while resolving its axis, plus once per edge
    scanned by the finalize pass for root chains.
    """

    node_visits: int = 0
    edge_inspections: int = 0
    source_nodes: int = 0
    source_edges: int = 0
    weight_bytes_before: int = 0
    weight_bytes_after: int = 0
    elapsed_ns: int = 0


@dataclass
class MergedGraph:
    """A merged model plus everything needed to interpret it."""

    graph: Graph
    num_models: int
    provenance: dict[str, str]  # merged node id -> source node id, or "glue"
    node_dims: dict[str, MergeDim]  # source node id -> resolved packing axis
    input_plan: list[dict[str, Any]]
    output_plan: list[dict[str, Any]]
    glue: list[ReshapeGlue]
    stats: MergeStats = field(default_factory=MergeStats)

    @property
    def glue_count(self) -> int:
        return len(self.glue)

    @property
    def dispatch_count(self) -> int:
        """Kernel dispatches one inference round costs: every node except
        the Pack/Unpack staging at the graph boundary."""
        boundary = {OpKind.PACK, OpKind.UNPACK}
        return sum(1 for n in self.graph.nodes if n.kind not in boundary)

    def bind_inputs(self, per_model: list[dict[str, TensorValue]]) -> dict[str, TensorValue]:
        """Spread M per-model input dicts onto the merged graph's inputs."""
        if len(per_model) != self.num_models:
            raise MergeConstraintError(
                f"expected {self.num_models} input dicts, got {len(per_model)}")
        bound = {}
        for entry in self.input_plan:
            for j, name in enumerate(entry["models"]):
                bound[name] = per_model[j][entry["input"]]
        return bound

    def slice_outputs(self, outputs: list[TensorValue]) -> list[list[TensorValue]]:
        """Regroup merged-graph outputs as [model][source output]."""
        per_model: list[list[TensorValue]] = [[] for _ in range(self.num_models)]
        pos = 0
        for entry in self.output_plan:
            if entry.get("dim") is None:  # unmerged head output
                per_model[entry["model"]].append(outputs[pos])
                pos += 1
            else:
                for j in range(self.num_models):
                    per_model[j].append(outputs[pos])
                    pos += 1
        if pos != len(outputs):
            raise MergeConstraintError(
                f"output plan covers {pos} outputs but the graph produced {len(outputs)}")
        return per_model

    def embed_metadata(self) -> None:
        """Record plans and provenance in graph metadata so a serialized
        merged graph is self-describing."""
        self.graph.metadata["merge"] = {
            "num_models": self.num_models,
            "provenance": self.provenance,
            "node_dims": {k: v.value for k, v in self.node_dims.items()},
            "input_plan": self.input_plan,
            "output_plan": self.output_plan,
            "glue": [
                {"index": g.index, "producer": g.producer, "src": g.src_dim.value,
                 "dst": g.dst_dim.value, "nodes": list(g.node_ids)}
                for g in self.glue
            ],
            "source_nodes": self.stats.source_nodes,
            "source_edges": self.stats.source_edges,
        }

    @classmethod
    def from_graph(cls, graph: Graph) -> "MergedGraph":
        """Rehydrate from a graph whose metadata embeds a merge record."""
        meta = graph.metadata.get("merge")
        if not isinstance(meta, dict):
            raise MergeConstraintError("graph metadata carries no merge record")
        glue = [
            ReshapeGlue(g["index"], g["producer"], MergeDim(g["src"]), MergeDim(g["dst"]),
                        tuple(g["nodes"]))
            for g in meta.get("glue", [])
        ]
        stats = MergeStats(source_nodes=meta.get("source_nodes", 0),
                           source_edges=meta.get("source_edges", 0))
        return cls(
            graph=graph,
            num_models=meta["num_models"],
            provenance=dict(meta.get("provenance", {})),
            node_dims={k: MergeDim(v) for k, v in meta.get("node_dims", {}).items()},
            input_plan=list(meta.get("input_plan", [])),
            output_plan=list(meta.get("output_plan", [])),
            glue=glue,
            stats=stats,
        )


def _layout_for(dim: MergeDim) -> Layout:
    return Layout.BATCH_MAJOR if dim is MergeDim.BATCH else Layout.CHANNEL_MAJOR


def _most_frequent(dims: list[MergeDim]) -> MergeDim | None:
    """Majority packing axis; ties prefer channel."""
    if not dims:
        return None
    counts = Counter(dims)
    if counts.get(MergeDim.CHANNEL, 0) >= counts.get(MergeDim.BATCH, 0):
        return MergeDim.CHANNEL
    return MergeDim.BATCH


def _force_legal(node_id: str, dim: MergeDim, forbidden: set[MergeDim],
                 constrained: bool) -> MergeDim:
    """Push a candidate axis off a node's forbidden set, if possible."""
    if dim not in forbidden:
        return dim
    if constrained:
        raise MergeConstraintError(
            f"node '{node_id}' requires {dim.value} packing but forbids it")
    legal = {MergeDim.BATCH, MergeDim.CHANNEL} - forbidden
    if not legal:
        raise MergeConstraintError(f"node '{node_id}' forbids every packing axis")
    return legal.pop()


def _packed_spec(per_model: TensorSpec, dim: MergeDim, m: int) -> TensorSpec:
    """Spec of a per-model tensor after packing M models on ``dim``."""
    if dim is MergeDim.CHANNEL:
        ax = channel_axis(per_model.rank)
        dims = list(per_model.dims)
        dims[ax] *= m
        return TensorSpec(per_model.dtype, tuple(dims), Layout.CHANNEL_MAJOR)
    if per_model.rank == 4:  # batch packing flattens models into the batch axis
        return TensorSpec(per_model.dtype, (m * per_model.dims[0],) + per_model.dims[1:],
                          Layout.BATCH_MAJOR)
    return TensorSpec(per_model.dtype, (m,) + per_model.dims, Layout.BATCH_MAJOR)


class _Builder:
    """Accumulates the merged graph while the merger walks the source."""

    def __init__(self, graph: Graph, stores: list[WeightStore]):
        self.source = graph
        self.stores = stores
        self.m = len(stores)
        self.nodes: list[OpNode] = []
        self.spec_of: dict[str, TensorSpec] = {}  # merged producer -> packed spec
        self.merged_ref: dict[str, str] = {}  # source producer -> merged edge ref
        self.provenance: dict[str, str] = {}
        self.glue: list[ReshapeGlue] = []
        self.glue_cache: dict[tuple[str, MergeDim], str] = {}
        self.merged_weights: dict[str, TensorValue] = {}
        self.stats = MergeStats(source_nodes=len(graph.nodes),
                                source_edges=graph.edge_count())

    def emit(self, node: OpNode, provenance: str) -> str:
        self.nodes.append(node)
        self.provenance[node.id] = provenance
        self.spec_of[node.id] = node.output_spec
        return make_ref(node.id)

    def glue_to(self, producer: str, per_model: TensorSpec, src_dim: MergeDim,
                dst_dim: MergeDim) -> str:
        """Route ``producer``'s packed tensor into ``dst_dim`` layout,
        inserting (or reusing) a glue junction."""
        key = (producer, dst_dim)
        cached = self.glue_cache.get(key)
        if cached is not None:
            return cached
        n = len(self.glue)
        src_ref = self.merged_ref[producer]
        rank = per_model.rank
        ids: list[str] = []

        def _emit_glue(node_id: str, kind: OpKind, ref: str, spec: TensorSpec,
                       attrs: dict) -> str:
            node = OpNode(node_id, kind, (ref,), spec, attrs=attrs)
            ids.append(node_id)
            return self.emit(node, "glue")

        dst_layout = _layout_for(dst_dim)
        if src_dim is MergeDim.BATCH and dst_dim is MergeDim.CHANNEL:
            ca = channel_axis(rank)
            if rank == 4:
                n_, c, h, w = per_model.dims
                ref = _emit_glue(f"reshape::{n}::pre", OpKind.RESHAPE, src_ref,
                                 TensorSpec(per_model.dtype, (self.m, n_, c, h, w), dst_layout),
                                 {"dims": [self.m, n_, c, h, w]})
                ref = _emit_glue(f"transpose::{n}", OpKind.TRANSPOSE, ref,
                                 TensorSpec(per_model.dtype, (n_, self.m, c, h, w), dst_layout),
                                 {"perm": [1, 0, 2, 3, 4]})
                out_spec = _packed_spec(per_model, MergeDim.CHANNEL, self.m)
                ref = _emit_glue(f"reshape::{n}", OpKind.RESHAPE, ref, out_spec,
                                 {"dims": list(out_spec.dims)})
            else:
                perm = tuple(range(1, ca + 1)) + (0,) + tuple(range(ca + 1, rank + 1))
                packed = (self.m,) + per_model.dims
                t_dims = tuple(packed[p] for p in perm)
                ref = _emit_glue(f"transpose::{n}", OpKind.TRANSPOSE, src_ref,
                                 TensorSpec(per_model.dtype, t_dims, dst_layout),
                                 {"perm": list(perm)})
                out_spec = _packed_spec(per_model, MergeDim.CHANNEL, self.m)
                ref = _emit_glue(f"reshape::{n}", OpKind.RESHAPE, ref, out_spec,
                                 {"dims": list(out_spec.dims)})
        elif src_dim is MergeDim.CHANNEL and dst_dim is MergeDim.BATCH:
            ca = channel_axis(rank)
            split = per_model.dims[:ca] + (self.m, per_model.dims[ca]) + per_model.dims[ca + 1:]
            ref = _emit_glue(f"reshape::{n}::pre" if rank == 4 else f"reshape::{n}",
                             OpKind.RESHAPE, src_ref,
                             TensorSpec(per_model.dtype, split, dst_layout),
                             {"dims": list(split)})
            perm = (ca,) + tuple(range(ca)) + tuple(range(ca + 1, rank + 1))
            t_dims = tuple(split[p] for p in perm)
            ref = _emit_glue(f"transpose::{n}", OpKind.TRANSPOSE, ref,
                             TensorSpec(per_model.dtype, t_dims, dst_layout),
                             {"perm": list(perm)})
            if rank == 4:
                out_spec = _packed_spec(per_model, MergeDim.BATCH, self.m)
                ref = _emit_glue(f"reshape::{n}", OpKind.RESHAPE, ref, out_spec,
                                 {"dims": list(out_spec.dims)})
        else:
            raise MergeConstraintError(f"no glue from {src_dim.value} to {dst_dim.value}")

        self.glue.append(ReshapeGlue(n, producer, src_dim, dst_dim, tuple(ids)))
        self.glue_cache[key] = ref
        return ref

    def merge_node_weights(self, node: OpNode, rule) -> None:
        missing = [
            (m, name)
            for m, store in enumerate(self.stores)
            for name in node.weights
            if name not in store
        ]
        if missing:
            m, name = missing[0]
            raise ArchitectureMismatchError(f"store {m} lacks weight {name!r} for node '{node.id}'")
        for s, name in enumerate(node.weights):
            values = [store[name] for store in self.stores]
            try:
                self.merged_weights[name] = merge_weight_slot(rule.recipes[s], values)
            except ArchitectureMismatchError as exc:
                raise ArchitectureMismatchError(f"node '{node.id}': {exc}") from exc


def _check_stores(graph: Graph, stores: list[WeightStore]) -> None:
    if not stores:
        raise MergeConstraintError("need at least one weight store")
    names0 = stores[0].names()
    for m, store in enumerate(stores[1:], start=1):
        if store.names() != names0:
            extra = sorted(store.names() - names0)
            lacking = sorted(names0 - store.names())
            raise ArchitectureMismatchError(
                f"store {m} name set differs from store 0 "
                f"(extra: {extra or 'none'}, missing: {lacking or 'none'})")
        for name in names0:
            a, b = stores[0][name].spec, store[name].spec
            if a.dims != b.dims or a.dtype != b.dtype:
                raise ArchitectureMismatchError(
                    f"weight {name!r}: store 0 has {a.dims} ({a.dtype}) but "
                    f"store {m} has {b.dims} ({b.dtype})")


def merge(graph: Graph, stores: list[WeightStore]) -> tuple[MergedGraph, WeightStore]:
    """Merge M models sharing ``graph`` into one graph plus merged weights.

    ``stores`` supplies each model's parameters in model order; slice m of
    every packed tensor in the merged graph corresponds to stores[m].
    Raises ValidationError for a malformed graph, UnsupportedOpError for
    ops without a merge counterpart, ArchitectureMismatchError when stores
    disagree, and MergeConstraintError for unsatisfiable packing.
    """
    t0 = time.perf_counter_ns()
    diags = validate(graph)
    if diags:
        raise ValidationError(diags)
    _check_stores(graph, stores)

    m = len(stores)
    order = topological_order(graph)
    b = _Builder(graph, stores)
    stats = b.stats

    source_spec: dict[str, TensorSpec] = dict(graph.graph_inputs)
    for node in order:
        source_spec[node.id] = node.output_spec

    rules = {node.id: rule_for(node.kind) for node in order}

    # Pass 1 (forward): resolve each node's packing axis where possible.
    resolved: dict[str, MergeDim] = {}
    constrained: dict[str, bool] = {}
    pending: list[OpNode] = []
    for node in order:
        stats.node_visits += 1
        rule = rules[node.id]
        first_parent, _ = parse_ref(node.inputs[0])
        forb = forbidden_dims(node.kind, node.attrs, source_spec[first_parent])
        if rule.dim is not MergeDim.DONT_CARE:
            resolved[node.id] = _force_legal(node.id, rule.dim, forb, constrained=True)
            constrained[node.id] = True
            continue
        parent_dims = []
        for ref in node.inputs:
            stats.edge_inspections += 1
            producer, _ = parse_ref(ref)
            if producer in resolved:
                parent_dims.append(resolved[producer])
        pick = _most_frequent(parent_dims)
        if pick is None:
            pending.append(node)  # root chain; settled below
            continue
        resolved[node.id] = _force_legal(node.id, pick, forb, constrained=False)
        constrained[node.id] = True

    # Pass 2 (reverse): root chains adopt the axis of their first
    # axis-constrained descendant, defaulting to batch.
    if pending:
        position = {node.id: i for i, node in enumerate(order)}
        children: dict[str, list[str]] = {node.id: [] for node in order}
        for node in order:
            for ref in node.inputs:
                producer, _ = parse_ref(ref)
                if producer in children and producer != node.id:
                    children[producer].append(node.id)
        for node in reversed(pending):
            pick = None
            for child in sorted(children[node.id], key=position.__getitem__):
                stats.edge_inspections += 1
                if constrained.get(child):
                    pick = resolved[child]
                    break
            first_parent, _ = parse_ref(node.inputs[0])
            forb = forbidden_dims(node.kind, node.attrs, source_spec[first_parent])
            if pick is None:
                resolved[node.id] = _force_legal(node.id, MergeDim.BATCH, forb, constrained=False)
                constrained[node.id] = False
            else:
                resolved[node.id] = _force_legal(node.id, pick, forb, constrained=False)
                constrained[node.id] = True

    # Input packing: each graph input packs on its consumers' majority axis.
    input_dims: dict[str, MergeDim] = {}
    consumer_dims: dict[str, list[MergeDim]] = {name: [] for name in graph.graph_inputs}
    for node in order:
        for ref in node.inputs:
            producer, _ = parse_ref(ref)
            if producer in consumer_dims:
                stats.edge_inspections += 1
                consumer_dims[producer].append(resolved[node.id])
    input_plan = []
    merged_inputs: dict[str, TensorSpec] = {}
    for name, spec in graph.graph_inputs.items():
        dim = _most_frequent(consumer_dims[name]) or MergeDim.BATCH
        input_dims[name] = dim
        model_names = [f"{name}::m{j}" for j in range(m)]
        for mn in model_names:
            merged_inputs[mn] = spec
        pack_id = f"pack::{name}"
        pack_spec = _packed_spec(spec, dim, m)
        stacked = dim is MergeDim.BATCH and spec.rank < 4
        b.emit(OpNode(
            pack_id, OpKind.PACK, tuple(make_ref(mn) for mn in model_names), pack_spec,
            attrs={"count": m, "dim": dim.value, "stacked": stacked}), "glue")
        b.merged_ref[name] = make_ref(pack_id)
        input_plan.append({"input": name, "dim": dim.value,
                           "models": model_names, "pack": pack_id})

    # Pass 3 (forward): emit merged nodes, splicing glue on axis changes.
    for node in order:
        rule = rules[node.id]
        dim = resolved[node.id]
        refs = []
        in_specs = []
        for ref in node.inputs:
            stats.edge_inspections += 1
            producer, _ = parse_ref(ref)
            parent_dim = input_dims.get(producer, resolved.get(producer))
            if parent_dim is dim:
                routed = b.merged_ref[producer]
            else:
                routed = b.glue_to(producer, source_spec[producer], parent_dim, dim)
            refs.append(routed)
            in_specs.append(b.spec_of[parse_ref(routed)[0]])

        b.merge_node_weights(node, rule)
        attrs = merged_attrs(node.kind, node.attrs, m)
        if (node.kind is OpKind.SOFTMAX and dim is MergeDim.BATCH
                and source_spec[node.id].rank < 4 and attrs["axis"] >= 0):
            attrs["axis"] += 1  # batch packing added a leading model axis

        # An op that is already batched packs its rank-3 input as a new
        # leading model axis, but the fused kernel wants the model and batch
        # axes collapsed into one; both layouts share bytes, so a reshape on
        # each side adapts them for free. Rank-4 inputs pack pre-collapsed.
        fold = (node.kind is OpKind.BATCH_MATMUL
                and source_spec[parse_ref(node.inputs[0])[0]].rank == 3)
        if fold:
            packed = in_specs[0]
            fold_dims = (packed.dims[0] * packed.dims[1],) + packed.dims[2:]
            fold_spec = TensorSpec(packed.dtype, fold_dims, packed.layout)
            refs[0] = b.emit(OpNode(
                f"fold::{node.id}", OpKind.RESHAPE, (refs[0],), fold_spec,
                attrs={"dims": list(fold_dims)}), "glue")
            in_specs[0] = fold_spec

        weight_specs = [b.merged_weights[w].spec for w in node.weights]
        out_spec = infer_output_spec(rule.target, attrs, in_specs, weight_specs)
        out_spec = out_spec.with_layout(_layout_for(dim))
        merged_id = f"merged::{node.id}"
        merged_ref = b.emit(OpNode(merged_id, rule.target, tuple(refs), out_spec,
                                   weights=node.weights, attrs=attrs), node.id)
        if fold:
            un_dims = (m, out_spec.dims[0] // m) + out_spec.dims[1:]
            un_spec = TensorSpec(out_spec.dtype, un_dims, out_spec.layout)
            merged_ref = b.emit(OpNode(
                f"unfold::{node.id}", OpKind.RESHAPE, (merged_ref,), un_spec,
                attrs={"dims": list(un_dims)}), "glue")
        b.merged_ref[node.id] = merged_ref

    # Outputs: one Unpack per model per graph output.
    output_plan = []
    merged_outputs: list[str] = []
    for k, ref in enumerate(graph.graph_outputs):
        producer, _ = parse_ref(ref)
        dim = input_dims.get(producer, resolved.get(producer))
        per_model = source_spec[producer]
        stacked = dim is MergeDim.BATCH and per_model.rank < 4
        slices = []
        for j in range(m):
            uid = f"unpack::{k}::m{j}"
            b.emit(OpNode(
                uid, OpKind.UNPACK, (b.merged_ref[producer],), per_model,
                attrs={"count": m, "dim": dim.value, "stacked": stacked, "index": j}), "glue")
            slices.append(uid)
            merged_outputs.append(make_ref(uid))
        output_plan.append({"output": k, "source": ref, "dim": dim.value, "slices": slices})

    stats.weight_bytes_before = sum(
        store[name].data.nbytes
        for store in stores for node in order for name in node.weights)
    merged_store = WeightStore(b.merged_weights, model_index=0)
    stats.weight_bytes_after = merged_store.total_bytes()

    merged_graph = Graph(
        nodes=tuple(b.nodes),
        graph_inputs=merged_inputs,
        graph_outputs=tuple(merged_outputs),
        metadata={k: v for k, v in graph.metadata.items() if k != "merge"},
    )
    result = MergedGraph(
        graph=merged_graph,
        num_models=m,
        provenance=b.provenance,
        node_dims={node.id: resolved[node.id] for node in order},
        input_plan=input_plan,
        output_plan=output_plan,
        glue=b.glue,
        stats=stats,
    )
    stats.elapsed_ns = time.perf_counter_ns() - t0
    result.embed_metadata()
    return result, merged_store


def merge_backbone(
    graph: Graph,
    backbone: set[str],
    stores: list[WeightStore],
    heads: list[tuple[Graph, WeightStore]],
) -> tuple[MergedGraph, WeightStore]:
    """Merge a shared prefix of ``graph`` and attach one unmerged head per model.

    ``backbone`` names the node ids to merge; it must be non-empty and
    prefix-closed (every ancestor of a backbone node is backbone). The
    boundary tensors, in order, are the source graph outputs produced by
    backbone nodes followed by backbone tensors consumed outside the
    backbone. Each head's graph inputs bind positionally to those boundary
    tensors and must match their per-model specs; head node and weight
    names get a ``head<m>::`` prefix in the result.
    """
    if len(heads) != len(stores):
        raise MergeConstraintError(f"{len(stores)} stores but {len(heads)} heads")
    if not backbone:
        raise MergeConstraintError("backbone is empty")
    node_map = graph.node_map()
    unknown = sorted(backbone - set(node_map))
    if unknown:
        raise MergeConstraintError(f"backbone names unknown nodes: {unknown}")
    for nid in sorted(backbone):
        for ref in node_map[nid].inputs:
            producer, _ = parse_ref(ref)
            if producer in node_map and producer not in backbone:
                raise MergeConstraintError(
                    f"backbone is not prefix-closed: '{nid}' depends on '{producer}'")

    # Boundary: backbone tensors visible outside the backbone.
    boundary: list[str] = []
    for ref in graph.graph_outputs:
        producer, _ = parse_ref(ref)
        if producer in backbone and ref not in boundary:
            boundary.append(ref)
    for node in graph.nodes:
        if node.id in backbone:
            continue
        for ref in node.inputs:
            producer, _ = parse_ref(ref)
            if producer in backbone and ref not in boundary:
                boundary.append(ref)
    if not boundary:
        raise MergeConstraintError("backbone produces no boundary tensors")

    backbone_nodes = tuple(n for n in graph.nodes if n.id in backbone)
    needed_inputs = {
        parse_ref(ref)[0]
        for n in backbone_nodes for ref in n.inputs
        if parse_ref(ref)[0] in graph.graph_inputs
    }
    backbone_graph = Graph(
        nodes=backbone_nodes,
        graph_inputs={k: v for k, v in graph.graph_inputs.items() if k in needed_inputs},
        graph_outputs=tuple(boundary),
        metadata=dict(graph.metadata),
    )
    needed_weights = {name for n in backbone_nodes for name in n.weights}
    restricted = [
        WeightStore({k: v for k, v in s.tensors.items() if k in needed_weights}, s.model_index)
        for s in stores
    ]
    merged, merged_store = merge(backbone_graph, restricted)

    # Splice each model's head onto its unpacked boundary slices.
    m_count = len(stores)
    spec_map = dict(graph.graph_inputs)
    for n in graph.nodes:
        spec_map[n.id] = n.output_spec
    nodes = list(merged.graph.nodes)
    outputs: list[str] = []
    provenance = dict(merged.provenance)
    weights = dict(merged_store.tensors)
    output_plan: list[dict[str, Any]] = []

    for m, (head, head_store) in enumerate(heads):
        head_diags = validate(head)
        if head_diags:
            raise ValidationError(head_diags)
        head_inputs = list(head.graph_inputs.items())
        if len(head_inputs) != len(boundary):
            raise ArchitectureMismatchError(
                f"head {m} has {len(head_inputs)} inputs but the backbone exposes "
                f"{len(boundary)} boundary tensors")
        binding: dict[str, str] = {}
        for (hname, hspec), (k, bref) in zip(head_inputs, enumerate(boundary)):
            bspec = spec_map[parse_ref(bref)[0]]
            if hspec.dims != bspec.dims or hspec.dtype != bspec.dtype:
                raise ArchitectureMismatchError(
                    f"head {m} input {hname!r} wants {hspec.dims} ({hspec.dtype}) but "
                    f"boundary {bref!r} is {bspec.dims} ({bspec.dtype})")
            binding[hname] = make_ref(merged.output_plan[k]["slices"][m])

        def _remap(ref: str) -> str:
            producer, _ = parse_ref(ref)
            if producer in binding:
                return binding[producer]
            return make_ref(f"head{m}::{producer}")

        rename = {}
        for name, value in head_store.tensors.items():
            rename[name] = f"head{m}::{name}"
            weights[rename[name]] = value
        for node in head.nodes:
            for wname in node.weights:
                if wname not in head_store:
                    raise ArchitectureMismatchError(
                        f"head {m} store lacks weight {wname!r} for node '{node.id}'")
            new_id = f"head{m}::{node.id}"
            nodes.append(OpNode(
                new_id, node.kind, tuple(_remap(r) for r in node.inputs),
                node.output_spec, weights=tuple(rename[w] for w in node.weights),
                attrs=dict(node.attrs)))
            provenance[new_id] = f"model{m}/{node.id}"
        for ref in head.graph_outputs:
            out_ref = _remap(ref)
            outputs.append(out_ref)
            output_plan.append({"output": len(outputs) - 1, "model": m,
                                "source": ref, "dim": None})

    final = Graph(
        nodes=tuple(nodes),
        graph_inputs=dict(merged.graph.graph_inputs),
        graph_outputs=tuple(outputs),
        metadata={k: v for k, v in merged.graph.metadata.items() if k != "merge"},
    )
    result = MergedGraph(
        graph=final,
        num_models=m_count,
        provenance=provenance,
        node_dims=merged.node_dims,
        input_plan=merged.input_plan,
        output_plan=output_plan,
        glue=merged.glue,
        stats=merged.stats,
    )
    result.embed_metadata()
    return result, WeightStore(weights, model_index=0)


def _human_bytes(n: int) -> str:
    for unit in ("B", "KiB", "MiB", "GiB"):
        if n < 1024 or unit == "GiB":
            return f"{n:.1f} {unit}" if unit != "B" else f"{n} B"
        n /= 1024
    return f"{n} B"


def explain(merged: MergedGraph) -> str:
    """Human-readable merge report: per-node packing, glue, and size deltas."""
    lines = []
    m = merged.num_models
    header = f"merge report: {m} model{'s' if m != 1 else ''}"
    if m == 1:
        header += " (degenerate: single-model merge, structure mirrors the source)"
    lines.append(header)

    graph = merged.graph
    kinds = Counter(n.kind for n in graph.nodes)
    packs = kinds.get(OpKind.PACK, 0)
    unpack_count = kinds.get(OpKind.UNPACK, 0)
    glue_nodes = sum(len(g.node_ids) for g in merged.glue)
    compute = len(graph.nodes) - packs - unpack_count - glue_nodes
    stats = merged.stats
    lines.append(
        f"  source: {stats.source_nodes} ops, {stats.source_edges} edges -> "
        f"merged: {len(graph.nodes)} nodes "
        f"({compute} compute, {packs} pack, {unpack_count} unpack, "
        f"{glue_nodes} glue in {merged.glue_count} junction{'s' if merged.glue_count != 1 else ''})")
    lines.append(
        f"  weights: {_human_bytes(stats.weight_bytes_before)} in -> "
        f"{_human_bytes(stats.weight_bytes_after)} out")
    lines.append(
        f"  traversal: {stats.node_visits} node visits, "
        f"{stats.edge_inspections} edge inspections")

    node_map = graph.node_map()
    by_source = {src: nid for nid, src in merged.provenance.items() if src != "glue"}
    if merged.node_dims:
        lines.append("  packing:")
        for src, dim in merged.node_dims.items():
            merged_id = by_source.get(src, "?")
            merged_kind = node_map[merged_id].kind.value if merged_id in node_map else "?"
            lines.append(f"    {src:<20} -> {merged_id:<28} {merged_kind:<16} {dim.value}")
    if merged.glue:
        lines.append("  glue junctions:")
        for g in merged.glue:
            lines.append(
                f"    #{g.index} after '{g.producer}': {g.src_dim.value} -> "
                f"{g.dst_dim.value} via {', '.join(g.node_ids)}")
    else:
        lines.append("  glue junctions: none")
    for entry in merged.input_plan:
        lines.append(f"  input '{entry['input']}': packed on {entry['dim']} by {entry['pack']}")
    for entry in merged.output_plan:
        if entry.get("dim") is None:
            lines.append(
                f"  output {entry['output']}: head output {entry['source']!r} "
                f"of model {entry['model']} (unmerged)")
        else:
            lines.append(
                f"  output {entry['output']}: {entry['source']!r} unpacked on {entry['dim']}")
    return "\n".join(lines)
