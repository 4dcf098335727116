"""Backbone sharing: merge a common prefix, keep per-model heads unmerged."""

import numpy as np
import pytest

from modelmerge.engine import NUMPY_DTYPES, TensorValue, WeightStore, execute
from modelmerge.errors import ArchitectureMismatchError, MergeConstraintError
from modelmerge.ir import Graph, OpKind, OpNode, TensorSpec, parse_ref, validate
from modelmerge.merger import merge_backbone
from modelmerge.zoo import build_zoo, model_inputs

CNN_NODE_IDS = ("conv1", "bn1", "relu1", "gconv1", "bn2", "add1", "pool1")


def linear_head(width, seed, in_spec=("f32", (1, 128))):
    """Flatten the feature map and project it to ``width`` logits."""
    dtype, dims = in_spec
    flat = int(np.prod(dims))
    rng = np.random.default_rng(seed)
    nodes = (
        OpNode("flat", OpKind.RESHAPE, ("feat:0",), TensorSpec(dtype, (1, flat)),
               attrs={"dims": [1, flat]}),
        OpNode("logits", OpKind.MATMUL, ("flat:0",), TensorSpec(dtype, (1, width)),
               weights=("logits.w",)),
    )
    graph = Graph(nodes, {"feat": TensorSpec(dtype, dims)}, ("logits:0",))
    w = rng.uniform(-0.5, 0.5, (flat, width)).astype(NUMPY_DTYPES[dtype])
    store = WeightStore({"logits.w": TensorValue(TensorSpec(dtype, (flat, width)), w)})
    return graph, store


def reference_outputs(graph, backbone, stores, heads, inputs):
    """Run each model through the unmerged backbone then its own head."""
    node_map = graph.node_map()
    boundary = [r for r in graph.graph_outputs if parse_ref(r)[0] in backbone]
    for node in graph.nodes:
        if node.id in backbone:
            continue
        for ref in node.inputs:
            if parse_ref(ref)[0] in backbone and ref not in boundary:
                boundary.append(ref)
    bb_nodes = tuple(n for n in graph.nodes if n.id in backbone)
    needed = {parse_ref(r)[0] for n in bb_nodes for r in n.inputs}
    bb = Graph(bb_nodes,
               {k: v for k, v in graph.graph_inputs.items() if k in needed},
               tuple(boundary))
    results = []
    for m, (head, head_store) in enumerate(heads):
        feats, _ = execute(bb, stores[m], inputs[m])
        feed = {name: val for (name, _), val in zip(head.graph_inputs.items(), feats)}
        outs, _ = execute(head, head_store, feed)
        results.append(outs)
    return results


class TestSharedBackbone:
    def test_distinct_head_widths_bit_exact(self):
        graph, stores = build_zoo("cnnblock", num_models=2)
        backbone = set(CNN_NODE_IDS)
        heads = [linear_head(10, seed=11, in_spec=("f32", (1, 8, 4, 4))),
                 linear_head(5, seed=12, in_spec=("f32", (1, 8, 4, 4)))]
        merged, mstore = merge_backbone(graph, backbone, stores, heads)
        assert validate(merged.graph) == []

        inputs = [model_inputs(graph, seed=0, model=m) for m in range(2)]
        refs = reference_outputs(graph, backbone, stores, heads, inputs)
        outs, _ = execute(merged.graph, mstore, merged.bind_inputs(inputs))
        slices = merged.slice_outputs(outs)
        assert slices[0][0].spec.dims == (1, 10)
        assert slices[1][0].spec.dims == (1, 5)
        for m in range(2):
            assert refs[m][0].bit_equal(slices[m][0])

    def test_partial_prefix_boundary_is_intermediate_tensor(self):
        """Cutting after relu1 exposes an activation that is not a graph
        output; heads attach to it and later source nodes are dropped."""
        graph, stores = build_zoo("cnnblock", num_models=2)
        backbone = {"conv1", "bn1", "relu1"}
        heads = [linear_head(4, seed=m, in_spec=("f32", (1, 8, 8, 8))) for m in (3, 4)]
        merged, mstore = merge_backbone(graph, backbone, stores, heads)
        merged_ids = {n.id for n in merged.graph.nodes}
        assert "merged::gconv1" not in merged_ids
        assert "head0::logits" in merged_ids and "head1::logits" in merged_ids

        inputs = [model_inputs(graph, seed=1, model=m) for m in range(2)]
        refs = reference_outputs(graph, backbone, stores, heads, inputs)
        outs, _ = execute(merged.graph, mstore, merged.bind_inputs(inputs))
        slices = merged.slice_outputs(outs)
        for m in range(2):
            assert refs[m][0].bit_equal(slices[m][0])

    def test_head_weights_are_namespaced(self):
        graph, stores = build_zoo("cnnblock", num_models=2)
        heads = [linear_head(3, seed=m, in_spec=("f32", (1, 8, 4, 4))) for m in (5, 6)]
        merged, mstore = merge_backbone(graph, set(CNN_NODE_IDS), stores, heads)
        assert "head0::logits.w" in mstore
        assert "head1::logits.w" in mstore
        assert merged.provenance["head1::logits"] == "model1/logits"

    def test_many_models(self):
        graph, stores = build_zoo("ffnn", num_models=4)
        heads = [linear_head(2 + m, seed=m, in_spec=("f32", (1, 8))) for m in range(4)]
        merged, mstore = merge_backbone(graph, {"mm1", "ln1", "act1"}, stores, heads)
        inputs = [model_inputs(graph, seed=2, model=m) for m in range(4)]
        refs = reference_outputs(graph, {"mm1", "ln1", "act1"}, stores, heads, inputs)
        outs, _ = execute(merged.graph, mstore, merged.bind_inputs(inputs))
        slices = merged.slice_outputs(outs)
        for m in range(4):
            assert slices[m][0].spec.dims == (1, 2 + m)
            assert refs[m][0].bit_equal(slices[m][0])


class TestBackboneErrors:
    def test_empty_backbone(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        heads = [linear_head(2, seed=m, in_spec=("f32", (1, 8))) for m in range(2)]
        with pytest.raises(MergeConstraintError):
            merge_backbone(graph, set(), stores, heads)

    def test_unknown_backbone_node(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        heads = [linear_head(2, seed=m, in_spec=("f32", (1, 8))) for m in range(2)]
        with pytest.raises(MergeConstraintError) as exc:
            merge_backbone(graph, {"mm1", "ghost"}, stores, heads)
        assert "ghost" in str(exc.value)

    def test_not_prefix_closed_names_offender(self):
        graph, stores = build_zoo("cnnblock", num_models=2)
        heads = [linear_head(2, seed=m, in_spec=("f32", (1, 8, 8, 8))) for m in range(2)]
        with pytest.raises(MergeConstraintError) as exc:
            merge_backbone(graph, {"conv1", "relu1"}, stores, heads)  # bn1 missing
        msg = str(exc.value)
        assert "relu1" in msg and "bn1" in msg

    def test_head_count_mismatch(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        heads = [linear_head(2, seed=0, in_spec=("f32", (1, 8)))]
        with pytest.raises(MergeConstraintError):
            merge_backbone(graph, {"mm1", "ln1", "act1"}, stores, heads)

    def test_head_input_spec_mismatch(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        heads = [linear_head(2, seed=0, in_spec=("f32", (1, 8))),
                 linear_head(2, seed=1, in_spec=("f32", (1, 9)))]
        with pytest.raises(ArchitectureMismatchError) as exc:
            merge_backbone(graph, {"mm1", "ln1", "act1"}, stores, heads)
        assert "head 1" in str(exc.value)

    def test_head_input_count_mismatch(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        spec = TensorSpec("f32", (1, 8))
        two_in = Graph(
            (OpNode("s", OpKind.ADD, ("a:0", "b:0"), spec),),
            {"a": spec, "b": spec}, ("s:0",))
        heads = [(two_in, WeightStore({})), (two_in, WeightStore({}))]
        with pytest.raises(ArchitectureMismatchError):
            merge_backbone(graph, {"mm1", "ln1", "act1"}, stores, heads)

    def test_head_missing_weight(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        head_graph, _ = linear_head(2, seed=0, in_spec=("f32", (1, 8)))
        heads = [(head_graph, WeightStore({})),
                 linear_head(2, seed=1, in_spec=("f32", (1, 8)))]
        with pytest.raises(ArchitectureMismatchError) as exc:
            merge_backbone(graph, {"mm1", "ln1", "act1"}, stores, heads)
        assert "logits.w" in str(exc.value)
