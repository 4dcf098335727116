"""Merge algorithm: structure, packing decisions, plans, and errors."""

import json
from pathlib import Path

import numpy as np
import pytest

from modelmerge.engine import TensorValue, WeightStore, execute
from modelmerge.errors import (
    ArchitectureMismatchError,
    MergeConstraintError,
    UnsupportedOpError,
    ValidationError,
)
from modelmerge.ir import Graph, MergeDim, OpKind, OpNode, TensorSpec, validate
from modelmerge.merger import MergedGraph, explain, merge
from modelmerge.serialize import deserialize, serialize
from modelmerge.zoo import build_zoo, model_inputs

GOLDEN = Path(__file__).parent / "data" / "ffnn_m2_golden.json"


def structurally_equal(a: Graph, b: Graph) -> bool:
    """Isomorphism under deterministic naming: same nodes, inputs, outputs."""
    return (a.nodes == b.nodes
            and a.graph_inputs == b.graph_inputs
            and a.graph_outputs == b.graph_outputs)


def run_both(graph, stores, merged, merged_store, seed=0):
    m = len(stores)
    inputs = [model_inputs(graph, seed=seed, model=i) for i in range(m)]
    refs = [execute(graph, stores[i], inputs[i])[0] for i in range(m)]
    outs, trace = execute(merged.graph, merged_store, merged.bind_inputs(inputs))
    return refs, merged.slice_outputs(outs), trace


class TestFfnnStructure:
    def test_matches_golden(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        merged, _ = merge(graph, stores)
        golden = deserialize(GOLDEN.read_bytes())
        assert structurally_equal(merged.graph, golden)

    def test_expected_node_set(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        merged, _ = merge(graph, stores)
        kinds = sorted(n.kind.value for n in merged.graph.nodes)
        assert kinds == ["BatchMatMul", "GroupNorm", "Pack", "ReLU",
                         "Reshape", "Transpose", "Unpack", "Unpack"]
        gn = next(n for n in merged.graph.nodes if n.kind is OpKind.GROUP_NORM)
        assert gn.attrs["groups"] == 2
        assert merged.glue_count == 1
        assert merged.glue[0].src_dim is MergeDim.BATCH
        assert merged.glue[0].dst_dim is MergeDim.CHANNEL

    def test_node_dims_sequence(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        merged, _ = merge(graph, stores)
        assert [d.value for d in merged.node_dims.values()] == ["batch", "channel", "channel"]


class TestCnnblockStructure:
    def test_all_channel_zero_glue(self):
        graph, stores = build_zoo("cnnblock", num_models=4)
        merged, _ = merge(graph, stores)
        assert merged.glue_count == 0
        assert all(d is MergeDim.CHANNEL for d in merged.node_dims.values())
        gconv = next(n for n in merged.graph.nodes if n.id == "merged::gconv1")
        assert gconv.attrs["groups"] == 8
        conv = next(n for n in merged.graph.nodes if n.id == "merged::conv1")
        assert conv.kind is OpKind.GROUPED_CONV2D and conv.attrs["groups"] == 4


class TestAttnblockStructure:
    def test_alternating_dims_and_glue(self):
        graph, stores = build_zoo("attnblock", num_models=2)
        merged, _ = merge(graph, stores)
        dims = {src: d.value for src, d in merged.node_dims.items()}
        assert dims["qkv"] == "batch" and dims["attn"] == "batch"
        assert dims["ln1"] == "channel" and dims["ln2"] == "channel"
        assert dims["ff1"] == "batch" and dims["ff2"] == "batch"
        assert merged.glue_count == 3  # proj->ln1, ln1->ff1, ff2->ln2

    def test_negative_softmax_axis_preserved(self):
        graph, stores = build_zoo("attnblock", num_models=2)
        merged, _ = merge(graph, stores)
        sm = next(n for n in merged.graph.nodes if n.kind is OpKind.SOFTMAX)
        assert sm.attrs["axis"] == -2  # counts from the end; still the sequence axis


class TestInvariants:
    @pytest.mark.parametrize("name", ("ffnn", "cnnblock", "attnblock"))
    @pytest.mark.parametrize("m", (1, 3))
    def test_structural_budget(self, name, m):
        graph, stores = build_zoo(name, num_models=m)
        merged, _ = merge(graph, stores)
        glue_nodes = sum(len(g.node_ids) for g in merged.glue)
        expected = (len(graph.nodes) + glue_nodes + len(graph.graph_inputs)
                    + m * len(graph.graph_outputs))
        assert len(merged.graph.nodes) == expected
        assert merged.glue_count <= graph.edge_count()

    @pytest.mark.parametrize("name", ("ffnn", "cnnblock", "attnblock"))
    def test_provenance_bijective_over_non_glue(self, name):
        graph, stores = build_zoo(name, num_models=2)
        merged, _ = merge(graph, stores)
        assert set(merged.provenance) == {n.id for n in merged.graph.nodes}
        non_glue = {k: v for k, v in merged.provenance.items() if v != "glue"}
        assert sorted(non_glue.values()) == sorted(n.id for n in graph.nodes)
        glue_kinds = {OpKind.PACK, OpKind.UNPACK, OpKind.RESHAPE, OpKind.TRANSPOSE}
        for node in merged.graph.nodes:
            if merged.provenance[node.id] == "glue":
                assert node.kind in glue_kinds

    @pytest.mark.parametrize("name", ("ffnn", "cnnblock", "attnblock"))
    def test_merged_graph_validates(self, name):
        graph, stores = build_zoo(name, num_models=3)
        merged, _ = merge(graph, stores)
        assert validate(merged.graph) == []

    def test_merge_is_deterministic(self):
        graph, stores = build_zoo("attnblock", num_models=4)
        a, _ = merge(graph, stores)
        b, _ = merge(graph, stores)
        assert serialize(a.graph) == serialize(b.graph)

    def test_weight_values_do_not_influence_structure(self):
        graph, s1 = build_zoo("attnblock", num_models=3, seed=1)
        _, s2 = build_zoo("attnblock", num_models=3, seed=2)
        a, _ = merge(graph, s1)
        b, _ = merge(graph, s2)
        assert serialize(a.graph) == serialize(b.graph)

    def test_counters_within_complexity_bounds(self):
        for name in ("ffnn", "cnnblock", "attnblock"):
            graph, stores = build_zoo(name, num_models=2)
            merged, _ = merge(graph, stores)
            assert merged.stats.node_visits == len(graph.nodes)
            assert merged.stats.edge_inspections <= 2 * graph.edge_count()

    def test_metadata_rehydration(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        merged, mstore = merge(graph, stores)
        again = MergedGraph.from_graph(deserialize(serialize(merged.graph)))
        assert again.num_models == 2
        assert again.input_plan == merged.input_plan
        assert again.output_plan == merged.output_plan
        assert again.glue_count == 1
        refs, slices, _ = run_both(graph, stores, again, mstore)
        assert all(r.bit_equal(s) for mr, ms in zip(refs, slices) for r, s in zip(mr, ms))


class TestForcedAxis:
    def test_channel_axis_softmax_is_forced_off_channel(self):
        """A softmax over the channel axis downstream of channel-packed ops
        must be forced onto batch packing with glue, and stay bit-exact."""
        spec = TensorSpec("f32", (2, 8))
        nodes = (
            OpNode("mm", OpKind.MATMUL, ("x:0",), spec, weights=("mm.w",)),
            OpNode("ln", OpKind.LAYER_NORM, ("mm:0",), spec,
                   weights=("ln.g", "ln.b"), attrs={"eps": 1e-5}),
            OpNode("sm", OpKind.SOFTMAX, ("ln:0",), spec, attrs={"axis": 1}),
        )
        graph = Graph(nodes, {"x": TensorSpec("f32", (2, 6))}, ("sm:0",))
        rng = np.random.default_rng(5)

        def store(seed):
            r = np.random.default_rng(seed)
            mk = lambda *dims: TensorValue(
                TensorSpec("f32", dims), r.uniform(-0.5, 0.5, dims).astype(np.float32))
            return WeightStore({"mm.w": mk(6, 8), "ln.g": mk(8), "ln.b": mk(8)})

        stores = [store(1), store(2)]
        merged, merged_store = merge(graph, stores)
        assert merged.node_dims["sm"] is MergeDim.BATCH
        assert merged.node_dims["ln"] is MergeDim.CHANNEL

        x = [{"x": TensorValue(TensorSpec("f32", (2, 6)),
                               rng.uniform(-1, 1, (2, 6)).astype(np.float32))}
             for _ in range(2)]
        refs = [execute(graph, stores[m], x[m])[0] for m in range(2)]
        outs, _ = execute(merged.graph, merged_store, merged.bind_inputs(x))
        slices = merged.slice_outputs(outs)
        for m in range(2):
            assert refs[m][0].bit_equal(slices[m][0])


class TestRootChains:
    def test_leading_agnostic_ops_adopt_descendant_axis(self):
        """ReLU -> ReLU -> Conv: the root chain has no constrained parent,
        so both activations must adopt the conv's channel packing and the
        merged graph needs no glue."""
        img = TensorSpec("f32", (1, 2, 4, 4))
        nodes = (
            OpNode("r1", OpKind.RELU, ("x:0",), img),
            OpNode("r2", OpKind.RELU, ("r1:0",), img),
            OpNode("cv", OpKind.CONV2D, ("r2:0",), img,
                   weights=("cv.w",), attrs={"kernel": 1, "stride": 1, "padding": 0}),
        )
        graph = Graph(nodes, {"x": img}, ("cv:0",))

        def store(seed):
            r = np.random.default_rng(seed)
            w = r.uniform(-0.5, 0.5, (2, 2, 1, 1)).astype(np.float32)
            return WeightStore({"cv.w": TensorValue(TensorSpec("f32", (2, 2, 1, 1)), w)})

        merged, merged_store = merge(graph, [store(1), store(2)])
        assert all(d is MergeDim.CHANNEL for d in merged.node_dims.values())
        assert merged.glue_count == 0

    def test_fully_agnostic_graph_defaults_to_batch(self):
        spec = TensorSpec("f32", (2, 4))
        nodes = (OpNode("r", OpKind.RELU, ("x:0",), spec),
                 OpNode("t", OpKind.TANH, ("r:0",), spec))
        graph = Graph(nodes, {"x": spec}, ("t:0",))
        merged, mstore = merge(graph, [WeightStore({}), WeightStore({})])
        assert all(d is MergeDim.BATCH for d in merged.node_dims.values())
        x = [{"x": TensorValue(TensorSpec("f32", (2, 4)),
                               np.full((2, 4), i - 0.5, dtype=np.float32))}
             for i in range(2)]
        refs = [execute(graph, WeightStore({}), x[m])[0] for m in range(2)]
        outs, _ = execute(merged.graph, mstore, merged.bind_inputs(x))
        slices = merged.slice_outputs(outs)
        for m in range(2):
            assert refs[m][0].bit_equal(slices[m][0])


class TestErrors:
    def test_invalid_graph_rejected(self):
        g = Graph((), {}, ())
        with pytest.raises(ValidationError):
            merge(g, [WeightStore({})])

    def test_zero_stores_rejected(self):
        graph, _ = build_zoo("ffnn")
        with pytest.raises(MergeConstraintError):
            merge(graph, [])

    def test_unsupported_op_named(self):
        spec = TensorSpec("f32", (2, 4))
        nodes = (OpNode("t", OpKind.TRANSPOSE, ("x:0",), TensorSpec("f32", (4, 2)),
                        attrs={"perm": [1, 0]}),)
        graph = Graph(nodes, {"x": spec}, ("t:0",))
        with pytest.raises(UnsupportedOpError):
            merge(graph, [WeightStore({}), WeightStore({})])

    def test_store_name_mismatch(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        broken = WeightStore({k: v for k, v in stores[1].tensors.items() if k != "mm1.b"})
        with pytest.raises(ArchitectureMismatchError) as exc:
            merge(graph, [stores[0], broken])
        assert "store 1" in str(exc.value)

    def test_store_spec_mismatch(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        tensors = dict(stores[1].tensors)
        tensors["mm1.w"] = TensorValue(
            TensorSpec("f32", (6, 9)), np.zeros((6, 9), dtype=np.float32))
        with pytest.raises(ArchitectureMismatchError) as exc:
            merge(graph, [stores[0], WeightStore(tensors)])
        assert "mm1.w" in str(exc.value)

    def test_missing_weight_named(self):
        graph, _ = build_zoo("ffnn", num_models=1)
        with pytest.raises(ArchitectureMismatchError) as exc:
            merge(graph, [WeightStore({}), WeightStore({})])
        assert "mm1" in str(exc.value)


class TestExplain:
    def test_report_mentions_key_facts(self):
        graph, stores = build_zoo("ffnn", num_models=2)
        merged, _ = merge(graph, stores)
        text = explain(merged)
        assert "2 models" in text
        assert "1 junction" in text
        assert "merged::mm1" in text and "BatchMatMul" in text
        assert "packed on batch" in text

    def test_degenerate_banner(self):
        graph, stores = build_zoo("ffnn", num_models=1)
        merged, _ = merge(graph, stores)
        assert "degenerate" in explain(merged)
