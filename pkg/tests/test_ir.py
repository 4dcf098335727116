"""Graph IR: specs, validation, topological order."""

import pytest

from modelmerge.errors import ShapeError, ValidationError
from modelmerge.ir import (
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


def spec(*dims, dtype="f32", layout=Layout.UNLAID):
    return TensorSpec(dtype, dims, layout)


def relu_chain(*ids, dims=(2, 4)):
    """id[0] -> id[1] -> ... as ReLU nodes reading graph input x."""
    nodes = []
    prev = "x:0"
    for nid in ids:
        nodes.append(OpNode(nid, OpKind.RELU, (prev,), spec(*dims)))
        prev = make_ref(nid)
    return Graph(tuple(nodes), {"x": spec(*dims)}, (prev,))


class TestTensorSpec:
    def test_rank_and_size(self):
        s = spec(2, 3, 4)
        assert s.rank == 3 and s.size == 24

    def test_rejects_empty_dims(self):
        with pytest.raises(ShapeError):
            TensorSpec("f32", ())

    def test_rejects_nonpositive_extent(self):
        with pytest.raises(ShapeError):
            spec(2, 0, 4)

    def test_rejects_unknown_dtype(self):
        with pytest.raises(ShapeError):
            TensorSpec("i8", (2,))

    def test_channel_axis_per_rank(self):
        assert channel_axis(2) == 1
        assert channel_axis(3) == 2
        assert channel_axis(4) == 1
        with pytest.raises(ShapeError):
            channel_axis(5)


class TestRefs:
    def test_round_trip(self):
        assert parse_ref(make_ref("conv1")) == ("conv1", 0)

    def test_ids_with_colons_survive(self):
        # merged node names contain "::"; the port is the last segment
        assert parse_ref("merged::mm1:0") == ("merged::mm1", 0)


class TestEnums:
    def test_op_kind_count(self):
        assert len(OpKind) == 19

    def test_merge_dim_values(self):
        assert {d.value for d in MergeDim} == {"batch", "channel", "dontcare"}


class TestValidate:
    def test_empty_graph_single_diagnostic(self):
        diags = validate(Graph((), {}, ()))
        assert len(diags) == 1 and "no outputs" in str(diags[0])

    def test_valid_chain_is_clean(self):
        assert validate(relu_chain("a", "b")) == []

    def test_duplicate_node_id(self):
        g = relu_chain("a")
        dup = Graph(g.nodes + g.nodes, g.graph_inputs, g.graph_outputs)
        assert any(d.rule == "duplicate-id" for d in validate(dup))

    def test_dangling_input_ref(self):
        node = OpNode("a", OpKind.RELU, ("ghost:0",), spec(2, 4))
        g = Graph((node,), {"x": spec(2, 4)}, ("a:0",))
        assert any(d.rule == "bad-ref" for d in validate(g))

    def test_arity_violation(self):
        node = OpNode("a", OpKind.ADD, ("x:0",), spec(2, 4))
        g = Graph((node,), {"x": spec(2, 4)}, ("a:0",))
        assert any(d.rule == "arity" for d in validate(g))

    def test_missing_required_attr(self):
        node = OpNode("s", OpKind.SOFTMAX, ("x:0",), spec(2, 4))  # no axis
        g = Graph((node,), {"x": spec(2, 4)}, ("s:0",))
        assert any(d.rule == "missing-attr" for d in validate(g))

    def test_weight_arity(self):
        node = OpNode("ln", OpKind.LAYER_NORM, ("x:0",), spec(2, 4),
                      weights=("g",), attrs={"eps": 1e-5})
        g = Graph((node,), {"x": spec(2, 4)}, ("ln:0",))
        assert any(d.rule == "weight-arity" for d in validate(g))

    def test_cycle_detected_and_named(self):
        a = OpNode("A", OpKind.RELU, ("B:0",), spec(2, 4))
        b = OpNode("B", OpKind.RELU, ("A:0",), spec(2, 4))
        g = Graph((a, b), {"x": spec(2, 4)}, ("A:0",))
        msgs = [str(d) for d in validate(g)]
        assert any("cycle detected at A" in m for m in msgs)

    def test_shape_mismatch_reported(self):
        node = OpNode("a", OpKind.RELU, ("x:0",), spec(2, 5))
        g = Graph((node,), {"x": spec(2, 4)}, ("a:0",))
        assert any(d.rule == "shape" for d in validate(g))

    def test_unreachable_output(self):
        g = relu_chain("a")
        bad = Graph(g.nodes, g.graph_inputs, ("nowhere:0",))
        assert any(d.rule == "bad-ref" for d in validate(bad))


class TestTopologicalOrder:
    def test_diamond(self):
        a = OpNode("A", OpKind.RELU, ("x:0",), spec(2, 4))
        b = OpNode("B", OpKind.RELU, ("A:0",), spec(2, 4))
        c = OpNode("C", OpKind.RELU, ("A:0",), spec(2, 4))
        d = OpNode("D", OpKind.ADD, ("B:0", "C:0"), spec(2, 4))
        g = Graph((d, c, b, a), {"x": spec(2, 4)}, ("D:0",))
        assert [n.id for n in topological_order(g)] == ["A", "B", "C", "D"]

    def test_singleton(self):
        g = relu_chain("A")
        assert [n.id for n in topological_order(g)] == ["A"]

    def test_every_parent_precedes_child(self):
        from modelmerge.zoo import build_graph
        g = build_graph("cnnblock")
        order = [n.id for n in topological_order(g)]
        assert len(order) == len(g.nodes)
        pos = {nid: i for i, nid in enumerate(order)}
        for node in g.nodes:
            for ref in node.inputs:
                producer, _ = parse_ref(ref)
                if producer in pos:
                    assert pos[producer] < pos[node.id]

    def test_cycle_raises(self):
        a = OpNode("A", OpKind.RELU, ("B:0",), spec(2, 4))
        b = OpNode("B", OpKind.RELU, ("A:0",), spec(2, 4))
        g = Graph((a, b), {"x": spec(2, 4)}, ("A:0",))
        with pytest.raises(ValidationError):
            topological_order(g)

    def test_deterministic(self):
        from modelmerge.zoo import build_graph
        g = build_graph("attnblock")
        first = [n.id for n in topological_order(g)]
        assert all([n.id for n in topological_order(g)] == first for _ in range(3))


class TestInferOutputSpec:
    def test_conv_extent(self):
        out = infer_output_spec(
            OpKind.CONV2D, {"kernel": 3, "stride": 2, "padding": 1},
            [spec(1, 3, 9, 9)], [spec(5, 3, 3, 3)])
        assert out.dims == (1, 5, 5, 5)

    def test_pool_overhang_rejected(self):
        with pytest.raises(ShapeError):
            infer_output_spec(OpKind.MAX_POOL2D, {"kernel": 2, "stride": 2},
                              [spec(1, 3, 5, 5)])

    def test_pack_channel(self):
        out = infer_output_spec(OpKind.PACK,
                                {"count": 3, "dim": "channel", "stacked": False},
                                [spec(2, 4)] * 3)
        assert out.dims == (2, 12) and out.layout is Layout.CHANNEL_MAJOR

    def test_pack_batch_stacked(self):
        out = infer_output_spec(OpKind.PACK,
                                {"count": 3, "dim": "batch", "stacked": True},
                                [spec(2, 4)] * 3)
        assert out.dims == (3, 2, 4) and out.layout is Layout.BATCH_MAJOR

    def test_unpack_inverts_pack(self):
        packed = spec(3, 2, 4, layout=Layout.BATCH_MAJOR)
        out = infer_output_spec(
            OpKind.UNPACK,
            {"count": 3, "dim": "batch", "stacked": True, "index": 1}, [packed])
        assert out.dims == (2, 4) and out.layout is Layout.UNLAID

    def test_matmul_rejects_bad_contraction(self):
        with pytest.raises(ShapeError):
            infer_output_spec(OpKind.MATMUL, {}, [spec(2, 4)], [spec(5, 7)])
