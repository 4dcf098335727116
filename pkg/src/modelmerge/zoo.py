"""Deterministic toy models for tests, verification, and benchmarks.

Three desk-scale architectures, chosen to exercise every merge path:

* ``ffnn``: MatMul -> LayerNorm -> ReLU on (B, 6). The matmul packs on
  batch and the norm on channel, so merging always inserts one glue
  junction.
* ``cnnblock``: Conv2D -> BatchNorm -> ReLU -> GroupedConv2D(G=2) ->
  BatchNorm -> Add (residual from the input) -> MaxPool2D on (B, 8, 8, 8).
  Everything packs on channel; merging inserts no glue.
* ``attnblock``: MatMul -> Softmax over the sequence axis -> MatMul ->
  LayerNorm -> MatMul -> ReLU -> MatMul -> LayerNorm on (B, 6, 8).
  Alternates batch and channel packing, exercising glue in both
  directions plus the softmax axis remap.

Same (name, seed, model index) always yields identical graphs, weights,
and inputs: weights draw from generator key [seed, 0, model] and inputs
from [seed, 1, model], in declaration order, uniform in [-0.5, 0.5]
(except BatchNorm running variance, uniform in [0.5, 1.5] to stay a
valid variance) and [-1, 1] respectively.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .engine import NUMPY_DTYPES, TensorValue, WeightStore
from .ir import Graph, OpKind, OpNode, TensorSpec

ZOO_NAMES = ("ffnn", "cnnblock", "attnblock")

# (weight name, dims, draw) in generation order; draw "var" keeps values
# positive so running variances are well formed.
_WeightPlan = list[tuple[str, tuple[int, ...], str]]


def _ffnn(batch: int, dtype: str) -> tuple[Graph, _WeightPlan]:
    d_in, hidden = 6, 8
    act = TensorSpec(dtype, (batch, hidden))
    nodes = (
        OpNode("mm1", OpKind.MATMUL, ("x:0",), act, weights=("mm1.w", "mm1.b")),
        OpNode("ln1", OpKind.LAYER_NORM, ("mm1:0",), act,
               weights=("ln1.gamma", "ln1.beta"), attrs={"eps": 1e-5}),
        OpNode("act1", OpKind.RELU, ("ln1:0",), act),
    )
    graph = Graph(nodes, {"x": TensorSpec(dtype, (batch, d_in))}, ("act1:0",),
                  metadata={"zoo": "ffnn", "batch": batch, "dtype": dtype})
    plan: _WeightPlan = [
        ("mm1.w", (d_in, hidden), "std"),
        ("mm1.b", (hidden,), "std"),
        ("ln1.gamma", (hidden,), "std"),
        ("ln1.beta", (hidden,), "std"),
    ]
    return graph, plan


def _cnnblock(batch: int, dtype: str) -> tuple[Graph, _WeightPlan]:
    c, hw, k, groups = 8, 8, 3, 2
    img = TensorSpec(dtype, (batch, c, hw, hw))
    pooled = TensorSpec(dtype, (batch, c, hw // 2, hw // 2))
    conv_attrs = {"kernel": k, "stride": 1, "padding": 1}
    bn_attrs = {"eps": 1e-5}

    def bn_weights(prefix: str) -> tuple[str, ...]:
        return tuple(f"{prefix}.{s}" for s in ("gamma", "beta", "mean", "var"))

    nodes = (
        OpNode("conv1", OpKind.CONV2D, ("x:0",), img,
               weights=("conv1.w", "conv1.b"), attrs=dict(conv_attrs)),
        OpNode("bn1", OpKind.BATCH_NORM, ("conv1:0",), img,
               weights=bn_weights("bn1"), attrs=dict(bn_attrs)),
        OpNode("relu1", OpKind.RELU, ("bn1:0",), img),
        OpNode("gconv1", OpKind.GROUPED_CONV2D, ("relu1:0",), img,
               weights=("gconv1.w", "gconv1.b"),
               attrs=dict(conv_attrs, groups=groups)),
        OpNode("bn2", OpKind.BATCH_NORM, ("gconv1:0",), img,
               weights=bn_weights("bn2"), attrs=dict(bn_attrs)),
        OpNode("add1", OpKind.ADD, ("bn2:0", "x:0"), img),
        OpNode("pool1", OpKind.MAX_POOL2D, ("add1:0",), pooled,
               attrs={"kernel": 2, "stride": 2}),
    )
    graph = Graph(nodes, {"x": img}, ("pool1:0",),
                  metadata={"zoo": "cnnblock", "batch": batch, "dtype": dtype})
    vec = (c,)
    plan: _WeightPlan = [
        ("conv1.w", (c, c, k, k), "std"), ("conv1.b", vec, "std"),
        ("bn1.gamma", vec, "std"), ("bn1.beta", vec, "std"),
        ("bn1.mean", vec, "std"), ("bn1.var", vec, "var"),
        ("gconv1.w", (c, c // groups, k, k), "std"), ("gconv1.b", vec, "std"),
        ("bn2.gamma", vec, "std"), ("bn2.beta", vec, "std"),
        ("bn2.mean", vec, "std"), ("bn2.var", vec, "var"),
    ]
    return graph, plan


def _attnblock(batch: int, dtype: str) -> tuple[Graph, _WeightPlan]:
    seq, d, d_ff = 6, 8, 16
    tok = TensorSpec(dtype, (batch, seq, d))
    wide = TensorSpec(dtype, (batch, seq, d_ff))
    ln_attrs = {"eps": 1e-5}
    nodes = (
        OpNode("qkv", OpKind.MATMUL, ("x:0",), tok, weights=("qkv.w", "qkv.b")),
        OpNode("attn", OpKind.SOFTMAX, ("qkv:0",), tok, attrs={"axis": -2}),
        OpNode("proj", OpKind.MATMUL, ("attn:0",), tok, weights=("proj.w", "proj.b")),
        OpNode("ln1", OpKind.LAYER_NORM, ("proj:0",), tok,
               weights=("ln1.gamma", "ln1.beta"), attrs=dict(ln_attrs)),
        OpNode("ff1", OpKind.MATMUL, ("ln1:0",), wide, weights=("ff1.w", "ff1.b")),
        OpNode("act", OpKind.RELU, ("ff1:0",), wide),
        OpNode("ff2", OpKind.MATMUL, ("act:0",), tok, weights=("ff2.w", "ff2.b")),
        OpNode("ln2", OpKind.LAYER_NORM, ("ff2:0",), tok,
               weights=("ln2.gamma", "ln2.beta"), attrs=dict(ln_attrs)),
    )
    graph = Graph(nodes, {"x": tok}, ("ln2:0",),
                  metadata={"zoo": "attnblock", "batch": batch, "dtype": dtype})
    plan: _WeightPlan = [
        ("qkv.w", (d, d), "std"), ("qkv.b", (d,), "std"),
        ("proj.w", (d, d), "std"), ("proj.b", (d,), "std"),
        ("ln1.gamma", (d,), "std"), ("ln1.beta", (d,), "std"),
        ("ff1.w", (d, d_ff), "std"), ("ff1.b", (d_ff,), "std"),
        ("ff2.w", (d_ff, d), "std"), ("ff2.b", (d,), "std"),
        ("ln2.gamma", (d,), "std"), ("ln2.beta", (d,), "std"),
    ]
    return graph, plan


_BUILDERS: dict[str, Callable[[int, str], tuple[Graph, _WeightPlan]]] = {
    "ffnn": _ffnn,
    "cnnblock": _cnnblock,
    "attnblock": _attnblock,
}


def build_graph(name: str, *, batch: int = 1, dtype: str = "f32") -> Graph:
    """The shared architecture for one zoo model."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown zoo model {name!r}; choose from {ZOO_NAMES}")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if dtype not in NUMPY_DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}")
    return _BUILDERS[name](batch, dtype)[0]


def build_weights(name: str, *, dtype: str = "f32", seed: int = 0,
                  model: int = 0) -> WeightStore:
    """One model's parameters, deterministic in (name, dtype, seed, model)."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown zoo model {name!r}; choose from {ZOO_NAMES}")
    _, plan = _BUILDERS[name](1, dtype)
    rng = np.random.default_rng([seed, 0, model])
    np_dtype = NUMPY_DTYPES[dtype]
    tensors = {}
    for wname, dims, draw in plan:
        lo, hi = (0.5, 1.5) if draw == "var" else (-0.5, 0.5)
        arr = rng.uniform(lo, hi, size=dims).astype(np_dtype)
        tensors[wname] = TensorValue(TensorSpec(dtype, dims), arr)
    return WeightStore(tensors, model_index=model)


def build_zoo(name: str, *, batch: int = 1, dtype: str = "f32", seed: int = 0,
              num_models: int = 1) -> tuple[Graph, list[WeightStore]]:
    """Shared graph plus ``num_models`` independently seeded weight stores."""
    if num_models < 1:
        raise ValueError("num_models must be >= 1")
    graph = build_graph(name, batch=batch, dtype=dtype)
    stores = [build_weights(name, dtype=dtype, seed=seed, model=m)
              for m in range(num_models)]
    return graph, stores


def model_inputs(graph: Graph, *, seed: int = 0, model: int = 0) -> dict[str, TensorValue]:
    """Seeded random inputs for one model, uniform in [-1, 1].

    Shared by verification and benchmarking so both paths see the same
    tensors for the same (seed, model).
    """
    rng = np.random.default_rng([seed, 1, model])
    out = {}
    for name, spec in graph.graph_inputs.items():
        arr = rng.uniform(-1.0, 1.0, size=spec.dims).astype(NUMPY_DTYPES[spec.dtype])
        out[name] = TensorValue(spec, arr)
    return out
