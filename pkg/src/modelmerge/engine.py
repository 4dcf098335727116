"""Reference tensor kernels and the graph executor.

Correctness contract: running a merged graph must reproduce each source
model's outputs *bit for bit*, not merely within a tolerance. That only
holds if every kernel accumulates in a fixed, documented order, because
float addition is not associative. The orders used here:

* conv / grouped conv: input channel outermost, then kernel row, then
  kernel column; one fused multiply-accumulate per term, in the tensor
  dtype. The grouped kernel walks the same (c_in, kh, kw) sequence per
  output channel as the plain kernel does, which is what makes a grouped
  conv over channel-concatenated operands slice-exact.
* matmul / batch matmul: contraction index ascending.
* norms: numpy's axis reduction over the channel (or per-group channel)
  run. Identical value runs of identical length reduce identically, so a
  per-group reduction matches the standalone per-model reduction.

Kernels never fall back to BLAS or im2col; the loops below are the oracle
of record. Everything runs on C-contiguous arrays so reduction code paths
cannot diverge between the merged and unmerged sides.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ExecutionError, ShapeError
from .ir import (
    Graph,
    Layout,
    MergeDim,
    OpKind,
    TensorSpec,
    channel_axis,
    conv_output_extent,
    parse_ref,
    pool_output_extent,
    topological_order,
)

NUMPY_DTYPES = {"f32": np.float32, "f64": np.float64}
DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


@dataclass(frozen=True)
class TensorValue:
    """A concrete tensor: a spec plus row-major data.

    ``data`` is always C-contiguous and owns exactly ``spec.size`` elements.
    """

    spec: TensorSpec
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=NUMPY_DTYPES[self.spec.dtype])
        if arr.shape != self.spec.dims:
            if arr.size != self.spec.size:
                raise ShapeError(f"data has {arr.size} elements, spec wants {self.spec.size}")
            arr = arr.reshape(self.spec.dims)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray, layout: Layout = Layout.UNLAID) -> "TensorValue":
        dtype = DTYPE_NAMES.get(np.dtype(arr.dtype))
        if dtype is None:
            raise ShapeError(f"unsupported dtype {arr.dtype}")
        return cls(TensorSpec(dtype, tuple(arr.shape), layout), np.ascontiguousarray(arr))

    def bit_equal(self, other: "TensorValue") -> bool:
        """Strict equality: same spec dims/dtype and identical payload bits."""
        return (
            self.spec.dtype == other.spec.dtype
            and self.spec.dims == other.spec.dims
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class WeightStore:
    """Named parameter tensors for one model."""

    tensors: dict[str, TensorValue]
    model_index: int = 0

    def __getitem__(self, name: str) -> TensorValue:
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"weight {name!r} not in store") from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> set[str]:
        return set(self.tensors)

    def total_bytes(self) -> int:
        return sum(t.data.nbytes for t in self.tensors.values())


# --------------------------------------------------------------------------
# Kernels. All take and return np.ndarray; TensorValue boxing happens in
# execute(). Shapes are assumed pre-checked by graph validation; kernels
# still guard the weight-dependent constraints that validation cannot see.
# --------------------------------------------------------------------------


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
           *, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Valid cross-correlation with zero padding.

    x: (N, C_in, H, W), w: (C_out, C_in, K, K), bias: (C_out,) or None.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d wants rank-4 operands, got {x.shape} and {w.shape}")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch: input {x.dtype} vs kernel {w.dtype}")
    n, c_in, h, wid = x.shape
    c_out, kc, kh_, kw_ = w.shape
    if kc != c_in or kh_ != kw_:
        raise ShapeError(f"kernel {w.shape} incompatible with input {x.shape}")
    k = kh_
    h_out = conv_output_extent(h, k, stride, padding)
    w_out = conv_output_extent(wid, k, stride, padding)
    xp = _pad2d(x, padding)
    y = np.zeros((n, c_out, h_out, w_out), dtype=x.dtype)
    # Accumulation order is load-bearing: c_in outer, kernel row, kernel col.
    for ci in range(c_in):
        for kh in range(k):
            hs = slice(kh, kh + (h_out - 1) * stride + 1, stride)
            for kw in range(k):
                ws = slice(kw, kw + (w_out - 1) * stride + 1, stride)
                y += w[:, ci, kh, kw][None, :, None, None] * xp[:, ci : ci + 1, hs, ws]
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"bias {bias.shape} != ({c_out},)")
        y = y + bias[None, :, None, None]
    return y


def grouped_conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                   *, groups: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Grouped cross-correlation: output channel c reads input channels
    ``(c_in/G) * floor(c / (c_out/G)) + [0, c_in/G)``.

    x: (N, C_in, H, W), w: (C_out, C_in/G, K, K). groups=1 degenerates to
    conv2d bit-exactly; the accumulation order matches conv2d per element.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"grouped_conv2d wants rank-4 operands, got {x.shape} and {w.shape}")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch: input {x.dtype} vs kernel {w.dtype}")
    n, c_in, h, wid = x.shape
    c_out, c_in_g, kh_, kw_ = w.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ShapeError(f"groups {groups} does not divide channels ({c_in} in, {c_out} out)")
    if c_in_g != c_in // groups or kh_ != kw_:
        raise ShapeError(f"kernel {w.shape} incompatible with {c_in} channels in {groups} groups")
    k = kh_
    h_out = conv_output_extent(h, k, stride, padding)
    w_out = conv_output_extent(wid, k, stride, padding)
    xp = _pad2d(x, padding)
    # First input channel seen by each output channel's group.
    base = (np.arange(c_out) // (c_out // groups)) * c_in_g
    y = np.zeros((n, c_out, h_out, w_out), dtype=x.dtype)
    for ci in range(c_in_g):
        src = xp[:, base + ci, :, :]  # (N, C_out, Hp, Wp) gather, one per term
        for kh in range(k):
            hs = slice(kh, kh + (h_out - 1) * stride + 1, stride)
            for kw in range(k):
                ws = slice(kw, kw + (w_out - 1) * stride + 1, stride)
                y += w[:, ci, kh, kw][None, :, None, None] * src[:, :, hs, ws]
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"bias {bias.shape} != ({c_out},)")
        y = y + bias[None, :, None, None]
    return y


def matmul(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Dense layer: contract the last axis of x against w (D_in, D_out).

    Leading axes of x are carried through, so (N, D_in) and (N, S, D_in)
    both work. Contraction index ascends; no BLAS.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul operands incompatible: {x.shape} vs {w.shape}")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch: input {x.dtype} vs weight {w.dtype}")
    d_in, d_out = w.shape
    y = np.zeros(x.shape[:-1] + (d_out,), dtype=x.dtype)
    for kk in range(d_in):
        y += x[..., kk : kk + 1] * w[kk]
    if bias is not None:
        if bias.shape != (d_out,):
            raise ShapeError(f"bias {bias.shape} != ({d_out},)")
        y = y + bias
    return y


def batch_matmul(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Independent matmul per leading-axis slice.

    x: (B, ..., D_in), w: (B, D_in, D_out), bias: (B, D_out) or None.
    Slice b of the result equals matmul(x[b], w[b], bias[b]) bit-exactly:
    the contraction walks the same index sequence.
    """
    if w.ndim != 3 or x.ndim < 2 or x.shape[0] != w.shape[0] or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"batch matmul operands incompatible: {x.shape} vs {w.shape}")
    if x.dtype != w.dtype:
        raise ShapeError(f"dtype mismatch: input {x.dtype} vs weight {w.dtype}")
    b, d_in, d_out = w.shape
    mid = (1,) * (x.ndim - 2)
    y = np.zeros(x.shape[:-1] + (d_out,), dtype=x.dtype)
    for kk in range(d_in):
        y += x[..., kk : kk + 1] * w[:, kk, :].reshape((b,) + mid + (d_out,))
    if bias is not None:
        if bias.shape != (b, d_out):
            raise ShapeError(f"bias {bias.shape} != ({b}, {d_out})")
        y = y + bias.reshape((b,) + mid + (d_out,))
    return y


def _channel_broadcast(v: np.ndarray, rank: int) -> np.ndarray:
    """Reshape a per-channel vector to broadcast along the channel axis."""
    ax = channel_axis(rank)
    shape = [1] * rank
    shape[ax] = v.shape[0]
    return v.reshape(shape)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, *, eps: float) -> np.ndarray:
    """Normalize over the channel axis with population statistics.

    One (mean, var) pair per sample position; y = gamma * (x - mean) /
    sqrt(var + eps) + beta. eps sits inside the square root.
    """
    ax = channel_axis(x.ndim)
    c = x.shape[ax]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape} and {beta.shape}")
    mean = np.sum(x, axis=ax, keepdims=True) / x.dtype.type(c)
    d = x - mean
    var = np.sum(d * d, axis=ax, keepdims=True) / x.dtype.type(c)
    normed = d / np.sqrt(var + x.dtype.type(eps))
    return _channel_broadcast(gamma, x.ndim) * normed + _channel_broadcast(beta, x.ndim)


def group_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, *,
               groups: int, eps: float) -> np.ndarray:
    """Normalize each group of channel_axis/groups channels independently.

    With groups=1 this reproduces layer_norm bit for bit: the per-group
    reduction runs over the same contiguous value sequence. gamma and beta
    span the full channel axis.
    """
    ax = channel_axis(x.ndim)
    c = x.shape[ax]
    if groups < 1 or c % groups != 0:
        raise ShapeError(f"groups {groups} does not divide channels {c}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},), got {gamma.shape} and {beta.shape}")
    cg = c // groups
    grouped_shape = x.shape[:ax] + (groups, cg) + x.shape[ax + 1 :]
    xg = x.reshape(grouped_shape)
    mean = np.sum(xg, axis=ax + 1, keepdims=True) / x.dtype.type(cg)
    d = xg - mean
    var = np.sum(d * d, axis=ax + 1, keepdims=True) / x.dtype.type(cg)
    normed = (d / np.sqrt(var + x.dtype.type(eps))).reshape(x.shape)
    return _channel_broadcast(gamma, x.ndim) * normed + _channel_broadcast(beta, x.ndim)


def batch_norm_inference(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                         running_mean: np.ndarray, running_var: np.ndarray, *,
                         eps: float) -> np.ndarray:
    """Inference-mode batch norm: a per-channel affine using running stats."""
    ax = channel_axis(x.ndim)
    c = x.shape[ax]
    for name, v in (("gamma", gamma), ("beta", beta),
                    ("running_mean", running_mean), ("running_var", running_var)):
        if v.shape != (c,):
            raise ShapeError(f"{name} must be ({c},), got {v.shape}")
    if np.any(running_var < 0):
        raise ShapeError("running_var has negative entries")
    denom = np.sqrt(running_var + x.dtype.type(eps))
    d = x - _channel_broadcast(running_mean, x.ndim)
    return _channel_broadcast(gamma, x.ndim) * (d / _channel_broadcast(denom, x.ndim)) \
        + _channel_broadcast(beta, x.ndim)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, x.dtype.type(0))


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def softmax(x: np.ndarray, *, axis: int) -> np.ndarray:
    """Numerically shifted softmax along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.ndim}")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape or x.dtype != y.dtype:
        raise ShapeError(f"add operands differ: {x.shape}/{x.dtype} vs {y.shape}/{y.dtype}")
    return x + y


def mul(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape or x.dtype != y.dtype:
        raise ShapeError(f"mul operands differ: {x.shape}/{x.dtype} vs {y.shape}/{y.dtype}")
    return x * y


def max_pool2d(x: np.ndarray, *, kernel: int, stride: int) -> np.ndarray:
    """Per-channel spatial max pooling. Overhanging windows are rejected."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d wants rank 4, got {x.shape}")
    n, c, h, w = x.shape
    h_out = pool_output_extent(h, kernel, stride)
    w_out = pool_output_extent(w, kernel, stride)
    y: np.ndarray | None = None
    for kh in range(kernel):
        hs = slice(kh, kh + (h_out - 1) * stride + 1, stride)
        for kw in range(kernel):
            ws = slice(kw, kw + (w_out - 1) * stride + 1, stride)
            win = x[:, :, hs, ws]
            y = win.copy() if y is None else np.maximum(y, win)
    assert y is not None
    return y


def mean_pool2d(x: np.ndarray, *, kernel: int, stride: int) -> np.ndarray:
    """Per-channel spatial mean pooling; window sum in row-major offset order."""
    if x.ndim != 4:
        raise ShapeError(f"mean_pool2d wants rank 4, got {x.shape}")
    n, c, h, w = x.shape
    h_out = pool_output_extent(h, kernel, stride)
    w_out = pool_output_extent(w, kernel, stride)
    y = np.zeros((n, c, h_out, w_out), dtype=x.dtype)
    for kh in range(kernel):
        hs = slice(kh, kh + (h_out - 1) * stride + 1, stride)
        for kw in range(kernel):
            ws = slice(kw, kw + (w_out - 1) * stride + 1, stride)
            y += x[:, :, hs, ws]
    return y / x.dtype.type(kernel * kernel)


def concat(tensors: list[np.ndarray], *, axis: int) -> np.ndarray:
    return np.concatenate(tensors, axis=axis)


def reshape(x: np.ndarray, *, dims: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(dims))


def transpose(x: np.ndarray, *, perm: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(x, perm))


def pack(tensors: list[np.ndarray], *, dim: MergeDim) -> np.ndarray:
    """Combine per-model tensors into one packed tensor, model-major.

    CHANNEL concatenates along the channel axis. BATCH stacks a new leading
    model axis for rank 2 and 3, and concatenates along the batch axis for
    rank 4 so spatial ops keep seeing rank-4 tensors.
    """
    first = tensors[0]
    for t in tensors[1:]:
        if t.shape != first.shape or t.dtype != first.dtype:
            raise ShapeError("pack operands must agree in shape and dtype")
    if dim is MergeDim.CHANNEL:
        return np.concatenate(tensors, axis=channel_axis(first.ndim))
    if dim is MergeDim.BATCH:
        if first.ndim == 4:
            return np.concatenate(tensors, axis=0)
        return np.stack(tensors, axis=0)
    raise ShapeError(f"cannot pack on {dim}")


def unpack(x: np.ndarray, count: int, *, dim: MergeDim, stacked: bool) -> list[np.ndarray]:
    """Split a packed tensor back into per-model tensors (pack's inverse).

    ``stacked`` says whether a BATCH packing added a leading model axis
    (rank 2/3 inputs) or concatenated along the batch axis (rank 4 inputs);
    the packed shape alone cannot distinguish the two.
    """
    if dim is MergeDim.CHANNEL:
        ax = channel_axis(x.ndim)
        if x.shape[ax] % count != 0:
            raise ShapeError(f"count {count} does not divide channels {x.shape[ax]}")
        return [np.ascontiguousarray(part) for part in np.split(x, count, axis=ax)]
    if dim is MergeDim.BATCH:
        if stacked:
            if x.shape[0] != count:
                raise ShapeError(f"model axis {x.shape[0]} != count {count}")
            return [np.ascontiguousarray(x[m]) for m in range(count)]
        if x.shape[0] % count != 0:
            raise ShapeError(f"count {count} does not divide batch {x.shape[0]}")
        return [np.ascontiguousarray(part) for part in np.split(x, count, axis=0)]
    raise ShapeError(f"cannot unpack on {dim}")


# --------------------------------------------------------------------------
# Execution
# --------------------------------------------------------------------------


@dataclass
class ExecTrace:
    """What happened during one execute() call.

    ``op_invocations`` counts every executed node. ``dispatch_count``
    excludes Pack/Unpack boundary nodes: those move model inputs and outputs
    across the packing boundary and stand in for host-side staging rather
    than device kernel launches, which is the quantity the dispatch metric
    is a proxy for.
    """

    node_outputs: dict[str, TensorValue] = field(default_factory=dict)
    node_times_ns: dict[str, int] = field(default_factory=dict)
    op_invocations: int = 0
    dispatch_count: int = 0
    total_ns: int = 0


def _node_weights(node, weights: WeightStore, x_dtype) -> list[np.ndarray]:
    arrays = []
    for name in node.weights:
        tv = weights[name]
        if tv.data.dtype != x_dtype:
            raise ShapeError(f"weight {name!r} dtype {tv.spec.dtype} does not match input")
        arrays.append(tv.data)
    return arrays


def _run_node(node, inputs: list[np.ndarray], weights: WeightStore) -> np.ndarray:
    kind, attrs = node.kind, node.attrs
    x = inputs[0]

    if kind is OpKind.CONV2D:
        w, *rest = _node_weights(node, weights, x.dtype)
        return conv2d(x, w, rest[0] if rest else None,
                      stride=attrs["stride"], padding=attrs["padding"])
    if kind is OpKind.GROUPED_CONV2D:
        w, *rest = _node_weights(node, weights, x.dtype)
        return grouped_conv2d(x, w, rest[0] if rest else None, groups=attrs["groups"],
                              stride=attrs["stride"], padding=attrs["padding"])
    if kind is OpKind.MATMUL:
        w, *rest = _node_weights(node, weights, x.dtype)
        return matmul(x, w, rest[0] if rest else None)
    if kind is OpKind.BATCH_MATMUL:
        w, *rest = _node_weights(node, weights, x.dtype)
        if w.shape[0] != attrs["batch_count"]:
            raise ShapeError(f"weight batch {w.shape[0]} != batch_count {attrs['batch_count']}")
        return batch_matmul(x, w, rest[0] if rest else None)
    if kind is OpKind.LAYER_NORM:
        gamma, beta = _node_weights(node, weights, x.dtype)
        return layer_norm(x, gamma, beta, eps=attrs["eps"])
    if kind is OpKind.GROUP_NORM:
        gamma, beta = _node_weights(node, weights, x.dtype)
        return group_norm(x, gamma, beta, groups=attrs["groups"], eps=attrs["eps"])
    if kind is OpKind.BATCH_NORM:
        gamma, beta, mean, var = _node_weights(node, weights, x.dtype)
        return batch_norm_inference(x, gamma, beta, mean, var, eps=attrs["eps"])
    if kind is OpKind.RELU:
        return relu(x)
    if kind is OpKind.TANH:
        return tanh(x)
    if kind is OpKind.SOFTMAX:
        return softmax(x, axis=attrs["axis"])
    if kind is OpKind.MAX_POOL2D:
        return max_pool2d(x, kernel=attrs["kernel"], stride=attrs["stride"])
    if kind is OpKind.MEAN_POOL2D:
        return mean_pool2d(x, kernel=attrs["kernel"], stride=attrs["stride"])
    if kind is OpKind.ADD:
        return add(x, inputs[1])
    if kind is OpKind.MUL:
        return mul(x, inputs[1])
    if kind is OpKind.CONCAT:
        return concat(inputs, axis=attrs["axis"])
    if kind is OpKind.RESHAPE:
        return reshape(x, dims=tuple(attrs["dims"]))
    if kind is OpKind.TRANSPOSE:
        return transpose(x, perm=tuple(attrs["perm"]))
    if kind is OpKind.PACK:
        return pack(inputs, dim=MergeDim(attrs["dim"]))
    if kind is OpKind.UNPACK:
        parts = unpack(x, attrs["count"], dim=MergeDim(attrs["dim"]), stacked=attrs["stacked"])
        return parts[attrs["index"]]
    raise ShapeError(f"no kernel for kind {kind.value}")


_BOUNDARY_KINDS = (OpKind.PACK, OpKind.UNPACK)


def execute(graph: Graph, weights: WeightStore,
            inputs: dict[str, TensorValue]) -> tuple[list[TensorValue], ExecTrace]:
    """Run a graph on concrete inputs.

    Nodes run in deterministic topological order; results are bit-identical
    across runs. Returns the outputs in graph_outputs order plus a trace.
    Missing inputs or weights and kernel failures raise ExecutionError
    naming the node.
    """
    for name, spec in graph.graph_inputs.items():
        tv = inputs.get(name)
        if tv is None:
            raise ExecutionError(name, KeyError(f"graph input {name!r} not provided"))
        if tv.spec.dims != spec.dims or tv.spec.dtype != spec.dtype:
            raise ExecutionError(name, ShapeError(
                f"input {name!r}: got {tv.spec.dims} ({tv.spec.dtype}), "
                f"graph wants {spec.dims} ({spec.dtype})"))

    trace = ExecTrace()
    values: dict[str, np.ndarray] = {name: inputs[name].data for name in graph.graph_inputs}
    start = time.perf_counter_ns()

    for node in topological_order(graph):
        try:
            in_arrays = []
            for ref in node.inputs:
                producer, _ = parse_ref(ref)
                if producer not in values:
                    raise KeyError(f"input {ref!r} has no value")
                in_arrays.append(values[producer])
            t0 = time.perf_counter_ns()
            out = _run_node(node, in_arrays, weights)
            elapsed = time.perf_counter_ns() - t0
        except Exception as exc:
            raise ExecutionError(node.id, exc) from exc
        if out.shape != node.output_spec.dims:
            raise ExecutionError(node.id, ShapeError(
                f"kernel produced {out.shape}, node declares {node.output_spec.dims}"))
        out = np.ascontiguousarray(out)
        values[node.id] = out
        trace.node_outputs[node.id] = TensorValue(node.output_spec, out)
        trace.node_times_ns[node.id] = elapsed
        trace.op_invocations += 1
        if node.kind not in _BOUNDARY_KINDS:
            trace.dispatch_count += 1

    trace.total_ns = time.perf_counter_ns() - start

    outputs = []
    for ref in graph.graph_outputs:
        producer, _ = parse_ref(ref)
        if producer not in values:
            raise ExecutionError(producer, KeyError(f"output {ref!r} has no value"))
        if producer in graph.graph_inputs:
            outputs.append(inputs[producer])
        else:
            outputs.append(trace.node_outputs[producer])
    return outputs, trace
