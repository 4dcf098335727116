"""Fuse structurally identical models into one computation graph.

Serving M copies of the same architecture with different weights normally
costs M executions. Because each weight tensor only ever meets its own
model's activations, the M graphs can be fused op by op into one wider
graph (convolutions become grouped convolutions, dense layers become
batched matmuls, layer norms become group norms) whose single execution
reproduces every model's outputs bit for bit.

Public surface:

* :mod:`modelmerge.ir`: graph IR, validation, topological order.
* :mod:`modelmerge.engine`: reference kernels with fixed accumulation
  order, the executor, and traces.
* :mod:`modelmerge.rules`: the op substitution catalog.
* :mod:`modelmerge.merger`: :func:`merge`, :func:`merge_backbone`,
  :func:`explain`.
* :mod:`modelmerge.serialize`: graph JSON and tensor blob formats.
* :mod:`modelmerge.zoo`: deterministic toy models.
* :mod:`modelmerge.bench` / :mod:`modelmerge.plotting`: benchmark
  harness and report rendering.
"""

from .errors import (
    ArchitectureMismatchError,
    ExecutionError,
    GraphFormatError,
    MergeConstraintError,
    ModelMergeError,
    ShapeError,
    UnsupportedOpError,
    ValidationError,
)
from .ir import (
    Graph,
    Layout,
    MergeDim,
    OpKind,
    OpNode,
    TensorSpec,
    topological_order,
    validate,
)
from .engine import ExecTrace, TensorValue, WeightStore, execute
from .rules import MergeRule, RULES, rule_for, rules_as_json
from .merger import MergedGraph, MergeStats, ReshapeGlue, explain, merge, merge_backbone
from .serialize import (
    deserialize,
    load_graph,
    load_weight_store,
    save_graph,
    save_weight_store,
    serialize,
    tensor_from_bytes,
    tensor_to_bytes,
)
from .zoo import ZOO_NAMES, build_graph, build_weights, build_zoo, model_inputs
from .bench import BenchReport, STRATEGIES, run_bench

__version__ = "0.1.0"

__all__ = [
    "ArchitectureMismatchError",
    "BenchReport",
    "ExecTrace",
    "ExecutionError",
    "Graph",
    "GraphFormatError",
    "Layout",
    "MergeConstraintError",
    "MergeDim",
    "MergeRule",
    "MergeStats",
    "MergedGraph",
    "ModelMergeError",
    "OpKind",
    "OpNode",
    "RULES",
    "ReshapeGlue",
    "STRATEGIES",
    "ShapeError",
    "TensorSpec",
    "TensorValue",
    "UnsupportedOpError",
    "ValidationError",
    "WeightStore",
    "ZOO_NAMES",
    "build_graph",
    "build_weights",
    "build_zoo",
    "deserialize",
    "execute",
    "explain",
    "load_graph",
    "load_weight_store",
    "merge",
    "merge_backbone",
    "model_inputs",
    "rule_for",
    "rules_as_json",
    "run_bench",
    "save_graph",
    "save_weight_store",
    "serialize",
    "tensor_from_bytes",
    "tensor_to_bytes",
    "topological_order",
    "validate",
    "__version__",
]
