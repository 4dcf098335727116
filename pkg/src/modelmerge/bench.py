"""Desk-scale benchmark harness for the three serving strategies.

One *round* serves every model once on its own inputs:

* ``sequential``: M executions back to back in one thread.
* ``threaded``: M executions fanned out on a thread pool per round.
* ``merged``: a single execution of the merged graph.

All strategies run the same reference kernels on the same tensors, so
arithmetic cost is equal by construction; what changes across strategies
is dispatch count and scheduling. Wall time is reported but only the
dispatch counts are meaningful as a structural metric at this scale.
Memory is a tracemalloc peak over one untimed round, for relative
comparison between strategies only.
"""

from __future__ import annotations

import os
import statistics
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable

from .engine import TensorValue, WeightStore, execute
from .ir import Graph
from .merger import MergedGraph, merge
from .zoo import build_zoo, model_inputs

STRATEGIES = ("sequential", "threaded", "merged")


@dataclass
class BenchReport:
    """Result of one benchmark configuration."""

    strategy: str
    model: str
    num_models: int
    batch: int
    dtype: str
    seed: int
    repeats: int
    run_ns: list[int] = field(default_factory=list)
    dispatches_per_round: int = 0
    ops_per_round: int = 0
    peak_bytes: int = 0
    merge_ns: int | None = None
    glue_count: int | None = None

    @property
    def mean_ns(self) -> float:
        return statistics.fmean(self.run_ns)

    @property
    def std_ns(self) -> float:
        return statistics.pstdev(self.run_ns)

    def to_json(self) -> dict[str, Any]:
        return {
            "schema": 1,
            "strategy": self.strategy,
            "model": self.model,
            "num_models": self.num_models,
            "batch": self.batch,
            "dtype": self.dtype,
            "seed": self.seed,
            "repeats": self.repeats,
            "run_ns": list(self.run_ns),
            "mean_ns": self.mean_ns,
            "std_ns": self.std_ns,
            "min_ns": min(self.run_ns),
            "max_ns": max(self.run_ns),
            "dispatches_per_round": self.dispatches_per_round,
            "ops_per_round": self.ops_per_round,
            "peak_bytes": self.peak_bytes,
            "merge_ns": self.merge_ns,
            "glue_count": self.glue_count,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "BenchReport":
        return cls(
            strategy=data["strategy"],
            model=data["model"],
            num_models=data["num_models"],
            batch=data["batch"],
            dtype=data.get("dtype", "f32"),
            seed=data.get("seed", 0),
            repeats=data["repeats"],
            run_ns=list(data["run_ns"]),
            dispatches_per_round=data["dispatches_per_round"],
            ops_per_round=data["ops_per_round"],
            peak_bytes=data.get("peak_bytes", 0),
            merge_ns=data.get("merge_ns"),
            glue_count=data.get("glue_count"),
        )


def _sequential_round(graph: Graph, stores: list[WeightStore],
                      inputs: list[dict[str, TensorValue]]) -> tuple[int, int]:
    dispatches = ops = 0
    for store, model_in in zip(stores, inputs):
        _, trace = execute(graph, store, model_in)
        dispatches += trace.dispatch_count
        ops += trace.op_invocations
    return dispatches, ops


def _threaded_round(pool: ThreadPoolExecutor, graph: Graph, stores: list[WeightStore],
                    inputs: list[dict[str, TensorValue]]) -> tuple[int, int]:
    futures = [pool.submit(execute, graph, store, model_in)
               for store, model_in in zip(stores, inputs)]
    dispatches = ops = 0
    for fut in futures:
        _, trace = fut.result()
        dispatches += trace.dispatch_count
        ops += trace.op_invocations
    return dispatches, ops


def _merged_round(merged: MergedGraph, store: WeightStore,
                  bound: dict[str, TensorValue]) -> tuple[int, int]:
    _, trace = execute(merged.graph, store, bound)
    return trace.dispatch_count, trace.op_invocations


def run_bench(
    model: str,
    *,
    strategy: str,
    num_models: int,
    batch: int = 1,
    dtype: str = "f32",
    seed: int = 0,
    repeats: int = 10,
) -> BenchReport:
    """Benchmark one (model, strategy, M, B) configuration.

    Runs one untimed warmup round (which also fixes the dispatch counts),
    ``repeats`` timed rounds, then one tracemalloc round for the memory
    estimate, kept out of the timings because tracing slows allocation.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")

    graph, stores = build_zoo(model, batch=batch, dtype=dtype, seed=seed,
                              num_models=num_models)
    inputs = [model_inputs(graph, seed=seed, model=m) for m in range(num_models)]

    report = BenchReport(strategy=strategy, model=model, num_models=num_models,
                         batch=batch, dtype=dtype, seed=seed, repeats=repeats)

    pool: ThreadPoolExecutor | None = None
    try:
        if strategy == "sequential":
            round_fn: Callable[[], tuple[int, int]] = (
                lambda: _sequential_round(graph, stores, inputs))
        elif strategy == "threaded":
            pool = ThreadPoolExecutor(max_workers=min(num_models, os.cpu_count() or 1))
            round_fn = lambda: _threaded_round(pool, graph, stores, inputs)
        else:
            merged, merged_store = merge(graph, stores)
            bound = merged.bind_inputs(inputs)
            report.merge_ns = merged.stats.elapsed_ns
            report.glue_count = merged.glue_count
            round_fn = lambda: _merged_round(merged, merged_store, bound)

        report.dispatches_per_round, report.ops_per_round = round_fn()  # warmup
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            round_fn()
            report.run_ns.append(time.perf_counter_ns() - t0)

        tracemalloc.start()
        round_fn()
        _, report.peak_bytes = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    return report
