"""Command-line interface.

Subcommands: ``zoo`` (generate toy models), ``merge`` (fuse M weight sets
into one graph), ``verify`` (prove slice-wise equivalence), ``bench``
(compare serving strategies), ``report`` (render bench JSONs to CSV and
PNG), and ``rules`` (dump the op substitution catalog).

Exit codes: 0 success; 1 domain failure (verification mismatch, invalid
or corrupted artifacts, merge errors); 2 usage or configuration error;
3 unexpected internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .bench import STRATEGIES, BenchReport, run_bench
from .engine import TensorValue, execute
from .errors import ModelMergeError
from .merger import MergedGraph, explain, merge, merge_backbone
from .plotting import render_report
from .rules import rules_as_json
from .serialize import load_graph, load_weight_store, save_graph, save_weight_store
from .zoo import ZOO_NAMES, build_graph, build_weights, model_inputs


def _cmd_zoo(args: argparse.Namespace) -> int:
    graph = build_graph(args.name, batch=args.batch, dtype=args.dtype)
    save_graph(graph, args.out)
    print(f"wrote {args.out} ({len(graph.nodes)} nodes, {graph.edge_count()} edges)")
    base = Path(args.weights_out)
    for m in range(args.num_models):
        store = build_weights(args.name, dtype=args.dtype, seed=args.seed, model=m)
        target = base / f"model{m}"
        save_weight_store(store, target)
        print(f"wrote {target} ({len(store.tensors)} tensors, {store.total_bytes()} bytes)")
    return 0


def _load_heads(heads_dir: Path, count: int):
    heads = []
    for m in range(count):
        graph_path = heads_dir / f"head{m}.json"
        weights_path = heads_dir / f"head{m}.weights"
        if not graph_path.exists():
            raise FileNotFoundError(f"missing head graph {graph_path}")
        heads.append((load_graph(graph_path), load_weight_store(weights_path)))
    return heads


def _cmd_merge(args: argparse.Namespace) -> int:
    graph = load_graph(args.model)
    stores = [load_weight_store(p) for p in args.weights]
    if args.backbone:
        ids = {
            line.strip()
            for line in Path(args.backbone).read_text().splitlines()
            if line.strip() and not line.lstrip().startswith("#")
        }
        if not args.heads:
            raise ValueError("--backbone requires --heads")
        heads = _load_heads(Path(args.heads), len(stores))
        merged, merged_store = merge_backbone(graph, ids, stores, heads)
    else:
        merged, merged_store = merge(graph, stores)
    save_graph(merged.graph, args.out)
    save_weight_store(merged_store, args.merged_weights)
    print(explain(merged))
    print(f"merge latency: {merged.stats.elapsed_ns / 1e6:.2f} ms")
    print(f"wrote {args.out} and {args.merged_weights}")
    return 0


def _max_errors(ref: TensorValue, got: TensorValue) -> tuple[float, float]:
    a = ref.data.astype(np.float64)
    b = got.data.astype(np.float64)
    diff = np.abs(a - b)
    # symmetric denominator keeps the ratio bounded even when ref is zero
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), np.finfo(np.float64).tiny)
    return float(diff.max()), float((diff / denom).max())


def _cmd_verify(args: argparse.Namespace) -> int:
    graph = load_graph(args.model)
    merged = MergedGraph.from_graph(load_graph(args.merged))
    merged_store = load_weight_store(args.merged_weights)
    stores = [load_weight_store(p) for p in args.weights]
    if len(stores) != merged.num_models:
        raise ValueError(
            f"merged graph packs {merged.num_models} models but "
            f"{len(stores)} weight stores were given")
    if any(entry.get("dim") is None for entry in merged.output_plan):
        raise ValueError("verify supports fully merged graphs, not backbone+head artifacts")
    if args.batch is not None:
        for name, spec in graph.graph_inputs.items():
            if spec.dims[0] != args.batch:
                raise ValueError(
                    f"graph input {name!r} has batch {spec.dims[0]}, expected {args.batch}")

    inputs = [model_inputs(graph, seed=args.seed, model=m)
              for m in range(merged.num_models)]
    references = [execute(graph, stores[m], inputs[m])[0]
                  for m in range(merged.num_models)]
    outputs, _ = execute(merged.graph, merged_store, merged.bind_inputs(inputs))
    slices = merged.slice_outputs(outputs)

    max_abs = max_rel = 0.0
    first_mismatch = None
    for m in range(merged.num_models):
        for k, (ref, got) in enumerate(zip(references[m], slices[m])):
            if ref.bit_equal(got):
                continue
            abs_err, rel_err = _max_errors(ref, got)
            max_abs = max(max_abs, abs_err)
            max_rel = max(max_rel, rel_err)
            if first_mismatch is None:
                idx = int(np.flatnonzero(ref.data != got.data)[0])
                first_mismatch = (m, k, idx)
    print(f"max abs error: {max_abs:.17g}")
    print(f"max rel error: {max_rel:.17g}")
    if first_mismatch is None:
        print(f"OK: all {merged.num_models} models bit-exact")
        return 0
    if args.tol is not None and max_abs <= args.tol:
        print(f"OK: within tolerance {args.tol:g} (not bit-exact)")
        return 0
    m, k, idx = first_mismatch
    ref = references[m][k].data.reshape(-1)[idx]
    got = slices[m][k].data.reshape(-1)[idx]
    print(f"MISMATCH: model {m}, output {k}, flat index {idx}: "
          f"merged={got!r} reference={ref!r}", file=sys.stderr)
    return 1


def _resolve_zoo(model_arg: str, batch: int | None, dtype: str | None):
    """Accept a zoo name or a path to a zoo-generated graph file."""
    path = Path(model_arg)
    if path.exists():
        meta = load_graph(path).metadata
        name = meta.get("zoo")
        if name not in ZOO_NAMES:
            raise ValueError(
                f"{model_arg} does not carry zoo metadata; pass one of {ZOO_NAMES}")
        return name, batch or meta.get("batch", 1), dtype or meta.get("dtype", "f32")
    if model_arg not in ZOO_NAMES:
        raise ValueError(f"unknown model {model_arg!r}: not a file, not one of {ZOO_NAMES}")
    return model_arg, batch or 1, dtype or "f32"


def _cmd_bench(args: argparse.Namespace) -> int:
    name, batch, dtype = _resolve_zoo(args.model, args.batch, args.dtype)
    report = run_bench(name, strategy=args.strategy, num_models=args.num_models,
                       batch=batch, dtype=dtype, seed=args.seed, repeats=args.repeats)
    line = (f"{report.strategy} {name} M={report.num_models} B={report.batch} "
            f"{report.dtype}: mean {report.mean_ns / 1e6:.3f} ms "
            f"± {report.std_ns / 1e6:.3f} (repeats={report.repeats}), "
            f"dispatches/round={report.dispatches_per_round}")
    if report.merge_ns is not None:
        line += f", merge {report.merge_ns / 1e6:.2f} ms, glue {report.glue_count}"
    print(line)
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_json(), indent=2) + "\n")
        print(f"wrote {args.report}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    reports = []
    for p in args.inputs:
        with open(p) as fh:
            reports.append(BenchReport.from_json(json.load(fh)))
    csv_path, png_path = render_report(reports, args.out_dir, args.basename)
    print(f"wrote {csv_path}")
    print(f"wrote {png_path}")
    return 0


def _cmd_rules(args: argparse.Namespace) -> int:
    print(json.dumps(rules_as_json(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modelmerge",
        description="Fuse structurally identical models into one graph and prove "
                    "the fused graph reproduces each model bit for bit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("zoo", help="generate a toy model and seeded weight stores")
    p.add_argument("--name", required=True, choices=ZOO_NAMES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--num-models", type=int, default=1)
    p.add_argument("--out", required=True, help="graph JSON path")
    p.add_argument("--weights-out", required=True, help="directory for per-model stores")
    p.set_defaults(func=_cmd_zoo)

    p = sub.add_parser("merge", help="merge M weight stores over one shared graph")
    p.add_argument("--model", required=True, help="graph JSON path")
    p.add_argument("--weights", required=True, nargs="+",
                   help="M weight store directories, model order")
    p.add_argument("--out", required=True, help="merged graph JSON path")
    p.add_argument("--merged-weights", required=True, help="merged store directory")
    p.add_argument("--backbone", help="file of node ids to merge (one per line)")
    p.add_argument("--heads", help="directory with head<m>.json + head<m>.weights")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("verify", help="compare merged execution against each model")
    p.add_argument("--model", required=True)
    p.add_argument("--weights", required=True, nargs="+")
    p.add_argument("--merged", required=True, help="merged graph JSON path")
    p.add_argument("--merged-weights", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=None,
                   help="assert the graph's batch size matches")
    p.add_argument("--tol", type=float, default=None,
                   help="maximum allowed absolute error (default: bit-exact)")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("bench", help="time sequential, threaded, and merged serving")
    p.add_argument("--model", required=True, help="zoo name or zoo graph JSON path")
    p.add_argument("--num-models", type=int, required=True)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--dtype", choices=("f32", "f64"), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--report", help="write the BenchReport JSON here")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("report", help="render bench JSONs to CSV and PNG")
    p.add_argument("--inputs", required=True, nargs="+", help="BenchReport JSON files")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--basename", default="bench")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("rules", help="inspect the op substitution catalog")
    p.add_argument("action", choices=("dump",))
    p.set_defaults(func=_cmd_rules)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ModelMergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # last resort: never a silent traceback
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
