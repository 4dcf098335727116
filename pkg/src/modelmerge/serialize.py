"""On-disk formats: graph JSON, tensor blobs, weight-store directories.

Graph files are a single JSON object with exactly the keys ``nodes``,
``graph_inputs``, ``graph_outputs`` and ``metadata``; anything else is
rejected so typos fail loudly. Tensors use a small binary format (magic
``TNSR``) that is byte-identical across platforms: all integers and floats
are little-endian and payloads are row-major.

A weight store on disk is a directory holding one ``manifest.json`` that
maps tensor names to blob files sitting next to it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import GraphFormatError, UnsupportedOpError, ValidationError
from .ir import Graph, Layout, OpKind, OpNode, TensorSpec, validate
from .engine import NUMPY_DTYPES, TensorValue, WeightStore

_MAGIC = b"TNSR"
_VERSION = 1
_DTYPE_CODES = {"f32": 0, "f64": 1}
_CODE_DTYPES = {0: ("f32", "<f4"), 1: ("f64", "<f8")}

_GRAPH_KEYS = {"nodes", "graph_inputs", "graph_outputs", "metadata"}
_NODE_KEYS = {"id", "kind", "attrs", "inputs", "weights", "output"}


# --------------------------------------------------------------------------
# Graph JSON
# --------------------------------------------------------------------------


def _spec_to_json(spec: TensorSpec) -> dict:
    return {"dtype": spec.dtype, "dims": list(spec.dims), "layout": spec.layout.value}


def _spec_from_json(obj, where: str) -> TensorSpec:
    if not isinstance(obj, dict):
        raise GraphFormatError(f"{where}: tensor spec must be an object")
    try:
        layout = Layout(obj.get("layout", "unlaid"))
        return TensorSpec(obj["dtype"], tuple(obj["dims"]), layout)
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"{where}: bad tensor spec: {exc}") from exc


def serialize(graph: Graph) -> bytes:
    """Render a validated graph as canonical JSON (UTF-8 bytes)."""
    diags = validate(graph)
    if diags:
        raise ValidationError(diags)
    doc = {
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "attrs": n.attrs,
                "inputs": list(n.inputs),
                "weights": list(n.weights),
                "output": _spec_to_json(n.output_spec),
            }
            for n in graph.nodes
        ],
        "graph_inputs": [
            {"name": name, **_spec_to_json(spec)}
            for name, spec in graph.graph_inputs.items()
        ],
        "graph_outputs": list(graph.graph_outputs),
        "metadata": graph.metadata,
    }
    return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


def deserialize(data: bytes | str) -> Graph:
    """Parse graph JSON produced by serialize().

    Raises GraphFormatError on malformed input (with a byte offset for JSON
    syntax problems) and UnsupportedOpError for unknown op kinds.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="replace")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise GraphFormatError("top level must be a JSON object")
    unknown = set(doc) - _GRAPH_KEYS
    if unknown:
        raise GraphFormatError(f"unknown top-level keys: {sorted(unknown)}")
    missing = _GRAPH_KEYS - set(doc)
    if missing:
        raise GraphFormatError(f"missing top-level keys: {sorted(missing)}")

    nodes = []
    if not isinstance(doc["nodes"], list):
        raise GraphFormatError("'nodes' must be a list")
    for i, obj in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        if not isinstance(obj, dict):
            raise GraphFormatError(f"{where}: must be an object")
        unknown = set(obj) - _NODE_KEYS
        if unknown:
            raise GraphFormatError(f"{where}: unknown keys: {sorted(unknown)}")
        try:
            kind = OpKind(obj["kind"])
        except ValueError:
            raise UnsupportedOpError(f"{where}: unknown op kind {obj.get('kind')!r}") from None
        except KeyError:
            raise GraphFormatError(f"{where}: missing 'kind'") from None
        attrs = obj.get("attrs", {})
        if not isinstance(attrs, dict):
            raise GraphFormatError(f"{where}: 'attrs' must be an object")
        try:
            nodes.append(OpNode(
                id=obj["id"],
                kind=kind,
                inputs=tuple(obj.get("inputs", ())),
                output_spec=_spec_from_json(obj.get("output"), where),
                weights=tuple(obj.get("weights", ())),
                attrs=attrs,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphFormatError(f"{where}: {exc}") from exc

    graph_inputs: dict[str, TensorSpec] = {}
    if not isinstance(doc["graph_inputs"], list):
        raise GraphFormatError("'graph_inputs' must be a list")
    for i, obj in enumerate(doc["graph_inputs"]):
        where = f"graph_inputs[{i}]"
        if not isinstance(obj, dict) or "name" not in obj:
            raise GraphFormatError(f"{where}: must be an object with a 'name'")
        if obj["name"] in graph_inputs:
            raise GraphFormatError(f"{where}: duplicate input name {obj['name']!r}")
        graph_inputs[obj["name"]] = _spec_from_json(
            {k: v for k, v in obj.items() if k != "name"}, where)

    outputs = doc["graph_outputs"]
    if not isinstance(outputs, list) or not all(isinstance(r, str) for r in outputs):
        raise GraphFormatError("'graph_outputs' must be a list of edge references")
    metadata = doc["metadata"]
    if not isinstance(metadata, dict):
        raise GraphFormatError("'metadata' must be an object")

    return Graph(tuple(nodes), graph_inputs, tuple(outputs), metadata)


def save_graph(graph: Graph, path: str | Path) -> None:
    Path(path).write_bytes(serialize(graph))


def load_graph(path: str | Path) -> Graph:
    # unreadable paths surface as OSError; only malformed content is wrapped
    return deserialize(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Tensor blobs
# --------------------------------------------------------------------------


def tensor_to_bytes(value: TensorValue) -> bytes:
    """Encode one tensor: TNSR magic, u16 version, u8 dtype, u8 rank,
    u64 dims, then the row-major little-endian payload."""
    spec = value.spec
    header = _MAGIC + struct.pack("<HBB", _VERSION, _DTYPE_CODES[spec.dtype], spec.rank)
    dims = struct.pack(f"<{spec.rank}Q", *spec.dims)
    payload = np.ascontiguousarray(value.data, dtype=_CODE_DTYPES[_DTYPE_CODES[spec.dtype]][1]).tobytes()
    return header + dims + payload


def tensor_from_bytes(data: bytes) -> TensorValue:
    """Decode a tensor blob; malformed input raises GraphFormatError."""
    if len(data) < 8:
        raise GraphFormatError("blob shorter than header", offset=len(data))
    if data[:4] != _MAGIC:
        raise GraphFormatError(f"bad magic {data[:4]!r}", offset=0)
    version, dtype_code, rank = struct.unpack("<HBB", data[4:8])
    if version != _VERSION:
        raise GraphFormatError(f"unsupported blob version {version}", offset=4)
    if dtype_code not in _CODE_DTYPES:
        raise GraphFormatError(f"unknown dtype code {dtype_code}", offset=6)
    if rank < 1:
        raise GraphFormatError("rank must be >= 1", offset=7)
    dims_end = 8 + 8 * rank
    if len(data) < dims_end:
        raise GraphFormatError("blob truncated inside dims", offset=len(data))
    dims = struct.unpack(f"<{rank}Q", data[8:dims_end])
    dtype, np_dtype = _CODE_DTYPES[dtype_code]
    count = 1
    for d in dims:
        if d < 1:
            raise GraphFormatError(f"bad dim {d}", offset=8)
        count *= d
    expected = dims_end + count * np.dtype(np_dtype).itemsize
    if len(data) != expected:
        raise GraphFormatError(
            f"payload length {len(data) - dims_end} does not match dims {dims}",
            offset=dims_end)
    arr = np.frombuffer(data, dtype=np_dtype, offset=dims_end).reshape(dims)
    return TensorValue(TensorSpec(dtype, dims), arr.astype(NUMPY_DTYPES[dtype], copy=True))


# --------------------------------------------------------------------------
# Weight store directories
# --------------------------------------------------------------------------


def _blob_filename(name: str) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "._-" else "_" for ch in name)
    return f"{safe}.tnsr"


def save_weight_store(store: WeightStore, directory: str | Path) -> None:
    """Write a store as manifest.json plus one blob per tensor."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    used: set[str] = set()
    for name in sorted(store.tensors):
        fname = _blob_filename(name)
        while fname in used:  # sanitization collisions get a numeric suffix
            fname = f"{len(used)}_{fname}"
        used.add(fname)
        files[name] = fname
        (directory / fname).write_bytes(tensor_to_bytes(store.tensors[name]))
    manifest = {"schema": 1, "model_index": store.model_index, "tensors": files}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_weight_store(path: str | Path) -> WeightStore:
    """Read a store from a directory (or a manifest.json path)."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    try:
        doc = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{manifest_path}: not valid JSON: {exc.msg}", offset=exc.pos) from exc
    if not isinstance(doc, dict) or doc.get("schema") != 1:
        raise GraphFormatError(f"{manifest_path}: unsupported manifest schema")
    tensors: dict[str, TensorValue] = {}
    base = manifest_path.parent
    for name, fname in doc.get("tensors", {}).items():
        try:
            blob = (base / fname).read_bytes()
        except OSError as exc:
            raise GraphFormatError(f"cannot read blob for {name!r}: {exc}") from exc
        tensors[name] = tensor_from_bytes(blob)
    return WeightStore(tensors, model_index=int(doc.get("model_index", 0)))
