"""Model files (GMF) and IDX datasets.

A GMF model is a UTF-8 JSON manifest plus one raw little-endian tensor
file per weight or bias, referenced by a path relative to the manifest::

    {"format": "GMF", "version": 1, "input": "x", "output": "y",
     "nodes": [{"id": "fc0", "kind": "linear", "inputs": ["x"], "shape": [8],
                "attrs": {}, "tensors": {"weight": "fc0.weight", "bias": "fc0.bias"}}, ...],
     "tensors": {"fc0.weight": {"path": "model.fc0.weight.bin", "dtype": "float32",
                                "count": 16, "shape": [8, 2], "sha256": "..."}, ...}}

All tensors of one model share a dtype.
"""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .graph import KINDS, Graph, GraphError, Node, validate
from .train import Dataset

FORMAT = "GMF"
VERSION = 1
DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}
_TUPLE_ATTRS = ("shape", "kernel", "stride", "padding", "out_shape")


class ModelFormatError(ValueError):
    pass


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    return v


def save_model(graph: Graph, path, dtype: str | None = None) -> Path:
    """Write ``graph`` as a manifest at ``path`` plus tensor files beside it."""
    dtype = dtype or graph.dtype
    if dtype not in DTYPES:
        raise ModelFormatError(f"unsupported dtype {dtype!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.name[: -len(path.suffix)] if path.suffix else path.name
    shapes = graph.shapes
    nodes, tensors = [], {}
    for nid in graph.order:
        n = graph.nodes[nid]
        entry = {
            "id": nid,
            "kind": n.kind,
            "inputs": list(n.inputs),
            "shape": list(shapes[nid]),
            "attrs": {k: _jsonable(v) for k, v in n.attrs.items()},
        }
        refs = {}
        for name in ("weight", "bias"):
            t = getattr(n, name)
            if t is None:
                continue
            key = f"{nid}.{name}"
            data = np.ascontiguousarray(t, dtype=DTYPES[dtype]).tobytes()
            fname = f"{stem}.{len(tensors)}.bin"
            (path.parent / fname).write_bytes(data)
            tensors[key] = {
                "path": fname,
                "dtype": dtype,
                "count": int(t.size),
                "shape": list(t.shape),
                "sha256": hashlib.sha256(data).hexdigest(),
            }
            refs[name] = key
        if refs:
            entry["tensors"] = refs
        nodes.append(entry)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "input": graph.input_id,
        "output": graph.output_id,
        "nodes": nodes,
        "tensors": tensors,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _read_tensor(base: Path, key: str, desc: dict) -> np.ndarray:
    try:
        dt = DTYPES[desc["dtype"]]
    except KeyError:
        raise ModelFormatError(f"tensor {key!r}: unsupported dtype {desc.get('dtype')!r}") from None
    f = base / desc["path"]
    if not f.exists():
        raise ModelFormatError(f"tensor {key!r}: missing file {desc['path']}")
    data = f.read_bytes()
    count = int(desc["count"])
    if len(data) != count * dt.itemsize:
        raise ModelFormatError(
            f"tensor {key!r}: {desc['path']} holds {len(data)} bytes, expected {count * dt.itemsize}"
        )
    if "sha256" in desc and hashlib.sha256(data).hexdigest() != desc["sha256"]:
        raise ModelFormatError(f"tensor {key!r}: checksum mismatch")
    shape = tuple(desc.get("shape", (count,)))
    if int(np.prod(shape)) != count:
        raise ModelFormatError(f"tensor {key!r}: shape {shape} does not hold {count} elements")
    return np.frombuffer(data, dtype=dt).reshape(shape).astype(np.float64)


def load_model(path) -> Graph:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not a JSON manifest ({e})") from None
    if manifest.get("format") != FORMAT:
        raise ModelFormatError(f"{path}: not a GMF manifest")
    if manifest.get("version") != VERSION:
        raise ModelFormatError(f"{path}: unsupported GMF version {manifest.get('version')!r}")
    descs = manifest.get("tensors", {})
    dtypes = {d.get("dtype") for d in descs.values()}
    if len(dtypes) > 1:
        raise ModelFormatError(f"{path}: mixed tensor precision {sorted(map(str, dtypes))}")
    nodes = []
    for entry in manifest["nodes"]:
        kind = entry.get("kind")
        if kind not in KINDS:
            raise ModelFormatError(f"{path}: unknown node kind {kind!r} (node {entry.get('id')!r})")
        attrs = {}
        for k, v in entry.get("attrs", {}).items():
            attrs[k] = tuple(v) if k in _TUPLE_ATTRS and isinstance(v, list) else v
        kw = {}
        for name, key in entry.get("tensors", {}).items():
            if key not in descs:
                raise ModelFormatError(f"{path}: node {entry['id']!r} references unknown tensor {key!r}")
            kw[name] = _read_tensor(path.parent, key, descs[key])
        nodes.append(Node(entry["id"], kind, tuple(entry.get("inputs", ())), attrs=attrs, **kw))
    graph = Graph({n.id: n for n in nodes}, manifest["input"], manifest["output"], dtype=dtypes.pop() if dtypes else "float64")
    report = validate(graph)
    if report:
        raise ModelFormatError(f"{path}: invalid graph: " + "; ".join(map(str, report)))
    for entry in manifest["nodes"]:
        declared = entry.get("shape")
        if declared is not None and tuple(declared) != graph.shapes[entry["id"]]:
            raise ModelFormatError(
                f"{path}: node {entry['id']!r} declares shape {tuple(declared)}, inferred {graph.shapes[entry['id']]}"
            )
    return graph


# ---------------------------------------------------------------------------
# IDX

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _open(path):
    path = Path(path)
    with open(path, "rb") as f:
        gz = f.read(2) == b"\x1f\x8b"
    return gzip.open(path, "rb") if gz else open(path, "rb")


def read_idx(path, expect: int | None = None) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise ModelFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS) or (expect is not None and magic != expect):
        raise ModelFormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    payload = raw[header:]
    if len(payload) != int(np.prod(dims)):
        raise ModelFormatError(f"{path}: payload has {len(payload)} bytes, dims {dims} need {int(np.prod(dims))}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> Path:
    array = np.asarray(array)
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer supports label vectors and (N, rows, cols) image stacks")
    magic = IDX_LABELS if array.ndim == 1 else IDX_IMAGES
    data = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.astype(np.uint8).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as f:
            f.write(data)
    else:
        path.write_bytes(data)
    return path


def load_idx(images_path, labels_path, flatten: bool = True, split: str = "train") -> Dataset:
    """Images scaled to [0, 1]; ``flatten`` turns each image into a vector."""
    images = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(images) != len(labels):
        raise ModelFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64) / 255.0
    if flatten:
        x = x.reshape(len(x), -1)
    return Dataset(x, labels.astype(np.int64), split)


__all__ = [
    "ModelFormatError",
    "save_model",
    "load_model",
    "read_idx",
    "write_idx",
    "load_idx",
    "GraphError",
]
