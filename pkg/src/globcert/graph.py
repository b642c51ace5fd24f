"""Feed-forward networks as immutable DAGs of layers.

Supported layer kinds: ``input``, ``linear``, ``conv2d``, ``relu``,
``maxpool``, ``add``, ``sub`` and ``output``. Tensors are numpy arrays
stored row-major; a node's value is flattened whenever a linear map is
applied to it.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

KINDS = ("input", "linear", "conv2d", "relu", "maxpool", "add", "sub", "output")
ARITY = {"input": 0, "linear": 1, "conv2d": 1, "relu": 1, "maxpool": 1, "add": 2, "sub": 2, "output": 1}


class GraphError(ValueError):
    """Raised when a graph cannot be evaluated or transformed."""


@dataclass(frozen=True, eq=False)
class Node:
    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    attrs: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", MappingProxyType(dict(self.attrs)))
        for name in ("weight", "bias"):
            t = getattr(self, name)
            if t is not None:
                t = np.array(t, dtype=np.float64)
                t.setflags(write=False)
                object.__setattr__(self, name, t)

    def replace(self, **changes) -> "Node":
        kw = dict(id=self.id, kind=self.kind, inputs=self.inputs, weight=self.weight, bias=self.bias, attrs=dict(self.attrs))
        kw.update(changes)
        return Node(**kw)


@dataclass(frozen=True)
class Violation:
    kind: str  # "arity", "shape", "cycle", "reference", "structure", "value"
    node: str | None
    message: str

    def __str__(self) -> str:
        where = f"[{self.node}] " if self.node else ""
        return f"{self.kind}: {where}{self.message}"


class ValidationReport(list):
    """List of :class:`Violation`; empty iff the graph is admissible."""

    @property
    def ok(self) -> bool:
        return not self

    def kinds(self) -> set[str]:
        return {v.kind for v in self}


@dataclass(frozen=True, eq=False)
class Graph:
    nodes: Mapping[str, Node]
    input_id: str
    output_id: str
    dtype: str = "float64"  # storage precision of the model file it came from

    def __post_init__(self):
        nodes = self.nodes
        if not isinstance(nodes, Mapping):
            nodes = {n.id: n for n in nodes}
        object.__setattr__(self, "nodes", MappingProxyType(dict(nodes)))

    def __getitem__(self, nid: str) -> Node:
        return self.nodes[nid]

    def __iter__(self):
        return iter(self.order)

    def __len__(self) -> int:
        return len(self.nodes)

    @cached_property
    def consumers(self) -> Mapping[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for n in self.nodes.values():
            for src in n.inputs:
                if src in out:
                    out[src].append(n.id)
        return MappingProxyType({k: tuple(v) for k, v in out.items()})

    @cached_property
    def order(self) -> tuple[str, ...]:
        """Topological order (Kahn, ties broken by insertion order)."""
        indeg = {nid: sum(1 for s in n.inputs if s in self.nodes) for nid, n in self.nodes.items()}
        rank = {nid: i for i, nid in enumerate(self.nodes)}
        ready = sorted((nid for nid, d in indeg.items() if d == 0), key=rank.__getitem__)
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            fresh = []
            for c in self.consumers[nid]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    fresh.append(c)
            if fresh:
                ready = sorted(ready + fresh, key=rank.__getitem__)
        if len(order) != len(self.nodes):
            raise GraphError("graph contains a cycle")
        return tuple(order)

    @cached_property
    def shapes(self) -> Mapping[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for nid in self.order:
            shapes[nid] = _infer_shape(self.nodes[nid], [shapes[s] for s in self.nodes[nid].inputs])
        return MappingProxyType(shapes)

    def size(self, nid: str) -> int:
        return int(np.prod(self.shapes[nid]))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.shapes[self.input_id]

    @property
    def output_size(self) -> int:
        return self.size(self.output_id)

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes.values() if n.kind == kind)

    def ancestors(self, nid: str) -> set[str]:
        seen, stack = {nid}, [nid]
        while stack:
            for s in self.nodes[stack.pop()].inputs:
                if s not in seen:
                    seen.add(s)
                    stack.append(s)
        return seen

    def with_nodes(self, nodes: Iterable[Node], output_id: str | None = None) -> "Graph":
        return Graph({n.id: n for n in nodes}, self.input_id, output_id or self.output_id, self.dtype)

    def summary(self) -> dict:
        return {
            "nodes": len(self.nodes),
            "input": self.input_id,
            "output": self.output_id,
            "input_shape": list(self.input_shape),
            "output_size": self.output_size,
            "kinds": {k: self.count(k) for k in KINDS if self.count(k)},
            "relu_neurons": sum(self.size(n.id) for n in self.nodes.values() if n.kind == "relu"),
            "parameters": sum(
                (n.weight.size if n.weight is not None else 0) + (n.bias.size if n.bias is not None else 0)
                for n in self.nodes.values()
            ),
        }


# ---------------------------------------------------------------------------
# shapes


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_output_shape(in_shape, weight_shape, stride, padding) -> tuple[int, int, int]:
    if len(in_shape) != 3:
        raise GraphError(f"conv2d expects a (C, H, W) input, got {tuple(in_shape)}")
    c, h, w = in_shape
    cout, cin, kh, kw = weight_shape
    if cin != c:
        raise GraphError(f"conv2d kernel expects {cin} channels, input has {c}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise GraphError("conv2d kernel larger than padded input")
    return cout, ho, wo


def pool_geometry(in_shape, kernel, stride=None) -> tuple[tuple[int, ...], list[list[int]]]:
    """Output shape and, per output element, the flat input indices it maxes over."""
    kernel = tuple(int(k) for k in np.atleast_1d(kernel))
    stride = kernel if stride is None else tuple(int(s) for s in np.atleast_1d(stride))
    in_shape = tuple(in_shape)
    if len(kernel) == 1 and len(in_shape) == 1:
        (n,), (k,), (s,) = in_shape, kernel, stride
        m = (n - k) // s + 1
        if m < 1:
            raise GraphError("maxpool window larger than input")
        return (m,), [[i * s + t for t in range(k)] for i in range(m)]
    if len(kernel) == 2 and len(in_shape) == 3:
        c, h, w = in_shape
        (kh, kw), (sh, sw) = kernel, stride
        ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise GraphError("maxpool window larger than input")
        groups = []
        for ch, i, j in itertools.product(range(c), range(ho), range(wo)):
            groups.append(
                [ch * h * w + (i * sh + a) * w + (j * sw + b) for a in range(kh) for b in range(kw)]
            )
        return (c, ho, wo), groups
    raise GraphError(f"maxpool kernel {kernel} incompatible with input shape {in_shape}")


def _infer_shape(node: Node, in_shapes: Sequence[tuple[int, ...]]) -> tuple[int, ...]:
    k = node.kind
    if k == "input":
        shape = tuple(int(d) for d in node.attrs["shape"])
        if not shape or min(shape) < 1:
            raise GraphError(f"invalid input shape {shape}")
        return shape
    if k in ("relu", "output"):
        return in_shapes[0]
    if k in ("add", "sub"):
        a, b = in_shapes
        if a != b:
            raise GraphError(f"{k} operands have shapes {a} and {b}")
        return a
    if k == "linear":
        W, bias = node.weight, node.bias
        if W is None or W.ndim != 2:
            raise GraphError("linear weight must be a matrix")
        n_in = int(np.prod(in_shapes[0]))
        if W.shape[1] != n_in:
            raise GraphError(f"linear weight is {W.shape[0]}x{W.shape[1]} but input has {n_in} elements")
        if bias is not None and bias.shape != (W.shape[0],):
            raise GraphError(f"linear bias has length {bias.size}, expected {W.shape[0]}")
        out = tuple(int(d) for d in node.attrs.get("out_shape", (W.shape[0],)))
        if int(np.prod(out)) != W.shape[0]:
            raise GraphError(f"out_shape {out} does not hold {W.shape[0]} elements")
        return out
    if k == "conv2d":
        W = node.weight
        if W is None or W.ndim != 4:
            raise GraphError("conv2d weight must be (C_out, C_in, kh, kw)")
        if node.bias is not None and node.bias.shape != (W.shape[0],):
            raise GraphError("conv2d bias length must equal C_out")
        return conv_output_shape(in_shapes[0], W.shape, node.attrs.get("stride", 1), node.attrs.get("padding", 0))
    if k == "maxpool":
        return pool_geometry(in_shapes[0], node.attrs["kernel"], node.attrs.get("stride"))[0]
    raise GraphError(f"unknown node kind {k!r}")


# ---------------------------------------------------------------------------
# validation


def validate(graph: Graph) -> ValidationReport:
    """Collect every structural problem that blocks propagation."""
    report = ValidationReport()
    nodes = graph.nodes
    for nid, n in nodes.items():
        if n.kind not in KINDS:
            report.append(Violation("structure", nid, f"unknown kind {n.kind!r}"))
            continue
        if len(n.inputs) != ARITY[n.kind]:
            report.append(Violation("arity", nid, f"{n.kind} takes {ARITY[n.kind]} inputs, got {len(n.inputs)}"))
        for s in n.inputs:
            if s not in nodes:
                report.append(Violation("reference", nid, f"unknown input {s!r}"))
        for name in ("weight", "bias"):
            t = getattr(n, name)
            if t is not None and not np.all(np.isfinite(t)):
                report.append(Violation("value", nid, f"non-finite {name}"))
    inputs = [nid for nid, n in nodes.items() if n.kind == "input"]
    outputs = [nid for nid, n in nodes.items() if n.kind == "output"]
    if inputs != [graph.input_id]:
        report.append(Violation("structure", None, f"expected exactly one input node {graph.input_id!r}, found {inputs}"))
    if outputs != [graph.output_id]:
        report.append(Violation("structure", None, f"expected exactly one output node {graph.output_id!r}, found {outputs}"))
    if report:
        return report
    try:
        graph.order
    except GraphError as e:
        report.append(Violation("cycle", None, str(e)))
        return report
    reach = _reachable(graph.input_id, graph.consumers)
    for nid in nodes:
        if nid not in reach:
            report.append(Violation("structure", nid, "not reachable from the input"))
    co = graph.ancestors(graph.output_id)
    for nid in nodes:
        if nid not in co:
            report.append(Violation("structure", nid, "does not reach the output"))
    shapes: dict[str, tuple[int, ...]] = {}
    for nid in graph.order:
        n = nodes[nid]
        if any(s not in shapes for s in n.inputs):
            continue
        try:
            shapes[nid] = _infer_shape(n, [shapes[s] for s in n.inputs])
        except (GraphError, KeyError, TypeError, ValueError) as e:
            report.append(Violation("shape", nid, str(e)))
    return report


def _reachable(start: str, consumers: Mapping[str, Sequence[str]]) -> set[str]:
    seen, stack = {start}, [start]
    while stack:
        for c in consumers[stack.pop()]:
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return seen


def check(graph: Graph) -> Graph:
    report = validate(graph)
    if report:
        raise GraphError("invalid graph: " + "; ".join(map(str, report)))
    return graph


# ---------------------------------------------------------------------------
# evaluation


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias, stride=1, padding=0) -> np.ndarray:
    """Direct convolution (cross-correlation) of a batch ``x`` of shape (B, C, H, W)."""
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kh, kw = weight.shape[2:]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.einsum("bchwij,ocij->bohw", win, weight)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


def forward(graph: Graph, x) -> np.ndarray:
    """Evaluate the network on one input (shape = input shape) or a leading batch of them."""
    x = np.asarray(x, dtype=np.float64)
    single = x.shape == graph.input_shape
    out = forward_all(graph, x[None] if single else x)[graph.output_id]
    return out[0] if single else out


def forward_all(graph: Graph, batch) -> dict[str, np.ndarray]:
    """Values of every node on a batch of inputs, each shaped ``(B, *node shape)``."""
    batch = np.asarray(batch, dtype=np.float64)
    in_shape = graph.input_shape
    if batch.shape[1:] != in_shape:
        raise GraphError(f"input shape {batch.shape} does not match {in_shape}")
    vals: dict[str, np.ndarray] = {}
    for nid in graph.order:
        n = graph.nodes[nid]
        args = [vals[s] for s in n.inputs]
        bsz = batch.shape[0]
        shape = graph.shapes[nid]
        if n.kind == "input":
            v = batch
        elif n.kind == "linear":
            v = args[0].reshape(bsz, -1) @ n.weight.T
            if n.bias is not None:
                v = v + n.bias
        elif n.kind == "conv2d":
            v = conv2d_forward(args[0], n.weight, n.bias, n.attrs.get("stride", 1), n.attrs.get("padding", 0))
        elif n.kind == "relu":
            v = np.maximum(args[0], 0.0)
        elif n.kind == "maxpool":
            _, groups = pool_geometry(graph.shapes[n.inputs[0]], n.attrs["kernel"], n.attrs.get("stride"))
            flat = args[0].reshape(bsz, -1)
            v = np.stack([flat[:, g].max(axis=1) for g in groups], axis=1)
        elif n.kind == "add":
            v = args[0] + args[1]
        elif n.kind == "sub":
            v = args[0] - args[1]
        elif n.kind == "output":
            v = args[0]
        else:
            raise GraphError(f"unknown node kind {n.kind!r}")
        vals[nid] = v.reshape((bsz,) + shape)
    return vals


def select_output(graph: Graph, channel: int) -> Graph:
    """Restrict a multi-output network to a scalar output ``channel``."""
    m = graph.output_size
    if not 0 <= channel < m:
        raise IndexError(f"channel {channel} out of range for {m} outputs")
    out = graph.nodes[graph.output_id]
    sel_id = _fresh_id(graph, f"select{channel}")
    row = np.zeros((1, m))
    row[0, channel] = 1.0
    sel = Node(sel_id, "linear", out.inputs, weight=row, bias=np.zeros(1))
    nodes = [n for nid, n in graph.nodes.items() if nid != graph.output_id]
    nodes += [sel, out.replace(inputs=(sel_id,))]
    return graph.with_nodes(nodes)


def _fresh_id(graph: Graph, base: str) -> str:
    if base not in graph.nodes:
        return base
    for i in itertools.count(1):
        cand = f"{base}_{i}"
        if cand not in graph.nodes:
            return cand
    raise AssertionError  # pragma: no cover


# ---------------------------------------------------------------------------
# construction helpers


class GraphBuilder:
    """Incremental graph construction; each method returns the new node id."""

    def __init__(self):
        self._nodes: dict[str, Node] = {}
        self._input: str | None = None
        self._output: str | None = None
        self._count = itertools.count()

    def _add(self, kind, inputs=(), name=None, **kw) -> str:
        nid = name or f"{kind}{next(self._count)}"
        if nid in self._nodes:
            raise GraphError(f"duplicate node id {nid!r}")
        self._nodes[nid] = Node(nid, kind, tuple(inputs), **kw)
        return nid

    def input(self, shape, name="input") -> str:
        self._input = self._add("input", name=name, attrs={"shape": tuple(np.atleast_1d(shape))})
        return self._input

    def linear(self, src, weight, bias=None, name=None, out_shape=None) -> str:
        weight = np.atleast_2d(np.asarray(weight, dtype=float))
        if bias is None:
            bias = np.zeros(weight.shape[0])
        attrs = {"out_shape": tuple(out_shape)} if out_shape is not None else {}
        return self._add("linear", (src,), name, weight=weight, bias=np.atleast_1d(bias), attrs=attrs)

    def conv2d(self, src, weight, bias=None, stride=1, padding=0, name=None) -> str:
        weight = np.asarray(weight, dtype=float)
        if bias is None:
            bias = np.zeros(weight.shape[0])
        return self._add("conv2d", (src,), name, weight=weight, bias=bias, attrs={"stride": stride, "padding": padding})

    def relu(self, src, name=None) -> str:
        return self._add("relu", (src,), name)

    def maxpool(self, src, kernel, stride=None, name=None) -> str:
        attrs = {"kernel": tuple(np.atleast_1d(kernel).tolist())}
        if stride is not None:
            attrs["stride"] = tuple(np.atleast_1d(stride).tolist())
        return self._add("maxpool", (src,), name, attrs=attrs)

    def add(self, a, b, name=None) -> str:
        return self._add("add", (a, b), name)

    def sub(self, a, b, name=None) -> str:
        return self._add("sub", (a, b), name)

    def output(self, src, name="output") -> str:
        self._output = self._add("output", (src,), name)
        return self._output

    def build(self) -> Graph:
        if self._input is None or self._output is None:
            raise GraphError("graph needs an input and an output node")
        return Graph(dict(self._nodes), self._input, self._output)


def build_mlp(sizes: Sequence[int], rng: np.random.Generator | int = 0) -> Graph:
    """Fully connected ReLU network ``sizes[0] -> ... -> sizes[-1]`` with He-uniform weights."""
    rng = np.random.default_rng(rng)
    b = GraphBuilder()
    h = b.input((sizes[0],))
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / n_in)
        h = b.linear(h, rng.uniform(-lim, lim, size=(n_out, n_in)), np.zeros(n_out), name=f"fc{i}")
        if i < len(sizes) - 2:
            h = b.relu(h, name=f"relu{i}")
    b.output(h)
    return b.build()


def forward_var(graph: Graph, x, weights: Mapping | None = None, biases: Mapping | None = None):
    """Differentiable forward pass of a lowered graph on a batch ``x`` of shape (B, n_in).

    ``weights`` / ``biases`` map linear node ids to tape values that replace
    the stored tensors. Returns a (B, n_out) tape value.
    """
    from .autodiff import as_var

    x = as_var(x)
    vals = {}
    for nid in graph.order:
        n = graph.nodes[nid]
        if n.kind == "input":
            v = x
        elif n.kind == "linear":
            W = weights[nid] if weights and nid in weights else n.weight
            v = vals[n.inputs[0]] @ as_var(W).T
            bias = biases[nid] if biases and nid in biases else n.bias
            if bias is not None:
                v = v + bias
        elif n.kind == "relu":
            v = vals[n.inputs[0]].pos()
        elif n.kind == "add":
            v = vals[n.inputs[0]] + vals[n.inputs[1]]
        elif n.kind == "sub":
            v = vals[n.inputs[0]] - vals[n.inputs[1]]
        elif n.kind == "output":
            v = vals[n.inputs[0]]
        else:
            raise GraphError(f"[{nid}] {n.kind} must be lowered before differentiable evaluation")
        vals[nid] = v
    return vals[graph.output_id]
