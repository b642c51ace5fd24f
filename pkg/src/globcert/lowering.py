"""Rewrite passes that reduce a graph to linear / relu / add / sub layers."""
from __future__ import annotations

import itertools

import numpy as np

from .graph import Graph, GraphError, Node, _pair, check, pool_geometry

PADDING_MODES = ("zeros",)


def conv_matrix(in_shape, weight: np.ndarray, stride=1, padding=0) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Dense matrix of a 2-d convolution, built by enumerating kernel placements."""
    c, h, w = in_shape
    cout, cin, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    M = np.zeros((cout * ho * wo, c * h * w))
    for o, i, j in itertools.product(range(cout), range(ho), range(wo)):
        row = (o * ho + i) * wo + j
        for ci, a, b in itertools.product(range(cin), range(kh), range(kw)):
            y, x = i * sh + a - ph, j * sw + b - pw
            if 0 <= y < h and 0 <= x < w:
                M[row, (ci * h + y) * w + x] += weight[o, ci, a, b]
    return M, (cout, ho, wo)


def lower_conv(graph: Graph) -> Graph:
    """Replace every conv2d by the equivalent dense linear layer."""
    check(graph)
    nodes = []
    for nid in graph.order:
        n = graph.nodes[nid]
        if n.kind != "conv2d":
            nodes.append(n)
            continue
        mode = n.attrs.get("padding_mode", "zeros")
        if mode not in PADDING_MODES:
            raise GraphError(f"[{nid}] unsupported padding mode {mode!r}")
        M, out_shape = conv_matrix(graph.shapes[n.inputs[0]], n.weight, n.attrs.get("stride", 1), n.attrs.get("padding", 0))
        bias = np.zeros(n.weight.shape[0]) if n.bias is None else n.bias
        nodes.append(
            Node(nid, "linear", n.inputs, weight=M, bias=np.repeat(bias, out_shape[1] * out_shape[2]),
                 attrs={"out_shape": out_shape})
        )
    return graph.with_nodes(nodes)


def _selector(rows: list[int | None], n_in: int) -> np.ndarray:
    S = np.zeros((len(rows), n_in))
    for r, c in enumerate(rows):
        if c is not None:
            S[r, c] = 1.0
    return S


def _lower_pool(node: Node, in_shape, taken: set[str]) -> list[Node]:
    out_shape, groups = pool_geometry(in_shape, node.attrs["kernel"], node.attrs.get("stride"))
    n_in = int(np.prod(in_shape))

    def name(s):
        nid = f"{node.id}.{s}"
        if nid in taken:
            raise GraphError(f"lowered node id {nid!r} collides with an existing node")
        return nid

    # slots[p] = positions (in the current vector) of pool p's remaining candidates
    src, width = node.inputs[0], n_in
    slots = [list(g) for g in groups]
    if all(len(g) == 1 for g in slots):
        ident = _selector([g[0] for g in slots], n_in)
        return [Node(node.id, "linear", (src,), weight=ident, bias=np.zeros(len(slots)), attrs={"out_shape": out_shape})]

    nodes: list[Node] = []
    for level in itertools.count():
        t_rows, r_rows, carry = [], [], []
        next_slots: list[list[int]] = []
        pos = 0
        for g in slots:
            ns = []
            for a in range(0, len(g) - 1, 2):
                t_rows.append(g[a])
                r_rows.append(g[a + 1])
                ns.append(pos)
                pos += 1
            if len(g) % 2:
                carry.append((pos, g[-1]))
                ns.append(pos)
                pos += 1
            next_slots.append(ns)
        last = all(len(g) == 1 for g in next_slots)
        n_pair = len(t_rows)
        shape = {"out_shape": out_shape} if last else {}
        t_id, r_id, d_id, h_id = (name(f"t{level}"), name(f"r{level}"), name(f"d{level}"), name(f"h{level}"))
        pair_shape = {"out_shape": out_shape} if last and not carry else {}
        nodes += [
            Node(t_id, "linear", (src,), weight=_selector(t_rows, width), bias=np.zeros(n_pair), attrs=pair_shape),
            Node(r_id, "linear", (src,), weight=_selector(r_rows, width), bias=np.zeros(n_pair), attrs=pair_shape),
            Node(d_id, "sub", (t_id, r_id)),
            Node(h_id, "relu", (d_id,)),
        ]
        out_id = node.id if last else name(f"m{level}")
        if not carry:
            # every new slot is a pair result: r + relu(t - r)
            nodes.append(Node(out_id, "add", (r_id, h_id)))
        else:
            # base = r for pair slots and the carried candidate for odd slots; h is embedded into pair slots
            pair_of = {}
            k = 0
            for ns, g in zip(next_slots, slots):
                for a in range(len(g) // 2):
                    pair_of[ns[a]] = k
                    k += 1
            base_rows = [None] * pos
            embed_rows = [None] * pos
            for p, k in pair_of.items():
                base_rows[p] = r_rows[k]
                embed_rows[p] = k
            for p, c in carry:
                base_rows[p] = c
            b_id, e_id = name(f"b{level}"), name(f"e{level}")
            nodes += [
                Node(b_id, "linear", (src,), weight=_selector(base_rows, width), bias=np.zeros(pos), attrs=shape),
                Node(e_id, "linear", (h_id,), weight=_selector(embed_rows, n_pair), bias=np.zeros(pos), attrs=shape),
                Node(out_id, "add", (b_id, e_id)),
            ]
        if last:
            return nodes
        src, width, slots = out_id, pos, next_slots
    raise AssertionError  # pragma: no cover


def lower_maxpool(graph: Graph) -> Graph:
    """Replace every maxpool by balanced trees of ``r + relu(t - r)``."""
    check(graph)
    taken = set(graph.nodes)
    nodes = []
    for nid in graph.order:
        n = graph.nodes[nid]
        if n.kind == "maxpool":
            nodes += _lower_pool(n, graph.shapes[n.inputs[0]], taken)
        else:
            nodes.append(n)
    return graph.with_nodes(nodes)


def lower(graph: Graph) -> Graph:
    """Apply every lowering pass; the result only holds propagation-ready layers."""
    g = graph
    if any(n.kind == "conv2d" for n in g.nodes.values()):
        g = lower_conv(g)
    if any(n.kind == "maxpool" for n in g.nodes.values()):
        g = lower_maxpool(g)
    return check(g)
