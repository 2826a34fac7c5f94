"""Randomized RC interconnect synthesis and transfer-function extraction.

Networks are resistor trees/chains fed from one source port, with a grounded
capacitor at every internal node, so the state dimension always equals the
capacitor count.  Nodal equations come from KCL; the port-to-output transfer
function is extracted in coefficient form with a Faddeev-LeVerrier recursion
on the scaled state matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .modal import Polynomial, TransferFunction

__all__ = [
    "RcNetwork",
    "NodalSystem",
    "UnsupportedOrder",
    "SingularSystem",
    "generate_network",
    "assemble_nodal",
    "extract_transfer_function",
    "network_to_json",
    "network_from_json",
]

PORT = -1  # sentinel node id for the driven source port

# Log-uniform component draw ranges; time constants span roughly 50 fs-500 ps,
# matching a picosecond-step / nanosecond-window transient setup.
DEFAULT_R_RANGE = (50.0, 5_000.0)       # ohms
DEFAULT_C_RANGE = (1e-15, 100e-15)      # farads

MAX_ORDER = 10


class UnsupportedOrder(ValueError):
    """Requested network order outside the supported 1..10 range."""


class SingularSystem(RuntimeError):
    """Nodal equations are singular (degenerate network)."""


@dataclass(frozen=True)
class RcNetwork:
    """RC interconnect: resistive tree from the port, grounded caps at nodes.

    Nodes are 0..n-1; resistors[i] = (parent, node, ohms) with parent -1
    meaning the source port.  Every node carries one capacitor to ground.
    """

    topology: str
    resistors: tuple
    capacitors: tuple
    input_node: int
    output_node: int

    def __post_init__(self):
        n = len(self.capacitors)
        if n == 0:
            raise ValueError("network needs at least one capacitor node")
        if any(r <= 0 for _, _, r in self.resistors):
            raise ValueError("all resistances must be positive")
        if any(c <= 0 for _, c in self.capacitors):
            raise ValueError("all capacitances must be positive")
        nodes = {node for node, _ in self.capacitors}
        if nodes != set(range(n)):
            raise ValueError("capacitor nodes must be exactly 0..n-1")
        # connectivity: walk resistors from the port
        adj = {PORT: []}
        for u, v, _ in self.resistors:
            adj.setdefault(u, []).append(v)
            adj.setdefault(v, []).append(u)
        seen = set()
        stack = [PORT]
        while stack:
            u = stack.pop()
            if u in seen:
                continue
            seen.add(u)
            stack.extend(adj.get(u, []))
        if not nodes <= seen:
            raise ValueError("network graph is not connected to the port")
        if self.output_node not in nodes or self.input_node not in nodes:
            raise ValueError("input/output nodes must be capacitor nodes")

    @property
    def order(self) -> int:
        return len(self.capacitors)


@dataclass(frozen=True)
class NodalSystem:
    """KCL equations (G + sC) v = input_vector * v_port, output = selector . v."""

    G: np.ndarray
    C: np.ndarray
    input_vector: np.ndarray
    output_selector: np.ndarray


def generate_network(
    order: int,
    topology: str = "ladder",
    rng_seed: int = 0,
    r_range=DEFAULT_R_RANGE,
    c_range=DEFAULT_C_RANGE,
) -> RcNetwork:
    """Draw a random RC network of the given order, deterministic per seed."""
    if not 1 <= order <= MAX_ORDER:
        raise UnsupportedOrder(f"order must be in 1..{MAX_ORDER}, got {order}")
    if topology not in ("ladder", "tree"):
        raise ValueError(f"unknown topology {topology!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), order]))
    rs = np.exp(rng.uniform(math.log(r_range[0]), math.log(r_range[1]), order))
    cs = np.exp(rng.uniform(math.log(c_range[0]), math.log(c_range[1]), order))

    if topology == "ladder":
        parents = [PORT] + list(range(order - 1))
        output = order - 1
    else:
        parents = [PORT]
        children = {PORT: 1}  # port feeds exactly node 0
        depth = {0: 0}
        for i in range(1, order):
            open_nodes = [u for u in range(i) if children.get(u, 0) < 2]
            parent = int(open_nodes[rng.integers(len(open_nodes))])
            parents.append(parent)
            children[parent] = children.get(parent, 0) + 1
            depth[i] = depth[parent] + 1
        output = max(range(order), key=lambda u: (depth[u], u))

    resistors = tuple((parents[i], i, float(rs[i])) for i in range(order))
    capacitors = tuple((i, float(cs[i])) for i in range(order))
    return RcNetwork(
        topology=topology,
        resistors=resistors,
        capacitors=capacitors,
        input_node=0,
        output_node=output,
    )


def assemble_nodal(net: RcNetwork) -> NodalSystem:
    """Stamp KCL conductance/capacitance matrices for the internal nodes."""
    n = net.order
    G = np.zeros((n, n))
    b = np.zeros(n)
    for u, v, r in net.resistors:
        g = 1.0 / r
        if u == PORT:
            G[v, v] += g
            b[v] += g
        else:
            G[u, u] += g
            G[v, v] += g
            G[u, v] -= g
            G[v, u] -= g
    C = np.zeros((n, n))
    for node, c in net.capacitors:
        C[node, node] += c
    sel = np.zeros(n)
    sel[net.output_node] = 1.0
    if not np.all(np.isfinite(G)):
        raise SingularSystem("non-finite conductance stamp")
    return NodalSystem(G=G, C=C, input_vector=b, output_selector=sel)


def _tree_from_matrices(sys: NodalSystem):
    """Recover (root, port resistance, children, caps) from a tree-structured G.

    Returns None when the sparsity pattern is not a resistor tree hanging off
    one port-driven root node.
    """
    G, C = sys.G, sys.C
    n = G.shape[0]
    if np.count_nonzero(C - np.diag(np.diag(C))) or np.any(np.diag(C) <= 0):
        return None
    port_nodes = np.nonzero(sys.input_vector)[0]
    if len(port_nodes) != 1 or sys.input_vector[port_nodes[0]] <= 0:
        return None
    root = int(port_nodes[0])
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if G[i, j] != 0]
    if len(edges) != n - 1:
        return None
    adj = {i: [] for i in range(n)}
    for i, j in edges:
        if G[i, j] >= 0:
            return None
        adj[i].append(j)
        adj[j].append(i)
    children = {}
    seen = {root}
    stack = [root]
    order = []
    while stack:
        u = stack.pop()
        order.append(u)
        children[u] = []
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                children[u].append(v)
                stack.append(v)
    if len(seen) != n:
        return None
    # Row sums must cancel except for the port conductance at the root.
    resid = G.sum(axis=1) - sys.input_vector
    if np.max(np.abs(resid)) > 1e-9 * np.max(np.abs(G)):
        return None
    r_port = 1.0 / sys.input_vector[root]
    r_edge = {(u, v): -1.0 / G[u, v] for u in children for v in children[u]}
    return root, r_port, children, r_edge, np.diag(C)


def _poly_add(a, b):
    n = max(len(a), len(b))
    out = np.zeros(n)
    out[: len(a)] += a
    out[: len(b)] += b
    return out


def _subtree_admittance(node, children, r_edge, caps):
    """Admittance (A, B) with Y = A/B of the subtree rooted at node.

    Every coefficient is a sum of positive products of component values, so
    the recursion is cancellation-free at any component spread.
    """
    A = np.array([0.0, caps[node]])
    B = np.array([1.0])
    for child in children[node]:
        Ac, Bc = _subtree_admittance(child, children, r_edge, caps)
        load = _poly_add(Bc, r_edge[(node, child)] * Ac)  # Bc + R*Ac
        A = _poly_add(np.convolve(A, load), np.convolve(Ac, B))
        B = np.convolve(B, load)
    return A, B


def extract_transfer_function(sys: NodalSystem) -> TransferFunction:
    """Port-to-output transfer function H(s) = sel.(G+sC)^-1 input, in coefficients.

    Tree-structured systems (the netgen output) use a two-sweep recursion from
    the output node to the port in which every intermediate polynomial has
    positive coefficients, so the coefficients come out cancellation-free at
    machine accuracy regardless of component spread.  The result is normalized
    so den[0] = 1, hence num[0] = H(0).
    """
    tree = _tree_from_matrices(sys)
    if tree is None:
        return _extract_generic(sys)
    root, r_port, children, r_edge, caps = tree
    out_nodes = np.nonzero(sys.output_selector)[0]
    if len(out_nodes) != 1 or sys.output_selector[out_nodes[0]] != 1.0:
        return _extract_generic(sys)
    output = int(out_nodes[0])

    parent = {}
    for u in children:
        for v in children[u]:
            parent[v] = u
    path = [output]
    while path[-1] != root:
        path.append(parent[path[-1]])

    # Walk output -> root keeping (V, I) polynomials up to one common positive
    # factor; side subtrees fold in as admittance loads.
    on_path = set(path)
    num = np.array([1.0])
    V = np.array([1.0])
    I = np.array([0.0])
    for idx, u in enumerate(path):
        side_A = np.array([0.0, caps[u]])
        side_B = np.array([1.0])
        for child in children[u]:
            if child in on_path:
                continue
            Ac, Bc = _subtree_admittance(child, children, r_edge, caps)
            load = _poly_add(Bc, r_edge[(u, child)] * Ac)
            side_A = _poly_add(np.convolve(side_A, load), np.convolve(Ac, side_B))
            side_B = np.convolve(side_B, load)
        # scale the running pair by this node's side denominator
        num = np.convolve(num, side_B)
        I = _poly_add(np.convolve(I, side_B), np.convolve(side_A, V))
        V = np.convolve(V, side_B)
        r_up = r_port if u == root else r_edge[(path[idx + 1], u)]
        V = _poly_add(V, r_up * I)
    den = V

    if den[0] == 0 or not np.all(np.isfinite(den)) or not np.all(np.isfinite(num)):
        raise SingularSystem("conductance matrix is singular")
    num = num / den[0]
    den = den / den[0]
    return TransferFunction(Polynomial(num), Polynomial(den))


def _extract_generic(sys: NodalSystem) -> TransferFunction:
    """Faddeev-LeVerrier fallback for non-tree nodal systems.

    Accuracy degrades with eigenvalue spread; netgen networks never take this
    path, it exists for externally supplied nodal systems.
    """
    G, C = sys.G, sys.C
    n = G.shape[0]
    cdiag = np.diag(C)
    if np.any(cdiag <= 0):
        raise SingularSystem("capacitance matrix must be positive diagonal")
    M = G / cdiag[:, None]
    u = sys.input_vector / cdiag
    sel = sys.output_selector
    omega = float(np.trace(M)) / n
    if not np.isfinite(omega) or omega <= 0:
        raise SingularSystem("state matrix has a non-positive scale")
    A = -M / omega
    B = np.eye(n)
    d = [1.0]
    num_desc = [float(sel @ B @ u)]
    for k in range(1, n + 1):
        AB = A @ B
        dk = -np.trace(AB) / k
        d.append(float(dk))
        if k < n:
            B = AB + dk * np.eye(n)
            num_desc.append(float(sel @ B @ u))
    num_asc = np.array(num_desc[::-1])
    den_asc = np.array(d[::-1])
    den_s = den_asc / omega ** np.arange(len(den_asc))
    num_s = num_asc / omega ** np.arange(len(num_asc)) / omega
    if den_s[0] == 0 or not np.all(np.isfinite(den_s)) or not np.all(np.isfinite(num_s)):
        raise SingularSystem("conductance matrix is singular")
    num_s = num_s / den_s[0]
    den_s = den_s / den_s[0]
    return TransferFunction(Polynomial(num_s), Polynomial(den_s))


# ---------------------------------------------------------------------------
# JSON serialization (versioned)
# ---------------------------------------------------------------------------

SCHEMA_VERSION = 1


def network_to_json(net: RcNetwork) -> str:
    doc = {
        "version": SCHEMA_VERSION,
        "topology": net.topology,
        "r": [r for _, _, r in net.resistors],
        "c": [c for _, c in net.capacitors],
        "parents": [u for u, _, _ in net.resistors],
        "input": net.input_node,
        "output": net.output_node,
    }
    return json.dumps(doc, sort_keys=True)


def network_from_json(text: str) -> RcNetwork:
    doc = json.loads(text)
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported network schema version {doc.get('version')}")
    rs = doc["r"]
    cs = doc["c"]
    parents = doc.get("parents", [PORT] + list(range(len(rs) - 1)))
    resistors = tuple((int(parents[i]), i, float(rs[i])) for i in range(len(rs)))
    capacitors = tuple((i, float(cs[i])) for i in range(len(cs)))
    return RcNetwork(
        topology=doc.get("topology", "ladder"),
        resistors=resistors,
        capacitors=capacitors,
        input_node=int(doc.get("input", 0)),
        output_node=int(doc["output"]),
    )
