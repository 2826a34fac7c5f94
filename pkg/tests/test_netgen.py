import numpy as np
import pytest

from stepcast.modal import decompose, find_poles, to_gain_form
from stepcast.netgen import (
    PORT,
    RcNetwork,
    UnsupportedOrder,
    assemble_nodal,
    extract_transfer_function,
    generate_network,
    network_from_json,
    network_to_json,
)


def unit_ladder(order):
    return RcNetwork(
        topology="ladder",
        resistors=tuple((i - 1 if i else PORT, i, 1.0) for i in range(order)),
        capacitors=tuple((i, 1.0) for i in range(order)),
        input_node=0,
        output_node=order - 1,
    )


# ---------------------------------------------------------------------------
# generate_network
# ---------------------------------------------------------------------------

def test_order_one_structure():
    net = generate_network(1, "ladder", rng_seed=42)
    assert net.order == 1
    assert len(net.resistors) == 1 and net.resistors[0][0] == PORT
    H = extract_transfer_function(assemble_nodal(net))
    assert H.den.degree == 1 and H.num.degree == 0


def test_order3_poles_real_negative():
    net = generate_network(3, "ladder", rng_seed=7)
    H = extract_transfer_function(assemble_nodal(net))
    poles = find_poles(H.den)
    assert sum(k for _, k in poles) == 3
    for p, _ in poles:
        assert p.imag == 0
        assert p.real < 0
    # independent oracle: poles are the negated eigenvalues of C^-1 G
    sys = assemble_nodal(net)
    eig = np.sort(np.linalg.eigvals(sys.G / np.diag(sys.C)[:, None]).real)
    got = np.sort([-p.real for p, _ in poles])
    assert got == pytest.approx(eig, rel=1e-8)


def test_generation_deterministic():
    a = generate_network(5, "tree", rng_seed=123)
    b = generate_network(5, "tree", rng_seed=123)
    assert a == b
    c = generate_network(5, "tree", rng_seed=124)
    assert a != c


def test_order_bounds():
    with pytest.raises(UnsupportedOrder):
        generate_network(0, "ladder", 1)
    with pytest.raises(UnsupportedOrder):
        generate_network(11, "ladder", 1)


def test_tree_output_at_deepest_leaf():
    net = generate_network(8, "tree", rng_seed=5)
    depth = {}
    parent = {v: u for u, v, _ in net.resistors}
    for node, _ in net.capacitors:
        d, u = 0, node
        while parent[u] != PORT:
            u = parent[u]
            d += 1
        depth[node] = d
    assert depth[net.output_node] == max(depth.values())


def test_component_values_within_ranges():
    net = generate_network(10, "ladder", rng_seed=9)
    for _, _, r in net.resistors:
        assert 50.0 <= r <= 5000.0
    for _, c in net.capacitors:
        assert 1e-15 <= c <= 100e-15


# ---------------------------------------------------------------------------
# assemble_nodal
# ---------------------------------------------------------------------------

def test_single_stage_matrices():
    sys = assemble_nodal(unit_ladder(1))
    assert np.allclose(sys.G, [[1.0]])
    assert np.allclose(sys.C, [[1.0]])


def test_two_stage_hand_kcl():
    # hand KCL: node0 couples to port and node1, node1 only to node0
    sys = assemble_nodal(unit_ladder(2))
    assert np.allclose(sys.G, [[2.0, -1.0], [-1.0, 1.0]])
    assert np.allclose(sys.C, np.eye(2))
    assert sys.input_vector == pytest.approx([1.0, 0.0])


def test_row_sums_equal_port_conductance():
    net = generate_network(6, "tree", rng_seed=3)
    sys = assemble_nodal(net)
    # internal couplings cancel; what is left is the conductance to the port
    assert sys.G.sum(axis=1) == pytest.approx(sys.input_vector, abs=1e-15)


def test_impedance_scaling_leaves_poles_invariant():
    net = unit_ladder(3)
    k = 7.5
    scaled = RcNetwork(
        topology="ladder",
        resistors=tuple((u, v, r * k) for u, v, r in net.resistors),
        capacitors=tuple((node, c / k) for node, c in net.capacitors),
        input_node=0,
        output_node=2,
    )
    H1 = extract_transfer_function(assemble_nodal(net))
    H2 = extract_transfer_function(assemble_nodal(scaled))
    p1 = sorted(p.real for p, _ in find_poles(H1.den))
    p2 = sorted(p.real for p, _ in find_poles(H2.den))
    assert p1 == pytest.approx(p2, rel=1e-9)


# ---------------------------------------------------------------------------
# extract_transfer_function
# ---------------------------------------------------------------------------

def test_single_stage_canonical():
    H = extract_transfer_function(assemble_nodal(unit_ladder(1)))
    assert H.num.coeffs == pytest.approx([1.0])
    assert H.den.coeffs == pytest.approx([1.0, 1.0])


def test_two_stage_symbolic_elimination():
    # oracle: eliminating v0 from (2+s)v0 - v1 = u, -v0 + (1+s)v1 = 0
    # gives H = 1/(s^2 + 3s + 1)
    H = extract_transfer_function(assemble_nodal(unit_ladder(2)))
    assert H.num.coeffs == pytest.approx([1.0])
    assert H.den.coeffs == pytest.approx([1.0, 3.0, 1.0])


def test_dc_gain_is_one_for_ladders():
    for seed in range(8):
        net = generate_network(int(np.random.default_rng(seed).integers(1, 11)),
                               "ladder", rng_seed=seed)
        H = extract_transfer_function(assemble_nodal(net))
        assert H(0.0) == pytest.approx(1.0, rel=1e-9)


def test_dc_gain_is_one_for_trees():
    net = generate_network(7, "tree", rng_seed=2)
    H = extract_transfer_function(assemble_nodal(net))
    assert H(0.0) == pytest.approx(1.0, rel=1e-9)


def test_order_fidelity_and_eigenvalue_equivalence():
    for order in (1, 2, 4, 7, 10):
        for topo in ("ladder", "tree"):
            net = generate_network(order, topo, rng_seed=order * 11 + 1)
            sys = assemble_nodal(net)
            H = extract_transfer_function(sys)
            assert H.den.degree == order
            poles = find_poles(H.den)
            got = np.sort([-p.real for p, _ in poles])
            eig = np.sort(np.linalg.eigvals(sys.G / np.diag(sys.C)[:, None]).real)
            assert got == pytest.approx(eig, rel=1e-8)


def test_extraction_matches_direct_solve_at_probes():
    # independent oracle: H(s) = sel . (G+sC)^-1 b at sampled frequencies
    net = generate_network(6, "tree", rng_seed=17)
    sys = assemble_nodal(net)
    H = extract_transfer_function(sys)
    rng = np.random.default_rng(0)
    for _ in range(20):
        s = complex(rng.uniform(-1, 1), rng.uniform(-1, 1)) * 1e11
        direct = sys.output_selector @ np.linalg.solve(
            sys.G + s * sys.C, sys.input_vector
        )
        assert H(s) == pytest.approx(direct, rel=1e-8)


def test_gain_form_of_extracted_ladder():
    net = generate_network(4, "ladder", rng_seed=21)
    H = extract_transfer_function(assemble_nodal(net))
    pairs = to_gain_form(decompose(H))
    assert sum(a for _, a in pairs) == pytest.approx(1.0, abs=1e-9)
    assert all(p > 0 for p, _ in pairs)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_network_json_roundtrip():
    net = generate_network(5, "tree", rng_seed=33)
    net2 = network_from_json(network_to_json(net))
    assert net == net2


def test_network_json_has_interface_keys():
    import json

    doc = json.loads(network_to_json(generate_network(3, "ladder", rng_seed=1)))
    assert doc["version"] == 1
    assert doc["topology"] == "ladder"
    assert len(doc["r"]) == 3 and len(doc["c"]) == 3
    assert doc["input"] == 0 and doc["output"] == 2
