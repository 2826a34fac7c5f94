import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stepcast.modal import (
    ComplexPoleUnsupported,
    ModalDecomposition,
    Mode,
    NotStrictlyProper,
    Polynomial,
    RepeatedPoleUnsupported,
    TransferFunction,
    analytic_step_response,
    decompose,
    decomposition_from_json,
    decomposition_to_json,
    find_poles,
    poly_derivative,
    poly_eval,
    reconstruct,
    tf_from_json,
    tf_to_json,
    to_gain_form,
)


def tf(num, den):
    return TransferFunction(Polynomial(num), Polynomial(den))


# ---------------------------------------------------------------------------
# poly_eval / poly_derivative
# ---------------------------------------------------------------------------

def test_eval_constant_term():
    assert poly_eval(Polynomial([1, 3, 1]), 0) == 1


def test_eval_root():
    assert poly_eval(Polynomial([1, 1]), -1) == 0


def test_eval_at_imaginary_unit():
    # independent arithmetic: 2 + 0*i + i^2 = 2 - 1 = 1
    assert poly_eval(Polynomial([2, 0, 1]), 1j) == pytest.approx(1 + 0j)


def test_derivative_power_rule():
    assert np.array_equal(poly_derivative(Polynomial([1, 3, 1])).coeffs, [3, 2])


def test_derivative_of_constant_is_zero_poly():
    d = poly_derivative(Polynomial([5]))
    assert d.degree == 0 and d.coeffs[0] == 0


def test_derivative_of_cube():
    assert np.array_equal(poly_derivative(Polynomial([0, 0, 0, 1])).coeffs, [0, 0, 3])


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(-3, 3))
def test_eval_matches_direct_power_sum(coeffs, x):
    p = Polynomial(coeffs)
    direct = sum(c * x**k for k, c in enumerate(p.coeffs))
    assert poly_eval(p, x) == pytest.approx(direct, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# find_poles
# ---------------------------------------------------------------------------

def test_single_real_pole():
    [(p, k)] = find_poles(Polynomial([1, 1]))
    assert k == 1
    assert p == pytest.approx(-1)


def test_quadratic_roots_against_formula():
    # independent oracle: quadratic formula for s^2 + 3s + 1
    r1 = (-3 + math.sqrt(5)) / 2
    r2 = (-3 - math.sqrt(5)) / 2
    poles = find_poles(Polynomial([1, 3, 1]))
    got = sorted(p.real for p, _ in poles)
    assert got == pytest.approx(sorted([r1, r2]), rel=1e-12)


def test_double_root_merged():
    [(p, k)] = find_poles(Polynomial([1, 2, 1]))
    assert k == 2
    assert p == pytest.approx(-1, rel=1e-9)


def test_triple_root_merged():
    # (s+2)^3 = 8 + 12 s + 6 s^2 + s^3
    [(p, k)] = find_poles(Polynomial([8, 12, 6, 1]))
    assert k == 3
    assert p == pytest.approx(-2, rel=1e-7)


def test_multiplicity_sum_equals_degree():
    den = Polynomial([6, 11, 6, 1])  # (s+1)(s+2)(s+3)
    poles = find_poles(den)
    assert sum(k for _, k in poles) == den.degree


def test_complex_conjugate_pair():
    poles = find_poles(Polynomial([2, 2, 1]))  # s^2+2s+2 -> -1 +/- i
    got = sorted((p for p, _ in poles), key=lambda z: z.imag)
    assert got[0] == pytest.approx(-1 - 1j, rel=1e-10)
    assert got[1] == pytest.approx(-1 + 1j, rel=1e-10)


def test_wide_magnitude_scale():
    # roots at -1e9 and -1e12: coefficient scaling must not break convergence
    den = Polynomial(np.convolve([1e9, 1], [1e12, 1]))
    poles = sorted(p.real for p, _ in find_poles(den))
    assert poles[0] == pytest.approx(-1e12, rel=1e-8)
    assert poles[1] == pytest.approx(-1e9, rel=1e-8)


# ---------------------------------------------------------------------------
# decompose
# ---------------------------------------------------------------------------

def test_unit_first_order():
    d = decompose(tf([1], [1, 1]))
    assert len(d.modes) == 1
    m = d.modes[0]
    assert m.pole == pytest.approx(-1) and m.residue == pytest.approx(1) and m.j == 1


def cover_up_residue(H, pole, eps=1e-7):
    # independent oracle: numerical limit of (s - p) H(s) as s -> p
    s = pole + eps
    return (s - pole) * H(s)


def test_two_pole_residues_match_cover_up():
    H = tf([1], np.convolve([1, 1], [2, 1]))  # 1/((s+1)(s+2))
    d = decompose(H)
    by_pole = {round(m.pole.real): m.residue for m in d.modes}
    assert by_pole[-1] == pytest.approx(cover_up_residue(H, -1.0), rel=1e-6)
    assert by_pole[-2] == pytest.approx(cover_up_residue(H, -2.0), rel=1e-6)
    assert by_pole[-1] == pytest.approx(1.0, rel=1e-9)
    assert by_pole[-2] == pytest.approx(-1.0, rel=1e-9)


def test_double_pole_residues():
    d = decompose(tf([1], [1, 2, 1]))  # 1/(s+1)^2
    by_j = {m.j: m for m in d.modes}
    assert by_j[1].residue == pytest.approx(0, abs=1e-9)
    assert by_j[2].residue == pytest.approx(1, rel=1e-9)
    assert by_j[2].pole == pytest.approx(-1, rel=1e-9)


def test_not_strictly_proper_rejected():
    with pytest.raises(NotStrictlyProper):
        tf([1, 1], [1, 1])


def _probe_error(H, d, rng, n_probes=100):
    poles = np.array([m.pole for m in d.modes])
    scale = max(1.0, np.max(np.abs(poles)))
    errs = []
    k = 0
    while k < n_probes:
        s = complex(rng.uniform(-2, 2), rng.uniform(-2, 2)) * scale
        if np.min(np.abs(s - poles)) < 1e-3 * scale:
            continue
        h = H(s)
        errs.append(abs(h - reconstruct(d, s)) / abs(h))
        k += 1
    return max(errs)


def spaced_poles(rng, n, lo=0.15, hi=0.6):
    # geometric gaps >= ~16% keep the modal representation well-conditioned
    steps = rng.uniform(lo, hi, n)
    return -np.exp(np.cumsum(steps) - 1.5)


def rational_from_modes(poles, residues):
    den = np.array([1.0])
    for p in poles:
        den = np.convolve(den, [-p, 1.0])
    num = np.zeros(len(poles))
    for i, r in enumerate(residues):
        part = np.array([1.0])
        for j, p in enumerate(poles):
            if j != i:
                part = np.convolve(part, [-p, 1.0])
        num = num + r * part
    return tf(num, den)


def test_reconstruction_random_simple_poles():
    rng = np.random.default_rng(7)
    for _ in range(25):
        n = int(rng.integers(1, 11))
        poles = spaced_poles(rng, n)
        residues = rng.uniform(0.1, 1.0, n) * rng.choice([-1, 1], n)
        H = rational_from_modes(poles, residues)
        d = decompose(H)
        assert _probe_error(H, d, rng) < 1e-9


def test_reconstruction_repeated_poles():
    rng = np.random.default_rng(11)
    for _ in range(25):
        p1 = -float(np.exp(rng.uniform(-1, 1)))
        p2 = -float(np.exp(rng.uniform(-1, 1)))
        if abs(p1 - p2) < 0.2:
            p2 -= 0.5
        mult = int(rng.integers(2, 4))
        den = np.array([1.0])
        for _ in range(mult):
            den = np.convolve(den, [-p1, 1.0])
        den = np.convolve(den, [-p2, 1.0])
        num = rng.uniform(-1, 1, mult)
        H = tf(num, den)
        d = decompose(H)
        assert sum(1 for _ in d.modes) == mult + 1
        assert _probe_error(H, d, rng) < 1e-7


def test_degree_bookkeeping():
    H = tf([1, 2], [6, 11, 6, 1])
    d = decompose(H)
    assert d.source_order == 3
    assert len(d.modes) == 3


# ---------------------------------------------------------------------------
# to_gain_form
# ---------------------------------------------------------------------------

def test_gain_form_single_mode():
    d = decompose(tf([1], [1, 1]))
    [(p, a)] = to_gain_form(d)
    assert p == pytest.approx(1) and a == pytest.approx(1)


def test_gain_form_two_modes_sum_is_dc_gain():
    H = tf([1], np.convolve([1, 1], [2, 1]))
    pairs = to_gain_form(decompose(H))
    total = sum(a for _, a in pairs)
    assert total == pytest.approx(H(0.0).real, rel=1e-12)
    assert total == pytest.approx(0.5, rel=1e-9)
    (p1, a1), (p2, a2) = sorted(pairs)
    assert (p1, a1) == (pytest.approx(1.0), pytest.approx(1.0))
    assert (p2, a2) == (pytest.approx(2.0), pytest.approx(-0.5))


def test_gain_form_ladder_sums_to_one():
    H = tf([1], [1, 3, 1])  # 2-stage unity-DC ladder
    pairs = to_gain_form(decompose(H))
    assert sum(a for _, a in pairs) == pytest.approx(1.0, abs=1e-9)


def test_gain_form_rejects_repeated():
    with pytest.raises(RepeatedPoleUnsupported):
        to_gain_form(decompose(tf([1], [1, 2, 1])))


def test_gain_form_rejects_complex():
    with pytest.raises(ComplexPoleUnsupported):
        to_gain_form(decompose(tf([1], [2, 2, 1])))


# ---------------------------------------------------------------------------
# analytic_step_response
# ---------------------------------------------------------------------------

def test_step_response_starts_at_zero():
    d = decompose(tf([1], [1, 1]))
    v = analytic_step_response(d, [0.0, 1.0])
    assert v[0] == pytest.approx(0.0, abs=1e-12)


def test_step_response_reaches_dc_gain():
    d = decompose(tf([1], [1, 1]))
    v = analytic_step_response(d, [50.0])
    assert v[0] == pytest.approx(1.0, abs=1e-12)


def test_step_response_single_exponential_value():
    d = decompose(tf([1], [1, 1]))
    v = analytic_step_response(d, [1.0])
    assert v[0] == pytest.approx(1 - math.exp(-1), rel=1e-12)


def test_step_response_double_pole_closed_form():
    # 1/(s+1)^2 steps to 1 - e^-t - t e^-t
    d = decompose(tf([1], [1, 2, 1]))
    t = np.linspace(0, 8, 50)
    expect = 1 - np.exp(-t) - t * np.exp(-t)
    assert analytic_step_response(d, t) == pytest.approx(expect, abs=1e-9)


def test_step_response_complex_pair_is_real():
    d = decompose(tf([2], [2, 2, 1]))
    t = np.linspace(0, 10, 64)
    v = analytic_step_response(d, t)
    # oscillatory but real; settles at H(0) = 1
    assert v[-1] == pytest.approx(1.0, abs=1e-3)


def test_step_response_rejects_bad_grid():
    d = decompose(tf([1], [1, 1]))
    with pytest.raises(ValueError):
        analytic_step_response(d, [1.0, 0.5])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_step_response_matches_residue_form_derivative(order, seed):
    # d/dt of the step response equals sum r_i e^{p_i t}; check by finite diff
    rng = np.random.default_rng(seed)
    poles = -np.sort(np.exp(rng.uniform(-0.5, 1.0, order)))[::-1]
    if order > 1 and np.min(np.abs(np.diff(poles)) / np.abs(poles[1:])) < 1e-2:
        return  # only well-separated poles are in this property's scope
    den = np.array([1.0])
    for p in poles:
        den = np.convolve(den, [-p, 1.0])
    H = tf(rng.uniform(0.2, 1.0, order), den)
    d = decompose(H)
    t0, h = 0.7, 1e-6
    v = analytic_step_response(d, [t0 - h, t0 + h])
    slope = (v[1] - v[0]) / (2 * h)
    impulse = sum(m.residue * np.exp(m.pole * t0) for m in d.modes).real
    assert slope == pytest.approx(impulse, rel=1e-4, abs=1e-8)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def test_tf_json_roundtrip():
    H = tf([1.0, 0.25], [2.0, 3.0, 1.0])
    H2 = tf_from_json(tf_to_json(H))
    assert np.array_equal(H.num.coeffs, H2.num.coeffs)
    assert np.array_equal(H.den.coeffs, H2.den.coeffs)


def test_decomposition_json_roundtrip():
    d = decompose(tf([1], [2, 3, 1]))
    d2 = decomposition_from_json(decomposition_to_json(d))
    assert d2.modes == d.modes


def test_tf_json_rejects_unknown_version():
    with pytest.raises(ValueError):
        tf_from_json('{"version": 99, "num": [1], "den": [1, 1]}')
