import math

import numpy as np
import pytest

from stepcast.modal import analytic_step_response, decompose, find_poles
from stepcast.netgen import PORT, RcNetwork, assemble_nodal, extract_transfer_function, generate_network
from stepcast.refsim import (
    DriverModel,
    NewtonDivergence,
    SimConfig,
    Waveform,
    measure_runtime,
    read_waveform_csv,
    simulate,
    simulate_with_stats,
    write_waveform_csv,
)


def unit_rc():
    return RcNetwork(
        topology="ladder",
        resistors=((PORT, 0, 1.0),),
        capacitors=((0, 1.0),),
        input_node=0,
        output_node=0,
    )


def tau_bounds(net):
    sys = assemble_nodal(net)
    eig = np.linalg.eigvals(sys.G / np.diag(sys.C)[:, None]).real
    return 1.0 / eig.max(), 1.0 / eig.min()


def golden_grid_config(net, steps=1200, refine=250.0):
    tau_min, _ = tau_bounds(net)
    dt = tau_min / refine
    return SimConfig(t_end=steps * dt, dt=dt)


# ---------------------------------------------------------------------------
# linear (ideal step) cases
# ---------------------------------------------------------------------------

def test_first_order_closed_form():
    cfg = SimConfig(t_end=8.0, dt=0.002)
    wave = simulate(unit_rc(), DriverModel(kind="ideal_step", vdd=1.0), cfg)
    expect = 1.0 - np.exp(-wave.times)
    assert np.max(np.abs(wave.values - expect)) < 1e-6


def test_matches_analytic_modal_response():
    for seed in (1, 5, 9):
        order = 1 + seed % 10
        net = generate_network(order, "tree" if seed % 2 else "ladder", rng_seed=seed)
        cfg = golden_grid_config(net)
        drv = DriverModel(kind="ideal_step", vdd=1.0)
        wave = simulate(net, drv, cfg)
        H = extract_transfer_function(assemble_nodal(net))
        ref = analytic_step_response(decompose(H), wave.times)
        assert np.max(np.abs(wave.values - ref)) < 1e-6


def test_second_order_convergence():
    net = unit_rc()
    drv = DriverModel(kind="ideal_step")

    def max_err(dt):
        cfg = SimConfig(t_end=4.0, dt=dt)
        w = simulate(net, drv, cfg)
        return np.max(np.abs(w.values - (1 - np.exp(-w.times))))

    ratio = max_err(0.04) / max_err(0.02)
    assert 3.0 < ratio < 5.5


# ---------------------------------------------------------------------------
# saturating driver
# ---------------------------------------------------------------------------

def test_scalar_saturating_matches_adaptive_integrator():
    from scipy.integrate import solve_ivp
    from scipy.optimize import brentq

    net = RcNetwork(
        topology="ladder",
        resistors=((PORT, 0, 2.0),),
        capacitors=((0, 1.0),),
        input_node=0,
        output_node=0,
    )
    drv = DriverModel(kind="saturating", vdd=1.0, strength=0.6, knee=0.2)
    g0 = 0.5

    def port_voltage(v1):
        return brentq(lambda u: drv.current(u) - g0 * (u - v1), -1.0, 2.0, xtol=1e-14)

    def rhs(_t, y):
        u = port_voltage(y[0])
        return [g0 * (u - y[0])]

    cfg = SimConfig(t_end=12.0, dt=0.004)
    wave = simulate(net, drv, cfg)
    sol = solve_ivp(rhs, (0, 12.0), [0.0], t_eval=wave.times,
                    rtol=1e-11, atol=1e-13, method="LSODA")
    assert np.max(np.abs(wave.values - sol.y[0])) < 1e-5


def test_saturating_settles_at_vdd():
    net = generate_network(3, "ladder", rng_seed=4)
    _, tau_max = tau_bounds(net)
    drv = DriverModel(kind="saturating", vdd=1.2, strength=1.2 * 3e-13 / tau_max, knee=0.24)
    cfg = SimConfig(t_end=60 * tau_max, dt=tau_max / 40)
    wave = simulate(net, drv, cfg)
    assert wave.values[-1] == pytest.approx(1.2, rel=1e-3)


def test_monotone_charging_and_bounds():
    for seed in (2, 3):
        net = generate_network(4, "ladder", rng_seed=seed)
        tau_min, tau_max = tau_bounds(net)
        drv = DriverModel(kind="saturating", vdd=1.0, strength=1e-4, knee=0.2)
        cfg = SimConfig(t_end=10 * tau_max, dt=min(tau_max / 200, tau_min))
        wave = simulate(net, drv, cfg)
        assert np.all(np.diff(wave.values) >= -1e-12)
        assert np.all(wave.values >= -1e-9)
        assert np.all(wave.values <= 1.0 + 1e-9)


def test_newton_residual_decreases_and_iteration_counts():
    net = generate_network(5, "ladder", rng_seed=8)
    tau_min, tau_max = tau_bounds(net)
    drv = DriverModel(kind="saturating", vdd=1.0, strength=2e-4, knee=0.2)
    cfg = SimConfig(t_end=4 * tau_max, dt=tau_max / 100)
    wave, stats = simulate_with_stats(net, drv, cfg)
    assert stats.steps == cfg.steps
    assert len(stats.newton_iterations) == cfg.steps
    assert all(1 <= it <= cfg.newton_max_iter for it in stats.newton_iterations)
    for hist in stats.residual_histories:
        assert all(b < a or a < 1e-12 for a, b in zip(hist, hist[1:]))


def test_newton_divergence_raised():
    net = generate_network(2, "ladder", rng_seed=1)
    drv = DriverModel(kind="saturating", vdd=1.0, strength=1e-3, knee=0.01)
    cfg = SimConfig(t_end=1e-9, dt=1e-12, newton_max_iter=1, newton_tol=1e-15)
    with pytest.raises(NewtonDivergence):
        simulate(net, drv, cfg)


# ---------------------------------------------------------------------------
# runtime measurement / stats
# ---------------------------------------------------------------------------

def test_runtime_order_scaling():
    drv = DriverModel(kind="ideal_step")
    cfg = SimConfig(t_end=200e-12, dt=1e-12)
    t1 = measure_runtime(generate_network(1, "ladder", 3), drv, cfg, repetitions=3)
    t10 = measure_runtime(generate_network(10, "ladder", 3), drv, cfg, repetitions=3)
    assert t10 > t1


def test_measure_runtime_validates_repetitions():
    with pytest.raises(ValueError):
        measure_runtime(unit_rc(), DriverModel(), SimConfig(t_end=1e-12, dt=1e-12), repetitions=2)


def test_solve_timer_accumulates():
    net = generate_network(6, "ladder", rng_seed=2)
    cfg = golden_grid_config(net, steps=200)
    _, stats = simulate_with_stats(net, DriverModel(kind="ideal_step"), cfg)
    assert stats.solve_seconds > 0
    assert stats.solve_seconds_per_step > 0
    assert stats.wall_seconds >= stats.solve_seconds


# ---------------------------------------------------------------------------
# waveform CSV
# ---------------------------------------------------------------------------

def test_waveform_csv_roundtrip(tmp_path):
    cfg = SimConfig(t_end=1.0, dt=0.01)
    wave = simulate(unit_rc(), DriverModel(), cfg)
    path = tmp_path / "wave.csv"
    write_waveform_csv(wave, path)
    back = read_waveform_csv(path)
    # >= 12 significant digits survive the text round trip
    assert np.allclose(back.times, wave.times, rtol=1e-12, atol=0)
    assert np.allclose(back.values, wave.values, rtol=1e-12, atol=1e-300)
    header = path.read_text().splitlines()[0]
    assert header == "time_s,voltage_v"


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(times=np.array([0.0, 1.0]), values=np.array([0.0]))
    with pytest.raises(ValueError):
        Waveform(times=np.array([0.5, 1.0]), values=np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        Waveform(times=np.array([0.0, 0.0]), values=np.array([0.0, 1.0]))
