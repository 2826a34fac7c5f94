"""Golden-reference transient simulator for nonlinear-driver + RC networks.

Trapezoidal (one-step A-stable) integration with a Newton-Raphson solve at
every step.  The per-iteration linear solve is a dense LU with partial
pivoting written in plain Python floats on purpose: it is the measurable
cubic-cost baseline that the learned surrogate's linear-pass inference is
compared against, and its per-step solve time is reported separately from
wall time so the cost trend is visible at small orders.

The saturating driver attaches at the source port, whose node carries no
capacitor; its KCL row is algebraic and is enforced at the end of each step
(standard index-1 treatment).  The ideal-step driver forces the port voltage
directly, which makes the system linear; Newton then settles in two
iterations but the solver still refactors every iteration, keeping the
baseline honest.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .netgen import PORT, RcNetwork, assemble_nodal

__all__ = [
    "DriverModel",
    "SimConfig",
    "Waveform",
    "SimStats",
    "NewtonDivergence",
    "SingularJacobian",
    "simulate",
    "simulate_with_stats",
    "measure_runtime",
    "write_waveform_csv",
    "read_waveform_csv",
]

IDEAL_STEP = "ideal_step"
SATURATING = "saturating"
DEVICE_LABELS = {IDEAL_STEP: 0, SATURATING: 1}


class NewtonDivergence(RuntimeError):
    """Newton iteration failed to converge within its budget."""


class SingularJacobian(RuntimeError):
    """LU factorization hit a zero pivot."""


@dataclass(frozen=True)
class DriverModel:
    """Step-input driver: ideal voltage step or a saturating current source.

    The saturating driver injects i = strength * tanh((vdd - v)/knee) into the
    port, a smooth monotone stand-in for a pull-up stage; it is continuously
    differentiable everywhere, as Newton requires.
    """

    kind: str = IDEAL_STEP
    vdd: float = 1.0
    strength: float = 1e-3
    knee: float = 0.2

    def __post_init__(self):
        if self.kind not in DEVICE_LABELS:
            raise ValueError(f"unknown driver kind {self.kind!r}")
        if self.vdd <= 0 or self.strength <= 0 or self.knee <= 0:
            raise ValueError("vdd, strength and knee must be positive")

    @property
    def device_label(self) -> int:
        return DEVICE_LABELS[self.kind]

    def current(self, v: float) -> float:
        return self.strength * math.tanh((self.vdd - v) / self.knee)

    def current_derivative(self, v: float) -> float:
        c = math.cosh((self.vdd - v) / self.knee)
        return -self.strength / (self.knee * c * c)


@dataclass(frozen=True)
class SimConfig:
    t_end: float = 20e-9
    dt: float = 10e-12
    newton_tol: float = 1e-9
    newton_max_iter: int = 50

    def __post_init__(self):
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        if not 0 < self.dt <= self.t_end:
            raise ValueError("dt must satisfy 0 < dt <= t_end")
        if self.newton_tol <= 0 or self.newton_max_iter < 1:
            raise ValueError("newton_tol must be positive, max_iter >= 1")

    @property
    def steps(self) -> int:
        return max(1, int(round(self.t_end / self.dt)))


@dataclass(frozen=True)
class Waveform:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1 or len(t) == 0:
            raise ValueError("times and values must be matching 1-D arrays")
        if t[0] != 0.0:
            raise ValueError("waveform must start at t = 0")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.times)


@dataclass
class SimStats:
    steps: int = 0
    newton_iterations: list = field(default_factory=list)
    residual_histories: list = field(default_factory=list)
    solve_seconds: float = 0.0
    wall_seconds: float = 0.0

    @property
    def solve_seconds_per_step(self) -> float:
        return self.solve_seconds / max(1, self.steps)


def _lu_solve(M, x):
    """In-place dense LU with partial pivoting; returns the solution list.

    Plain Python arithmetic: this is the documented O(n^3)-per-iteration
    baseline and the quantity timed as "solve" in runtime reports.
    """
    n = len(M)
    for k in range(n):
        p = k
        mx = abs(M[k][k])
        for i in range(k + 1, n):
            v = abs(M[i][k])
            if v > mx:
                mx = v
                p = i
        if mx < 1e-300:
            raise SingularJacobian(f"zero pivot at column {k}")
        if p != k:
            M[k], M[p] = M[p], M[k]
            x[k], x[p] = x[p], x[k]
        Mk = M[k]
        akk = Mk[k]
        for i in range(k + 1, n):
            Mi = M[i]
            f = Mi[k] / akk
            for j in range(k + 1, n):
                Mi[j] -= f * Mk[j]
            x[i] -= f * x[k]
    for i in range(n - 1, -1, -1):
        Mi = M[i]
        s = x[i]
        for j in range(i + 1, n):
            s -= Mi[j] * x[j]
        x[i] = s / Mi[i]
    return x


def _consistent_port_voltage(driver: DriverModel, g0: float, v_root: float) -> float:
    """Solve driver current balance i(u) = g0*(u - v_root) for the port node.

    The driver current is decreasing in u and the resistor term increasing,
    so the root is unique; safeguarded Newton from bisection brackets.
    """
    lo, hi = min(v_root, 0.0), driver.vdd
    u = 0.5 * (lo + hi)
    for _ in range(200):
        f = driver.current(u) - g0 * (u - v_root)
        if f > 0:
            lo = u
        else:
            hi = u
        df = driver.current_derivative(u) - g0
        step = f / df
        nxt = u - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - u) < 1e-16 * max(1.0, abs(u)):
            return nxt
        u = nxt
    return u


def _run(net: RcNetwork, driver: DriverModel, cfg: SimConfig, collect: bool):
    sys = assemble_nodal(net)
    n = net.order
    dt = cfg.dt
    steps = cfg.steps
    tol = cfg.newton_tol
    max_iter = cfg.newton_max_iter
    vdd = driver.vdd
    out = net.output_node

    G = [list(map(float, row)) for row in sys.G]
    two_c_dt = [2.0 * float(c) / dt for c in np.diag(sys.C)]
    b = [float(x) for x in sys.input_vector]
    root_nodes = [i for i, bi in enumerate(b) if bi != 0.0]
    root = root_nodes[0]
    g0 = b[root]

    nonlinear = driver.kind == SATURATING
    m = n + 1 if nonlinear else n  # unknowns: [port?, internal nodes]

    # Base Jacobian for the internal rows: 2C/dt + G (constant).
    base = [[0.0] * m for _ in range(m)]
    off = 1 if nonlinear else 0
    for i in range(n):
        row = base[i + off]
        Gi = G[i]
        for j in range(n):
            row[j + off] = Gi[j]
        row[i + off] += two_c_dt[i]
    if nonlinear:
        for i in range(n):
            base[i + off][0] = -b[i]  # port coupling column
        base[0][off + root] = g0  # port row: resistor to the root node

    stats = SimStats(steps=steps) if collect else None
    values = [0.0]

    # State at t=0: network at rest; the saturating driver's algebraic port
    # node jumps to its consistent value at switch-on.
    v = [0.0] * n
    if nonlinear:
        u0 = _consistent_port_voltage(driver, g0, 0.0)
        x = [u0] + v
    else:
        x = list(v)
    u_prev = x[0] if nonlinear else vdd

    wall0 = time.perf_counter()
    solve_seconds = 0.0
    current = driver.current
    dcurrent = driver.current_derivative
    perf = time.perf_counter

    for _ in range(steps):
        vk = x[off:]
        uk = u_prev
        # warm start from the previous state
        res_hist = [] if collect else None
        converged = False
        for _it in range(max_iter):
            # residual
            R = [0.0] * m
            u = x[0] if nonlinear else vdd
            for i in range(n):
                Gi = G[i]
                acc = two_c_dt[i] * (x[i + off] - vk[i]) - b[i] * (u + uk)
                for j in range(n):
                    acc += Gi[j] * (x[j + off] + vk[j])
                R[i + off] = acc
            if nonlinear:
                R[0] = current(u) - g0 * (u - x[off + root])
            if collect:
                res_hist.append(max(abs(r) for r in R))

            J = [row[:] for row in base]
            if nonlinear:
                J[0][0] = dcurrent(u) - g0
            rhs = [-r for r in R]
            t0 = perf()
            delta = _lu_solve(J, rhs)
            solve_seconds += perf() - t0

            mx = 0.0
            for i in range(m):
                x[i] += delta[i]
                a = abs(delta[i])
                if a > mx:
                    mx = a
            if mx < tol:
                converged = True
                break
        if not converged:
            raise NewtonDivergence(
                f"Newton did not reach {tol} V in {max_iter} iterations "
                f"(last update {mx:.3e} V)"
            )
        if collect:
            stats.newton_iterations.append(_it + 1)
            stats.residual_histories.append(res_hist)
        u_prev = x[0] if nonlinear else vdd
        values.append(x[off + out])

    if collect:
        stats.solve_seconds = solve_seconds
        stats.wall_seconds = time.perf_counter() - wall0
    times = np.arange(steps + 1) * dt
    wave = Waveform(times=times, values=np.array(values))
    return wave, stats


def simulate(net: RcNetwork, driver: DriverModel, cfg: SimConfig) -> Waveform:
    """Transient response of the driver + network composite at the output node."""
    wave, _ = _run(net, driver, cfg, collect=False)
    return wave


def simulate_with_stats(net: RcNetwork, driver: DriverModel, cfg: SimConfig):
    """Like simulate, also returning Newton iteration counts and solve timing."""
    return _run(net, driver, cfg, collect=True)


def measure_runtime(net: RcNetwork, driver: DriverModel, cfg: SimConfig,
                    repetitions: int = 5) -> float:
    """Mean wall time of simulate() over `repetitions` runs after one warm-up."""
    if repetitions < 3:
        raise ValueError("need at least 3 repetitions")
    simulate(net, driver, cfg)
    total = 0.0
    for _ in range(repetitions):
        t0 = time.perf_counter()
        simulate(net, driver, cfg)
        total += time.perf_counter() - t0
    return total / repetitions


# ---------------------------------------------------------------------------
# Waveform CSV
# ---------------------------------------------------------------------------

def write_waveform_csv(wave: Waveform, path) -> None:
    with open(path, "w") as fh:
        fh.write("time_s,voltage_v\n")
        for t, v in zip(wave.times, wave.values):
            fh.write(f"{t:.15g},{v:.15g}\n")


def read_waveform_csv(path) -> Waveform:
    times, values = [], []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "time_s,voltage_v":
            raise ValueError(f"unexpected waveform CSV header {header!r}")
        for line in fh:
            if not line.strip():
                continue
            t, v = line.split(",")
            times.append(float(t))
            values.append(float(v))
    return Waveform(times=np.array(times), values=np.array(values))
