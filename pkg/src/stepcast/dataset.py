"""Training-sample construction: generate, simulate, normalize, persist.

A sample couples the gain-form modal description of a random RC network with
the golden transient of that network behind a step driver.  Feature transforms:
voltages map affinely to [0, 1] per waveform; decay rates and gains normalize
per sample by their maxima and sort by descending gain magnitude; time enters
as log10 of the dimensionless product t * p_max, centered and scaled by global
statistics collected over the whole training set.  The dimensionless time axis
is what makes samples of different absolute speed comparable, and the stats
needed to invert every transform ride along with each record.

The saturating driver is sized proportionally to its load (strength scales
with total capacitance times the fastest decay rate), the same invariance that
keeps networks with identical normalized modes identically distorted, so the
learning problem stays well-posed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .modal import RepeatedPoleUnsupported, analytic_step_response, decompose, to_gain_form
from .netgen import assemble_nodal, extract_transfer_function, generate_network
from .refsim import (
    DEVICE_LABELS,
    IDEAL_STEP,
    SATURATING,
    DriverModel,
    SimConfig,
    Waveform,
    simulate,
)

__all__ = [
    "DegenerateWaveform",
    "NonPositiveTime",
    "EmptyModes",
    "NormStats",
    "SampleRecord",
    "DatasetConfig",
    "normalize_waveform",
    "normalize_times",
    "shift_zero_times",
    "times_to_normalized",
    "normalize_modes",
    "size_driver",
    "build_dataset",
    "load_dataset",
    "load_manifest",
]

MANIFEST_NAME = "manifest.json"
DATASET_FORMAT_VERSION = 1


class DegenerateWaveform(ValueError):
    """Waveform span too small to normalize."""


class NonPositiveTime(ValueError):
    """Log-time transform needs strictly positive times."""


class EmptyModes(ValueError):
    """Mode normalization needs at least one mode."""


@dataclass(frozen=True)
class NormStats:
    """Everything needed to invert the feature transforms of one sample."""

    mu_t: float
    sigma_t: float
    v_min: float
    v_max: float
    p_max: float
    a_max: float

    def __post_init__(self):
        if self.sigma_t <= 0 or self.v_max <= self.v_min:
            raise ValueError("sigma_t must be positive and v_max > v_min")
        if self.p_max <= 0 or self.a_max <= 0:
            raise ValueError("p_max and a_max must be positive")


# ---------------------------------------------------------------------------
# feature transforms
# ---------------------------------------------------------------------------

def normalize_waveform(wave) -> tuple:
    """Affine map of the waveform values onto [0, 1]; returns (values, lo, hi)."""
    values = wave.values if isinstance(wave, Waveform) else np.asarray(wave, float)
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo < 1e-12:
        raise DegenerateWaveform(f"waveform span {hi - lo:.3e} is too small")
    return (values - lo) / (hi - lo), lo, hi


def denormalize_waveform(values, lo: float, hi: float) -> np.ndarray:
    return np.asarray(values) * (hi - lo) + lo


def normalize_times(times, mu_t: float, sigma_t: float) -> np.ndarray:
    """Centered, scaled log10 time: (log10 t - mu) / sigma."""
    t = np.asarray(times, dtype=np.float64)
    if np.any(t <= 0):
        raise NonPositiveTime("all times must be positive (shift the t=0 point first)")
    return (np.log10(t) - mu_t) / sigma_t


def shift_zero_times(times) -> np.ndarray:
    """Replace t=0 by half the first positive grid time, for the log transform."""
    t = np.asarray(times, dtype=np.float64).copy()
    zero = t == 0.0
    if zero.any():
        positive = t[t > 0]
        if positive.size == 0:
            raise NonPositiveTime("grid has no positive time point")
        t[zero] = positive.min() / 2.0
    return t


def times_to_normalized(times, p_max: float, mu_t: float, sigma_t: float) -> np.ndarray:
    """Dimensionless log-time feature: normalize log10(t * p_max) globally."""
    tau = shift_zero_times(times) * p_max
    return normalize_times(tau, mu_t, sigma_t)


def normalize_modes(pairs):
    """Per-sample mode normalization and canonical ordering.

    Decay rates scale by the fastest rate, gains by the largest magnitude;
    pairs sort by descending normalized |gain|, ties by larger rate first.
    """
    pairs = [(float(p), float(a)) for p, a in pairs]
    if not pairs:
        raise EmptyModes("no modes to normalize")
    if any(p <= 0 for p, _ in pairs):
        raise ValueError("decay rates must be positive")
    p_max = max(p for p, _ in pairs)
    a_max = max(abs(a) for _, a in pairs)
    if a_max == 0:
        raise ValueError("all gains are zero")
    norm = [(p / p_max, a / a_max) for p, a in pairs]
    norm.sort(key=lambda pa: (-abs(pa[1]), -pa[0]))
    return norm


def model_mode_features(pairs):
    """Sorted (rate/max_rate, gain) rows the surrogate conditions on.

    Same canonical order as normalize_modes, but gains stay in their physical
    sum-to-one scale so modal contributions superpose.
    """
    norm = normalize_modes(pairs)
    a_max = max(abs(a) for _, a in pairs)
    return [(p, a * a_max) for p, a in norm]


def elmore_delay(pairs) -> float:
    """First moment of the step response, sum of gain/rate over the modes."""
    return float(sum(a / p for p, a in pairs))


def size_driver(net, kind: str, pairs=None, vdd: float = 1.0,
                knee_frac: float = 0.2, drive_factor: float = 1.0) -> DriverModel:
    """Driver sized proportionally to its load.

    The available current charges the total capacitance to vdd in
    drive_factor^-1 Elmore delays.  Both quantities scale with the network's
    impedance level and time scale, so networks with identical normalized
    modes see identically distorted drive, keeping the learning problem
    well-posed; drive_factor sets how nonlinear the composite response is.
    """
    if kind == IDEAL_STEP:
        return DriverModel(kind=IDEAL_STEP, vdd=vdd)
    if pairs is None:
        H = extract_transfer_function(assemble_nodal(net))
        pairs = to_gain_form(decompose(H))
    sys = assemble_nodal(net)
    c_total = float(np.diag(sys.C).sum())
    strength = drive_factor * vdd * c_total / elmore_delay(pairs)
    return DriverModel(kind=SATURATING, vdd=vdd, strength=strength,
                       knee=knee_frac * vdd)


# ---------------------------------------------------------------------------
# sample records
# ---------------------------------------------------------------------------

@dataclass
class SampleRecord:
    order: int
    index: int
    split: str
    device_label: int
    dt: float
    n_points: int
    p_max: float
    a_max: float
    v_min: float
    v_max: float
    modes_p: list
    modes_a: list
    target: list
    driver_strength: float
    deviation_linear: float
    network_seed: int
    resamples: int

    def times(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dt

    def tprime(self, mu_t: float, sigma_t: float) -> np.ndarray:
        return times_to_normalized(self.times(), self.p_max, mu_t, sigma_t)

    def modes(self) -> np.ndarray:
        return np.column_stack([self.modes_p, self.modes_a])

    def raw_modes(self):
        return [(p * self.p_max, a * self.a_max)
                for p, a in zip(self.modes_p, self.modes_a)]

    def model_modes(self) -> np.ndarray:
        """(rate/max_rate, gain) rows: gains in their physical sum-to-one form."""
        return np.column_stack([self.modes_p, np.asarray(self.modes_a) * self.a_max])

    def gain_sum(self) -> float:
        return float(np.sum(self.modes_a) * self.a_max)

    def target_array(self) -> np.ndarray:
        return np.asarray(self.target, dtype=np.float64)

    def raw_target(self) -> np.ndarray:
        return denormalize_waveform(self.target_array(), self.v_min, self.v_max)

    def modal_target(self, vdd: float) -> np.ndarray:
        """Golden waveform in modal units: volts over vdd * sum(A).

        In these units the response of a unity-DC-gain system settles at 1 and
        superposes mode by mode, which is the scale the surrogate works in.
        """
        return self.raw_target() / (vdd * self.gain_sum())

    def norm_stats(self, mu_t: float, sigma_t: float) -> NormStats:
        return NormStats(mu_t=mu_t, sigma_t=sigma_t, v_min=self.v_min,
                         v_max=self.v_max, p_max=self.p_max, a_max=self.a_max)


@dataclass(frozen=True)
class DatasetConfig:
    orders: tuple = (1, 2, 3)
    per_order: int = 200
    seed: int = 0
    driver_kind: str = SATURATING
    vdd: float = 1.0
    knee_frac: float = 0.2
    drive_factor: float = 1.0
    points: int = 1024
    settle_factor: float = 8.0
    spread_cap: float = 400.0
    topologies: tuple = ("ladder", "tree")
    max_resamples: int = 200

    def __post_init__(self):
        if any(not 1 <= o <= 10 for o in self.orders):
            raise ValueError("orders must lie in 1..10")
        if self.driver_kind not in DEVICE_LABELS:
            raise ValueError(f"unknown driver kind {self.driver_kind!r}")


def _split_for_index(index: int) -> str:
    slot = index % 10
    if slot == 8:
        return "val"
    if slot == 9:
        return "test"
    return "train"


def _draw_sample(config: DatasetConfig, order: int, index: int):
    """Generate one valid sample; resamples degenerate draws deterministically."""
    ss = np.random.SeedSequence([config.seed, order, index, 0xD5])
    rng = np.random.default_rng(ss)
    for attempt in range(config.max_resamples):
        net_seed = int(rng.integers(0, 2**62))
        topology = config.topologies[int(rng.integers(len(config.topologies)))]
        net = generate_network(order, topology, rng_seed=net_seed)
        H = extract_transfer_function(assemble_nodal(net))
        decomp = decompose(H)
        try:
            pairs = to_gain_form(decomp)
        except (RepeatedPoleUnsupported, ValueError):
            continue
        rates = [p for p, _ in pairs]
        if min(abs(a) for _, a in pairs) < 1e-9:
            continue
        if max(rates) / min(rates) > config.spread_cap:
            continue

        driver = size_driver(net, config.driver_kind, pairs=pairs, vdd=config.vdd,
                             knee_frac=config.knee_frac,
                             drive_factor=config.drive_factor)
        # settle window plus slack for the driver-limited slew
        t_end = config.settle_factor / min(rates) + 2.0 * elmore_delay(pairs)
        dt = t_end / config.points
        if max(rates) * dt > 1.2:
            continue  # fastest mode must stay resolved on the grid
        cfg = SimConfig(t_end=t_end, dt=dt)
        golden = simulate(net, driver, cfg)
        try:
            target, v_min, v_max = normalize_waveform(golden)
        except DegenerateWaveform:
            continue

        linear = config.vdd * analytic_step_response(decomp, golden.times)
        deviation = float(np.max(np.abs(golden.values - linear)) / config.vdd)

        norm = normalize_modes(pairs)
        record = SampleRecord(
            order=order,
            index=index,
            split=_split_for_index(index),
            device_label=DEVICE_LABELS[config.driver_kind],
            dt=cfg.dt,
            n_points=len(golden),
            p_max=max(rates),
            a_max=max(abs(a) for _, a in pairs),
            v_min=v_min,
            v_max=v_max,
            modes_p=[p for p, _ in norm],
            modes_a=[a for _, a in norm],
            target=[float(v) for v in target],
            driver_strength=driver.strength,
            deviation_linear=deviation,
            network_seed=net_seed,
            resamples=attempt,
        )
        return record
    raise RuntimeError(
        f"could not draw a valid order-{order} sample in {config.max_resamples} tries"
    )


def build_dataset(out_dir, config: DatasetConfig) -> dict:
    """Generate all samples, compute global time stats, write ndjson + manifest.

    Deterministic per seed: each (order, index) pair owns a seed stream, and
    files are written in sorted order with canonical JSON.
    """
    os.makedirs(out_dir, exist_ok=True)
    records = {order: [] for order in config.orders}
    log_tau_sum = 0.0
    log_tau_sq = 0.0
    count = 0
    for order in config.orders:
        for index in range(config.per_order):
            rec = _draw_sample(config, order, index)
            records[order].append(rec)
            if rec.split == "train":
                log_tau = np.log10(shift_zero_times(rec.times()) * rec.p_max)
                log_tau_sum += float(log_tau.sum())
                log_tau_sq += float((log_tau**2).sum())
                count += len(log_tau)

    mu_t = log_tau_sum / count
    var = log_tau_sq / count - mu_t**2
    sigma_t = math.sqrt(max(var, 1e-30))

    for order in config.orders:
        path = os.path.join(out_dir, f"order_{order}.ndjson")
        with open(path, "w") as fh:
            for rec in records[order]:
                fh.write(json.dumps(asdict(rec), sort_keys=True))
                fh.write("\n")

    deviations = [rec.deviation_linear for order in config.orders
                  for rec in records[order]]
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": config.seed,
        "orders": list(config.orders),
        "per_order": config.per_order,
        "counts": {
            str(order): {
                split: sum(1 for r in records[order] if r.split == split)
                for split in ("train", "val", "test")
            }
            for order in config.orders
        },
        "mu_log_tau": mu_t,
        "sigma_log_tau": sigma_t,
        "driver": {
            "kind": config.driver_kind,
            "vdd": config.vdd,
            "knee_frac": config.knee_frac,
            "drive_factor": config.drive_factor,
        },
        "grid": {"points": config.points, "settle_factor": config.settle_factor},
        "spread_cap": config.spread_cap,
        "topologies": list(config.topologies),
        "resamples": {
            str(order): int(sum(r.resamples for r in records[order]))
            for order in config.orders
        },
        "deviation_from_linear": {
            "median": float(np.median(deviations)),
            "max": float(np.max(deviations)),
            "frac_ge_5pct": float(np.mean([d >= 0.05 for d in deviations])),
        },
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    with open(os.path.join(data_dir, MANIFEST_NAME)) as fh:
        return json.load(fh)


def load_dataset(data_dir, orders=None):
    """Read manifest + records; returns (manifest, {order: [SampleRecord]})."""
    manifest = load_manifest(data_dir)
    wanted = manifest["orders"] if orders is None else list(orders)
    out = {}
    for order in wanted:
        path = os.path.join(data_dir, f"order_{order}.ndjson")
        recs = []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    recs.append(SampleRecord(**json.loads(line)))
        out[order] = recs
    return manifest, out
