"""Training loops: base predictor fit and the iterative residual cascade.

The base module fits order-1 golden waveforms by MSE.  Residual module j then
trains on order-j data: the frozen base predictor is summed over the sample's
j modes, previously trained correctors are added, and the module regresses the
remaining error from (j, mode_j, mode_{j-1}, t).  AdamW with decoupled weight
decay drives every fit; the best-validation-epoch parameters are kept.

Runs are deterministic for a fixed seed: data order, time-point subsampling
and parameter init all come from per-module seed streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from .autodiff import Tensor
from .surrogate import (
    AttentionRegressorConfig,
    BasePredictor,
    ResidualModule,
    SurrogateBundle,
    init_base_params,
    init_residual_params,
    pair_feature_rows,
)

__all__ = ["TrainConfig", "NonFiniteLoss", "train_base", "train_residual_cascade",
           "train_bundle"]


class NonFiniteLoss(RuntimeError):
    """Loss became NaN/inf; aborting with diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    batch_samples: int = 32
    time_points: int = 128
    max_epochs: int = 200
    patience: int = 20
    steps_per_epoch: int = 0  # 0: one pass over the records per epoch
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


class AdamW:
    """Adaptive moments with decoupled weight decay on a parameter dict."""

    def __init__(self, params: dict, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self, params: dict):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for k, tensor in params.items():
            g = tensor.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            tensor.data -= cfg.learning_rate * (update + cfg.weight_decay * tensor.data)


def _clip_gradients(params: dict, max_norm: float):
    if not max_norm:
        return
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale


def _records_by_split(records):
    out = {"train": [], "val": [], "test": []}
    for rec in records:
        out[rec.split].append(rec)
    return out


def _prepare(records, mu_t, sigma_t, vdd):
    """Stack per-record arrays shared by both module kinds (modal units)."""
    tprime = np.stack([rec.tprime(mu_t, sigma_t) for rec in records])
    target = np.stack([rec.modal_target(vdd) for rec in records])
    modes = [rec.model_modes() for rec in records]
    labels = np.array([rec.device_label for rec in records], dtype=np.intp)
    return tprime, target, modes, labels


def _subsample(rng, tprime, target, rows, n_points):
    cols = np.stack([
        rng.choice(tprime.shape[1], size=n_points, replace=False) for _ in rows
    ])
    r = rows[:, None]
    return tprime[r, cols], target[r, cols]


def _fit_module(module, make_inputs, train_rows, val_inputs, cfg, rng):
    """Shared epoch loop: minibatch MSE, early stopping on validation MSE."""
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in module.params.items()}
    opt = AdamW(params, cfg)
    history = {"train_loss": [], "val_loss": []}
    best = {k: t.data.copy() for k, t in params.items()}
    best_val = math.inf
    stale = 0

    def val_loss():
        flat = {k: t.data for k, t in params.items()}
        return float(np.asarray(module.loss(flat, val_inputs)))

    n_rows = len(train_rows)
    steps = cfg.steps_per_epoch or max(1, math.ceil(n_rows / cfg.batch_samples))
    for epoch in range(cfg.max_epochs):
        epoch_losses = []
        for _step in range(steps):
            rows = train_rows[rng.integers(0, n_rows, size=min(cfg.batch_samples, n_rows))]
            inputs = make_inputs(rows, rng)
            loss = module.loss(params, inputs)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLoss(
                    f"loss {value} at epoch {epoch} (module {type(module).__name__})"
                )
            for t in params.values():
                t.zero_grad()
            loss.backward()
            _clip_gradients(params, cfg.grad_clip)
            opt.step(params)
            epoch_losses.append(value)
        vl = val_loss()
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_loss"].append(vl)
        if vl < best_val * (1 - 1e-6):
            best_val = vl
            best = {k: t.data.copy() for k, t in params.items()}
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break
    module.params = best
    history["best_val_loss"] = best_val
    history["epochs"] = len(history["train_loss"])
    return history


class _BasisSampler:
    """Draws (rate, gain, query-time) triples for base-predictor training.

    An order-1 record supplies the canonical single-mode curve u(tau) per
    device kind.  A mode (p, A) of any system contributes A * u(p * tau) to
    the modal-unit response, so the base predictor trains on exactly that
    family: gains scale the curve, rates stretch it along dimensionless time.
    The query range spans what higher-order systems ask for, where slow modes
    sit hundreds of times below the sample's fastest rate.
    """

    def __init__(self, records, mu_t, sigma_t, vdd, rate_floor=1.0 / 400.0):
        self.mu_t = mu_t
        self.sigma_t = sigma_t
        self.rate_floor = rate_floor
        self.tau = []      # dimensionless grids (0 shifted for the log map)
        self.curve = []    # modal-unit golden curves
        self.tau_hi = []
        self.labels = np.array([rec.device_label for rec in records], dtype=np.intp)
        for rec in records:
            if rec.order != 1:
                raise ValueError("base training expects order-1 records")
            tau = ds.shift_zero_times(rec.times()) * rec.p_max
            self.tau.append(tau)
            self.curve.append(rec.modal_target(vdd))
            self.tau_hi.append(tau[-1] / self.rate_floor)

    def draw(self, rows, rng, n_points):
        b = len(rows)
        rates = np.where(rng.random(b) < 0.2, 1.0,
                         np.exp(rng.uniform(np.log(self.rate_floor), 0.0, b)))
        mags = np.where(rng.random(b) < 0.2, 1.0, rng.uniform(0.02, 1.2, b))
        signs = np.where(rng.random(b) < 0.25, -1.0, 1.0)
        gains = signs * mags
        tps = np.empty((b, n_points))
        tgs = np.empty((b, n_points))
        for i, row in enumerate(rows):
            tau_grid = self.tau[row]
            half = n_points // 2
            cols = rng.choice(len(tau_grid), size=half, replace=False)
            wide = np.exp(rng.uniform(np.log(tau_grid[0]),
                                      np.log(self.tau_hi[row]),
                                      n_points - half))
            tau_q = np.concatenate([tau_grid[cols], wide])
            tgs[i] = gains[i] * np.interp(rates[i] * tau_q,
                                          self.tau[row], self.curve[row])
            tps[i] = (np.log10(tau_q) - self.mu_t) / self.sigma_t
        return rates, gains, self.labels[rows], tps, tgs


def train_base(records, manifest, model_cfg: AttentionRegressorConfig,
               cfg: TrainConfig) -> tuple:
    """Fit the single-mode base predictor on the order-1 stratum.

    Training examples are scaled/stretched views of the order-1 golden curves,
    covering the (rate, gain) ranges that higher-order cascades feed the base
    predictor at inference.
    """
    if not records:
        raise ValueError("order-1 dataset is empty")
    mu_t = manifest["mu_log_tau"]
    sigma_t = manifest["sigma_log_tau"]
    vdd = manifest["driver"]["vdd"]
    splits = _records_by_split(records)
    if not splits["val"]:
        raise ValueError("order-1 dataset has no validation split")

    sampler = _BasisSampler(splits["train"], mu_t, sigma_t, vdd)
    val_sampler = _BasisSampler(splits["val"], mu_t, sigma_t, vdd)
    val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1001]))
    val_rows = np.repeat(np.arange(len(splits["val"])), 4)
    val_inputs = val_sampler.draw(val_rows, val_rng, cfg.time_points)

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1000]))
    module = BasePredictor(config=model_cfg,
                           params=init_base_params(model_cfg, cfg.seed))

    def make_inputs(rows, rng):
        return sampler.draw(rows, rng, cfg.time_points)

    history = _fit_module(module, make_inputs, np.arange(len(splits["train"])),
                          val_inputs, cfg, rng)
    return module, history


def _cumulative_prediction(base, modules, records, mu_t, sigma_t, vdd, upto_modes):
    """Base sum over the first `upto_modes` modes plus trained corrections."""
    tprime, _, modes, labels = _prepare(records, mu_t, sigma_t, vdd)
    r, t = tprime.shape
    total = np.zeros((r, t))
    for i in range(upto_modes):
        p = np.array([m[i, 0] for m in modes])
        a = np.array([m[i, 1] for m in modes])
        total += base.predict(p, a, labels, tprime)
    for m_idx, module in enumerate(modules, start=1):
        if m_idx > upto_modes:
            break
        mj = np.stack([m[m_idx - 1] for m in modes])
        mp = np.stack([m[m_idx - 2] if m_idx >= 2 else np.zeros(2) for m in modes])
        pair = pair_feature_rows(mj, mp)
        idx = np.full(r, m_idx, dtype=np.intp)
        total += module.predict(idx, pair, tprime)
    return total, tprime, modes


def train_residual_cascade(base: BasePredictor, datasets: dict,
                           model_cfg: AttentionRegressorConfig, cfg: TrainConfig,
                           max_order=None) -> tuple:
    """Train correction modules j = 1..max_order on their own order strata.

    Earlier modules stay frozen; module j fits the gap between the order-j
    golden waveforms and the current cascade prediction.
    """
    orders = sorted(datasets)
    if max_order is None:
        max_order = max(orders)
    modules = []
    histories = []
    for j in range(1, max_order + 1):
        if j not in datasets:
            raise KeyError(f"missing order-{j} dataset for residual module {j}")
        manifest, records = datasets[j]
        mu_t = manifest["mu_log_tau"]
        sigma_t = manifest["sigma_log_tau"]
        vdd = manifest["driver"]["vdd"]
        splits = _records_by_split(records)

        def residual_inputs(recs):
            cum, tprime, modes = _cumulative_prediction(
                base, modules, recs, mu_t, sigma_t, vdd, upto_modes=j)
            target = np.stack([rec.modal_target(vdd) for rec in recs]) - cum
            mj = np.stack([m[j - 1] for m in modes])
            mp = np.stack([m[j - 2] if j >= 2 else np.zeros(2) for m in modes])
            pair = pair_feature_rows(mj, mp)
            return pair, tprime, target

        pair_tr, tp_tr, res_tr = residual_inputs(splits["train"])
        pair_va, tp_va, res_va = residual_inputs(splits["val"])
        idx_va = np.full(len(splits["val"]), j, dtype=np.intp)
        val_inputs = (idx_va, pair_va, tp_va, res_va)

        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2000 + j]))
        module = ResidualModule(config=model_cfg,
                                params=init_residual_params(model_cfg, cfg.seed, j),
                                index=j)

        def make_inputs(rows, rng, pair_tr=pair_tr, tp_tr=tp_tr, res_tr=res_tr, j=j):
            tp, tg = _subsample(rng, tp_tr, res_tr, rows, cfg.time_points)
            return (np.full(len(rows), j, dtype=np.intp), pair_tr[rows], tp, tg)

        history = _fit_module(module, make_inputs,
                              np.arange(len(splits["train"])), val_inputs, cfg, rng)
        modules.append(module)
        histories.append(history)
    return modules, histories


def train_bundle(datasets: dict, model_cfg: AttentionRegressorConfig,
                 cfg: TrainConfig, max_order=None) -> SurrogateBundle:
    """Full pipeline: base on order 1, then the residual cascade."""
    if min(datasets) != 1:
        raise ValueError("the base predictor trains on an order-1 dataset")
    manifest1, records1 = datasets[1]
    base, base_history = train_base(records1, manifest1, model_cfg, cfg)
    modules, histories = train_residual_cascade(base, datasets, model_cfg, cfg,
                                                max_order=max_order)
    return SurrogateBundle(
        config=model_cfg,
        base=base,
        residuals=modules,
        norm_stats={
            "mu_log_tau": manifest1["mu_log_tau"],
            "sigma_log_tau": manifest1["sigma_log_tau"],
        },
        driver_info=dict(manifest1["driver"]),
        training_metadata={
            "seed": cfg.seed,
            "base": base_history,
            "residuals": histories,
        },
    )
