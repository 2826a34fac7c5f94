"""Attention-based surrogate: base single-mode predictor plus residual cascade.

Both module kinds share one encoder-decoder regressor: a short encoder token
sequence conditions on the mode description, and decoder time tokens query the
response value at each (normalized log) time point.  Decoder time tokens
attend only to themselves plus the encoder memory, so every prediction is a
pointwise function of its own time coordinate; with a single visible query the
self-attention sublayer reduces exactly to its value/output projections.

Parameters live in flat name->array dicts.  The forward pass is written once
against autodiff helpers that accept either Tensor parameters (training,
gradients) or plain ndarrays (inference fast path, including a stacked layout
that batches all residual modules through one set of numpy calls).
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dataset as ds
from .autodiff import Tensor, concat, embedding, gelu, layer_norm, matmul, softmax
from .refsim import Waveform

__all__ = [
    "AttentionRegressorConfig",
    "BasePredictor",
    "ResidualModule",
    "SurrogateBundle",
    "InferenceResult",
    "ShapeMismatch",
    "OrderExceedsCascade",
    "VersionMismatch",
    "CorruptFile",
    "predict_base",
    "infer",
    "infer_with_stats",
    "grad_check",
    "parameter_count",
    "save_bundle",
    "load_bundle",
]

BUNDLE_FORMAT_VERSION = 1
_MAGIC = b"STEPCAST-BUNDLE\n"


class ShapeMismatch(ValueError):
    pass


class OrderExceedsCascade(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class CorruptFile(ValueError):
    pass


@dataclass(frozen=True)
class AttentionRegressorConfig:
    """Shared architecture of the base predictor and every residual module."""

    model_width: int = 64
    heads: int = 4
    ffn_width: int = 128
    encoder_layers: int = 3
    decoder_layers: int = 3
    time_frequencies: int = 6
    max_order_embedding: int = 12
    device_kinds: int = 2
    allow_nonstandard_depth: bool = False

    def __post_init__(self):
        if self.model_width % self.heads:
            raise ValueError("model_width must be divisible by heads")
        if (self.encoder_layers, self.decoder_layers) != (3, 3) and not self.allow_nonstandard_depth:
            raise ValueError(
                "encoder_layers and decoder_layers are fixed at 3; "
                "set allow_nonstandard_depth=True to override"
            )

    @property
    def time_features(self) -> int:
        return 2 * self.time_frequencies + 1


def _trunc_normal(rng, shape, std=0.02):
    x = rng.normal(0.0, std, size=shape)
    for _ in range(8):
        mask = np.abs(x) > 2 * std
        if not mask.any():
            break
        x[mask] = rng.normal(0.0, std, size=int(mask.sum()))
    return np.clip(x, -2 * std, 2 * std)


def _init_common(rng, cfg: AttentionRegressorConfig) -> dict:
    d, f = cfg.model_width, cfg.ffn_width
    p = {
        "time_proj_w": _trunc_normal(rng, (cfg.time_features, d)),
        "time_proj_b": np.zeros(d),
        "head_w": np.zeros((d, 1)),
        "head_b": np.zeros(1),
    }
    for i in range(cfg.encoder_layers):
        for name in ("wq", "wk", "wv", "wo"):
            p[f"enc{i}.attn.{name}"] = _trunc_normal(rng, (d, d))
            p[f"enc{i}.attn.{name}_b"] = np.zeros(d)
        p[f"enc{i}.ln1.g"] = np.ones(d)
        p[f"enc{i}.ln1.b"] = np.zeros(d)
        p[f"enc{i}.ffn.w1"] = _trunc_normal(rng, (d, f))
        p[f"enc{i}.ffn.b1"] = np.zeros(f)
        p[f"enc{i}.ffn.w2"] = _trunc_normal(rng, (f, d))
        p[f"enc{i}.ffn.b2"] = np.zeros(d)
        p[f"enc{i}.ln2.g"] = np.ones(d)
        p[f"enc{i}.ln2.b"] = np.zeros(d)
    for i in range(cfg.decoder_layers):
        for name in ("wv", "wo"):
            p[f"dec{i}.self.{name}"] = _trunc_normal(rng, (d, d))
            p[f"dec{i}.self.{name}_b"] = np.zeros(d)
        p[f"dec{i}.ln1.g"] = np.ones(d)
        p[f"dec{i}.ln1.b"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"dec{i}.cross.{name}"] = _trunc_normal(rng, (d, d))
            p[f"dec{i}.cross.{name}_b"] = np.zeros(d)
        p[f"dec{i}.ln2.g"] = np.ones(d)
        p[f"dec{i}.ln2.b"] = np.zeros(d)
        p[f"dec{i}.ffn.w1"] = _trunc_normal(rng, (d, f))
        p[f"dec{i}.ffn.b1"] = np.zeros(f)
        p[f"dec{i}.ffn.w2"] = _trunc_normal(rng, (f, d))
        p[f"dec{i}.ffn.b2"] = np.zeros(d)
        p[f"dec{i}.ln3.g"] = np.ones(d)
        p[f"dec{i}.ln3.b"] = np.zeros(d)
    return p


def init_base_params(cfg: AttentionRegressorConfig, seed: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    p = _init_common(rng, cfg)
    p["device_embed"] = _trunc_normal(rng, (cfg.device_kinds, cfg.model_width))
    p["mode_proj_w"] = _trunc_normal(rng, (3, cfg.model_width))
    p["mode_proj_b"] = np.zeros(cfg.model_width)
    return p


def init_residual_params(cfg: AttentionRegressorConfig, seed: int, index: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    p = _init_common(rng, cfg)
    p["order_embed"] = _trunc_normal(rng, (cfg.max_order_embedding, cfg.model_width))
    p["pair_proj_w"] = _trunc_normal(rng, (6, cfg.model_width))
    p["pair_proj_b"] = np.zeros(cfg.model_width)
    return p


def parameter_count(params: dict) -> int:
    return int(sum(np.asarray(v.data if isinstance(v, Tensor) else v).size
                   for v in params.values()))


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------

_LOG_RATE_FLOOR = 1e-4


def mode_feature_rows(rates, gains) -> np.ndarray:
    """(rate, log-rate, gain) encoding of normalized modes.

    The log-rate column makes the horizontal (log-time) shift of a mode's
    response a linear function of the features; zero-rate sentinels map to the
    floor value.
    """
    rates = np.asarray(rates, dtype=np.float64)
    gains = np.asarray(gains, dtype=np.float64)
    logs = np.log10(np.maximum(rates, _LOG_RATE_FLOOR)) / 3.0
    return np.stack([rates, logs, gains], axis=-1)


def pair_feature_rows(modes_j, modes_prev) -> np.ndarray:
    """Adjacent-mode conditioning for a residual module: two encoded modes."""
    mj = np.asarray(modes_j, dtype=np.float64)
    mp = np.asarray(modes_prev, dtype=np.float64)
    return np.concatenate([
        mode_feature_rows(mj[..., 0], mj[..., 1]),
        mode_feature_rows(mp[..., 0], mp[..., 1]),
    ], axis=-1)


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    """Classic fixed sin/cos positional table for the encoder token index."""
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10_000.0, (2 * (i // 2)) / width)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def time_feature_map(tprime: np.ndarray, n_freq: int) -> np.ndarray:
    """Sinusoidal encoding of the continuous time coordinate itself.

    Position here is the normalized log-time value, which keeps each query a
    function of its own time point only.
    """
    t = np.asarray(tprime, dtype=np.float64)
    freqs = 0.5 * 2.0 ** np.arange(n_freq)
    ang = t[..., None] * freqs
    return np.concatenate([t[..., None], np.sin(ang), np.cos(ang)], axis=-1)


# ---------------------------------------------------------------------------
# forward pass (shared between Tensor and ndarray parameters)
# ---------------------------------------------------------------------------

def _linear(x, w, b):
    return matmul(x, w) + b


def _heads_split(x, heads):
    shape = x.shape
    d = shape[-1]
    hd = d // heads
    x = x.reshape(shape[:-1] + (heads, hd))
    axes = tuple(range(len(shape) - 2)) + (len(shape) - 1, len(shape) - 2, len(shape))
    return x.transpose(axes)


def _heads_join(x):
    shape = x.shape
    n = len(shape)
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = x.transpose(axes)
    s = x.shape
    return x.reshape(s[:-2] + (s[-2] * s[-1],))


def _attention(p, prefix, q_in, kv_in, heads):
    q = _heads_split(_linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.wq_b"]), heads)
    k = _heads_split(_linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.wk_b"]), heads)
    v = _heads_split(_linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.wv_b"]), heads)
    hd = q.shape[-1]
    kt_axes = tuple(range(len(k.shape) - 2)) + (len(k.shape) - 1, len(k.shape) - 2)
    scores = matmul(q, k.transpose(kt_axes)) * (1.0 / np.sqrt(hd))
    mixed = matmul(softmax(scores), v)
    return _linear(_heads_join(mixed), p[f"{prefix}.wo"], p[f"{prefix}.wo_b"])


def _ffn(p, prefix, x):
    h = gelu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _ln(p, prefix, x):
    return layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def regressor_forward(p: dict, cfg: AttentionRegressorConfig, enc_tokens, time_feat):
    """Run encoder over the mode tokens and decode one scalar per time token.

    enc_tokens: (..., L, d); time_feat: (..., T, time_features).
    Returns predictions of shape (..., T).
    """
    x = enc_tokens
    for i in range(cfg.encoder_layers):
        x = _ln(p, f"enc{i}.ln1", x + _attention(p, f"enc{i}.attn", x, x, cfg.heads))
        x = _ln(p, f"enc{i}.ln2", x + _ffn(p, f"enc{i}.ffn", x))
    memory = x

    y = _linear(time_feat, p["time_proj_w"], p["time_proj_b"])
    for i in range(cfg.decoder_layers):
        # Self-attention over a single visible query: exactly the value and
        # output projections (attention weight is 1 by normalization).
        sa = _linear(_linear(y, p[f"dec{i}.self.wv"], p[f"dec{i}.self.wv_b"]),
                     p[f"dec{i}.self.wo"], p[f"dec{i}.self.wo_b"])
        y = _ln(p, f"dec{i}.ln1", y + sa)
        y = _ln(p, f"dec{i}.ln2", y + _attention(p, f"dec{i}.cross", y, memory, cfg.heads))
        y = _ln(p, f"dec{i}.ln3", y + _ffn(p, f"dec{i}.ffn", y))

    out = _linear(y, p["head_w"], p["head_b"])
    return out.reshape(out.shape[:-1])


def base_encoder_tokens(p: dict, cfg, p_norm, a_norm, device_label):
    """Token sequence [device token, mode token] for the base predictor."""
    mode_feat = mode_feature_rows(p_norm, a_norm)
    dev = embedding(p["device_embed"], np.asarray(device_label, dtype=np.intp))
    mode = _linear(mode_feat, p["mode_proj_w"], p["mode_proj_b"])
    b = mode.shape[:-1]
    d = cfg.model_width
    tokens = concat(
        [dev.reshape(b + (1, d)), mode.reshape(b + (1, d))], axis=len(b)
    )
    return tokens + sinusoidal_positions(2, d)


def residual_encoder_tokens(p: dict, cfg, order_idx, pair_feat):
    """Token sequence [order token, adjacent-mode-pair token] for a corrector."""
    idx = np.minimum(np.asarray(order_idx, dtype=np.intp), cfg.max_order_embedding - 1)
    order = embedding(p["order_embed"], idx)
    pair = _linear(np.asarray(pair_feat, dtype=np.float64),
                   p["pair_proj_w"], p["pair_proj_b"])
    b = order.shape[:-1]
    d = cfg.model_width
    tokens = concat(
        [order.reshape(b + (1, d)), pair.reshape(b + (1, d))], axis=len(b)
    )
    return tokens + sinusoidal_positions(2, d)


# ---------------------------------------------------------------------------
# inference fast path
#
# Numerically the same network as regressor_forward, evaluated with a leaner
# schedule: the single-query self-attention is pre-folded into one matrix,
# layer norm avoids numpy's temporaries, attention heads are realized through
# reshaped views and einsum instead of transposed copies, and everything can
# run in float32.  Equality with the reference path is unit-tested.
# ---------------------------------------------------------------------------

def _fold_module_params(params: dict, cfg: AttentionRegressorConfig, dtype) -> dict:
    out = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}
    for i in range(cfg.decoder_layers):
        wv = out.pop(f"dec{i}.self.wv")
        wv_b = out.pop(f"dec{i}.self.wv_b")
        wo = out.pop(f"dec{i}.self.wo")
        wo_b = out.pop(f"dec{i}.self.wo_b")
        out[f"dec{i}.self.w"] = wv @ wo
        out[f"dec{i}.self.b"] = wv_b @ wo + wo_b
    return out


def _gelu_into(x, tmp):
    """Smooth GELU of x written into tmp (same shape); returns tmp."""
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    ca = x.dtype.type(np.sqrt(2.0 / np.pi) * 0.044715)
    np.multiply(x, x, out=tmp)
    tmp *= ca
    tmp += c
    tmp *= x
    np.tanh(tmp, out=tmp)
    tmp += x.dtype.type(1.0)
    tmp *= x
    tmp *= x.dtype.type(0.5)
    return tmp


def _lin3(x, w, b, out=None):
    """(R,T,d) @ weight + bias; flat weights go through one big 2-D gemm."""
    if w.ndim == 2:
        r, t, d = x.shape
        o2 = None if out is None else out.reshape(r * t, w.shape[-1])
        out = np.matmul(x.reshape(r * t, d), w, out=o2).reshape(r, t, w.shape[-1])
    else:
        out = np.matmul(x, w, out=out)
    out += b
    return out


def _ones_over(d, dtype):
    return np.full(d, 1.0 / d, dtype=dtype)


def _ln3_inplace(x, g, b, eps=1e-5):
    """Layer norm of x over its last axis, in place, then affine (g, b)."""
    r, t, d = x.shape
    x2 = x.reshape(r * t, d)
    mu = x2 @ _ones_over(d, x2.dtype)
    np.subtract(x2, mu[:, None], out=x2)
    var = np.einsum("ij,ij->i", x2, x2)
    var *= 1.0 / d
    var += x2.dtype.type(eps)
    np.sqrt(var, out=var)
    np.divide(1.0, var, out=var)
    x2 *= var[:, None]
    np.multiply(x, g, out=x)
    x += b
    return x


_LN_KERNEL = None


def _get_ln_kernel():
    """Fused residual-add + layer-norm + affine kernel (numba, if available).

    One pass per row with float64 accumulators; falls back to numpy ops when
    numba is missing.  No fastmath, so results are reproducible.
    """
    global _LN_KERNEL
    if _LN_KERNEL is not None:
        return _LN_KERNEL
    try:
        import numba

        @numba.njit(cache=True, fastmath=False)
        def kernel(x, res, g, b, eps):
            r, t, d = x.shape
            zero = x[0, 0, 0] * 0  # accumulate in the array's own dtype
            inv_d = zero + 1.0 / d
            one = zero + 1.0
            for i in range(r):
                gi = g[i]
                bi = b[i]
                for j in range(t):
                    row = x[i, j]
                    rr = res[i, j]
                    s = zero
                    for k in range(d):
                        row[k] += rr[k]
                        s += row[k]
                    mu = s * inv_d
                    q = zero
                    for k in range(d):
                        c = row[k] - mu
                        row[k] = c
                        q += c * c
                    inv = one / np.sqrt(q * inv_d + eps)
                    for k in range(d):
                        row[k] = row[k] * inv * gi[k] + bi[k]

        _LN_KERNEL = kernel
    except ImportError:
        _LN_KERNEL = False
    return _LN_KERNEL


def _ln_add_inplace(x, res, g, b, rows, eps=1e-5):
    """x <- LN(x + res) * g + b; g/b given per row block (rows, d)."""
    kernel = _get_ln_kernel()
    if kernel is False:
        x += res
        return _ln3_inplace(x, g[:, None, :], b[:, None, :], eps)
    kernel(x, res, g, b, x.dtype.type(eps))
    return x


def _per_row_affine(arr, rows, d, dtype):
    """Normalize an LN gain/bias parameter to a dense (rows, d) array."""
    a = np.asarray(arr, dtype=dtype)
    if a.ndim == 1:
        return np.broadcast_to(a, (rows, d)).copy()
    return np.ascontiguousarray(a.reshape(rows, d))


def _kv_blocks(memory, p, prefix, heads):
    """Per-row block matrices B, C such that cross-attention becomes
    scores = q @ B and mixed = attn @ C (keys/values span only L tokens)."""
    wk, bk = p[f"{prefix}.wk"], p[f"{prefix}.wk_b"]
    wv, bv = p[f"{prefix}.wv"], p[f"{prefix}.wv_b"]
    k = np.matmul(memory, wk) + bk
    v = np.matmul(memory, wv) + bv
    r, L, d = k.shape
    hd = d // heads
    kr = k.reshape(r, L, heads, hd)
    vr = v.reshape(r, L, heads, hd)
    B = np.zeros((r, d, heads * L), dtype=k.dtype)
    C = np.zeros((r, heads * L, d), dtype=k.dtype)
    for h in range(heads):
        B[:, h * hd:(h + 1) * hd, h * L:(h + 1) * L] = kr[:, :, h, :].transpose(0, 2, 1)
        C[:, h * L:(h + 1) * L, h * hd:(h + 1) * hd] = vr[:, :, h, :]
    return B, C


def _softmax2_inplace(scores):
    """Softmax over a trailing axis of length 2, in place."""
    a = scores[..., 0]
    bb = scores[..., 1]
    m = np.maximum(a, bb)
    a -= m
    bb -= m
    np.exp(a, out=a)
    np.exp(bb, out=bb)
    m = np.add(a, bb, out=m)
    a /= m
    bb /= m
    return scores


def _kv_diff_blocks(memory, p, prefix, heads):
    """Two-key attention reduced to a sigmoid: per-row difference projector
    Bd (scores0 - scores1 = q @ Bd) plus value difference/base tensors."""
    k = np.matmul(memory, p[f"{prefix}.wk"]) + p[f"{prefix}.wk_b"]
    v = np.matmul(memory, p[f"{prefix}.wv"]) + p[f"{prefix}.wv_b"]
    r, L, d = k.shape
    hd = d // heads
    kr = k.reshape(r, L, heads, hd)
    vr = v.reshape(r, L, heads, hd)
    Bd = np.zeros((r, d, heads), dtype=k.dtype)
    for h in range(heads):
        Bd[:, h * hd:(h + 1) * hd, h] = kr[:, 0, h, :] - kr[:, 1, h, :]
    v_diff = np.ascontiguousarray(vr[:, 0] - vr[:, 1])[:, None]   # (r,1,H,hd)
    v_base = np.ascontiguousarray(vr[:, 1])[:, None]
    return Bd, v_diff, v_base


def _fast_forward(p: dict, cfg: AttentionRegressorConfig, enc_tokens, time_feat):
    """ndarray-only twin of regressor_forward on folded parameters.

    enc_tokens: (R, L, d); time_feat: (T, F) shared across rows or (R, T, F).
    Parameters may be flat (shared) or stacked (R, ...).  The decoder works in
    a small ping-pong workspace so the hot loop allocates nothing per layer.
    """
    heads = cfg.heads
    d = cfg.model_width
    hd = d // heads

    # encoder over L=2 tokens per row: tiny arrays, plain ops
    x = enc_tokens
    for i in range(cfg.encoder_layers):
        q = _lin3(x, p[f"enc{i}.attn.wq"], p[f"enc{i}.attn.wq_b"])
        B, C = _kv_blocks(x, p, f"enc{i}.attn", heads)
        L = x.shape[-2]
        scores = np.matmul(q, B).reshape(x.shape[0], L, heads, L)
        scores *= scores.dtype.type(1.0 / np.sqrt(hd))
        _softmax2_inplace(scores)
        mixed = np.matmul(scores.reshape(x.shape[0], L, heads * L), C)
        a = _lin3(mixed, p[f"enc{i}.attn.wo"], p[f"enc{i}.attn.wo_b"])
        x = _ln3_inplace(x + a, p[f"enc{i}.ln1.g"], p[f"enc{i}.ln1.b"])
        f = _lin3(_gelu_into(h := _lin3(x, p[f"enc{i}.ffn.w1"], p[f"enc{i}.ffn.b1"]),
                             np.empty_like(h)),
                  p[f"enc{i}.ffn.w2"], p[f"enc{i}.ffn.b2"])
        x = _ln3_inplace(x + f, p[f"enc{i}.ln2.g"], p[f"enc{i}.ln2.b"])
    memory = x
    rows = memory.shape[0]

    # time embedding -> y buffer (R, T, d)
    if time_feat.ndim == 2:
        shared = np.matmul(time_feat, p["time_proj_w"]) + p["time_proj_b"]
        if shared.ndim == 2:  # flat weights: tile the shared embedding per row
            y = np.broadcast_to(shared, (rows,) + shared.shape).copy()
        else:
            y = shared
    else:
        y = _lin3(time_feat, p["time_proj_w"], p["time_proj_b"])
    t_len = y.shape[1]
    fdt = y.dtype

    buf = np.empty_like(y)
    aux = np.empty_like(y)
    hid1 = np.empty((rows, t_len, cfg.ffn_width), dtype=fdt)
    hid2 = np.empty_like(hid1)
    wbuf = np.empty((rows, t_len, heads), dtype=fdt)
    half_scale = fdt.type(0.5 / np.sqrt(hd))
    ln = {
        name: _per_row_affine(p[name], rows, d, fdt)
        for i in range(cfg.decoder_layers)
        for name in (f"dec{i}.ln1.g", f"dec{i}.ln1.b", f"dec{i}.ln2.g",
                     f"dec{i}.ln2.b", f"dec{i}.ln3.g", f"dec{i}.ln3.b")
    }

    for i in range(cfg.decoder_layers):
        # pointwise self-attention (single visible query), pre-folded
        _lin3(y, p[f"dec{i}.self.w"], p[f"dec{i}.self.b"], out=buf)
        _ln_add_inplace(buf, y, ln[f"dec{i}.ln1.g"], ln[f"dec{i}.ln1.b"], rows)
        y, buf = buf, y

        # two-key cross-attention as a per-head sigmoid gate:
        # softmax([s0, s1]) = [sig(s0-s1), 1-sig(s0-s1)], sig(z) = (1+tanh(z/2))/2
        _lin3(y, p[f"dec{i}.cross.wq"], p[f"dec{i}.cross.wq_b"], out=buf)
        Bd, v_diff, v_base = _kv_diff_blocks(memory, p, f"dec{i}.cross", heads)
        w0 = np.matmul(buf, Bd, out=wbuf)
        w0 *= half_scale
        np.tanh(w0, out=w0)
        w0 += fdt.type(1.0)
        w0 *= fdt.type(0.5)
        mixed = buf.reshape(rows, t_len, heads, hd)
        np.multiply(w0[..., None], v_diff, out=mixed)
        mixed += v_base
        _lin3(buf, p[f"dec{i}.cross.wo"], p[f"dec{i}.cross.wo_b"], out=aux)
        _ln_add_inplace(aux, y, ln[f"dec{i}.ln2.g"], ln[f"dec{i}.ln2.b"], rows)
        y, aux = aux, y

        # feed-forward
        _lin3(y, p[f"dec{i}.ffn.w1"], p[f"dec{i}.ffn.b1"], out=hid1)
        _gelu_into(hid1, hid2)
        _lin3(hid2, p[f"dec{i}.ffn.w2"], p[f"dec{i}.ffn.b2"], out=buf)
        _ln_add_inplace(buf, y, ln[f"dec{i}.ln3.g"], ln[f"dec{i}.ln3.b"], rows)
        y, buf = buf, y

    out = _lin3(y, p["head_w"], p["head_b"])
    return out.reshape(out.shape[:-1])


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

@dataclass
class BasePredictor:
    """Single-mode response predictor f(p, a, t) conditioned on device kind."""

    config: AttentionRegressorConfig
    params: dict

    def predict(self, p_norm, a_norm, device_label, tprime) -> np.ndarray:
        p_norm = np.asarray(p_norm, dtype=np.float64)
        a_norm = np.asarray(a_norm, dtype=np.float64)
        tprime = np.asarray(tprime, dtype=np.float64)
        label = np.broadcast_to(np.asarray(device_label, dtype=np.intp), p_norm.shape)
        if p_norm.shape != a_norm.shape:
            raise ShapeMismatch("p and a must have matching shapes")
        if tprime.shape[: p_norm.ndim] != p_norm.shape:
            raise ShapeMismatch("time grid batch dims must match the mode batch")
        tokens = base_encoder_tokens(self.params, self.config, p_norm, a_norm, label)
        feat = time_feature_map(tprime, self.config.time_frequencies)
        return regressor_forward(self.params, self.config, tokens, feat)

    def loss_inputs(self, inputs):
        p_norm, a_norm, label, tprime, target = inputs
        return (np.asarray(p_norm), np.asarray(a_norm), np.asarray(label),
                np.asarray(tprime), np.asarray(target))

    def loss(self, params: dict, inputs):
        p_norm, a_norm, label, tprime, target = self.loss_inputs(inputs)
        tokens = base_encoder_tokens(params, self.config, p_norm, a_norm, label)
        feat = time_feature_map(tprime, self.config.time_frequencies)
        pred = regressor_forward(params, self.config, tokens, feat)
        diff = pred - target
        return (diff * diff).mean()


@dataclass
class ResidualModule:
    """Order-indexed corrector e(n, mode_n, mode_{n-1}, t) for cascade sums."""

    config: AttentionRegressorConfig
    params: dict
    index: int = 1

    def predict(self, order_idx, pair_feat, tprime) -> np.ndarray:
        order_idx = np.asarray(order_idx, dtype=np.intp)
        pair_feat = np.asarray(pair_feat, dtype=np.float64)
        tprime = np.asarray(tprime, dtype=np.float64)
        if pair_feat.shape[-1] != 6:
            raise ShapeMismatch("pair features must end in 6 values")
        tokens = residual_encoder_tokens(self.params, self.config, order_idx, pair_feat)
        feat = time_feature_map(tprime, self.config.time_frequencies)
        return regressor_forward(self.params, self.config, tokens, feat)

    def loss(self, params: dict, inputs):
        order_idx, pair_feat, tprime, target = inputs
        tokens = residual_encoder_tokens(params, self.config,
                                         np.asarray(order_idx), np.asarray(pair_feat))
        feat = time_feature_map(np.asarray(tprime), self.config.time_frequencies)
        pred = regressor_forward(params, self.config, tokens, feat)
        diff = pred - np.asarray(target)
        return (diff * diff).mean()


def predict_base(base: BasePredictor, p_norm, a_norm, device_label, tprime) -> np.ndarray:
    return base.predict(p_norm, a_norm, device_label, tprime)


# ---------------------------------------------------------------------------
# gradient validation
# ---------------------------------------------------------------------------

def grad_check(module, inputs, epsilon: float = 1e-5, n_params: int = 64,
               seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Samples at least 50 scalar parameters across all tensors and perturbs each
    by +/- epsilon around the MSE loss of `module` on `inputs`.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    n_params = max(50, n_params)
    tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in module.params.items()}
    loss = module.loss(tensors, inputs)
    loss.backward()

    names = sorted(tensors)
    sizes = np.array([tensors[k].data.size for k in names])
    cum = np.cumsum(sizes)
    total = int(cum[-1])
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(n_params, total), replace=False)

    flat_params = {k: module.params[k] for k in names}
    worst = 0.0
    for flat_idx in np.sort(picks):
        ti = int(np.searchsorted(cum, flat_idx, side="right"))
        name = names[ti]
        local = int(flat_idx - (cum[ti] - sizes[ti]))
        arr = flat_params[name].reshape(-1)
        orig = arr[local]

        arr[local] = orig + epsilon
        up = float(np.asarray(module.loss(flat_params, inputs)))
        arr[local] = orig - epsilon
        dn = float(np.asarray(module.loss(flat_params, inputs)))
        arr[local] = orig

        fd = (up - dn) / (2 * epsilon)
        g = tensors[name].grad
        ad = float(g.reshape(-1)[local]) if g is not None else 0.0
        err = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class SurrogateBundle:
    """Trained base + residual cascade with everything inference needs."""

    config: AttentionRegressorConfig
    base: BasePredictor
    residuals: list
    norm_stats: dict
    driver_info: dict
    training_metadata: dict = field(default_factory=dict)
    _fold_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def cascade_depth(self) -> int:
        return len(self.residuals)

    def folded_base(self, dtype) -> dict:
        key = ("base", np.dtype(dtype).name)
        if key not in self._fold_cache:
            self._fold_cache[key] = _fold_module_params(self.base.params,
                                                        self.config, dtype)
        return self._fold_cache[key]

    def folded_residual_stack(self, module_ids, dtype) -> dict:
        """Stacked folded parameters for the given 1-based module ids."""
        base_key = ("residual_all", np.dtype(dtype).name)
        if base_key not in self._fold_cache:
            folded = [_fold_module_params(m.params, self.config, dtype)
                      for m in self.residuals]
            self._fold_cache[base_key] = _stack_params(folded)
        key = ("residual_sel", np.dtype(dtype).name, tuple(module_ids))
        if key not in self._fold_cache:
            if len(self._fold_cache) > 64:
                self._fold_cache.clear()
            allp = self._fold_cache[base_key]
            idx = np.asarray(module_ids, dtype=np.intp) - 1
            self._fold_cache[key] = {k: v[idx] for k, v in allp.items()}
        return self._fold_cache[key]

    def fused_stack(self, n_base, module_ids, dtype) -> dict:
        """Layer/head/time parameters stacked as n_base copies of the base
        module followed by the selected residual modules, for one fused pass."""
        key = ("fused", np.dtype(dtype).name, n_base, tuple(module_ids))
        if key not in self._fold_cache:
            if len(self._fold_cache) > 64:
                self._fold_cache.clear()
            bp = self.folded_base(dtype)
            rp = self.folded_residual_stack(module_ids, dtype)
            common = sorted(set(bp) & {k for k in rp})
            fused = {}
            for k in common:
                b = bp[k]
                tiled = np.broadcast_to(
                    b[None] if b.ndim > 1 else b[None, None, :],
                    (n_base,) + rp[k].shape[1:],
                )
                fused[k] = np.ascontiguousarray(
                    np.concatenate([tiled, rp[k]], axis=0)
                )
            self._fold_cache[key] = fused
        return self._fold_cache[key]


@dataclass
class InferenceResult:
    waveform: Waveform
    normalized: np.ndarray
    base_evaluations: int
    residual_evaluations: int
    wall_seconds: float


def _stack_params(param_dicts) -> dict:
    """Stack per-module parameter dicts along a new leading axis.

    1-D parameters (biases, layer-norm affines) gain a singleton middle axis
    so they broadcast over the token axis of stacked activations.
    """
    keys = sorted(param_dicts[0])
    out = {}
    for k in keys:
        arr = np.stack([p[k] for p in param_dicts], axis=0)
        if arr.ndim == 2:
            arr = arr[:, None, :]
        out[k] = arr
    return out


def infer_with_stats(bundle: SurrogateBundle, modes, device_label, times,
                     extrapolate: bool = False, max_modules=None,
                     dtype=np.float64) -> InferenceResult:
    """Cascade inference: N base evaluations plus N residual evaluations.

    The base terms share parameters and batch over modes; the residual terms
    batch over modules through stacked arrays.  Summation order is fixed, so
    results are bitwise reproducible for a given dtype.
    """
    t0 = time.perf_counter()
    cfg = bundle.config
    dtype = np.dtype(dtype)
    modes = [(float(p), float(a)) for p, a in modes]
    n = len(modes)
    if n == 0:
        raise ValueError("need at least one mode")
    depth = bundle.cascade_depth
    if n > depth and not extrapolate:
        raise OrderExceedsCascade(
            f"system order {n} exceeds the {depth}-module cascade; "
            "pass extrapolate=True to reuse the last module"
        )

    sorted_modes = ds.model_mode_features(modes)
    p_max = max(p for p, _ in modes)
    times = np.asarray(times, dtype=np.float64)
    tprime = ds.times_to_normalized(times, p_max,
                                    bundle.norm_stats["mu_log_tau"],
                                    bundle.norm_stats["sigma_log_tau"]).astype(dtype)
    t_feat = time_feature_map(tprime, cfg.time_frequencies).astype(dtype)
    pe = sinusoidal_positions(2, cfg.model_width).astype(dtype)

    # base encoder tokens: one row per mode, shared parameters
    bp = bundle.folded_base(dtype)
    sm = np.asarray(sorted_modes)
    mode_feat = mode_feature_rows(sm[:, 0], sm[:, 1]).astype(dtype)
    dev_tok = bp["device_embed"][int(device_label)]
    mode_tok = mode_feat @ bp["mode_proj_w"] + bp["mode_proj_b"]
    base_tokens = np.stack(
        [np.broadcast_to(dev_tok, mode_tok.shape), mode_tok], axis=1
    ) + pe

    # residual tokens: module j corrects with modes j and j-1 (sentinel 0,0)
    use = list(range(1, n + 1))
    if max_modules is not None:
        use = use[: max(0, max_modules)]
    module_ids = [min(j, depth) for j in use]
    if use:
        sp = bundle.folded_residual_stack(module_ids, dtype)
        idx = np.minimum(np.array(use, dtype=np.intp), cfg.max_order_embedding - 1)
        mj = np.stack([sorted_modes[j - 1] for j in use])
        mp = np.stack([sorted_modes[j - 2] if j >= 2 else (0.0, 0.0) for j in use])
        pairs = pair_feature_rows(mj, mp).astype(dtype)
        order_tok = sp["order_embed"][np.arange(len(use)), idx]
        pair_tok = pairs[:, None, :] @ sp["pair_proj_w"] + sp["pair_proj_b"]
        res_tokens = np.concatenate([order_tok[:, None, :], pair_tok], axis=1) + pe
        tokens = np.concatenate([base_tokens, res_tokens], axis=0)
        fused = bundle.fused_stack(n, module_ids, dtype)
        preds = _fast_forward(fused, cfg, tokens, t_feat)
    else:
        preds = _fast_forward(bp, cfg, base_tokens, t_feat)
    total = preds.sum(axis=0)

    v_final = bundle.driver_info["vdd"] * sum(a for _, a in modes)
    values = total.astype(np.float64) * v_final  # rest 0, settles at vdd*sum(A)
    wave = Waveform(times=times, values=values)
    return InferenceResult(
        waveform=wave,
        normalized=total.astype(np.float64),
        base_evaluations=n,
        residual_evaluations=len(use),
        wall_seconds=time.perf_counter() - t0,
    )


def infer(bundle: SurrogateBundle, modes, device_label, times,
          extrapolate: bool = False) -> Waveform:
    return infer_with_stats(bundle, modes, device_label, times, extrapolate).waveform


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------

def save_bundle(bundle: SurrogateBundle, path) -> None:
    """Single deterministic binary: JSON header + raw float64 parameter bytes."""
    arrays = []
    manifest = []

    def add(owner, params):
        for k in sorted(params):
            arr = np.ascontiguousarray(params[k], dtype=np.float64)
            manifest.append({"owner": owner, "name": k, "shape": list(arr.shape)})
            arrays.append(arr)

    add("base", bundle.base.params)
    for i, mod in enumerate(bundle.residuals):
        add(f"residual{i}", mod.params)

    header = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "config": {k: getattr(bundle.config, k) for k in (
            "model_width", "heads", "ffn_width", "encoder_layers", "decoder_layers",
            "time_frequencies", "max_order_embedding", "device_kinds",
            "allow_nonstandard_depth")},
        "norm_stats": bundle.norm_stats,
        "driver_info": bundle.driver_info,
        "training_metadata": bundle.training_metadata,
        "n_residuals": len(bundle.residuals),
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_bundle(path) -> SurrogateBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(_MAGIC):
        raise CorruptFile("not a surrogate bundle file")
    off = len(_MAGIC)
    try:
        hlen = int.from_bytes(raw[off:off + 8], "little")
        header = json.loads(raw[off + 8:off + 8 + hlen].decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"unreadable bundle header: {exc}") from exc
    version = header.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise VersionMismatch(f"bundle format {version} not supported")
    cfg = AttentionRegressorConfig(**header["config"])

    pos = off + 8 + hlen
    owners = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8 if shape else 8
        chunk = raw[pos:pos + nbytes]
        if len(chunk) != nbytes:
            raise CorruptFile("bundle file is truncated")
        arr = np.frombuffer(chunk, dtype=np.float64).reshape(shape).copy()
        owners.setdefault(entry["owner"], {})[entry["name"]] = arr
        pos += nbytes
    if pos != len(raw):
        raise CorruptFile("bundle file has trailing bytes")

    base = BasePredictor(config=cfg, params=owners["base"])
    residuals = [
        ResidualModule(config=cfg, params=owners[f"residual{i}"], index=i + 1)
        for i in range(header["n_residuals"])
    ]
    return SurrogateBundle(
        config=cfg,
        base=base,
        residuals=residuals,
        norm_stats=header["norm_stats"],
        driver_info=header["driver_info"],
        training_metadata=header["training_metadata"],
    )
