"""Polynomial and transfer-function algebra: partial-fraction modal decomposition.

Rational functions are held in ascending-coefficient form.  Poles are found
with an Aberth-Ehrlich simultaneous iteration (companion-matrix eigenvalues as
fallback), near-coincident roots are merged into multiple roots, and residues
come from Taylor-shift series division, which handles simple and repeated
poles through one code path.

All routines are pure functions of their inputs and safe to call concurrently.
"""

from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Polynomial",
    "TransferFunction",
    "Mode",
    "ModalDecomposition",
    "NonConvergence",
    "NotStrictlyProper",
    "RepeatedPoleUnsupported",
    "ComplexPoleUnsupported",
    "poly_eval",
    "poly_derivative",
    "poly_multiply",
    "find_poles",
    "decompose",
    "to_gain_form",
    "analytic_step_response",
    "reconstruct",
    "tf_to_json",
    "tf_from_json",
    "decomposition_to_json",
    "decomposition_from_json",
]

# Relative merge distance for treating nearby roots as one multiple root.
# Escalated automatically when a cluster is only resolvable at a coarser
# scale (inexact coefficients smear a k-fold root over ~eps**(1/k)).
DEFAULT_CLUSTER_TOL = 1e-8
_CLUSTER_LADDER = (1.0, 10.0, 100.0, 1e3, 1e4)

_ABERTH_MAX_ITER = 200
_REALIFY_TOL = 1e-8


class NonConvergence(RuntimeError):
    """Root iteration failed to reach tolerance within its budget."""


class NotStrictlyProper(ValueError):
    """Numerator degree is not strictly below denominator degree."""


class RepeatedPoleUnsupported(ValueError):
    """Operation requires simple poles only."""


class ComplexPoleUnsupported(ValueError):
    """Operation requires real poles only."""


def _trim(coeffs) -> np.ndarray:
    c = np.atleast_1d(np.asarray(coeffs))
    if c.size == 0:
        raise ValueError("polynomial needs at least one coefficient")
    if not np.all(np.isfinite(c)):
        raise ValueError("polynomial coefficients must be finite")
    nz = np.nonzero(c)[0]
    if nz.size == 0:
        return c[:1] * 0
    return c[: nz[-1] + 1]


@dataclass(frozen=True)
class Polynomial:
    """Real or complex polynomial, coefficients ascending by degree."""

    coeffs: np.ndarray

    def __init__(self, coeffs):
        object.__setattr__(self, "coeffs", _trim(coeffs))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def is_zero(self) -> bool:
        return self.degree == 0 and self.coeffs[0] == 0

    def __call__(self, s):
        return poly_eval(self, s)


@dataclass(frozen=True)
class TransferFunction:
    """Strictly proper rational function num(s)/den(s)."""

    num: Polynomial
    den: Polynomial

    def __post_init__(self):
        if self.den.is_zero():
            raise ValueError("denominator must be a nonzero polynomial")
        if not self.num.is_zero() and self.num.degree >= self.den.degree:
            raise NotStrictlyProper(
                f"numerator degree {self.num.degree} >= denominator degree {self.den.degree}"
            )

    def __call__(self, s):
        return poly_eval(self.num, s) / poly_eval(self.den, s)

    @property
    def order(self) -> int:
        return self.den.degree


@dataclass(frozen=True)
class Mode:
    """One modal term residue/(s - pole)**j."""

    pole: complex
    residue: complex
    j: int = 1

    def __post_init__(self):
        if self.j < 1:
            raise ValueError("multiplicity index must be >= 1")
        if not (np.isfinite(self.pole) and np.isfinite(self.residue)):
            raise ValueError("pole and residue must be finite")


@dataclass(frozen=True)
class ModalDecomposition:
    modes: tuple
    source_order: int = field(default=0)

    def __init__(self, modes, source_order=None):
        modes = tuple(modes)
        object.__setattr__(self, "modes", modes)
        if source_order is None:
            source_order = len(modes)
        object.__setattr__(self, "source_order", source_order)
        if len(modes) != source_order:
            raise ValueError("sum of multiplicities must equal source order")


def poly_eval(p: Polynomial, s):
    """Horner evaluation of p at scalar or array argument s."""
    c = p.coeffs
    acc = np.zeros_like(np.asarray(s), dtype=np.result_type(c.dtype, np.asarray(s).dtype))
    for k in range(len(c) - 1, -1, -1):
        acc = acc * s + c[k]
    if np.ndim(s) == 0:
        return acc[()]
    return acc


def poly_derivative(p: Polynomial) -> Polynomial:
    c = p.coeffs
    if len(c) == 1:
        return Polynomial(np.zeros(1, dtype=c.dtype))
    return Polynomial(c[1:] * np.arange(1, len(c)))


def poly_multiply(a: Polynomial, b: Polynomial) -> Polynomial:
    return Polynomial(np.convolve(a.coeffs, b.coeffs))


def _aberth(monic: np.ndarray, max_iter: int = _ABERTH_MAX_ITER):
    """Aberth-Ehrlich simultaneous root iteration on a monic polynomial.

    Returns (roots, converged).  Coefficients ascending, leading coeff 1.
    """
    n = len(monic) - 1
    if n == 1:
        return np.array([-monic[0]], dtype=complex), True
    deriv = monic[1:] * np.arange(1, n + 1)

    # Cauchy-style radius keeps the start circle near the root annulus.
    radius = 1.0 + max(abs(c) for c in monic[:-1])
    angles = 2.0 * np.pi * np.arange(n) / n + 0.43
    z = radius * np.exp(1j * angles)

    def horner(c, x):
        acc = np.zeros_like(x)
        for k in range(len(c) - 1, -1, -1):
            acc = acc * x + c[k]
        return acc

    for _ in range(max_iter):
        pz = horner(monic, z)
        dz = horner(deriv, z)
        # w = p/p' with guard against p'(z) = 0 at a perfectly multiple root
        bad = dz == 0
        if np.any(bad):
            dz = np.where(bad, 1e-30, dz)
        w = pz / dz
        diff = z[:, None] - z[None, :]
        np.fill_diagonal(diff, np.inf)
        s = np.sum(1.0 / diff, axis=1)
        denom = 1.0 - w * s
        denom = np.where(denom == 0, 1e-30, denom)
        step = w / denom
        z = z - step
        if np.all(np.abs(step) <= 1e-14 * np.maximum(1.0, np.abs(z))):
            return z, True
    return z, False


def _scaled_roots(den: Polynomial):
    """All denominator roots (unclustered) plus the variable scale used."""
    c = np.asarray(den.coeffs, dtype=complex)
    n = len(c) - 1
    if n < 1:
        raise ValueError("denominator degree must be >= 1")
    # Scale s = sigma*z so the scaled roots sit near the unit circle.
    sigma = _scale_factor(den)
    scaled = c * sigma ** np.arange(n + 1)
    monic = scaled / scaled[-1]

    roots, ok = _aberth(monic)
    if not ok:
        # Companion-matrix QR fallback.
        comp = np.zeros((n, n), dtype=complex)
        comp[1:, :-1] = np.eye(n - 1)
        comp[:, -1] = -monic[:-1]
        roots = np.linalg.eigvals(comp)
        if not np.all(np.isfinite(roots)):
            raise NonConvergence("root finding failed: Aberth and companion QR")
    # Snap numerically-real roots onto the axis.
    im_small = np.abs(roots.imag) <= _REALIFY_TOL * np.maximum(1.0, np.abs(roots))
    roots = np.where(im_small, roots.real + 0j, roots)
    return roots, sigma


def _symmetrize(rs):
    """Replace near-conjugate root pairs by exact pairs (real-coefficient case)."""
    upper = sorted((r for r in rs if r.imag > 0), key=lambda z: (z.real, z.imag))
    lower = sorted((r for r in rs if r.imag < 0), key=lambda z: (z.real, -z.imag))
    real_rs = [r for r in rs if r.imag == 0]
    out = list(real_rs)
    used = [False] * len(lower)
    for z in upper:
        best, best_d = None, None
        for i, w in enumerate(lower):
            if used[i]:
                continue
            d = abs(z - w.conjugate())
            if best_d is None or d < best_d:
                best, best_d = i, d
        if best is not None:
            used[best] = True
            m = (z + lower[best].conjugate()) / 2
            out.extend([m, m.conjugate()])
        else:
            out.append(complex(z.real, 0.0))
    for i, w in enumerate(lower):
        if not used[i]:
            out.append(complex(w.real, 0.0))
    return out


def _cluster(roots: np.ndarray, tol: float, real_coeffs: bool):
    """Merge roots within relative distance tol; returns sorted (root, k) list.

    Single-linkage components keep the merge order-independent, and exact
    conjugate symmetrization keeps clusters of real-coefficient polynomials
    mirror-symmetric.
    """
    rs = list(roots)
    if real_coeffs:
        rs = _symmetrize(rs)
    rs = [complex(r.real, 0.0) if abs(r.imag) <= _REALIFY_TOL * max(1.0, abs(r)) else r
          for r in rs]
    rs.sort(key=lambda z: (z.real, abs(z.imag), z.imag))
    n = len(rs)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if abs(rs[i] - rs[j]) <= tol * max(1.0, abs(rs[i]), abs(rs[j])):
                parent[find(i)] = find(j)
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(rs[i])
    cleaned = []
    for g in groups.values():
        c = sum(g) / len(g)
        if abs(c.imag) <= _REALIFY_TOL * max(1.0, abs(c)):
            c = complex(c.real, 0.0)
        cleaned.append((c, len(g)))
    cleaned.sort(key=lambda rk: (rk[0].real, rk[0].imag))
    return cleaned


def _residues_scaled(num_s: np.ndarray, den_s: np.ndarray, clusters):
    """Residue table for a clustering, all quantities in the scaled variable."""
    modes = []
    for pole, k in clusters:
        den_shift = _taylor_shift(den_s, pole)
        num_shift = _taylor_shift(num_s, pole)
        q = den_shift[k:]
        series = _series_div(num_shift, q, k)
        for j in range(1, k + 1):
            modes.append((pole, series[k - j], j))
    return modes


def _reconstruction_error(num_s, den_s, modes):
    """Max relative reconstruction error at a fixed probe circle."""
    angles = 2.0 * np.pi * np.arange(16) / 16 + 0.37
    probes = 1.9 * np.exp(1j * angles)
    err = 0.0
    for s in probes:
        if min(abs(s - p) for p, _, _ in modes) < 1e-3:
            continue
        h = _horner_c(num_s, s) / _horner_c(den_s, s)
        rec = sum(r / (s - p) ** j for p, r, j in modes)
        err = max(err, abs(h - rec) / max(abs(h), 1e-300))
    return err


def _horner_c(c, s):
    acc = 0.0 + 0.0j
    for k in range(len(c) - 1, -1, -1):
        acc = acc * s + c[k]
    return acc


def _candidate_clusterings(roots, cluster_tol, real_coeffs):
    seen = []
    for factor in _CLUSTER_LADDER:
        cl = _cluster(roots, cluster_tol * factor, real_coeffs)
        key = tuple(k for _, k in cl)
        if all(key != tuple(k for _, k in c) for c in seen):
            seen.append(cl)
    return seen


def _select_clustering(den_s, roots, cluster_tol, real_coeffs):
    """Pick the clustering whose induced expansion of 1/D reconstructs best.

    Multiplicity is only meaningful for the decomposition: treating a smeared
    k-fold root as k simple poles makes the residues blow up and wrecks
    reconstruction, while merging genuinely distinct poles mismodels D.  The
    probe test separates the two cases; ties go to the finest clustering.
    """
    candidates = _candidate_clusterings(roots, cluster_tol, real_coeffs)
    if len(candidates) == 1:
        return candidates[0]
    one = np.ones(1, dtype=complex)
    best, best_err = None, None
    for cl in candidates:
        modes = _residues_scaled(one, den_s, cl)
        err = _reconstruction_error(one, den_s, modes)
        if best_err is None or err < best_err * (1 - 1e-9):
            best, best_err = cl, err
    return best


def _scale_factor(den: Polynomial) -> float:
    c = den.coeffs
    n = len(c) - 1
    a0, an = abs(complex(c[0])), abs(complex(c[-1]))
    sigma = (a0 / an) ** (1.0 / n) if a0 > 0 else 1.0
    if not np.isfinite(sigma) or sigma == 0:
        sigma = 1.0
    return sigma


def _polish_multiple_root(den_s: np.ndarray, c: complex, k: int) -> complex:
    """Newton-polish a k-fold root on the (k-1)th derivative, where it is simple.

    The centroid of a smeared cluster is only accurate to the eps**(1/k) noise
    floor; one simple-root Newton run restores near machine accuracy.
    """
    p = np.array(den_s, dtype=complex)
    for _ in range(k - 1):
        p = p[1:] * np.arange(1, len(p))
    dp = p[1:] * np.arange(1, len(p))
    was_real = c.imag == 0
    for _ in range(8):
        fv = _horner_c(p, c)
        dv = _horner_c(dp, c)
        if dv == 0:
            break
        step = fv / dv
        c = c - step
        if abs(step) <= 1e-15 * max(1.0, abs(c)):
            break
    if was_real or abs(c.imag) <= _REALIFY_TOL * max(1.0, abs(c)):
        c = complex(c.real, 0.0)
    return c


def find_poles(den: Polynomial, cluster_tol: float = DEFAULT_CLUSTER_TOL):
    """Roots of den with multiplicities, as a list of (pole, multiplicity).

    Roots closer than the clustering tolerance merge into one multiple root;
    a short tolerance ladder with reconstruction validation resolves the
    eps**(1/k) smear of inexact multiple roots without merging well-separated
    simple poles.
    """
    roots, sigma = _scaled_roots(den)
    real_coeffs = not np.iscomplexobj(den.coeffs)
    den_s = np.asarray(den.coeffs, dtype=complex) * sigma ** np.arange(len(den.coeffs))
    chosen = _select_clustering(den_s, roots, cluster_tol, real_coeffs)
    polished = [(_polish_multiple_root(den_s, c, k) if k > 1 else c, k) for c, k in chosen]
    return [(p * sigma, k) for p, k in polished]


def _taylor_shift(coeffs: np.ndarray, c: complex) -> np.ndarray:
    """Coefficients of p(c + x) given coefficients of p(x) (ascending)."""
    out = np.array(coeffs, dtype=complex)
    n = len(out)
    # Repeated synthetic division by (x - c) accumulates the Taylor expansion.
    for i in range(n - 1):
        for k in range(n - 2, i - 1, -1):
            out[k] += c * out[k + 1]
    return out


def _series_div(num: np.ndarray, den: np.ndarray, terms: int) -> np.ndarray:
    """Leading `terms` coefficients of the power series num(x)/den(x)."""
    q = np.zeros(terms, dtype=complex)
    d0 = den[0]
    for m in range(terms):
        acc = num[m] if m < len(num) else 0.0
        for i in range(1, m + 1):
            if i < len(den):
                acc -= den[i] * q[m - i]
        q[m] = acc / d0
    return q


def decompose(H: TransferFunction, cluster_tol: float = DEFAULT_CLUSTER_TOL) -> ModalDecomposition:
    """Partial-fraction expansion of a strictly proper H into modal terms.

    Simple poles carry the usual num(p)/den'(p) residue; a k-fold pole
    contributes terms r_ij/(s - p)**j for j = 1..k obtained from the local
    Taylor expansion of (s - p)**k * H(s).
    """
    if H.num.is_zero():
        raise ValueError("cannot decompose the zero transfer function")
    clusters = find_poles(H.den, cluster_tol)

    # Work in the scaled variable used by the root finder for conditioning.
    n = H.den.degree
    sigma = _scale_factor(H.den)
    den_s = np.asarray(H.den.coeffs, dtype=complex) * sigma ** np.arange(n + 1)
    num_c = np.asarray(H.num.coeffs, dtype=complex)
    num_s = num_c * sigma ** np.arange(len(num_c))

    scaled_clusters = [(p / sigma, k) for p, k in clusters]
    modes = []
    for (pole, _), (z, r_scaled, j) in zip(
        [(p, k) for p, k in clusters for _ in range(k)],
        _residues_scaled(num_s, den_s, scaled_clusters),
    ):
        modes.append(Mode(pole=complex(pole), residue=complex(r_scaled * sigma**j), j=j))
    return ModalDecomposition(modes, source_order=n)


def reconstruct(d: ModalDecomposition, s):
    """Evaluate the modal sum at s (scalar or array)."""
    s = np.asarray(s, dtype=complex)
    acc = np.zeros_like(s)
    for m in d.modes:
        acc = acc + m.residue / (s - m.pole) ** m.j
    if acc.ndim == 0:
        return acc[()]
    return acc


def to_gain_form(d: ModalDecomposition):
    """Convert simple real negative-pole modes to (decay_rate, gain) pairs.

    Each residue form r/(s - lambda) with lambda = -p (p > 0) becomes gain
    form A/(s/p + 1) with A = r/p, so sum(A) equals the DC value H(0).
    """
    if any(m.j != 1 for m in d.modes):
        raise RepeatedPoleUnsupported("gain form requires simple poles")
    pairs = []
    for m in d.modes:
        if abs(m.pole.imag) > _REALIFY_TOL * max(1.0, abs(m.pole)):
            raise ComplexPoleUnsupported(f"pole {m.pole} is not real")
        lam = m.pole.real
        if lam >= 0:
            raise ValueError(f"pole {lam} is not strictly negative")
        p = -lam
        residue = m.residue.real
        pairs.append((p, residue / p))
    return pairs


def analytic_step_response(d: ModalDecomposition, times) -> np.ndarray:
    """Exact unit-step response of the modal sum on the given time grid.

    A simple mode in gain form (p, A) contributes A*(1 - exp(-p t)); a
    multiplicity-j term contributes the closed-form inverse transform of
    r/(s(s - p)**j), whose transient part carries t**(m-1) exp(p t) factors.
    """
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or len(t) == 0:
        raise ValueError("times must be a nonempty 1-D array")
    if np.any(t < 0) or np.any(np.diff(t) <= 0):
        raise ValueError("times must be nonnegative and strictly increasing")

    acc = np.zeros(len(t), dtype=complex)
    for m in d.modes:
        p, r, j = m.pole, m.residue, m.j
        const = (-p) ** (-j)
        trans = np.zeros(len(t), dtype=complex)
        fact = 1.0
        for mm in range(1, j + 1):
            b = (-1.0) ** (j - mm) / p ** (j - mm + 1)
            if mm > 1:
                fact *= mm - 1
            trans = trans + b * t ** (mm - 1) / fact
        acc = acc + r * (const + trans * np.exp(p * t))
    if np.max(np.abs(acc.imag)) > 1e-8 * max(1.0, np.max(np.abs(acc.real))):
        raise ValueError("step response has a non-negligible imaginary part; "
                         "conjugate pole pairs are incomplete")
    return acc.real


# ---------------------------------------------------------------------------
# JSON serialization (versioned)
# ---------------------------------------------------------------------------

SCHEMA_VERSION = 1


def tf_to_json(H: TransferFunction) -> str:
    doc = {
        "version": SCHEMA_VERSION,
        "num": [float(c) for c in np.real_if_close(H.num.coeffs)],
        "den": [float(c) for c in np.real_if_close(H.den.coeffs)],
    }
    return json.dumps(doc, sort_keys=True)


def tf_from_json(text: str) -> TransferFunction:
    doc = json.loads(text)
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported transfer-function schema version {doc.get('version')}")
    return TransferFunction(Polynomial(doc["num"]), Polynomial(doc["den"]))


def decomposition_to_json(d: ModalDecomposition) -> str:
    doc = {
        "version": SCHEMA_VERSION,
        "modes": [
            {
                "pole_re": m.pole.real,
                "pole_im": m.pole.imag,
                "residue_re": m.residue.real,
                "residue_im": m.residue.imag,
                "j": m.j,
            }
            for m in d.modes
        ],
    }
    return json.dumps(doc, sort_keys=True)


def decomposition_from_json(text: str) -> ModalDecomposition:
    doc = json.loads(text)
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported decomposition schema version {doc.get('version')}")
    modes = [
        Mode(
            pole=complex(m["pole_re"], m["pole_im"]),
            residue=complex(m["residue_re"], m["residue_im"]),
            j=int(m["j"]),
        )
        for m in doc["modes"]
    ]
    return ModalDecomposition(modes)
