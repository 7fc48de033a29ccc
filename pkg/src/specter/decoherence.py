"""Attenuation functional chi(T) for Gaussian classical noise.

chi = 1/2 * integral S(omega) |F_T(omega)|^2 d omega / 2 pi, coherence
W = exp(-chi).  White components are handled exactly (the filter of any
+/-1 modulation integrates to T), everything else by panelled
Gauss-Legendre quadrature with a phase-averaged tail.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import IdentificationError, NumericError, ValidationError
from .filters import build_modulation, filter_value, sequences_for_times
from .noise import NoiseModel

# quadrature knobs
PANELS_PER_SWITCH_FREQ = 200.0   # omega_max = this / min(shortest segment, tau_c)
MAX_PANELS = 400_000
_GL_LO = np.polynomial.legendre.leggauss(20)
_GL_HI = np.polynomial.legendre.leggauss(28)


@dataclass
class DecayCurve:
    times: np.ndarray
    chi: np.ndarray
    coherence: np.ndarray = field(default=None)
    band: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.chi = np.asarray(self.chi, dtype=float)
        if self.coherence is None:
            self.coherence = np.exp(-self.chi)
        self.coherence = np.asarray(self.coherence, dtype=float)


def _breakpoints(model: NoiseModel, T: float, dt_min: float):
    short = [dt_min] + [c.tau_c for c in model.components if c.kind == "ou"]
    w_max = PANELS_PER_SWITCH_FREQ / min(short)
    pts = [0.0]
    for c in model.components:
        if c.kind == "ou":
            base = 1.0 / c.tau_c
            pts.extend(base * 10.0 ** (np.arange(-12, 13) / 4.0))
        elif c.kind == "peak":
            off = c.width * np.array([-16, -8, -4, -2, -1, 0, 1, 2, 4, 8, 16])
            pts.extend(c.center + off)
            w_max = max(w_max, c.center + 40 * c.width)
    pts = np.unique(np.clip(np.asarray(pts), 0.0, w_max))
    pts = np.union1d(pts, [w_max])
    h = math.pi / T
    edges = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil((b - a) / h)))
        edges.append(np.linspace(a, b, n + 1)[1:])
    edges = np.concatenate(edges)
    if edges.size - 1 > MAX_PANELS:
        raise NumericError("quadrature panel budget exceeded",
                           {"panels": int(edges.size - 1), "T": T,
                            "dt_min": dt_min})
    return edges, w_max


def _panel_integral(fn, edges, rule):
    x, wts = rule
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    vals = fn(nodes).reshape(a.size, x.size)
    return float(np.sum(half * (vals @ wts)))


def _tail(model, weights_sq, w_max):
    """Phase-averaged |F|^2 -> sum c_j^2 / omega^2 beyond w_max."""
    def g(u):
        # omega = w_max / u, d omega = w_max / u^2 du
        if u <= 0.0:
            return 0.0
        w = w_max / u
        return float(model.evaluate(w)) / w ** 2 * w_max / u ** 2
    val, _ = integrate.quad(g, 0.0, 1.0, epsabs=0.0, epsrel=1e-10, limit=200)
    return weights_sq * val


def attenuation_chi(model: NoiseModel, seq, rtol: float = 1e-6) -> float:
    """chi for a bound model under a sequence (or modulation function)."""
    if not model.is_bound():
        names = [f.name for f in model.free_parameters()]
        raise IdentificationError(f"model has unbound parameters {names}")
    mod = build_modulation(seq)
    T = mod.total_time
    chi = 0.0
    rest = []
    for c in model.components:
        if c.kind == "white":
            chi += 0.5 * c.level * T
        else:
            rest.append(c)
    if not rest:
        return chi
    sub = NoiseModel(tuple(rest))
    dt_min = float(np.min(np.diff(mod.switch_times)))
    edges, w_max = _breakpoints(sub, T, dt_min)

    def integrand(w):
        return sub.evaluate(w) * filter_value(mod, w)

    lo = _panel_integral(integrand, edges, _GL_LO)
    hi = _panel_integral(integrand, edges, _GL_HI)
    c = mod.switch_weights()
    tail = _tail(sub, float(np.sum(c ** 2)), w_max)
    total = hi + tail
    scale = max(abs(total), 1e-300)
    if abs(hi - lo) > rtol * scale and abs(hi - lo) > 1e-14:
        raise NumericError("quadrature did not converge",
                           {"T": T, "low_order": lo, "high_order": hi,
                            "tail": tail, "panels": int(edges.size - 1)})
    # integrand is even: 1/2 * 2 * int_0^inf / 2 pi
    chi += total / (2.0 * math.pi)
    return chi


def chi_time_domain(model: NoiseModel, seq) -> float:
    """Exact chi for models made of OU and white components only."""
    if not model.is_bound():
        raise IdentificationError("model has unbound parameters")
    if model.of_kind("peak"):
        raise ValidationError("time-domain chi supports OU and white components only")
    mod = build_modulation(seq)
    chi = 0.0
    for c in model.components:
        if c.kind == "white":
            chi += 0.5 * c.level * mod.total_time
        elif c.b != 0.0:
            chi += c.b ** 2 * ou_chi_from_switches(c.tau_c, mod.switch_times, mod.signs())
    return chi


def chi_curve(model: NoiseModel, sequences, method: str = "auto") -> np.ndarray:
    """chi for each sequence.

    ``method``: "quadrature" (frequency-domain integral), "time_domain" (closed
    form, OU and white only) or "auto" (time domain when possible).
    """
    if method == "auto":
        method = "quadrature" if model.of_kind("peak") else "time_domain"
    if method == "quadrature":
        return np.array([attenuation_chi(model, s) for s in sequences])
    if method == "time_domain":
        return _chi_time_domain_many(model, sequences)
    raise ValidationError(f"unknown chi method {method!r}")


def _chi_time_domain_many(model: NoiseModel, sequences) -> np.ndarray:
    if not model.is_bound():
        raise IdentificationError("model has unbound parameters")
    if model.of_kind("peak"):
        raise ValidationError("time-domain chi supports OU and white components only")
    mods = [build_modulation(s) for s in sequences]
    if not mods:
        return np.zeros(0)
    T = np.array([m.total_time for m in mods])
    L, S = pack_modulations(mods)
    chi = np.zeros(T.size)
    for c in model.components:
        if c.kind == "white":
            chi += 0.5 * c.level * T
        elif c.b != 0.0:
            chi += c.b ** 2 * ou_chi_batch(c.tau_c, L, S)
    return chi


def decay_curve(model: NoiseModel, family, times: Sequence[float], label="",
                method: str = "auto") -> DecayCurve:
    """chi and coherence over total times for a sequence family literal.

    ``family`` is e.g. ``"echo"``, ``"cpmg:tau=2.5"``, ``"walsh:k=5,lambda=10"``.
    T = 0 gives chi = 0.
    """
    times = np.asarray(times, dtype=float)
    chi = np.zeros(times.shape)
    nz = times > 0
    if np.any(nz):
        seqs = sequences_for_times(family, times[nz])
        chi[nz] = chi_curve(model, seqs, method)
    return DecayCurve(times, chi, label=label or str(family))


def _x_minus_1_plus_exp(x):
    """x - 1 + exp(-x) without cancellation for small x."""
    x = np.asarray(x, dtype=float)
    small = x < 1e-3
    xs = x[small]
    out = np.empty_like(x)
    out[small] = xs ** 2 / 2 - xs ** 3 / 6 + xs ** 4 / 24 - xs ** 5 / 120
    out[~small] = x[~small] + np.expm1(-x[~small])
    return out


def ou_chi_from_switches(tau_c: float, switch_times, signs) -> float:
    """chi / b^2 for one OU component given switch times (incl. 0 and T) and signs."""
    t = np.asarray(switch_times, dtype=float) / tau_c
    s = np.asarray(signs, dtype=float)
    L = np.diff(t)
    diag = 2.0 * _x_minus_1_plus_exp(L)
    su = s * -np.expm1(-L)
    # pairs j < l couple through exp(-(start_l - end_j) / tau)
    gap = t[None, :-1] - t[1:, None]
    decay = np.triu(np.exp(-np.maximum(gap, 0.0)), 1)
    return 0.5 * tau_c ** 2 * float(np.sum(diag) + 2.0 * (su @ decay @ su))


def chi_ou_time_domain(b: float, tau_c: float, seq) -> float:
    """Closed-form chi for one OU component under any piecewise +/-1 modulation.

    Uses the exponential autocorrelation b^2 exp(-|t|/tau_c) directly, so it
    is an independent route to the same number as :func:`attenuation_chi`.
    """
    mod = build_modulation(seq)
    return b ** 2 * ou_chi_from_switches(tau_c, mod.switch_times, mod.signs())


def chi_cpmg_linear(S_at_peak: float, T: float) -> float:
    """Delta-filter approximation, (4 / pi^2) S(omega_m) T."""
    return 4.0 / math.pi ** 2 * S_at_peak * T


def chi_echo_slow_ou(b: float, tau_c: float, T):
    return b ** 2 * np.asarray(T, dtype=float) ** 3 / (12.0 * tau_c)


def chi_echo_composite(T, T2: float, T0: float):
    """(T/T2)^3 + T/T0."""
    T = np.asarray(T, dtype=float)
    return (T / T2) ** 3 + T / T0


def chi_ramsey_gaussian(T, t2star: float):
    return (np.asarray(T, dtype=float) / t2star) ** 2


def timescales(b_s=None, tau_s=None, b_f=0.0, tau_f=0.0, S_w=0.0,
               want=("t2star", "t2", "t0")) -> dict:
    """T2* = sqrt(2)/b_s, T2 = (12 tau_s / b_s^2)^(1/3), T0 = 1/(b_f^2 tau_f + S_w/2)."""
    out = {}
    if "t2star" in want:
        if not b_s:
            raise IdentificationError("t2star needs a slow OU component (b_s)")
        out["t2star"] = math.sqrt(2.0) / b_s
    if "t2" in want:
        if not b_s or not tau_s:
            raise IdentificationError("t2 needs a slow OU component (b_s, tau_s)")
        out["t2"] = (12.0 * tau_s / b_s ** 2) ** (1.0 / 3.0)
    if "t0" in want:
        rate = b_f ** 2 * tau_f + S_w / 2.0
        if rate <= 0:
            raise IdentificationError("t0 needs a fast OU or white component")
        out["t0"] = 1.0 / rate
    return out


def model_timescales(model: NoiseModel) -> dict:
    """Timescales of a bound model; the longest-tau OU is the slow bath."""
    ous = sorted(model.of_kind("ou"), key=lambda c: c.tau_c)
    out = {}
    if ous:
        slow = ous[-1]
        out.update(timescales(slow.b, slow.tau_c, want=("t2star", "t2")))
    rate = sum(c.b ** 2 * c.tau_c for c in ous[:-1])
    rate += sum(c.level / 2.0 for c in model.of_kind("white"))
    if rate > 0:
        out["t0"] = 1.0 / rate
    return out


def pack_modulations(mods) -> tuple[np.ndarray, np.ndarray]:
    """Segment lengths and signs of several modulations, zero-padded to equal length."""
    K = max(len(m.switch_times) - 1 for m in mods)
    L = np.zeros((len(mods), K))
    S = np.zeros((len(mods), K))
    for i, m in enumerate(mods):
        d = np.diff(np.asarray(m.switch_times, dtype=float))
        L[i, :d.size] = d
        S[i, :d.size] = m.signs()
    return L, S


def ou_chi_batch(tau_c: float, L: np.ndarray, S: np.ndarray) -> np.ndarray:
    """chi / b^2 for many modulations at once (rows of :func:`pack_modulations`).

    Same sum as :func:`ou_chi_from_switches`, with the pair term accumulated
    by the recursion A_{l+1} = exp(-L_l / tau) A_l + a_l.
    """
    x = L / tau_c
    diag = 2.0 * _x_minus_1_plus_exp(x).sum(axis=1)
    a = S * -np.expm1(-x)
    e = np.exp(-x)
    A = np.zeros(L.shape[0])
    acc = np.zeros(L.shape[0])
    for k in range(L.shape[1]):
        acc += a[:, k] * A
        A = e[:, k] * A + a[:, k]
    return 0.5 * tau_c ** 2 * (diag + 2.0 * acc)
