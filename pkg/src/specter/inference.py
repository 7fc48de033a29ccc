"""Decay-curve fitting, shape classification, PSD extraction and
oscillation detection.

Signals are coherences in [0, 1] (use :meth:`DecayRecord.calibrated` for an
affine map from raw contrast).  Fits are weighted least squares with
absolute per-point sigma, multi-started over log-spaced timescales.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal as sps

from .errors import FitError, ShapeViolationError, ValidationError
from .filters import cpmg_probe_frequency, parse_sequence_family

FAMILIES = ("gaussian", "exponential", "stretched", "cubic_plus_linear",
            "damped_oscillation")
MONOTONIC = FAMILIES[:4]
N_STARTS = 16


@dataclass
class DecayRecord:
    """One measured decay curve.

    ``sequence`` is a family literal such as ``"echo"`` or ``"cpmg:tau=5"``;
    ``times`` are total evolution times in us.
    """

    sequence: str
    times: np.ndarray
    signal: np.ndarray
    sigma: np.ndarray
    rabi: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.signal = np.asarray(self.signal, dtype=float)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float),
                                     self.times.shape).copy()
        if not (self.times.shape == self.signal.shape == self.sigma.shape):
            raise ValidationError("times, signal and sigma must have equal lengths")
        if np.any(self.sigma <= 0):
            raise ValidationError("sigma must be > 0")
        if not np.all(np.isfinite(self.signal)) or not np.all(np.isfinite(self.times)):
            raise ValidationError("signal and times must be finite")
        parse_sequence_family(self.sequence)

    @property
    def family(self) -> str:
        return parse_sequence_family(self.sequence)[0]

    @property
    def family_args(self) -> dict:
        return parse_sequence_family(self.sequence)[1]

    def calibrated(self, scale: float = 1.0, offset: float = 0.0) -> "DecayRecord":
        """Map raw signal to coherence: (signal - offset) / scale."""
        if scale == 0:
            raise ValidationError("calibration scale must be non-zero")
        return DecayRecord(self.sequence, self.times, (self.signal - offset) / scale,
                           self.sigma / abs(scale), self.rabi, dict(self.meta))

    def __len__(self):
        return self.times.size


@dataclass
class FitResult:
    family: str
    params: dict
    covariance: np.ndarray
    param_names: list
    chi2: float
    n_points: int
    red_chi2: float
    aicc: float
    derived: dict = field(default_factory=dict)
    degenerate: bool = False
    at_bound: list = field(default_factory=list)

    @property
    def n_params(self):
        return len(self.param_names)

    def stderr(self, name):
        i = self.param_names.index(name)
        v = self.covariance[i, i]
        return math.sqrt(v) if v >= 0 else math.nan

    def predict(self, times):
        return FAMILY_MODELS[self.family](np.asarray(times, dtype=float),
                                          *[self.params[n] for n in self.param_names])

    def to_dict(self):
        return {"family": self.family,
                "params": {k: float(v) for k, v in self.params.items()},
                "stderr": {n: self.stderr(n) for n in self.param_names},
                "covariance": np.asarray(self.covariance).tolist(),
                "red_chi2": self.red_chi2, "aicc": self.aicc,
                "n_points": self.n_points, "derived": _jsonable(self.derived),
                "degenerate": self.degenerate, "at_bound": list(self.at_bound)}


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, float) and not math.isfinite(v):
            out[k] = "inf" if v > 0 else ("-inf" if v < 0 else "nan")
        else:
            out[k] = v
    return out


# -- family definitions ------------------------------------------------------
# All decay families are parameterised by rates (>= 0) so that "no decay" sits
# on the boundary instead of at infinity.

def _gaussian(T, g):
    return np.exp(-g * T ** 2)


def _exponential(T, r):
    return np.exp(-r * T)


def _stretched(T, r, p):
    return np.exp(-(r * T) ** p)


def _cubic_plus_linear(T, a, r):
    return np.exp(-a * T ** 3 - r * T)


def _damped_oscillation(T, r, A, w, phi):
    return np.exp(-r * T) * (1.0 - A + A * np.cos(w * T + phi))


def _jac_gaussian(T, g):
    return (-T ** 2 * _gaussian(T, g))[:, None]


def _jac_exponential(T, r):
    return (-T * _exponential(T, r))[:, None]


def _jac_stretched(T, r, p):
    W = _stretched(T, r, p)
    x = r * T
    with np.errstate(divide="ignore", invalid="ignore"):
        xp = x ** p
        d_r = np.where(T > 0, -W * p * xp / max(r, 1e-300), 0.0)
        d_p = np.where(x > 0, -W * xp * np.log(np.where(x > 0, x, 1.0)), 0.0)
    return np.stack([d_r, d_p], axis=1)


def _jac_cubic_plus_linear(T, a, r):
    W = _cubic_plus_linear(T, a, r)
    return np.stack([-T ** 3 * W, -T * W], axis=1)


def _jac_damped_oscillation(T, r, A, w, phi):
    e = np.exp(-r * T)
    c, s = np.cos(w * T + phi), np.sin(w * T + phi)
    base = 1.0 - A + A * c
    return np.stack([-T * e * base, e * (c - 1.0), -e * A * T * s, -e * A * s], axis=1)


FAMILY_JACOBIANS = {"gaussian": _jac_gaussian, "exponential": _jac_exponential,
                    "stretched": _jac_stretched, "cubic_plus_linear": _jac_cubic_plus_linear,
                    "damped_oscillation": _jac_damped_oscillation}

FAMILY_MODELS = {"gaussian": _gaussian, "exponential": _exponential,
                 "stretched": _stretched, "cubic_plus_linear": _cubic_plus_linear,
                 "damped_oscillation": _damped_oscillation}
PARAM_NAMES = {"gaussian": ["g"], "exponential": ["r"], "stretched": ["r", "p"],
               "cubic_plus_linear": ["a", "r"],
               "damped_oscillation": ["r", "A", "w", "phi"]}


def aicc(chi2: float, n: int, k: int) -> float:
    """Small-sample corrected Akaike score for Gaussian errors of known sigma."""
    if n - k - 1 <= 0:
        return math.inf
    return chi2 + 2 * k + 2.0 * k * (k + 1) / (n - k - 1)


def _timescale_grid(times):
    t = times[times > 0]
    lo = max(np.min(t), 1e-6) if t.size else 1e-3
    hi = 10.0 * (np.max(t) if t.size else 1.0)
    return np.geomspace(lo / 3.0, hi, N_STARTS)


def _derive(family, params, cov, names):
    d = {}

    def inv_pow(name, power):
        i = names.index(name)
        v = params[name]
        s = math.sqrt(max(cov[i, i], 0.0))
        if v <= 0:
            return math.inf, math.nan
        try:
            T = v ** (-1.0 / power)
        except OverflowError:
            # a rate this small means no decay is resolved
            return math.inf, math.nan
        return T, T * s / (power * v)

    if family == "gaussian":
        d["t2star"], d["t2star_err"] = inv_pow("g", 2)
    elif family == "exponential":
        d["t0"], d["t0_err"] = inv_pow("r", 1)
        d["rate_upper"] = params["r"] + 2.0 * math.sqrt(max(cov[0, 0], 0.0))
    elif family == "stretched":
        d["t2"], d["t2_err"] = inv_pow("r", 1)
        d["p"] = params["p"]
    elif family == "cubic_plus_linear":
        d["t2"], d["t2_err"] = inv_pow("a", 3)
        d["t0"], d["t0_err"] = inv_pow("r", 1)
    elif family == "damped_oscillation":
        d["t_decay"], d["t_decay_err"] = inv_pow("r", 1)
        d["contrast"] = params["A"]
        d["frequency"] = params["w"]
    return d


def _starts(family, rec: DecayRecord, extra_freqs=()):
    taus = _timescale_grid(rec.times)
    if family == "gaussian":
        return [[1.0 / t ** 2] for t in taus]
    if family == "exponential":
        return [[1.0 / t] for t in taus]
    if family == "stretched":
        return [[1.0 / t, p] for t in taus for p in (1.0, 2.0, 3.0)]
    if family == "cubic_plus_linear":
        return [[1.0 / t2 ** 3, 1.0 / t0] for t2 in taus for t0 in taus]
    if family == "damped_oscillation":
        t = rec.times
        span = max(np.ptp(t), 1e-9)
        freqs = list(extra_freqs) or list(np.geomspace(2 * math.pi / span,
                                                       math.pi / _min_step(t), 6))
        out = []
        for w in freqs:
            for r in (1.0 / taus[len(taus) // 2], 1.0 / taus[-1]):
                for A in (0.1, 0.5):
                    for phi in (0.0, -math.pi / 2, math.pi / 2):
                        out.append([r, A, w, phi])
        return out
    raise ValidationError(f"unknown family {family!r}")


def _min_step(t):
    d = np.diff(np.sort(t))
    d = d[d > 0]
    return float(np.min(d)) if d.size else 1.0


def _bounds(family, rec):
    inf = np.inf
    if family == "stretched":
        return [0.0, 0.5], [inf, 4.0]
    if family == "damped_oscillation":
        wmax = 2.0 * math.pi / _min_step(rec.times)
        return [0.0, 0.0, 0.0, -2 * math.pi], [inf, 1.0, wmax, 2 * math.pi]
    n = len(PARAM_NAMES[family])
    return [0.0] * n, [inf] * n


def fit_decay(rec: DecayRecord, family: str, starts=None, max_polish: int = 8) -> FitResult:
    """Weighted least-squares fit of one decay family with multi-start.

    Every start on the grid is scored; the ``max_polish`` best are refined.
    """
    if family not in FAMILY_MODELS:
        raise ValidationError(f"unknown family {family!r}")
    if len(rec) < 5:
        raise ValidationError("fit_decay needs at least 5 points")
    fn = FAMILY_MODELS[family]
    names = PARAM_NAMES[family]
    k = len(names)
    t, y, s = rec.times, rec.signal, rec.sigma
    lo, hi = _bounds(family, rec)

    jf = FAMILY_JACOBIANS[family]

    def resid(p):
        return (fn(t, *p) - y) / s

    def jac(p):
        return jf(t, *p) / s[:, None]

    grid = [np.clip(np.asarray(p0, dtype=float), lo, hi)
            for p0 in (starts if starts is not None else _starts(family, rec))]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        costs = np.array([np.sum(resid(p0) ** 2) for p0 in grid])
    costs[~np.isfinite(costs)] = np.inf
    order = np.argsort(costs, kind="stable")[:max_polish]
    best = None
    for p0 in (grid[i] for i in order):
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                res = optimize.least_squares(resid, p0, jac=jac, bounds=(lo, hi),
                                             x_scale="jac", method="trf",
                                             xtol=1e-12, ftol=1e-12, gtol=1e-12,
                                             max_nfev=400)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.fun)):
            continue
        cost = float(res.fun @ res.fun)
        if best is None or cost < best[0] - 1e-12:
            best = (cost, res)
    if best is None:
        raise FitError(f"{family} fit did not converge", {"family": family})
    chi2, res = best
    J = res.jac
    JtJ = J.T @ J
    degenerate = False
    try:
        cond = np.linalg.cond(JtJ)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e14:
        degenerate = True
    cov = np.linalg.pinv(JtJ)
    cov = 0.5 * (cov + cov.T)
    params = dict(zip(names, map(float, res.x)))
    n = len(rec)
    at_bound = [nm for nm, v, a, b in zip(names, res.x, lo, hi)
                if (np.isfinite(a) and abs(v - a) <= 1e-12 * max(1, abs(a)))
                or (np.isfinite(b) and abs(v - b) <= 1e-12 * max(1, abs(b)))]
    return FitResult(family, params, cov, list(names), chi2, n,
                     chi2 / max(n - k, 1), aicc(chi2, n, k),
                     _derive(family, params, cov, names), degenerate, at_bound)


@dataclass
class Classification:
    ranked: list          # FitResult, best first
    rejected: list        # FitResult excluded by the reduced chi-square rule
    margin: float
    tie: bool

    @property
    def best(self) -> FitResult:
        return self.ranked[0]

    def families(self):
        return [f.family for f in self.ranked]

    def get(self, family) -> FitResult | None:
        for f in self.ranked + self.rejected:
            if f.family == family:
                return f
        return None

    def to_dict(self):
        return {"ranked": [f.family for f in self.ranked],
                "rejected": [f.family for f in self.rejected],
                "margin": self.margin, "tie": self.tie,
                "fits": {f.family: f.to_dict() for f in self.ranked + self.rejected}}


def classify_decay(rec: DecayRecord, families=MONOTONIC, tie_margin: float = 1.0,
                   chi2_ratio: float = 2.0) -> Classification:
    """Fit monotonic families and rank them by AICc.

    Families whose reduced chi-square exceeds ``chi2_ratio`` times the best one
    are listed as rejected rather than ranked.  A tie is flagged when the top
    two scores differ by less than ``tie_margin``.
    """
    fits = [fit_decay(rec, f) for f in families]
    best_red = min(f.red_chi2 for f in fits)
    ok = [f for f in fits if f.red_chi2 <= chi2_ratio * max(best_red, 1e-300)]
    rejected = [f for f in fits if f not in ok]
    ok.sort(key=lambda f: (f.aicc, f.n_params))
    margin = ok[1].aicc - ok[0].aicc if len(ok) > 1 else math.inf
    return Classification(ok, rejected, margin, margin < tie_margin)


# -- CPMG -> PSD ---------------------------------------------------------------

@dataclass
class PsdPoint:
    omega: float
    S: float
    sigma: float
    source: str = ""
    record_index: int | None = None
    fit: FitResult | None = None

    def to_dict(self):
        d = {"omega_rad_per_us": self.omega, "S_per_us": self.S,
             "sigma_per_us": self.sigma, "source": self.source}
        if self.record_index is not None:
            d["record_index"] = self.record_index
        return d


def extract_psd_point(rec: DecayRecord, red_chi2_cap: float = 3.0,
                      record_index=None) -> PsdPoint:
    """S(omega_m) = (pi^2/4) Gamma from an exponential fit to a CPMG decay."""
    fam, args = parse_sequence_family(rec.sequence)
    if fam != "cpmg" or "tau" not in args or "n" in args:
        raise ValidationError("extract_psd_point needs a cpmg:tau=... record")
    tau = float(args["tau"])
    fit = fit_decay(rec, "exponential")
    if fit.red_chi2 > red_chi2_cap:
        raise ShapeViolationError(
            f"CPMG decay at tau={tau} is not exponential "
            f"(reduced chi2 {fit.red_chi2:.2f} > {red_chi2_cap}); "
            "the delta-filter approximation does not hold")
    k = math.pi ** 2 / 4.0
    return PsdPoint(cpmg_probe_frequency(tau), k * fit.params["r"],
                    k * fit.stderr("r"), rec.sequence, record_index, fit)


def psd_from_rate(gamma: float, tau: float, gamma_err: float = 0.0) -> PsdPoint:
    k = math.pi ** 2 / 4.0
    return PsdPoint(cpmg_probe_frequency(tau), k * gamma, k * gamma_err)


# -- pi-pulse fidelity ------------------------------------------------------------

@dataclass
class FidelityFit:
    F_pi: float
    F_pi_err: float
    n_z: float
    beta0: float
    c0: float
    covariance: np.ndarray
    red_chi2: float

    def to_dict(self):
        return {"F_pi": self.F_pi, "F_pi_err": self.F_pi_err, "n_z": self.n_z,
                "beta0": self.beta0, "c0": self.c0, "red_chi2": self.red_chi2}


def fit_pi_fidelity(N, signal, sigma=None, c0=None) -> FidelityFit:
    """Fit beta0 * (-n_z)^N + c0 and return F_pi = sqrt((1 - n_z) / 2).

    ``c0`` fixes the baseline instead of fitting it; a flat series (perfect
    flips) is only identifiable that way.
    """
    N = np.asarray(N, dtype=float)
    y = np.asarray(signal, dtype=float)
    s = np.ones_like(y) if sigma is None else np.broadcast_to(
        np.asarray(sigma, dtype=float), y.shape)
    if np.unique(N).size < 4:
        raise ValidationError("fit_pi_fidelity needs at least 4 distinct N")
    fixed = c0 is not None

    def model(p):
        beta0, m = p[0], p[1]
        off = float(c0) if fixed else p[2]
        return beta0 * np.sign(m) ** N * np.abs(m) ** N + off

    def resid(p):
        return (model(p) - y) / s

    lo, hi = [-np.inf, -1.5], [np.inf, 1.5]
    if not fixed:
        lo, hi = lo + [-np.inf], hi + [np.inf]
    best = None
    for m0 in (0.5, 0.8, 0.9, 0.95, 0.99, 0.999):
        p0 = [y[np.argmin(N)] if y.size else 1.0, m0] + ([] if fixed else [0.0])
        res = optimize.least_squares(resid, p0, bounds=(lo, hi), method="trf",
                                     xtol=1e-14, ftol=1e-14, gtol=1e-14)
        c = float(res.fun @ res.fun)
        if best is None or c < best[0]:
            best = (c, res)
    chi2, res = best
    beta0, m = float(res.x[0]), float(res.x[1])
    off = float(c0) if fixed else float(res.x[2])
    n_z = -m
    if abs(n_z) > 1.0 + 1e-9:
        raise FitError(f"fitted |n_z| = {abs(n_z):.4f} > 1 violates the pulse model",
                       {"n_z": n_z})
    n_z = max(-1.0, min(1.0, n_z))
    cov = np.linalg.pinv(res.jac.T @ res.jac)
    F = math.sqrt((1.0 - n_z) / 2.0)
    dF = math.sqrt(max(cov[1, 1], 0.0)) / (4.0 * F) if F > 0 else math.nan
    return FidelityFit(F, dF, n_z, beta0, off, cov, chi2 / max(y.size - len(res.x), 1))


# -- oscillation detection ----------------------------------------------------------

@dataclass
class OscillationReport:
    oscillatory: bool
    frequency: float
    contrast: float
    contrast_err: float
    delta_aicc: float
    monotonic_family: str
    fit: FitResult | None = None

    def to_dict(self):
        return {"oscillatory": self.oscillatory, "frequency_rad_per_us": self.frequency,
                "contrast": self.contrast, "contrast_err": self.contrast_err,
                "delta_aicc": self.delta_aicc,
                "monotonic_family": self.monotonic_family}


def resolvable_band(times) -> tuple[float, float]:
    """Frequencies with a full period inside the span and >= 4 samples per period."""
    t = np.unique(np.asarray(times, dtype=float))
    span = max(float(np.ptp(t)), 1e-9)
    step = float(np.median(np.diff(t))) if t.size > 1 else span
    return 2 * math.pi / span, 2 * math.pi / (4.0 * step)


def _candidate_frequencies(rec: DecayRecord, baseline) -> list:
    t = rec.times
    resid = rec.signal - baseline
    span = max(np.ptp(t), 1e-9)
    lo, hi = resolvable_band(t)
    if hi <= lo:
        return []
    w = np.linspace(lo, hi, 400)
    p = sps.lombscargle(t, resid - resid.mean(), w)
    idx = np.argsort(p)[::-1]
    picks = []
    for i in idx:
        if all(abs(w[i] - q) > 2 * math.pi / span for q in picks):
            picks.append(float(w[i]))
        if len(picks) == 3:
            break
    return picks


def detect_oscillation(rec: DecayRecord, margin: float = 10.0,
                       n_sigma: float = 3.0) -> OscillationReport:
    """Flag records a damped oscillation explains far better than any monotonic law.

    Only oscillations the sampling can resolve count: at least one full period
    inside the record and at least four distinct times per period.
    """
    if len(rec) < 8:
        raise ValidationError("detect_oscillation needs at least 8 points")
    mono = classify_decay(rec)
    best = mono.best
    freqs = _candidate_frequencies(rec, best.predict(rec.times))
    osc = fit_decay(rec, "damped_oscillation",
                    starts=_starts("damped_oscillation", rec, freqs))
    d_aicc = best.aicc - osc.aicc
    A = osc.params["A"]
    A_err = osc.stderr("A")
    lo, hi = resolvable_band(rec.times)
    w = osc.params["w"]
    flag = bool(d_aicc > margin and np.isfinite(A_err) and A > n_sigma * A_err
                and lo <= w <= hi)
    return OscillationReport(flag, osc.params["w"], A, A_err, d_aicc,
                             best.family, osc)
