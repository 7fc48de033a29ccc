"""Solve-and-check protocol for building a minimal self-consistent noise model.

Every measured summary number (Gaussian Ramsey rate, echo cubic and linear
rates, CPMG spectral points) is an :class:`Observation` paired with a
*functional*: a rule that maps one unit-amplitude noise component to the
value that component contributes to the observation.  All functionals are
linear in the component amplitudes (b^2, S_w, peak height), so for fixed
correlation times the unknown amplitudes follow from a linear solve and only
the correlation times need a nonlinear search.

Two families of functionals are provided:

``closed_form``
    The textbook asymptotic laws: T2* = sqrt(2)/b_s, T2^3 = 12 tau_s / b_s^2,
    1/T0 = b_f^2 tau_f + S_w/2 and S_CP = S(omega_m).
``exact``
    The same summary statistics computed from the exact chi(T) of each
    component at the recorded times, weighted like the data fit.  This removes
    the bias of the asymptotic laws when tau_f is not negligible against T.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.ndimage import minimum_filter

from .decoherence import (DecayCurve, _x_minus_1_plus_exp, decay_curve, ou_chi_batch,
                          pack_modulations)
from .errors import (AmbiguityError, ClassicalModelPrecluded, IdentificationError,
                     ProtocolFailure, ShapeViolationError, ValidationError)
from .filters import build_modulation, cpmg_probe_frequency, parse_sequence_family, sequence_at
from .inference import (DecayRecord, FitResult, PsdPoint, classify_decay,
                        detect_oscillation, extract_psd_point, fit_decay)
from .noise import (Free, NoiseModel, OrnsteinUhlenbeck, SpectralPeak, White, bind_parameters,
                    model_to_dict)

ROLES = ("slow", "fast", "white", "peak")
MENU = ("white", "fast", "peak")
_PI2_8 = math.pi ** 2 / 8.0


@dataclass
class ProtocolConfig:
    k_sigma: float = 3.0
    eps_floor: float = 0.15
    bandwidth_cap: float | None = None        # rad/us
    heldout_policy: str = "highest"           # "highest" | "none"
    refinement_menu: tuple = MENU
    forward: str = "auto"                     # "auto" | "exact" | "closed_form"
    cpmg_filter: str = "auto"                 # "auto" | "delta" | "harmonic" | "record"
    tau_bounds: tuple = (1e-3, 1e8)           # us, outer limits for any tau
    detect_oscillations: bool = True
    add_peaks: bool = True
    red_chi2_cap: float = 3.0

    @classmethod
    def from_dict(cls, doc: dict) -> "ProtocolConfig":
        known = {"k_sigma", "eps_floor", "bandwidth_cap_rad_per_us", "heldout_policy",
                 "refinement_menu", "forward", "cpmg_filter", "tau_bounds_us",
                 "detect_oscillations", "add_peaks", "red_chi2_cap"}
        extra = set(doc) - known
        if "bandwidth_cap" in doc or "tau_bounds" in doc:
            raise ValidationError("config: frequency/time fields need explicit unit "
                                  "suffixes (bandwidth_cap_rad_per_us, tau_bounds_us)")
        if extra:
            raise ValidationError(f"config: unknown fields {sorted(extra)}")
        kw = {}
        for k in ("k_sigma", "eps_floor", "red_chi2_cap"):
            if k in doc:
                kw[k] = float(doc[k])
        if doc.get("bandwidth_cap_rad_per_us") is not None:
            kw["bandwidth_cap"] = float(doc["bandwidth_cap_rad_per_us"])
        for k in ("heldout_policy", "forward", "cpmg_filter"):
            if k in doc:
                kw[k] = str(doc[k])
        if "refinement_menu" in doc:
            menu = tuple(doc["refinement_menu"])
            bad = [m for m in menu if m not in MENU]
            if bad:
                raise ValidationError(f"config.refinement_menu: unknown items {bad}")
            kw["refinement_menu"] = menu
        if "tau_bounds_us" in doc:
            kw["tau_bounds"] = tuple(float(x) for x in doc["tau_bounds_us"])
        for k in ("detect_oscillations", "add_peaks"):
            if k in doc:
                kw[k] = bool(doc[k])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.heldout_policy not in ("highest", "none"):
            raise ValidationError("heldout_policy must be 'highest' or 'none'")
        if self.forward not in ("auto", "exact", "closed_form"):
            raise ValidationError("forward must be auto, exact or closed_form")
        if self.cpmg_filter not in ("auto", "delta", "harmonic", "record"):
            raise ValidationError("cpmg_filter must be auto, delta, harmonic or record")
        if self.k_sigma < 0 or self.eps_floor < 0:
            raise ValidationError("k_sigma and eps_floor must be >= 0")

    def to_dict(self):
        return {"k_sigma": self.k_sigma, "eps_floor": self.eps_floor,
                "bandwidth_cap_rad_per_us": self.bandwidth_cap,
                "heldout_policy": self.heldout_policy,
                "refinement_menu": list(self.refinement_menu),
                "forward": self.forward, "cpmg_filter": self.cpmg_filter,
                "tau_bounds_us": list(self.tau_bounds),
                "detect_oscillations": self.detect_oscillations,
                "add_peaks": self.add_peaks, "red_chi2_cap": self.red_chi2_cap}


# -- functionals ------------------------------------------------------------------

def ou_harmonic_sum(tau: float, omega: float) -> float:
    """sum over odd k of S_OU(k omega) / k^2 for a unit-b OU, in closed form."""
    a = omega * tau
    if a == 0.0:
        return 2.0 * tau * _PI2_8
    if a < 1e-3:
        # pi^2/8 - (pi a / 4) tanh(pi / 2a) with tanh -> 1
        return 2.0 * tau * (_PI2_8 - math.pi * a / 4.0)
    return 2.0 * tau * (_PI2_8 - math.pi * a / 4.0 * math.tanh(math.pi / (2.0 * a)))


class Functional:
    """Maps a unit-amplitude component (role, kind, shape values) to a number."""

    label = "functional"

    def unit(self, kind: str, role: str, shape: dict) -> float:
        raise NotImplementedError

    def describe(self) -> str:
        return self.label


class RamseyGaussianRate(Functional):
    """1/T2*^2 = b_s^2 / 2 (slow bath only)."""

    label = "ramsey:1/T2*^2 closed form"

    def unit(self, kind, role, shape):
        return 0.5 if role == "slow" else 0.0


class EchoCubicRate(Functional):
    """1/T2^3 = b_s^2 / (12 tau_s) (slow bath only)."""

    label = "echo:1/T2^3 closed form"

    def unit(self, kind, role, shape):
        return 1.0 / (12.0 * shape["tau_c"]) if role == "slow" else 0.0


class EchoLinearRate(Functional):
    """1/T0 = b_f^2 tau_f + S_w / 2 (everything except the slow bath)."""

    label = "echo:1/T0 closed form"

    def unit(self, kind, role, shape):
        if role == "slow":
            return 0.0
        if kind == "ou":
            return shape["tau_c"]
        if kind == "white":
            return 0.5
        return 0.0


@dataclass
class PsdDelta(Functional):
    omega: float
    label = "S(omega_m)"

    def unit(self, kind, role, shape):
        return _unit_psd(kind, shape, self.omega)

    def describe(self):
        return f"S({self.omega:.6g})"


@dataclass
class PsdHarmonic(Functional):
    """CPMG rate times pi^2/4: sum over odd harmonics S(k omega_m) / k^2."""

    omega: float
    label = "S_CP harmonic"

    def unit(self, kind, role, shape):
        if kind == "ou":
            return ou_harmonic_sum(shape["tau_c"], self.omega)
        if kind == "white":
            return _PI2_8
        k = np.arange(1, 4001, 2, dtype=float)
        return float(np.sum(_unit_psd(kind, shape, k * self.omega) / k ** 2))

    def describe(self):
        return f"S_CP({self.omega:.6g})"


def _unit_psd(kind, shape, omega):
    if kind == "ou":
        tau = shape["tau_c"]
        return 2.0 * tau / (1.0 + (omega * tau) ** 2)
    if kind == "white":
        return np.ones_like(np.asarray(omega, dtype=float)) if np.ndim(omega) else 1.0
    line = SpectralPeak(shape["center"], 1.0, shape["width"], shape.get("shape", "gaussian"))
    return line.line(omega)


def _ou_unit_chi(family: str, times: np.ndarray, tau: float, switches) -> np.ndarray:
    T = times
    if family == "ramsey":
        return tau ** 2 * _x_minus_1_plus_exp(T / tau)
    if family == "echo":
        x = T / tau
        u = -np.expm1(-x / 2.0)
        return tau ** 2 * (2.0 * _x_minus_1_plus_exp(x / 2.0) - u ** 2)
    return ou_chi_batch(tau, *switches)


@dataclass
class Projection(Functional):
    """Weighted linear least-squares coefficient of chi(T) on a power basis.

    With weights (W/sigma)^2 taken from the data fit, this is the linearised
    version of what the signal-space fit extracts from the record, applied to
    the exact chi of each component.
    """

    sequence: str
    times: np.ndarray
    weights: np.ndarray
    powers: tuple
    row: int
    scale: float = 1.0
    label = "projection"

    def __post_init__(self):
        T = np.asarray(self.times, dtype=float)
        w = np.sqrt(np.asarray(self.weights, dtype=float))
        X = np.stack([T ** p for p in self.powers], axis=1)
        self._pinv = np.linalg.pinv(X * w[:, None])[self.row] * w
        fam, args = parse_sequence_family(self.sequence)
        self._family = fam
        self._times = T
        self._switches = None
        if fam not in ("ramsey", "echo"):
            self._switches = pack_modulations(
                [build_modulation(sequence_at(fam, args, t)) for t in T])
        # peaks fall back to the harmonic sum at the probe frequency
        self._omega = (cpmg_probe_frequency(float(args["tau"]))
                       if fam == "cpmg" and "tau" in args else None)
        self._cache = {}

    def unit(self, kind, role, shape):
        T = self._times
        if kind == "white":
            chi = 0.5 * T
        elif kind == "ou":
            tau = float(shape["tau_c"])
            chi = self._cache.get(tau)
            if chi is None:
                chi = _ou_unit_chi(self._family, T, tau, self._switches)
                if len(self._cache) > 256:
                    self._cache.clear()
                self._cache[tau] = chi
        else:
            if self._omega is None or self.powers != (1,):
                raise ValidationError("peak components need a CPMG functional")
            return PsdHarmonic(self._omega).unit(kind, role, shape)
        return self.scale * float(self._pinv @ chi)

    def describe(self):
        return f"{self.sequence}:T^{self.powers[self.row]} projection"


@dataclass
class Observation:
    name: str
    value: float
    sigma: float
    functional: Functional
    source: str = ""
    omega: float | None = None
    covariance: dict = field(default_factory=dict)   # name -> cross covariance

    def to_dict(self):
        d = {"name": self.name, "value": self.value, "sigma": self.sigma,
             "functional": self.functional.describe(), "source": self.source}
        if self.omega is not None:
            d["omega_rad_per_us"] = self.omega
        return d


# -- candidates ---------------------------------------------------------------------

_TEMPLATES = {
    "slow": lambda: OrnsteinUhlenbeck(Free("b_s"), Free("tau_s")),
    "fast": lambda: OrnsteinUhlenbeck(Free("b_f"), Free("tau_f")),
    "white": lambda: White(Free("S_w")),
}
_NAMES = {frozenset({"slow"}): "S0", frozenset({"slow", "white"}): "S1",
          frozenset({"slow", "fast"}): "S2", frozenset({"slow", "fast", "white"}): "S3"}
_LABELS = {"slow": "S_s", "fast": "S_f", "white": "S_w", "peak": "S_pk"}


@dataclass
class ModelCandidate:
    """A noise model with free parameters, the constraints it consumed and its verdict."""

    name: str
    roles: tuple
    model: NoiseModel
    constraints: list
    status: str = "unchecked"
    epsilon: float | None = None
    verdict_datum: str | None = None
    provenance: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    covariance: np.ndarray | None = None
    points_used: list = field(default_factory=list)
    history: list = field(default_factory=list)
    note: str = ""
    reserved: list = field(default_factory=list)   # verdict data children consume

    @property
    def label(self) -> str:
        return "+".join(_LABELS[r] for r in self.roles)

    @property
    def unknowns(self) -> int:
        return self.model.free_parameter_count

    @property
    def q(self) -> int:
        if self.unknowns == 0:
            return 0
        return self.unknowns - len(self.constraints)

    @property
    def complexity(self) -> int:
        return len(self.roles)

    def is_bound(self) -> bool:
        return bool(self.values) or self.model.is_bound()

    def bound_model(self) -> NoiseModel:
        if self.model.is_bound():
            return self.model
        if not self.values:
            raise IdentificationError(f"candidate {self.name} has not been solved")
        return bind_parameters(self.model, self.values)

    def set_status(self, status, epsilon=None, datum=None, note=""):
        self.history.append({"status": status, "epsilon": epsilon, "datum": datum,
                             "note": note})
        self.status = status
        self.epsilon = epsilon
        self.verdict_datum = datum
        if note:
            self.note = note

    def param_names(self):
        return [f.name for f in self.model.free_parameters()]

    def to_dict(self):
        d = {"name": self.name, "label": self.label, "roles": list(self.roles),
             "unknowns": self.unknowns, "q": self.q,
             "constraints": [o.name for o in self.constraints],
             "points_used": list(self.points_used), "status": self.status,
             "epsilon": self.epsilon, "verdict_datum": self.verdict_datum,
             "provenance": self.provenance, "values": dict(self.values),
             "history": self.history, "note": self.note}
        if self.covariance is not None:
            names = self.param_names()
            d["stderr"] = {n: math.sqrt(max(self.covariance[i, i], 0.0))
                           for i, n in enumerate(names)}
        return d


def make_candidate(roles, constraints, tau_split, tau_bounds=(1e-3, 1e8),
                   provenance=None, peaks=()) -> ModelCandidate:
    """Build a candidate from an ordered set of roles with bounded unknowns."""
    roles = tuple(r for r in ("slow", "fast", "white") if r in roles)
    comps = []
    for r in roles:
        c = _TEMPLATES[r]()
        if r == "slow":
            c = replace(c, tau_c=Free("tau_s", tau_split, tau_bounds[1]))
        elif r == "fast":
            c = replace(c, tau_c=Free("tau_f", tau_bounds[0], tau_split))
        comps.append(c)
    comps.extend(peaks)
    roles = roles + ("peak",) * len(peaks)
    name = _NAMES.get(frozenset(roles), "+".join(roles))
    model = NoiseModel(tuple(comps), "+".join(_LABELS[r] for r in roles))
    return ModelCandidate(name, roles, model, list(constraints),
                          provenance=list(provenance or []))


# -- the solver ------------------------------------------------------------------------

def _shape_dict(c, theta):
    out = {}
    if c.kind == "ou":
        t = c.tau_c
        out["tau_c"] = theta[t.name] if isinstance(t, Free) else t
    elif c.kind == "peak":
        for k in ("center", "width"):
            v = getattr(c, k)
            out[k] = theta[v.name] if isinstance(v, Free) else v
        out["shape"] = c.shape
    return out


def _amplitude(c):
    """(free name or None, fixed amplitude value or None) in PSD-linear units."""
    if c.kind == "ou":
        v = c.b
        return (v.name, None) if isinstance(v, Free) else (None, v ** 2)
    v = c.level if c.kind == "white" else c.amplitude
    return (v.name, None) if isinstance(v, Free) else (None, v)


def _shape_free(model):
    out = []
    for c in model.components:
        if c.kind == "ou" and isinstance(c.tau_c, Free):
            out.append(c.tau_c)
        elif c.kind == "peak":
            for k in ("center", "width"):
                v = getattr(c, k)
                if isinstance(v, Free):
                    out.append(v)
    return out


def _design(cand: ModelCandidate, observations, theta):
    comps = cand.model.components
    roles = cand.roles
    amp_names = []
    cols, fixed = [], np.zeros(len(observations))
    for c, r in zip(comps, roles):
        name, val = _amplitude(c)
        shp = _shape_dict(c, theta)
        g = np.array([o.functional.unit(c.kind, r, shp) for o in observations])
        if name is None:
            fixed += val * g
        else:
            amp_names.append(name)
            cols.append(g)
    G = np.stack(cols, axis=1) if cols else np.zeros((len(observations), 0))
    y = np.array([o.value for o in observations]) - fixed
    return G, y, amp_names


def _row_scale(observations):
    return np.array([1.0 / max(abs(o.value), o.sigma, 1e-300) for o in observations])


@dataclass
class Root:
    values: dict
    residual: float
    feasible: bool
    reason: str = ""

    def to_dict(self):
        return {"values": self.values, "residual": self.residual,
                "feasible": self.feasible, "reason": self.reason}


def _local_minima(grid: np.ndarray):
    """Flat indices of cells no larger than any neighbour (edges included)."""
    mins = grid <= minimum_filter(grid, size=3, mode="nearest")
    return list(np.flatnonzero(mins))


def _amp_to_param(cand, amp_names, A):
    out = {}
    for c in cand.model.components:
        name, _ = _amplitude(c)
        if name in amp_names:
            a = A[amp_names.index(name)]
            out[name] = math.sqrt(a) if (c.kind == "ou" and a >= 0) else (
                -math.sqrt(-a) if c.kind == "ou" else a)
    return out


def _check_feasible(cand, values, amps):
    free = {f.name: f for f in cand.model.free_parameters()}
    for n, a in amps.items():
        if a < -1e-12 * max(1.0, abs(a)):
            return False, f"negative amplitude for {n}"
    for n, v in values.items():
        f = free[n]
        if not (f.lower * (1 - 1e-9) <= v <= f.upper * (1 + 1e-9) or
                (f.lower == 0 and v >= -1e-15)):
            return False, f"{n}={v:.4g} outside [{f.lower:.4g}, {f.upper:.4g}]"
    return True, ""


def _solve_amplitudes(G, y, scale):
    Gs, ys = G * scale[:, None], y * scale
    A, *_ = np.linalg.lstsq(Gs, ys, rcond=None)
    r = Gs @ A - ys
    return A, r


def solve_unknowns(cand: ModelCandidate, points: Sequence[Observation] = (),
                   n_grid: int = 48, tol: float = 1e-7) -> ModelCandidate:
    """Bind the candidate's unknowns from its constraints plus exactly q points.

    Amplitudes enter linearly; correlation times are found by scanning the
    bounded (log) range and polishing every sign change or residual minimum,
    so all roots in the feasible box are reported.
    """
    q = cand.q
    if len(points) != q:
        raise ValidationError(f"{cand.name} has q={q} but {len(points)} points were given")
    out = copy.deepcopy(cand)
    if cand.unknowns == 0:
        return out
    obs = list(cand.constraints) + list(points)
    scale = _row_scale(obs)
    shapes = _shape_free(cand.model)
    snames = [s.name for s in shapes]
    lo = np.array([math.log(max(s.lower, 1e-12)) for s in shapes])
    hi = np.array([math.log(s.upper) for s in shapes])
    G0, _, amp_names = _design(cand, obs, {s.name: math.exp(0.5 * (a + b))
                                           for s, a, b in zip(shapes, lo, hi)})
    if len(obs) != len(amp_names) + len(shapes):
        raise IdentificationError(
            f"{cand.name}: {len(obs)} equations for {len(amp_names) + len(shapes)} unknowns")

    def residual(logt):
        theta = dict(zip(snames, np.exp(logt)))
        G, y, _ = _design(cand, obs, theta)
        A, r = _solve_amplitudes(G, y, scale)
        return r, A, theta

    roots = []
    if not shapes:
        r, A, theta = residual(np.zeros(0))
        roots.append((r, A, theta))
    elif len(shapes) == 1:
        def det(lt):
            theta = {snames[0]: math.exp(lt)}
            G, y, _ = _design(cand, obs, theta)
            M = np.column_stack([G, y]) * scale[:, None]
            return float(np.linalg.det(M))
        grid = np.linspace(lo[0], hi[0], n_grid * 4)
        vals = np.array([det(g) for g in grid])
        for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
            if fa == 0.0:
                roots.append(residual(np.array([a])))
            elif fa * fb < 0:
                x = optimize.brentq(det, a, b, xtol=1e-14, rtol=1e-13)
                roots.append(residual(np.array([x])))
        if vals[-1] == 0.0:
            roots.append(residual(np.array([grid[-1]])))
    else:
        m = max(8, int(round(n_grid ** (1.0 / len(shapes)) * 3)))
        axes = [np.linspace(a, b, m) for a, b in zip(lo, hi)]
        mesh = np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(shapes), -1).T
        norms = np.array([np.linalg.norm(residual(x)[0]) for x in mesh]).reshape((m,) * len(shapes))
        starts = [mesh[i] for i in _local_minima(norms)]
        found = []
        for s0 in starts:
            try:
                res = optimize.least_squares(lambda x: residual(x)[0], s0,
                                             bounds=(lo, hi), xtol=1e-15, ftol=1e-15,
                                             gtol=1e-15, max_nfev=400)
            except ValueError:
                continue
            if np.linalg.norm(res.fun) < tol and not any(
                    np.max(np.abs(res.x - f)) < 1e-4 for f in found):
                found.append(res.x)
                roots.append(residual(res.x))

    all_roots = []
    for r, A, theta in roots:
        norm = float(np.linalg.norm(r))
        amps = dict(zip(amp_names, map(float, A)))
        values = dict(theta)
        values.update(_amp_to_param(cand, amp_names, A))
        if norm > tol * 10:
            all_roots.append(Root(values, norm, False, "residual not zero"))
            continue
        ok, why = _check_feasible(cand, values, amps)
        all_roots.append(Root(values, norm, ok, why))
    feasible = [r for r in all_roots if r.feasible]
    out.note = ""
    out.history.append({"status": "solved", "roots": [r.to_dict() for r in all_roots]})
    if not feasible:
        raise IdentificationError(f"{cand.name}: no feasible solution in bounds "
                                  f"({len(all_roots)} infeasible roots)")
    if len(feasible) > 1:
        raise AmbiguityError(f"{cand.name}: {len(feasible)} distinct solutions",
                             [r.values for r in feasible])
    out.values = {k: float(v) for k, v in feasible[0].values.items()}
    out.points_used = [p.name for p in points]
    out.covariance = _parameter_covariance(out, obs)
    return out


def _model_vector(cand, obs, values):
    model = bind_parameters(cand.model, values)
    return np.array([predict_observation(model, cand.roles, o) for o in obs])


def _parameter_covariance(cand, obs):
    names = cand.param_names()
    x0 = np.array([cand.values[n] for n in names])
    J = np.empty((len(obs), len(names)))
    base = _model_vector(cand, obs, cand.values)
    free = {f.name: f for f in cand.model.free_parameters()}
    for j, n in enumerate(names):
        h = 1e-6 * max(abs(x0[j]), 1e-12)
        v = dict(cand.values)
        up = x0[j] + h
        if up > free[n].upper:
            up = x0[j] - h
        v[n] = up
        J[:, j] = (_model_vector(cand, obs, v) - base) / (up - x0[j])
    C = np.diag([o.sigma ** 2 for o in obs])
    index = {o.name: i for i, o in enumerate(obs)}
    for i, o in enumerate(obs):
        for other, cv in o.covariance.items():
            if other in index:
                C[i, index[other]] = cv
    try:
        Ji = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        Ji = np.linalg.pinv(J)
    cov = Ji @ C @ Ji.T
    return 0.5 * (cov + cov.T)


def predict_observation(model: NoiseModel, roles, obs: Observation) -> float:
    total = 0.0
    for c, r in zip(model.components, roles):
        name, val = _amplitude(c)
        total += val * obs.functional.unit(c.kind, r, _shape_dict(c, {}))
    return total


# -- verdicts -------------------------------------------------------------------------

@dataclass
class Verdict:
    epsilon: float
    sigma_rel: float
    threshold: float
    rejected: bool
    predicted: float
    measured: float
    datum: str

    def to_dict(self):
        return {"epsilon": self.epsilon, "sigma_rel": self.sigma_rel,
                "threshold": self.threshold,
                "verdict": "rejected" if self.rejected else "consistent",
                "predicted": self.predicted, "measured": self.measured,
                "datum": self.datum}


def consistency_check(cand: ModelCandidate, heldout: Observation, k_sigma: float = 3.0,
                      eps_floor: float = 0.15) -> Verdict:
    """epsilon = (S_meas - S_model) / S_meas against max(k sigma_rel, floor)."""
    model = cand.bound_model()
    pred = predict_observation(model, cand.roles, heldout)
    meas = heldout.value
    if meas == 0.0:
        eps = 0.0 if pred == 0.0 else -math.copysign(math.inf, pred)
        srel = math.inf
    else:
        eps = (meas - pred) / meas
        srel = abs(heldout.sigma / meas)
    thr = max(k_sigma * srel, eps_floor)
    return Verdict(float(eps), float(srel), float(thr), bool(abs(eps) > thr),
                   float(pred), float(meas), heldout.name)


def refine_minimal(cand: ModelCandidate, menu=MENU, localized: bool = False,
                   tau_split: float | None = None, tau_bounds=(1e-3, 1e8)):
    """Every candidate that adds exactly one not-yet-present menu component."""
    split = tau_split if tau_split is not None else _split_of(cand)
    out = []
    for item in menu:
        if item in cand.roles:
            continue
        if item == "peak":
            if localized:
                out.append(("peak", None))
            continue
        new = make_candidate(cand.roles + (item,), list(cand.constraints) + list(cand.reserved),
                             split, tau_bounds,
                             provenance=[{"parent": cand.name, "added": item}])
        out.append((item, new))
    if not out:
        raise ProtocolFailure(f"refinement menu exhausted at {cand.label}")
    return [c for _, c in out if c is not None]


def _split_of(cand):
    for c in cand.model.components:
        if c.kind == "ou" and isinstance(c.tau_c, Free):
            return c.tau_c.lower if c.tau_c.name == "tau_s" else c.tau_c.upper
    return 100.0


# -- peaks ---------------------------------------------------------------------------

def add_peaks(model: NoiseModel, points: Sequence[PsdPoint], n_sigma: float = 3.0,
              shape: str = "gaussian", floor: float = 0.0) -> NoiseModel:
    """One spectral peak per contiguous cluster of positive residuals.

    A point is in a cluster when its residual exceeds n_sigma standard errors
    and ``floor`` times its measured value.
    """
    pts = sorted(points, key=lambda p: p.omega)
    if not pts:
        return model
    w = np.array([p.omega for p in pts])
    S = np.array([p.S for p in pts])
    s = np.array([max(p.sigma, 1e-300) for p in pts])
    resid = S - model.evaluate(w)
    hot = resid > np.maximum(n_sigma * s, floor * np.abs(S))
    clusters, cur = [], []
    for i, h in enumerate(hot):
        if h:
            cur.append(i)
        elif cur:
            clusters.append(cur)
            cur = []
    if cur:
        clusters.append(cur)
    new = []
    spacing = np.min(np.diff(w)) if w.size > 1 else max(w[0], 1e-3) / 2.0
    for idx in clusters:
        idx = np.array(idx)
        ww, rr, ss = w[idx], resid[idx], s[idx]
        if idx.size >= 3:
            def f(p):
                c, A, g = p
                return (A * SpectralPeak(c, 1.0, g, shape).line(ww) - rr) / ss
            p0 = [float(ww[np.argmax(rr)]), float(np.max(rr)), float(max(np.ptp(ww) / 2, spacing / 2))]
            res = optimize.least_squares(f, p0, bounds=([0, 0, 1e-9], [np.inf, np.inf, np.inf]))
            c, A, g = res.x
        else:
            c = float(np.sum(ww * rr) / np.sum(rr))
            g = float(max(np.ptp(ww), spacing) / 2.0)
            line = SpectralPeak(c, 1.0, g, shape).line(ww)
            A = float(np.sum(line * rr / ss ** 2) / np.sum(line ** 2 / ss ** 2))
        if A > 0:
            new.append(SpectralPeak(float(c), float(A), float(g), shape))
    if not new:
        return model
    return model.with_components(*new, label=(model.label + "+peaks").lstrip("+"))


# -- prediction ----------------------------------------------------------------------

def predict_dynamics(model, sequence, times, candidate: ModelCandidate | None = None,
                     band_sigma: float = 1.0) -> DecayCurve:
    """Full-integral prediction; a covariance band is attached when a solved
    candidate with parameter covariance is given."""
    if isinstance(model, ModelCandidate):
        candidate = model
        model = candidate.bound_model()
    curve = decay_curve(model, sequence, times, label=str(sequence))
    if candidate is None or candidate.covariance is None:
        return curve
    names = candidate.param_names()
    base = candidate.values
    grads = []
    for n in names:
        h = 1e-4 * max(abs(base[n]), 1e-9)
        v = dict(base)
        v[n] = base[n] + h
        try:
            m = bind_parameters(candidate.model, v)
        except ValidationError:
            v[n] = base[n] - h
            h = -h
            m = bind_parameters(candidate.model, v)
        m = _with_extra(m, model)
        grads.append((decay_curve(m, sequence, times).chi - curve.chi) / h)
    Gm = np.stack(grads, axis=1)
    var_chi = np.einsum("ti,ij,tj->t", Gm, candidate.covariance, Gm)
    curve.band = band_sigma * curve.coherence * np.sqrt(np.maximum(var_chi, 0.0))
    return curve


def _with_extra(m, full):
    """Carry fixed extra components (e.g. fitted peaks) onto a perturbed model."""
    extra = full.components[len(m.components):]
    return m.with_components(*extra) if extra else m


# -- measurement sets and observation builders ---------------------------------------------

@dataclass
class MeasurementSet:
    ramsey: DecayRecord | None = None
    echo: DecayRecord | None = None
    cpmg_records: list = field(default_factory=list)
    cpmg_points: list = field(default_factory=list)   # PsdPoint
    other_records: list = field(default_factory=list)
    bandwidth_cap: float | None = None
    summary: dict | None = None    # {"t2star": (v, err), "t2": ..., "t0": ...}
    label: str = ""

    def sorted_points(self):
        return sorted(self.cpmg_points, key=lambda p: p.omega)


def summary_observations(t2star, t2, t0, t2star_err=0.0, t2_err=0.0, t0_err=0.0):
    """Closed-form R-E observations from timescales (us)."""
    def rate(T, dT, p):
        v = T ** (-p)
        return v, max(p * v * dT / T, 1e-12 * v)
    g, sg = rate(t2star, t2star_err, 2)
    a, sa = rate(t2, t2_err, 3)
    r, sr = rate(t0, t0_err, 1)
    return [Observation("ramsey", g, sg, RamseyGaussianRate(), "T2*"),
            Observation("echo_cubic", a, sa, EchoCubicRate(), "T2"),
            Observation("echo_linear", r, sr, EchoLinearRate(), "T0")]


def point_observation(p: PsdPoint, mode: str = "delta", record: DecayRecord | None = None,
                      fit: FitResult | None = None, index: int = 0) -> Observation:
    name = f"S@{p.omega:.6g}"
    if mode == "delta":
        fn = PsdDelta(p.omega)
    elif mode == "harmonic":
        fn = PsdHarmonic(p.omega)
    elif mode == "record":
        if record is None or fit is None:
            raise ValidationError("record-mode CPMG functional needs the record and its fit")
        W = fit.predict(record.times)
        fn = Projection(record.sequence, record.times, (W / record.sigma) ** 2, (1,), 0,
                        scale=math.pi ** 2 / 4.0)
    else:
        raise ValidationError(f"unknown cpmg functional {mode!r}")
    return Observation(name, p.S, p.sigma, fn, p.source or f"point[{index}]", p.omega)


def record_observations(ramsey: DecayRecord, echo: DecayRecord, exact: bool = True):
    """R-E observations from fitted records; returns (observations, fits)."""
    rfit = fit_decay(ramsey, "gaussian")
    efit = fit_decay(echo, "cubic_plus_linear")
    g, sg = rfit.params["g"], rfit.stderr("g")
    a, r = efit.params["a"], efit.params["r"]
    sa, sr = efit.stderr("a"), efit.stderr("r")
    car = float(efit.covariance[0, 1])
    if exact:
        Wr = rfit.predict(ramsey.times)
        We = efit.predict(echo.times)
        fr = Projection(ramsey.sequence, ramsey.times, (Wr / ramsey.sigma) ** 2, (2,), 0)
        fc = Projection(echo.sequence, echo.times, (We / echo.sigma) ** 2, (3, 1), 0)
        fl = Projection(echo.sequence, echo.times, (We / echo.sigma) ** 2, (3, 1), 1)
    else:
        fr, fc, fl = RamseyGaussianRate(), EchoCubicRate(), EchoLinearRate()
    obs = [Observation("ramsey", g, sg, fr, "ramsey record"),
           Observation("echo_cubic", a, sa, fc, "echo record", covariance={"echo_linear": car}),
           Observation("echo_linear", r, sr, fl, "echo record", covariance={"echo_cubic": car})]
    return obs, (rfit, efit)


def re_stage(observations: Sequence[Observation], tau_bounds=(1e-3, 1e8)):
    """Candidates implied by the Ramsey/echo observations.

    S0 (slow OU alone) is always offered first and is tested against the
    echo's linear rate; the refinements S1 and S2 follow from the ledger loop.
    Returns (S0, tau_split) where tau_split separates slow from fast baths.
    """
    by = {o.name: o for o in observations}
    for k in ("ramsey", "echo_cubic", "echo_linear"):
        if k not in by:
            raise ValidationError(f"R-E stage needs the {k} observation")
    a = by["echo_cubic"].value
    if not a > 0:
        raise ShapeViolationError("echo shows no cubic term; the slow-bath picture fails")
    split = a ** (-1.0 / 3.0)     # T2: fast means tau below the echo decay time
    s0 = make_candidate(("slow",), [by["ramsey"], by["echo_cubic"]], split, tau_bounds,
                        provenance=[{"parent": None, "added": "slow"}])
    s0.reserved = [by["echo_linear"]]
    return s0, split


# -- the ledger loop --------------------------------------------------------------------

@dataclass
class ConsistencyReport:
    final: ModelCandidate | None
    ledger: list
    epsilons: list
    predictions: list
    observations: list
    points: list
    status: str
    fits: dict = field(default_factory=dict)
    config: ProtocolConfig | None = None
    notes: list = field(default_factory=list)
    final_model: NoiseModel | None = None

    def path(self):
        return [(c.name, c.status) for c in self.ledger]

    def to_dict(self):
        return {"status": self.status,
                "final": None if self.final is None else self.final.to_dict(),
                "final_model": (None if self.final_model is None
                                else model_to_dict(self.final_model)),
                "ledger": [c.to_dict() for c in self.ledger],
                "epsilon_table": self.epsilons,
                "observations": [o.to_dict() for o in self.observations],
                "psd_points": [p.to_dict() for p in self.points],
                "predictions": self.predictions,
                "fits": self.fits, "notes": list(self.notes),
                "config": None if self.config is None else self.config.to_dict()}


def _precheck_oscillations(ms: MeasurementSet):
    recs = [r for r in [ms.ramsey, ms.echo] + list(ms.cpmg_records) + list(ms.other_records)
            if r is not None]
    for i, rec in enumerate(recs):
        if len(rec) < 8:
            continue
        det = detect_oscillation(rec)
        if det.oscillatory:
            raise ClassicalModelPrecluded(
                f"oscillatory signature in record {i} ({rec.sequence}) at "
                f"{det.frequency:.4g} rad/us, contrast {det.contrast:.3g}; "
                "no classical Gaussian noise model applies", i,
                {**det.to_dict(), "sequence": rec.sequence})


def _ramsey_is_gaussian(ramsey: DecayRecord, margin: float = 10.0):
    """Gaussian Ramsey: the Gaussian law is ranked and within ``margin`` of the best score."""
    cl = classify_decay(ramsey)
    g = cl.get("gaussian")
    best = cl.best
    ok = g in cl.ranked and (g.aicc - best.aicc <= margin or (
        best.family == "stretched" and abs(best.params["p"] - 2.0) < 0.5))
    if not ok:
        raise ShapeViolationError(
            f"Ramsey decay is not Gaussian (best family {best.family}); "
            "the slow-bath assumption does not apply")
    return cl


def run_protocol(ms: MeasurementSet, config: ProtocolConfig | None = None) -> ConsistencyReport:
    cfg = config or ProtocolConfig()
    cfg.validate()
    cap = cfg.bandwidth_cap if cfg.bandwidth_cap is not None else ms.bandwidth_cap
    notes, fits = [], {}
    # an oscillating record rules out every classical model, whatever else is missing
    if cfg.detect_oscillations:
        _precheck_oscillations(ms)
    have_records = ms.ramsey is not None and ms.echo is not None
    forward = cfg.forward
    if forward == "auto":
        forward = "exact" if have_records else "closed_form"
    if forward == "exact" and not have_records:
        raise ValidationError("exact forward mode needs Ramsey and echo records")
    cmode = cfg.cpmg_filter
    if cmode == "auto":
        cmode = "record" if forward == "exact" else "delta"

    # R-E observations
    if have_records:
        cl = _ramsey_is_gaussian(ms.ramsey)
        fits["ramsey"] = cl.to_dict()
        fits["echo"] = classify_decay(ms.echo).to_dict()
        re_obs, _ = record_observations(ms.ramsey, ms.echo, exact=(forward == "exact"))
    elif ms.summary:
        s = ms.summary
        re_obs = summary_observations(s["t2star"][0], s["t2"][0], s["t0"][0],
                                      s["t2star"][1], s["t2"][1], s["t0"][1])
    else:
        raise ValidationError("measurement set needs Ramsey and echo data")

    # PSD points (from records where available)
    pts, pobs = [], []
    rec_by_omega = {}
    for i, rec in enumerate(ms.cpmg_records):
        p = extract_psd_point(rec, cfg.red_chi2_cap, record_index=i)
        pts.append(p)
        rec_by_omega[p.omega] = (rec, p.fit)
    pts.extend(ms.cpmg_points)
    pts.sort(key=lambda p: p.omega)
    if cap is not None:
        dropped = [p for p in pts if p.omega >= cap]
        pts = [p for p in pts if p.omega < cap]
        if dropped:
            notes.append(f"bandwidth cap {cap:.4g} rad/us excluded {len(dropped)} point(s)")
    for i, p in enumerate(pts):
        mode = cmode
        rec_fit = rec_by_omega.get(p.omega)
        if mode == "record" and rec_fit is None:
            mode = "harmonic"
        pobs.append(point_observation(p, mode, *(rec_fit or (None, None)), index=i))
    working, heldout = list(pobs), []
    if cfg.heldout_policy == "highest" and len(pobs) >= 2:
        working, heldout = pobs[:-1], pobs[-1:]
        notes.append(f"held out highest-omega point {heldout[0].name} for validation")

    est_records = []
    if forward == "exact":
        held = {o.omega for o in heldout}
        est_records = [ms.ramsey, ms.echo] + [
            rec for rec in ms.cpmg_records
            if cpmg_probe_frequency(float(rec.family_args["tau"])) not in held
            and (cap is None or cpmg_probe_frequency(float(rec.family_args["tau"])) < cap)]

    s0, split = re_stage(re_obs, cfg.tau_bounds)
    ledger = [s0]
    queue = [s0]
    deferred = []          # peak candidates wait until the regular menu is exhausted
    eps_table = []
    final = None
    seen = {frozenset(s0.roles): s0}

    def enqueue(new):
        key = frozenset(new.roles)
        if key in seen:
            seen[key].provenance.extend(new.provenance)
            return
        seen[key] = new
        ledger.append(new)
        queue.append(new)

    def post_hoc(cand):
        worst = None
        for o in pobs:
            vv = consistency_check(cand, o, cfg.k_sigma, cfg.eps_floor)
            eps_table.append({"candidate": cand.name, "label": cand.label, "post_hoc": True,
                              **vv.to_dict()})
            if vv.rejected and worst is None:
                worst = vv
        return worst

    while queue or deferred:
        if not queue:
            peaked = deferred.pop(0)
            ledger.append(peaked)
            bad = post_hoc(peaked)
            if bad is None:
                peaked.set_status("accepted", note="peaks fitted to localized residuals")
                final = peaked
                break
            peaked.set_status("rejected", bad.epsilon, bad.datum)
            continue
        queue.sort(key=lambda c: (c.q, ledger.index(c)))
        cand = queue.pop(0)
        # S0 has not consumed the echo's linear rate: that is its verdict datum
        extra_datum = cand.reserved[0] if cand.reserved else None
        q = cand.q
        if q > len(working):
            cand.set_status("unverified", note=f"needs {q} points, have {len(working)}")
            continue
        try:
            solved = solve_unknowns(cand, working[:q])
        except AmbiguityError as exc:
            cand.set_status("ambiguous", note=str(exc))
            cand.history.append({"roots": exc.roots})
            continue
        except IdentificationError as exc:
            cand.set_status("rejected", note=str(exc))
            for new in _refine(cand, cfg, split):
                enqueue(new)
            continue
        cand.values, cand.covariance = solved.values, solved.covariance
        cand.points_used = solved.points_used
        cand.history.extend(h for h in solved.history if h not in cand.history)
        check = extra_datum
        if check is None:
            # next unused point; the held-out point once the working set is spent
            check = working[q] if q < len(working) else (heldout[0] if heldout else None)
        if check is None:
            cand.set_status("unverified", note="no point left for a verdict")
            continue
        v = consistency_check(cand, check, cfg.k_sigma, cfg.eps_floor)
        eps_table.append({"candidate": cand.name, "label": cand.label, **v.to_dict()})
        if v.rejected:
            cand.set_status("rejected", v.epsilon, v.datum)
            for new in _refine(cand, cfg, split):
                enqueue(new)
            continue
        if est_records:
            # estimation: all non-held-out records, exact forward model
            est = refine_estimate(cand, est_records)
            cand.history.append({"status": "estimated", "identified": dict(cand.values),
                                 "refined": dict(est.values), "red_chi2": est.red_chi2})
            cand.values, cand.covariance = est.values, est.covariance
        # post-hoc: every point, including those consumed and held out
        bad = post_hoc(cand)
        if bad is not None:
            cand.set_status("rejected", bad.epsilon, bad.datum, note="failed post-hoc recheck")
            if cfg.add_peaks and "peak" in cfg.refinement_menu and "peak" not in cand.roles:
                peaked = _peak_candidate(cand, pts, pobs, cfg)
                if peaked is not None:
                    deferred.append(peaked)
            for new in _refine(cand, cfg, split):
                enqueue(new)
            continue
        cand.set_status("accepted", v.epsilon, v.datum)
        final = cand
        break

    status = "accepted" if final is not None else "failed"
    if final is None and any(c.status == "unverified" for c in ledger):
        status = "unverified"
        cands = [c for c in ledger if c.status == "unverified" and c.values]
        if cands:
            final = cands[0]
    final_model = final.bound_model() if final is not None else None

    predictions = []
    if final_model is not None:
        for i, rec in enumerate(ms.other_records):
            curve = predict_dynamics(final_model, rec.sequence, rec.times, candidate=final)
            resid = (rec.signal - curve.coherence) / rec.sigma
            predictions.append({"record_index": i, "sequence": rec.sequence,
                                "times_us": curve.times.tolist(),
                                "predicted": curve.coherence.tolist(),
                                "band": None if curve.band is None else curve.band.tolist(),
                                "red_chi2": float(resid @ resid / max(len(rec), 1))})
        for o in heldout:
            predictions.append({"heldout_point": o.name, "omega_rad_per_us": o.omega,
                                "measured": o.value, "sigma": o.sigma,
                                "predicted": predict_observation(final_model, final.roles, o),
                                "S_model": float(final_model.evaluate(o.omega))})
    if not pobs:
        notes.append("no CPMG points: model is unverified beyond the R-E stage")
    return ConsistencyReport(final, ledger, eps_table, predictions, re_obs + pobs, pts,
                             status, fits, cfg, notes, final_model)


def post_hoc_ok(cand, pobs, cfg) -> bool:
    return not any(consistency_check(cand, o, cfg.k_sigma, cfg.eps_floor).rejected
                   for o in pobs)


@dataclass
class Estimate:
    values: dict
    covariance: np.ndarray
    names: list
    chi2: float
    n_points: int

    @property
    def red_chi2(self):
        return self.chi2 / max(self.n_points - len(self.names), 1)


class _RecordForward:
    """Exact chi at a record's times for OU/white components."""

    def __init__(self, rec: DecayRecord):
        self.rec = rec
        fam, args = parse_sequence_family(rec.sequence)
        self.family = fam
        self.times = rec.times
        self.switches = None
        if fam not in ("ramsey", "echo"):
            self.switches = pack_modulations(
                [build_modulation(sequence_at(fam, args, t)) for t in rec.times])

    def chi(self, model: NoiseModel) -> np.ndarray:
        out = np.zeros(self.times.shape)
        for c in model.components:
            if c.kind == "white":
                out += 0.5 * c.level * self.times
            elif c.kind == "ou":
                out += c.b ** 2 * _ou_unit_chi(self.family, self.times, c.tau_c, self.switches)
            else:
                raise ValidationError("global estimation supports OU and white components")
        return out


def refine_estimate(cand: ModelCandidate, records: Sequence[DecayRecord]) -> Estimate:
    """Weighted least-squares fit of the candidate's unknowns to the raw records.

    Starts from the identified values; amplitudes and correlation times are
    fitted in log space, and the covariance comes from the Jacobian.
    """
    names = cand.param_names()
    free = {f.name: f for f in cand.model.free_parameters()}
    fwd = [_RecordForward(r) for r in records]
    y = np.concatenate([r.signal for r in records])
    sig = np.concatenate([r.sigma for r in records])
    x0 = np.log(np.array([max(cand.values[n], 1e-300) for n in names]))
    lo = np.log(np.array([max(free[n].lower, 1e-300) for n in names]))
    hi = np.log(np.array([free[n].upper for n in names]))
    x0 = np.clip(x0, lo + 1e-12, hi - 1e-12)

    def resid(x):
        m = bind_parameters(cand.model, dict(zip(names, np.exp(np.clip(x, lo, hi)))))
        W = np.concatenate([np.exp(-f.chi(m)) for f in fwd])
        return (W - y) / sig

    res = optimize.least_squares(resid, x0, bounds=(lo, hi), x_scale=1.0, diff_step=1e-6,
                                 xtol=1e-10, ftol=1e-10, gtol=1e-10, max_nfev=200)
    vals = np.exp(res.x)
    J = res.jac * vals[None, :] ** -1          # d resid / d value
    cov = np.linalg.pinv(J.T @ J)
    return Estimate(dict(zip(names, map(float, vals))), 0.5 * (cov + cov.T), names,
                    float(res.fun @ res.fun), int(y.size))


def _peak_candidate(cand, pts, pobs, cfg):
    """Bound candidate with spectral peaks where post-hoc failures localize in omega."""
    model = cand.bound_model()
    verdicts = [consistency_check(cand, o, cfg.k_sigma, cfg.eps_floor) for o in pobs]
    failing = [i for i, v in enumerate(verdicts) if v.rejected]
    if not failing or len(failing) == len(pobs) or any(verdicts[i].epsilon < 0 for i in failing):
        return None
    with_peaks = add_peaks(model, pts, cfg.k_sigma, floor=cfg.eps_floor)
    n_new = len(with_peaks.components) - len(model.components)
    if n_new == 0:
        return None
    new = ModelCandidate(cand.name + "+pk", cand.roles + ("peak",) * n_new, with_peaks,
                         list(cand.constraints),
                         provenance=[{"parent": cand.name, "added": "peak"}])
    new.points_used = list(cand.points_used)
    return new


def _refine(cand, cfg, split):
    try:
        return refine_minimal(cand, cfg.refinement_menu, tau_split=split,
                              tau_bounds=cfg.tau_bounds)
    except ProtocolFailure:
        return []
