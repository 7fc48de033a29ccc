"""Classical noise power spectral densities built from additive components.

Units throughout: angular frequency in rad/us, time in us, PSD in 1/us.
A component parameter is either a plain float (fixed) or a :class:`Free`
placeholder that must be bound before evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Any, Mapping, Union

import numpy as np
from scipy import integrate

from .errors import IdentificationError, ValidationError


@dataclass(frozen=True)
class Free:
    """An unknown scalar with a name and inclusive bounds."""

    name: str
    lower: float = 0.0
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise ValidationError(f"Free({self.name!r}): lower > upper")


Param = Union[float, Free]


def _is_free(value) -> bool:
    return isinstance(value, Free)


@dataclass(frozen=True)
class _Component:
    kind = "component"
    # parameters that scale the PSD linearly (squared for OU b)
    amplitude_param = ""

    def params(self) -> dict[str, Param]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name != "shape"}

    def free_params(self) -> dict[str, Free]:
        return {k: v for k, v in self.params().items() if _is_free(v)}

    def is_bound(self) -> bool:
        return not self.free_params()

    def _require_bound(self):
        free = self.free_params()
        if free:
            names = ", ".join(v.name for v in free.values())
            raise IdentificationError(
                f"{self.kind} has unbound parameter(s): {names}")

    def evaluate(self, omega):
        raise NotImplementedError

    def validate(self):
        pass


@dataclass(frozen=True)
class OrnsteinUhlenbeck(_Component):
    """Lorentzian PSD of an OU process, ``2 b^2 tau_c / (1 + (omega tau_c)^2)``."""

    b: Param
    tau_c: Param
    kind = "ou"
    amplitude_param = "b"

    def validate(self):
        if not _is_free(self.b) and self.b < 0:
            raise ValidationError(f"OU b must be >= 0, got {self.b}")
        if not _is_free(self.tau_c) and not self.tau_c > 0:
            raise ValidationError(f"OU tau_c must be > 0, got {self.tau_c}")

    def evaluate(self, omega):
        self._require_bound()
        w = np.asarray(omega, dtype=float)
        return self.b ** 2 * 2.0 * self.tau_c / (1.0 + (w * self.tau_c) ** 2)

    def shape(self, omega, tau_c=None):
        tau = self.tau_c if tau_c is None else tau_c
        w = np.asarray(omega, dtype=float)
        return 2.0 * tau / (1.0 + (w * tau) ** 2)


@dataclass(frozen=True)
class White(_Component):
    level: Param
    kind = "white"
    amplitude_param = "level"

    def validate(self):
        if not _is_free(self.level) and self.level < 0:
            raise ValidationError(f"white level must be >= 0, got {self.level}")

    def evaluate(self, omega):
        self._require_bound()
        return np.full(np.shape(omega), float(self.level))


@dataclass(frozen=True)
class SpectralPeak(_Component):
    """A line mirrored at +/-center. ``amplitude`` is the height of each line."""

    center: Param
    amplitude: Param
    width: Param
    shape: str = "gaussian"
    kind = "peak"
    amplitude_param = "amplitude"

    def validate(self):
        if self.shape not in ("gaussian", "lorentzian"):
            raise ValidationError(f"unknown peak shape {self.shape!r}")
        if not _is_free(self.center) and self.center < 0:
            raise ValidationError("peak center must be >= 0")
        if not _is_free(self.amplitude) and self.amplitude < 0:
            raise ValidationError("peak amplitude must be >= 0")
        if not _is_free(self.width) and not self.width > 0:
            raise ValidationError("peak width must be > 0")

    def line(self, omega, center=None, width=None):
        c = self.center if center is None else center
        g = self.width if width is None else width
        w = np.asarray(omega, dtype=float)
        if self.shape == "gaussian":
            f = lambda x: np.exp(-0.5 * (x / g) ** 2)
        else:
            f = lambda x: g ** 2 / (x ** 2 + g ** 2)
        return f(w - c) + f(w + c)

    def evaluate(self, omega):
        self._require_bound()
        return self.amplitude * self.line(omega)


NoiseComponent = Union[OrnsteinUhlenbeck, White, SpectralPeak]
COMPONENT_TYPES = {"ou": OrnsteinUhlenbeck, "white": White,
                   "peak": SpectralPeak}


@dataclass(frozen=True)
class NoiseModel:
    components: tuple = ()
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        for c in self.components:
            c.validate()
        names = [f.name for f in self.free_parameters()]
        if len(names) != len(set(names)):
            raise ValidationError(f"duplicate free parameter names: {names}")

    def free_parameters(self) -> list[Free]:
        out = []
        for c in self.components:
            out.extend(c.free_params().values())
        return out

    @property
    def free_parameter_count(self) -> int:
        return len(self.free_parameters())

    def is_bound(self) -> bool:
        return self.free_parameter_count == 0

    def evaluate(self, omega):
        return evaluate_psd(self, omega)

    def __call__(self, omega):
        return evaluate_psd(self, omega)

    def of_kind(self, kind: str) -> list:
        return [c for c in self.components if c.kind == kind]

    def with_components(self, *extra, label=None) -> "NoiseModel":
        return NoiseModel(self.components + tuple(extra),
                          self.label if label is None else label)

    def scaled(self, factor: float) -> "NoiseModel":
        """Multiply the whole spectrum by ``factor`` (amplitudes only)."""
        out = []
        for c in self.components:
            if c.kind == "ou":
                out.append(replace(c, b=c.b * math.sqrt(factor)))
            elif c.kind == "white":
                out.append(replace(c, level=c.level * factor))
            else:
                out.append(replace(c, amplitude=c.amplitude * factor))
        return NoiseModel(tuple(out), self.label)


def evaluate_psd(model: NoiseModel, omega):
    """Sum of component PSDs at ``omega`` (scalar or array, rad/us)."""
    w = np.asarray(omega, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValidationError("omega must be finite")
    total = np.zeros(w.shape)
    for c in model.components:
        total = total + c.evaluate(w)
    if total.ndim == 0:
        return float(total)
    return total


def ou_total_power(component: OrnsteinUhlenbeck) -> float:
    """Variance of the OU field, b^2 (the integral of S over d omega / 2 pi)."""
    component._require_bound()
    return float(component.b) ** 2


def integrate_psd(model: NoiseModel) -> float:
    """Numerically integrate a bound model over the real line / 2 pi.

    Uses the substitution omega = tan(u) so the infinite range becomes
    finite; white components diverge and are rejected.
    """
    if model.of_kind("white"):
        raise ValidationError("white noise has infinite total power")
    total = 0.0
    for c in model.components:
        # scale the substitution to the component's own width
        scale = c.tau_c if c.kind == "ou" else 1.0 / max(c.width, 1e-300)

        def g(u, c=c, scale=scale):
            w = math.tan(u) / scale
            return c.evaluate(w) / (scale * math.cos(u) ** 2)

        pts = None
        if c.kind == "peak":
            pts = [math.atan(c.center * scale)]
        val, _ = integrate.quad(g, 0.0, math.pi / 2, points=pts,
                                epsabs=0.0, epsrel=1e-12, limit=500)
        total += 2.0 * val / (2.0 * math.pi)
    return total


def bind_parameters(model: NoiseModel, values: Mapping[str, float]) -> NoiseModel:
    """Return a copy of ``model`` with every Free parameter replaced."""
    new = []
    for c in model.components:
        updates = {}
        for attr, free in c.free_params().items():
            if free.name not in values:
                raise IdentificationError(f"no value for free parameter {free.name!r}")
            v = float(values[free.name])
            if not free.lower <= v <= free.upper:
                raise ValidationError(
                    f"{free.name}={v} outside bounds [{free.lower}, {free.upper}]")
            updates[attr] = v
        new.append(replace(c, **updates) if updates else c)
    return NoiseModel(tuple(new), model.label)


# -- serialization ---------------------------------------------------------

def _param_to_doc(value):
    if _is_free(value):
        return None, {"name": value.name, "lower": _num(value.lower),
                      "upper": _num(value.upper)}
    return float(value), None


def _num(x):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _denum(x):
    return float(x)


# persisted parameter keys carry their unit
UNIT_KEYS = {"b": "b_rad_per_us", "tau_c": "tau_c_us", "level": "level_per_us",
             "center": "center_rad_per_us", "amplitude": "amplitude_per_us",
             "width": "width_rad_per_us"}
_FROM_KEY = {v: k for k, v in UNIT_KEYS.items()}


def model_to_dict(model: NoiseModel) -> dict:
    comps = []
    for c in model.components:
        params, bindings = {}, {}
        for k, v in c.params().items():
            val, free = _param_to_doc(v)
            params[UNIT_KEYS[k]] = val
            if free is not None:
                bindings[UNIT_KEYS[k]] = free
        entry: dict[str, Any] = {"type": c.kind, "params": params,
                                 "bindings": bindings}
        if c.kind == "peak":
            entry["shape"] = c.shape
        comps.append(entry)
    return {"label": model.label, "components": comps}


def model_from_dict(doc: Mapping) -> NoiseModel:
    try:
        comps = []
        for i, entry in enumerate(doc["components"]):
            kind = entry["type"]
            if kind not in COMPONENT_TYPES:
                raise ValidationError(f"components[{i}].type: unknown {kind!r}")
            kwargs: dict[str, Any] = {}
            bindings = entry.get("bindings", {}) or {}
            for key, v in entry["params"].items():
                if key not in _FROM_KEY:
                    hint = f"; use '{UNIT_KEYS[key]}'" if key in UNIT_KEYS else ""
                    raise ValidationError(f"components[{i}].params.{key}: unknown or "
                                          f"unitless field{hint}")
                k = _FROM_KEY[key]
                if key in bindings:
                    b = bindings[key]
                    kwargs[k] = Free(b["name"], _denum(b.get("lower", 0.0)),
                                     _denum(b.get("upper", "inf")))
                elif v is None:
                    raise ValidationError(
                        f"components[{i}].params.{key}: null without binding")
                else:
                    kwargs[k] = float(v)
            if kind == "peak":
                kwargs["shape"] = entry.get("shape", "gaussian")
            comps.append(COMPONENT_TYPES[kind](**kwargs))
        return NoiseModel(tuple(comps), doc.get("label", ""))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed model document: {exc}") from exc


def component_label(c) -> str:
    if c.kind == "ou":
        return "OU"
    if c.kind == "white":
        return "white"
    return f"peak[{c.shape}]"
