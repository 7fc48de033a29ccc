"""Pulse sequences, their +/-1 modulation functions and filter functions.

All pulses here are ideal and instantaneous.  ``filter_value`` returns
``|F(omega)|^2`` where ``F`` is the finite-time Fourier transform of the
modulation function y(t) on [0, T].
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import ValidationError

SMALL_PHASE = 1e-6


def _positive(name, value):
    if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
        raise ValidationError(f"{name} must be a positive finite number, got {value!r}")


@dataclass(frozen=True)
class Ramsey:
    T: float

    def __post_init__(self):
        _positive("T", self.T)

    @property
    def total_time(self):
        return float(self.T)

    def pi_times(self):
        return []


@dataclass(frozen=True)
class Echo:
    T: float

    def __post_init__(self):
        _positive("T", self.T)

    @property
    def total_time(self):
        return float(self.T)

    def pi_times(self):
        return [self.T / 2.0]


@dataclass(frozen=True)
class Cpmg:
    """``n_pulses`` pi pulses at tau, 3 tau, ..., (2n-1) tau; T = 2 n tau."""

    n_pulses: int
    tau: float

    def __post_init__(self):
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise ValidationError(f"n_pulses must be an integer >= 1, got {self.n_pulses!r}")
        _positive("tau", self.tau)

    @property
    def total_time(self):
        return 2.0 * self.n_pulses * self.tau

    def pi_times(self):
        return [(2 * j + 1) * self.tau for j in range(int(self.n_pulses))]


@dataclass(frozen=True)
class WalshDD:
    """Walsh decoupling of sequency ``k``, cycle length ``lam`` repeated ``N`` times."""

    k: int
    lam: float
    N: int = 1

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 0:
            raise ValidationError(f"sequency k must be an integer >= 0, got {self.k!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ValidationError(f"repetitions N must be an integer >= 1, got {self.N!r}")
        _positive("lambda", self.lam)

    @property
    def total_time(self):
        return self.N * self.lam

    def pi_times(self):
        return walsh_switch_fractions(self.k, self.N) * self.total_time


@dataclass(frozen=True)
class Custom:
    T: float
    pis: tuple = ()

    def __post_init__(self):
        _positive("T", self.T)
        object.__setattr__(self, "pis", tuple(float(p) for p in self.pis))
        prev = 0.0
        for p in self.pis:
            if not prev < p < self.T:
                raise ValidationError(
                    "pi times must be strictly increasing inside (0, T)")
            prev = p

    @property
    def total_time(self):
        return float(self.T)

    def pi_times(self):
        return list(self.pis)


PulseSequence = Union[Ramsey, Echo, Cpmg, WalshDD, Custom]


@dataclass(frozen=True)
class ModulationFunction:
    """Piecewise +/-1 function; sign flips at every interior switch time."""

    switch_times: tuple
    initial_sign: int = 1

    def __post_init__(self):
        t = np.asarray(self.switch_times, dtype=float)
        if t.size < 2 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValidationError("switch_times must start at 0 and increase strictly")
        object.__setattr__(self, "switch_times", tuple(float(x) for x in t))

    @property
    def total_time(self):
        return self.switch_times[-1]

    @property
    def interior(self):
        return self.switch_times[1:-1]

    def signs(self):
        """Sign of each segment."""
        n = len(self.switch_times) - 1
        return self.initial_sign * (-1.0) ** np.arange(n)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(np.asarray(self.switch_times[1:-1]), t, side="right")
        return self.initial_sign * (-1.0) ** idx

    def switch_weights(self):
        """Coefficients c_j with F(omega) = sum_j c_j exp(i omega t_j) / (i omega)."""
        s = self.signs()
        c = np.empty(len(self.switch_times))
        c[0] = -s[0]
        c[-1] = s[-1]
        c[1:-1] = s[:-1] - s[1:]
        return c


def walsh_function(k: int, x):
    """Sequency-ordered (Walsh-Kaczmarz) Walsh function w_k on [0, 1).

    Built as the product of Rademacher functions selected by the Gray code
    of ``k``; w_k has exactly k sign changes on [0, 1).
    """
    if k < 0:
        raise ValidationError("k must be >= 0")
    x = np.asarray(x, dtype=float)
    gray = k ^ (k >> 1)
    out = np.ones(x.shape)
    j = 1
    while gray:
        if gray & 1:
            # Rademacher r_j(x) = sign(sin(2^j pi x)), taken right-continuous
            out = out * np.where(np.floor(x * 2 ** j) % 2 == 0, 1.0, -1.0)
        gray >>= 1
        j += 1
    if out.ndim == 0:
        return float(out)
    return out


def walsh_switch_fractions(k: int, N: int = 1) -> np.ndarray:
    """Sign-change positions of w_k repeated N times, as fractions of N cycles."""
    m = max(1, int(k).bit_length())
    cells = 2 ** m
    mids = (np.arange(cells * N) + 0.5) / cells % 1.0
    vals = walsh_function(k, mids)
    change = np.nonzero(vals[1:] != vals[:-1])[0] + 1
    return change / (cells * N)


def build_modulation(seq) -> ModulationFunction:
    if isinstance(seq, ModulationFunction):
        return seq
    T = seq.total_time
    pis = list(seq.pi_times())
    return ModulationFunction(tuple([0.0] + pis + [T]))


def filter_value(mod, omega):
    """|F_T(omega)|^2 in us^2 for a modulation function or a pulse sequence."""
    mod = build_modulation(mod)
    w = np.asarray(omega, dtype=float)
    scalar = w.ndim == 0
    w = np.atleast_1d(w)
    t = np.asarray(mod.switch_times)
    T = t[-1]
    out = np.empty(w.shape)
    small = np.abs(w * T) < SMALL_PHASE
    if np.any(~small):
        ws = w[~small]
        c = mod.switch_weights()
        # shift origin to T/2 so that the phases stay bounded
        phase = np.outer(ws, t - T / 2.0)
        re_ = np.cos(phase) @ c
        im_ = np.sin(phase) @ c
        out[~small] = (re_ ** 2 + im_ ** 2) / ws ** 2
    if np.any(small):
        s = mod.signs()
        dt = np.diff(t)
        m0 = np.sum(s * dt)
        m1 = np.sum(s * np.diff(t ** 2)) / 2.0
        m2 = np.sum(s * np.diff(t ** 3)) / 6.0
        ws = w[small]
        out[small] = (m0 - ws ** 2 * m2) ** 2 + (ws * m1) ** 2
    return float(out[0]) if scalar else out


def cpmg_probe_frequency(tau: float) -> float:
    """Center of the CPMG filter peak, 2 pi / (4 tau), in rad/us."""
    _positive("tau", tau)
    return 2.0 * math.pi / (4.0 * tau)


def echo_filter_closed_form(T, omega):
    w = np.asarray(omega, dtype=float)
    return 16.0 * np.sin(w * T / 4.0) ** 4 / w ** 2


def ramsey_filter_closed_form(T, omega):
    w = np.asarray(omega, dtype=float)
    return 4.0 * np.sin(w * T / 2.0) ** 2 / w ** 2


# -- sequence literal syntax -----------------------------------------------

_LITERAL = re.compile(r"^\s*([a-zA-Z_]+)\s*(?::(.*))?$")


def _split_args(body: str) -> dict[str, str]:
    out: dict[str, str] = {}
    if not body or not body.strip():
        return out
    depth, cur, parts = 0, "", []
    for ch in body:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    for p in parts:
        if "=" not in p:
            raise ValidationError(f"expected key=value in sequence literal, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _num(args, key, literal):
    try:
        return float(args[key])
    except KeyError:
        raise ValidationError(f"sequence literal {literal!r} needs {key}=") from None
    except ValueError:
        raise ValidationError(f"bad number for {key} in {literal!r}") from None


def _int(args, key, literal):
    v = _num(args, key, literal)
    if v != int(v):
        raise ValidationError(f"{key} must be an integer in {literal!r}")
    return int(v)


def parse_sequence_family(literal: str):
    """Parse ``family[:k=v,...]`` into (family, args) without requiring a total time."""
    m = _LITERAL.match(literal)
    if not m:
        raise ValidationError(f"cannot parse sequence literal {literal!r}")
    family = m.group(1).lower()
    if family not in ("ramsey", "echo", "cpmg", "walsh", "custom"):
        raise ValidationError(f"unknown sequence family {family!r}")
    return family, _split_args(m.group(2) or "")


def parse_sequence(literal: str):
    """Parse a literal like ``cpmg:n=32,tau=2.5`` (times in us)."""
    family, args = parse_sequence_family(literal)
    allowed = {"ramsey": {"T"}, "echo": {"T"}, "cpmg": {"n", "tau"},
               "walsh": {"k", "lambda", "N"}, "custom": {"T", "pis"}}[family]
    extra = set(args) - allowed
    if extra:
        raise ValidationError(f"unknown key(s) {sorted(extra)} for {family}")
    if family == "ramsey":
        return Ramsey(_num(args, "T", literal))
    if family == "echo":
        return Echo(_num(args, "T", literal))
    if family == "cpmg":
        return Cpmg(_int(args, "n", literal), _num(args, "tau", literal))
    if family == "walsh":
        N = _int(args, "N", literal) if "N" in args else 1
        return WalshDD(_int(args, "k", literal), _num(args, "lambda", literal), N)
    pis = args.get("pis", "[]").strip()
    if not (pis.startswith("[") and pis.endswith("]")):
        raise ValidationError("custom pis must be a bracketed list")
    inner = pis[1:-1].strip()
    vals = tuple(float(x) for x in inner.split(",")) if inner else ()
    return Custom(_num(args, "T", literal), vals)


def _fmt(x):
    return repr(float(x)) if float(x) != int(x) else str(int(x))


def format_sequence(seq) -> str:
    if isinstance(seq, Ramsey):
        return f"ramsey:T={_fmt(seq.T)}"
    if isinstance(seq, Echo):
        return f"echo:T={_fmt(seq.T)}"
    if isinstance(seq, Cpmg):
        return f"cpmg:n={int(seq.n_pulses)},tau={_fmt(seq.tau)}"
    if isinstance(seq, WalshDD):
        return f"walsh:k={int(seq.k)},lambda={_fmt(seq.lam)},N={int(seq.N)}"
    if isinstance(seq, Custom):
        return f"custom:T={_fmt(seq.T)},pis=[{','.join(_fmt(p) for p in seq.pis)}]"
    raise ValidationError(f"not a pulse sequence: {seq!r}")


def sequence_at(family: str, args: dict, T: float):
    """The member of a sequence family with total time T.

    Families are indexed by total time: Ramsey and echo directly, CPMG at
    fixed tau (n = T / 2 tau), Walsh at fixed lambda (N = T / lambda).  A
    pulse count in the arguments (``n`` for CPMG, ``N`` for Walsh) takes
    precedence: the count stays fixed and the spacing scales with T.
    """
    if family == "ramsey":
        return Ramsey(T)
    if family == "echo":
        return Echo(T)
    if family == "cpmg" and "n" in args:
        n = _int(args, "n", f"cpmg:n={args['n']}")
        return Cpmg(n, T / (2.0 * n))
    if family == "walsh" and "N" in args:
        N = _int(args, "N", f"walsh:N={args['N']}")
        return WalshDD(int(args["k"]), T / N, N)
    if family == "cpmg":
        if "tau" not in args:
            raise ValidationError("cpmg family needs tau= or n=")
        tau = float(args["tau"])
        n = T / (2.0 * tau)
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValidationError(f"T={T} is not a multiple of 2 tau={2 * tau}")
        return Cpmg(int(round(n)), tau)
    if family == "walsh":
        if "lambda" not in args:
            raise ValidationError("walsh family needs lambda= or N=")
        lam = float(args["lambda"])
        N = T / lam
        if abs(N - round(N)) > 1e-9 * max(1.0, N):
            raise ValidationError(f"T={T} is not a multiple of lambda={lam}")
        return WalshDD(int(args["k"]), lam, int(round(N)))
    if family == "custom":
        return parse_sequence(f"custom:T={T},pis={args.get('pis', '[]')}")
    raise ValidationError(f"unknown family {family!r}")


def sequence_family_of(seq) -> tuple[str, dict]:
    if isinstance(seq, Ramsey):
        return "ramsey", {}
    if isinstance(seq, Echo):
        return "echo", {}
    if isinstance(seq, Cpmg):
        return "cpmg", {"tau": seq.tau}
    if isinstance(seq, WalshDD):
        return "walsh", {"k": seq.k, "lambda": seq.lam}
    return "custom", {"pis": "[" + ",".join(_fmt(p) for p in seq.pis) + "]"}


def sequences_for_times(literal_or_family, times: Sequence[float]):
    """Sequences of one family at each total time."""
    if isinstance(literal_or_family, str):
        family, args = parse_sequence_family(literal_or_family)
    else:
        family, args = literal_or_family
    return [sequence_at(family, args, float(T)) for T in times]
