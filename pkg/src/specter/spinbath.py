"""Exact few-spin simulation of a central spin coupled to near-resonant bath spins.

Rotating frame of the drive, which is resonant with the central spin::

    H = sum_k (Delta_k / 2) Z_k + sum_k (d_k / 4) Z_0 Z_k
        + sum_{j<k} J_jk (s+_j s-_k + h.c.) + (delta / 2) Z_0
        + (Omega / 2) sum_i X_i          (only while a pulse is on)

Pulses are global rectangular pi pulses of the central spin, so every bath
spin is driven off-resonantly by its own detuning.  The preparation and
readout pi/2 pulses are ideal and act on the central spin only; the signal is
<X_0> at the end of the sequence.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .filters import build_modulation, parse_sequence_family, sequence_at
from .inference import DecayRecord, fit_decay
from .noise import NoiseModel

MAX_BATH = 6

_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)
_SP = np.array([[0, 1], [0, 0]], dtype=complex)


@dataclass(frozen=True)
class BathSpin:
    d: float        # Ising coupling to the central spin, rad/us
    delta: float    # detuning from the drive, rad/us


@dataclass
class CentralSpinSystem:
    bath_spins: list = field(default_factory=list)
    J: dict = field(default_factory=dict)          # {(j, k): rad/us} flip-flop couplings
    background: NoiseModel | None = None

    def __post_init__(self):
        self.bath_spins = [s if isinstance(s, BathSpin) else BathSpin(*s)
                           for s in self.bath_spins]
        if len(self.bath_spins) > MAX_BATH:
            raise ValidationError(f"at most {MAX_BATH} bath spins (dimension <= 128)")
        for s in self.bath_spins:
            if not (math.isfinite(s.d) and math.isfinite(s.delta)):
                raise ValidationError("couplings and detunings must be finite")
        for (j, k), v in self.J.items():
            if not (0 <= j < self.n and 0 <= k < self.n and j != k and math.isfinite(v)):
                raise ValidationError(f"bad bath-bath coupling {(j, k)}")
        if self.background is not None:
            if self.background.of_kind("peak") or self.background.of_kind("white"):
                raise ValidationError("background must be made of OU components "
                                      "(sampled as a quasistatic offset)")

    @property
    def n(self) -> int:
        return len(self.bath_spins)

    @property
    def dim(self) -> int:
        return 2 ** (self.n + 1)

    def background_sigma(self) -> float:
        if self.background is None:
            return 0.0
        return math.sqrt(sum(c.b ** 2 for c in self.background.of_kind("ou")))

    @classmethod
    def from_dict(cls, doc: dict) -> "CentralSpinSystem":
        from .noise import model_from_dict
        spins = []
        for i, s in enumerate(doc.get("spins", [])):
            if "d" in s or "delta" in s:
                raise ValidationError(f"spins[{i}]: use d_rad_per_us and delta_rad_per_us")
            spins.append(BathSpin(float(s["d_rad_per_us"]), float(s["delta_rad_per_us"])))
        J = {}
        for e in doc.get("J", []):
            J[(int(e["j"]), int(e["k"]))] = float(e["J_rad_per_us"])
        bg = doc.get("background_model")
        return cls(spins, J, model_from_dict(bg) if bg else None)


@dataclass(frozen=True)
class DriveSpec:
    """Rectangular global pi pulses of length pi / rabi; ``ideal`` makes them instantaneous."""

    rabi: float
    ideal: bool = False

    def __post_init__(self):
        if not self.rabi > 0:
            raise ValidationError("rabi must be > 0")

    @property
    def pulse_length(self) -> float:
        return 0.0 if self.ideal else math.pi / self.rabi


def _op(single: np.ndarray, site: int, n_sites: int) -> np.ndarray:
    out = np.array([[1.0 + 0j]])
    for i in range(n_sites):
        out = np.kron(out, single if i == site else np.eye(2))
    return out


class _Propagators:
    def __init__(self, sys: CentralSpinSystem, drive: DriveSpec, offset: float):
        n = sys.n + 1
        Z = [_op(_Z, i, n) for i in range(n)]
        X = [_op(_X, i, n) for i in range(n)]
        H = 0.5 * offset * Z[0]
        for k, s in enumerate(sys.bath_spins, start=1):
            H = H + 0.5 * s.delta * Z[k] + 0.25 * s.d * Z[0] @ Z[k]
        for (j, k), v in sys.J.items():
            sp_j = _op(_SP, j + 1, n)
            sp_k = _op(_SP, k + 1, n)
            H = H + v * (sp_j @ sp_k.conj().T + sp_k @ sp_j.conj().T)
        self.E, self.V = np.linalg.eigh(H)
        self.X0 = X[0]
        Xall = sum(X)
        if drive.ideal:
            # instantaneous pi about x on every spin
            P = np.eye(1, dtype=complex)
            for _ in range(n):
                P = np.kron(P, -1j * _X)
            self.pulse = P
        else:
            Ep, Vp = np.linalg.eigh(H + 0.5 * drive.rabi * Xall)
            self.pulse = (Vp * np.exp(-1j * Ep * drive.pulse_length)) @ Vp.conj().T
        self.tp = drive.pulse_length

    def free(self, t: float) -> np.ndarray:
        return (self.V * np.exp(-1j * self.E * t)) @ self.V.conj().T


def _pulse_centers(seq):
    mod = build_modulation(seq)
    t = np.asarray(mod.switch_times, dtype=float)
    return t[1:-1], float(t[-1])


def _evolve(prop: _Propagators, psi: np.ndarray, centers, T: float) -> np.ndarray:
    """Apply free evolution and finite pulses centred at ``centers``."""
    half = 0.5 * prop.tp
    t = 0.0
    for c in centers:
        gap = c - half - t
        if gap < -1e-12:
            raise ValidationError("pulses overlap: spacing shorter than the pulse length")
        psi = prop.free(max(gap, 0.0)) @ psi
        psi = prop.pulse @ psi
        t = c + half
    if T - t < -1e-12:
        raise ValidationError("last pulse runs past the end of the sequence")
    return prop.free(max(T - t, 0.0)) @ psi


def evolve_sequence(sys: CentralSpinSystem, drive: DriveSpec, family: str, times,
                    shots: int | None = None, seed: int = 0) -> np.ndarray:
    """<X_0> after the sequence family at each total time.

    ``shots=None`` averages exactly over the maximally mixed bath (every
    computational state, no background offset).  Otherwise each shot draws
    one computational bath state and one quasistatic background offset from
    its own seeded generator.
    """
    fam, args = parse_sequence_family(family)
    times = np.asarray(times, dtype=float)
    nb = 2 ** sys.n
    plus = np.array([1, 1], dtype=complex) / math.sqrt(2)
    seqs = [(sequence_at(fam, args, float(T)) if T > 0 else None) for T in times]
    out = np.zeros(times.size)
    if shots is None:
        if sys.background_sigma() > 0:
            raise ValidationError("a classical background needs sampled shots")
        prop = _Propagators(sys, drive, 0.0)
        psi0 = np.kron(plus[:, None], np.eye(nb))            # one column per bath state
        for i, (T, seq) in enumerate(zip(times, seqs)):
            psi = psi0 if seq is None else _evolve(prop, psi0, *_pulse_centers(seq))
            out[i] = float(np.real(np.sum(psi.conj() * (prop.X0 @ psi)))) / nb
        return out
    if shots < 1:
        raise ValidationError("shots must be >= 1")
    sig = sys.background_sigma()
    for s in range(shots):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s]))
        j = int(rng.integers(nb))
        offset = sig * rng.standard_normal() if sig > 0 else 0.0
        prop = _Propagators(sys, drive, offset)
        bath = np.zeros(nb, dtype=complex)
        bath[j] = 1.0
        psi0 = np.kron(plus, bath)
        for i, (T, seq) in enumerate(zip(times, seqs)):
            psi = psi0 if seq is None else _evolve(prop, psi0, *_pulse_centers(seq))
            out[i] += float(np.real(psi.conj() @ (prop.X0 @ psi)))
    return out / shots


def t2_vs_rabi(sys: CentralSpinSystem, family: str, rabis, times, shots: int | None = None,
               seed: int = 0, sigma: float = 0.01) -> dict:
    """Exponential-fit T2 for each Rabi frequency (inf when no decay is resolved)."""
    out = {}
    for rabi in rabis:
        sig = evolve_sequence(sys, DriveSpec(float(rabi)), family, times, shots, seed)
        fit = fit_decay(DecayRecord(family, times, sig, sigma), "exponential")
        r = fit.params["r"]
        out[float(rabi)] = math.inf if r <= 0 else 1.0 / r
    return out
