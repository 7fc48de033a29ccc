"""Monte Carlo oracle: sampled classical noise, dephasing, and pi-pulse fidelity.

Trajectory ``i`` of a run with seed ``s`` draws from its own generator seeded
by ``SeedSequence([s, i])``, so results do not depend on block size or
evaluation order.  Trajectories are processed in blocks and reduced in index
order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import sparse

from .errors import OracleUnsupportedError, ValidationError
from .filters import build_modulation, parse_sequence_family, sequence_at
from .noise import NoiseModel

BLOCK = 1000


@dataclass(frozen=True)
class TrajectoryConfig:
    """``dt`` is the step (or its upper bound when a grid is built automatically)."""

    dt: float | None = None
    n_steps: int = 0
    n_traj: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.dt is not None and not self.dt > 0:
            raise ValidationError("dt must be > 0")
        if self.n_traj < 1:
            raise ValidationError("n_traj must be >= 1")
        if self.n_steps < 0:
            raise ValidationError("n_steps must be >= 0")


@dataclass(frozen=True)
class PulseParams:
    rabi: float
    detuning: float
    length: float

    def __post_init__(self):
        if not self.length > 0:
            raise ValidationError("pulse length must be > 0")


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2 ** 64 - 1), index]))


def _blocks(n_traj):
    for start in range(0, n_traj, BLOCK):
        yield start, min(n_traj, start + BLOCK)


def ou_path(b: float, tau_c: float, cfg: TrajectoryConfig) -> np.ndarray:
    """Exactly discretized stationary OU paths, shape (n_traj, n_steps + 1)."""
    if b < 0 or not tau_c > 0:
        raise ValidationError("ou_path needs b >= 0 and tau_c > 0")
    if cfg.dt is None or cfg.n_steps < 1:
        raise ValidationError("ou_path needs cfg.dt and cfg.n_steps")
    a = math.exp(-cfg.dt / tau_c)
    c = b * math.sqrt(-math.expm1(-2.0 * cfg.dt / tau_c))
    out = np.empty((cfg.n_traj, cfg.n_steps + 1))
    for i in range(cfg.n_traj):
        z = _rng(cfg.seed, i).standard_normal(cfg.n_steps + 1)
        x = np.empty(cfg.n_steps + 1)
        x[0] = b * z[0]
        for n in range(cfg.n_steps):
            x[n + 1] = a * x[n] + c * z[n + 1]
        out[i] = x
    return out


# -- dephasing --------------------------------------------------------------------------

def _check_model(model: NoiseModel):
    if model.of_kind("peak"):
        raise OracleUnsupportedError("the Monte Carlo oracle does not sample spectral peaks")
    if not model.is_bound():
        raise ValidationError("model must be fully bound")


def time_grid(switch_sets: Sequence[np.ndarray], tau_min: float, dt_max: float | None = None):
    """Grid containing every switch time, with local step <= min(tau/20, t/200)."""
    t_end = max(float(s[-1]) for s in switch_sets)
    t_short = min(float(s[-1]) for s in switch_sets)
    cap = tau_min / 20.0
    if dt_max is not None:
        cap = min(cap, dt_max)
    pts = []
    t = 0.0
    while t < t_end:
        pts.append(t)
        t += min(cap, max(t, t_short) / 200.0)
    grid = np.union1d(np.asarray(pts), np.concatenate(switch_sets))
    grid = grid[grid <= t_end]
    # drop near-duplicates from float noise while keeping exact switch times
    keep = np.concatenate([[True], np.diff(grid) > 1e-12 * max(t_end, 1.0)])
    return grid[keep]


def _weight_matrix(mods, grid):
    rows, cols, vals = [], [], []
    for r, m in enumerate(mods):
        t = np.asarray(m.switch_times, dtype=float)
        idx = np.searchsorted(grid, t)
        idx = np.clip(idx, 0, grid.size - 1)
        # snap to the nearest grid point (switch times are in the grid)
        lo = np.clip(idx - 1, 0, grid.size - 1)
        idx = np.where(np.abs(grid[lo] - t) < np.abs(grid[idx] - t), lo, idx)
        w = np.asarray(m.switch_weights(), dtype=float)
        rows.extend([r] * idx.size)
        cols.extend(idx.tolist())
        vals.extend(w.tolist())
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(mods), grid.size))


def _cumulative_phase(model: NoiseModel, grid: np.ndarray, seed: int, start: int, stop: int):
    """Cumulative integral of the noise on ``grid`` for trajectories [start, stop)."""
    dts = np.diff(grid)
    n = stop - start
    comps = model.components
    # draw every trajectory's stream from its own generator, in a fixed order
    n_draw = 0
    for c in comps:
        n_draw += grid.size if c.kind == "ou" else grid.size - 1
    Z = np.empty((n, n_draw))
    for k in range(n):
        Z[k] = _rng(seed, start + k).standard_normal(n_draw)
    C = np.zeros((n, grid.size))
    col = 0
    for c in comps:
        if c.kind == "ou":
            if c.b == 0.0:
                col += grid.size
                continue
            a = np.exp(-dts / c.tau_c)
            s = c.b * np.sqrt(-np.expm1(-2.0 * dts / c.tau_c))
            B = np.empty((n, grid.size))
            B[:, 0] = c.b * Z[:, col]
            for j in range(dts.size):
                B[:, j + 1] = a[j] * B[:, j] + s[j] * Z[:, col + j + 1]
            col += grid.size
            C[:, 1:] += np.cumsum(0.5 * (B[:, 1:] + B[:, :-1]) * dts, axis=1)
        else:
            inc = math.sqrt(c.level) * np.sqrt(dts) * Z[:, col:col + dts.size]
            col += dts.size
            C[:, 1:] += np.cumsum(inc, axis=1)
    return C


@dataclass
class McEstimate:
    coherence: np.ndarray
    stderr: np.ndarray
    n_traj: int
    grid_size: int


def mc_coherences(model: NoiseModel, sequences, cfg: TrajectoryConfig) -> McEstimate:
    """Coherence estimates for many sequences from one shared trajectory ensemble."""
    _check_model(model)
    mods = [build_modulation(s) for s in sequences]
    if not mods:
        return McEstimate(np.zeros(0), np.zeros(0), cfg.n_traj, 0)
    taus = [c.tau_c for c in model.of_kind("ou")]
    tau_min = min(taus) if taus else math.inf
    grid = time_grid([np.asarray(m.switch_times, dtype=float) for m in mods],
                     tau_min, cfg.dt)
    Wm = _weight_matrix(mods, grid)
    s1 = np.zeros(len(mods))
    s2 = np.zeros(len(mods))
    for start, stop in _blocks(cfg.n_traj):
        C = _cumulative_phase(model, grid, cfg.seed, start, stop)
        phi = (Wm @ C.T)            # (n_seq, block)
        cphi = np.cos(phi)
        s1 += cphi.sum(axis=1)
        s2 += (cphi ** 2).sum(axis=1)
    n = cfg.n_traj
    mean = s1 / n
    var = np.maximum(s2 / n - mean ** 2, 0.0) * n / max(n - 1, 1)
    return McEstimate(mean, np.sqrt(var / n), n, grid.size)


def mc_coherence(model: NoiseModel, mod, cfg: TrajectoryConfig):
    """(mean cos phi, standard error) for one modulation function or sequence."""
    est = mc_coherences(model, [mod], cfg)
    return float(est.coherence[0]), float(est.stderr[0])


def mc_decay_curve(model: NoiseModel, family: str, times, cfg: TrajectoryConfig) -> McEstimate:
    fam, args = parse_sequence_family(family)
    times = np.asarray(times, dtype=float)
    out_c = np.ones(times.shape)
    out_s = np.zeros(times.shape)
    nz = times > 0
    if np.any(nz):
        est = mc_coherences(model, [sequence_at(fam, args, float(t)) for t in times[nz]], cfg)
        out_c[nz], out_s[nz] = est.coherence, est.stderr
        return McEstimate(out_c, out_s, est.n_traj, est.grid_size)
    return McEstimate(out_c, out_s, cfg.n_traj, 0)


# -- pi-pulse fidelity ----------------------------------------------------------------------

_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SZ = np.array([[1, 0], [0, -1]], dtype=complex)


def pi_fidelity_analytic(p: PulseParams) -> float:
    """|(Omega0/Omega) sin(Omega L / 2)| with Omega = sqrt(Omega0^2 + delta^2)."""
    om = math.hypot(p.rabi, p.detuning)
    if om == 0.0:
        return 0.0
    return abs(p.rabi / om * math.sin(om * p.length / 2.0))


def fidelity_sequence_signal(F_pi: float, beta0: float, N):
    """beta0 (-n_z)^N with n_z = 1 - 2 F_pi^2 (sign-flip frame)."""
    if not 0.0 <= F_pi <= 1.0:
        raise ValidationError("F_pi must lie in [0, 1]")
    n_z = 1.0 - 2.0 * F_pi ** 2
    N = np.asarray(N)
    return beta0 * (-n_z) ** N


def pulse_unitary(rabi: float, detuning: float, length: float) -> np.ndarray:
    """R = exp(-i (Omega0 sigma_x + delta sigma_z) L / 2)."""
    om = math.hypot(rabi, detuning)
    if om == 0.0:
        return np.eye(2, dtype=complex)
    n_dot_s = (rabi * _SX + detuning * _SZ) / om
    a = om * length / 2.0
    return math.cos(a) * np.eye(2) - 1j * math.sin(a) * n_dot_s


def _flip_series(R: np.ndarray, beta0: float, N_max: int) -> np.ndarray:
    rho = 0.5 * (np.eye(2) + beta0 * _SZ)
    out = np.empty(N_max + 1)
    out[0] = beta0
    for n in range(1, N_max + 1):
        rho = R @ rho @ R.conj().T
        # long free evolution: transverse components dephase completely
        rho = np.diag(np.diag(rho))
        out[n] = (-1) ** n * np.real(np.trace(_SZ @ rho))
    return out


def simulate_fidelity_protocol(p: PulseParams, N_max: int, cfg: TrajectoryConfig | None = None,
                               beta0: float = 1.0, detuning_sigma: float = 0.0,
                               rabi_sigma: float = 0.0) -> np.ndarray:
    """<sigma_z> after N = 0..N_max pulses, reported in the flip frame (-1)^N <sigma_z>.

    Each pulse is the unitary R followed by complete loss of transverse
    coherence.  With ``detuning_sigma`` or ``rabi_sigma`` > 0 the pulse
    parameters are drawn once per shot from normal distributions and the
    series is averaged over ``cfg.n_traj`` shots.
    """
    if N_max < 0:
        raise ValidationError("N_max must be >= 0")
    if detuning_sigma == 0.0 and rabi_sigma == 0.0:
        return _flip_series(pulse_unitary(p.rabi, p.detuning, p.length), beta0, N_max)
    cfg = cfg or TrajectoryConfig(n_traj=1000)
    acc = np.zeros(N_max + 1)
    for i in range(cfg.n_traj):
        rng = _rng(cfg.seed, i)
        d = p.detuning + detuning_sigma * rng.standard_normal()
        r = p.rabi + rabi_sigma * rng.standard_normal()
        acc += _flip_series(pulse_unitary(r, d, p.length), beta0, N_max)
    return acc / cfg.n_traj
