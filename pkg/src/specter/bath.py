"""Spin-bath quantities implied by a fitted noise model.

Electron-electron dipolar couplings, the local spin density implied by an
OU amplitude b, lattice sums for dense baths and relative flip-flop rates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import constants as sc

from .errors import ValidationError
from .noise import NoiseModel

GAMMA_E = sc.physical_constants["electron gyromag. ratio"][0]     # rad / (s T)
# mu0 gamma_e^2 hbar / 4 pi in rad/us * nm^3
DIPOLAR_CONSTANT = sc.mu_0 / (4 * math.pi) * GAMMA_E ** 2 * sc.hbar * 1e27 * 1e-6
CM3_PER_PPM = 1.77e17             # spins per cm^3 at 1 ppm
NM_PER_CM = 1e7
RMIN_FACTOR = 0.55                 # Poisson median nearest-neighbour distance, in rho^(-1/3)


def _analytic_coefficient() -> float:
    """b per ppm (rad/s) from b^2 = (4 pi / 15) C^2 rho^2 / 0.55^3."""
    C = DIPOLAR_CONSTANT * 1e6                     # rad/s nm^3
    rho = CM3_PER_PPM / NM_PER_CM ** 3             # nm^-3 at 1 ppm
    return math.sqrt(4 * math.pi / 15 * C ** 2 * rho ** 2 / RMIN_FACTOR ** 3)


COEFFICIENTS = {"analytic": _analytic_coefficient(), "literature": 7.8e5}


def dipolar_coupling(r_nm, theta) -> np.ndarray:
    """A = C (1 - 3 cos^2 theta) / r^3 in rad/us."""
    r = np.asarray(r_nm, dtype=float)
    if np.any(r <= 0):
        raise ValidationError("distance must be > 0")
    return DIPOLAR_CONSTANT * (1.0 - 3.0 * np.cos(theta) ** 2) / r ** 3


def rmin_from_density(rho_per_cm3: float) -> float:
    """Median nearest-spin distance 0.55 rho^(-1/3), in nm."""
    if not rho_per_cm3 > 0:
        raise ValidationError("density must be > 0")
    return RMIN_FACTOR * rho_per_cm3 ** (-1.0 / 3.0) * NM_PER_CM


@dataclass(frozen=True)
class BathEstimate:
    f_ppm: float
    rho_per_cm3: float
    r_min_nm: float
    coefficient_used: str
    b_rad_per_s: float

    def to_dict(self):
        return {"f_ppm": self.f_ppm, "rho_per_cm3": self.rho_per_cm3,
                "r_min_nm": self.r_min_nm, "coefficient_used": self.coefficient_used,
                "coefficient_rad_per_s_per_ppm": COEFFICIENTS[self.coefficient_used],
                "b_rad_per_s": self.b_rad_per_s}


def _coefficient(name: str) -> float:
    if name not in COEFFICIENTS:
        raise ValidationError(f"coefficient must be one of {sorted(COEFFICIENTS)}")
    return COEFFICIENTS[name]


def density_from_b(b_rad_per_s: float, coefficient: str = "literature") -> BathEstimate:
    """Sparse-bath density from the OU amplitude, f = b / c."""
    if not b_rad_per_s > 0:
        raise ValidationError("b must be > 0")
    f = b_rad_per_s / _coefficient(coefficient)
    rho = f * CM3_PER_PPM
    return BathEstimate(f, rho, rmin_from_density(rho), coefficient, b_rad_per_s)


def b_from_density(f_ppm: float, coefficient: str = "literature") -> float:
    """Inverse of :func:`density_from_b`, in rad/s."""
    return f_ppm * _coefficient(coefficient)


def bath_estimates(model: NoiseModel) -> list:
    """Density estimates for every OU component, with both coefficients."""
    out = []
    for i, c in enumerate(model.of_kind("ou")):
        if c.b <= 0:
            continue
        for name in ("literature", "analytic"):
            d = density_from_b(c.b * 1e6, name).to_dict()
            d["component"] = f"ou[{i}] tau_c={c.tau_c:.4g} us"
            out.append(d)
    return out


# -- Monte Carlo oracle for b(rho) ---------------------------------------------------------

@dataclass(frozen=True)
class BSample:
    median: float
    q25: float
    q75: float
    samples: np.ndarray


def b_from_density_mc(rho_per_cm3: float, geometry: str = "3d", seed: int = 0,
                      n_samples: int = 2000, radius_factor: float = 8.0,
                      layer_nm: float = 1.0, depth_nm: float = 0.0) -> BSample:
    """Sample b = sqrt(sum A_k^2 / 4) over Poisson spin configurations, in rad/s.

    ``"3d"``: spins fill a sphere of radius ``radius_factor`` mean spacings.
    ``"2d"``: spins fill a disc-shaped layer ``layer_nm`` thick whose mid-plane
    lies ``depth_nm`` from the qubit.  The quantization axis is z.
    """
    if not rho_per_cm3 > 0:
        raise ValidationError("density must be > 0")
    rho = rho_per_cm3 / NM_PER_CM ** 3
    spacing = rho ** (-1.0 / 3.0)
    out = np.empty(n_samples)
    for i in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        if geometry == "3d":
            R = radius_factor * spacing
            n = rng.poisson(rho * 4.0 / 3.0 * math.pi * R ** 3)
            v = rng.standard_normal((n, 3))
            v /= np.linalg.norm(v, axis=1)[:, None]
            r = R * rng.random(n) ** (1.0 / 3.0)
            cos_t = v[:, 2]
        elif geometry == "2d":
            sigma = rho * layer_nm
            R = radius_factor * max(sigma ** -0.5, layer_nm, abs(depth_nm))
            n = rng.poisson(sigma * math.pi * R ** 2)
            rad = R * np.sqrt(rng.random(n))
            z = depth_nm + layer_nm * (rng.random(n) - 0.5)
            r = np.hypot(rad, z)
            cos_t = z / np.maximum(r, 1e-300)
        else:
            raise ValidationError("geometry must be '3d' or '2d'")
        keep = r > 1e-6
        A = DIPOLAR_CONSTANT * 1e6 * (1 - 3 * cos_t[keep] ** 2) / r[keep] ** 3
        out[i] = math.sqrt(float(np.sum(A ** 2)) / 4.0)
    q25, med, q75 = np.percentile(out, [25, 50, 75])
    return BSample(float(med), float(q25), float(q75), out)


# -- dense baths ---------------------------------------------------------------------------

_BASIS = {"sc": np.zeros((1, 3)),
          "diamond": np.array([[0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0],
                               [.25, .25, .25], [.25, .75, .75], [.75, .25, .75],
                               [.75, .75, .25]])}


def _lattice_sum(lattice: str, a: float, cutoff: float) -> float:
    basis = _BASIS[lattice]
    m = int(math.ceil(cutoff / a)) + 1
    ax = np.arange(-m, m + 1, dtype=float)
    total = 0.0
    for k in ax:
        # one z-layer of cells at a time
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        cells = np.stack([X.ravel(), Y.ravel(), np.full(X.size, k)], axis=1)
        pos = (cells[:, None, :] + basis[None, :, :]).reshape(-1, 3) * a
        r2 = np.einsum("ij,ij->i", pos, pos)
        sel = (r2 > 1e-18) & (r2 <= cutoff ** 2)
        p = pos[sel]
        r2 = r2[sel]
        cos2 = p[:, 2] ** 2 / r2
        A = DIPOLAR_CONSTANT * (1 - 3 * cos2) / r2 ** 1.5
        total += float(np.sum(A ** 2)) / 4.0
    return total


@dataclass(frozen=True)
class LatticeSum:
    value: float           # (rad/us)^2 per unit fraction
    converged: bool
    relative_change: float


def lattice_sum_Atot2(lattice: str = "diamond", a: float = 0.3567, cutoff: float | None = None
                      ) -> LatticeSum:
    """A_tot^2 = sum' A_k^2 / 4 over lattice sites within ``cutoff`` (nm).

    Convergence is checked against half the cutoff; the flag is False when
    the two differ by 1% or more.
    """
    if lattice not in _BASIS:
        raise ValidationError(f"lattice must be one of {sorted(_BASIS)}")
    if not a > 0:
        raise ValidationError("lattice constant must be > 0")
    cutoff = 20 * a if cutoff is None else cutoff
    if cutoff < 3 * a:
        raise ValidationError("cutoff must be >= 3 lattice constants")
    full = _lattice_sum(lattice, a, cutoff)
    half = _lattice_sum(lattice, a, cutoff / 2)
    rel = abs(full - half) / full
    return LatticeSum(full, rel < 0.01, rel)


def flipflop_relative_rate(A, gamma_d, delta):
    """A Gamma_d / (Gamma_d^2 + delta^2), in relative units."""
    gamma_d = np.asarray(gamma_d, dtype=float)
    if np.any(gamma_d <= 0):
        raise ValidationError("gamma_d must be > 0")
    return np.asarray(A, dtype=float) * gamma_d / (gamma_d ** 2 + np.asarray(delta) ** 2)
