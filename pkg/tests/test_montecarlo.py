import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specter import montecarlo
from specter.decoherence import chi_echo_slow_ou, decay_curve
from specter.errors import OracleUnsupportedError, ValidationError
from specter.filters import Echo, Ramsey
from specter.inference import fit_pi_fidelity
from specter.montecarlo import (PulseParams, TrajectoryConfig, fidelity_sequence_signal,
                                mc_coherence, mc_coherences, mc_decay_curve, ou_path,
                                pi_fidelity_analytic, pulse_unitary, simulate_fidelity_protocol,
                                time_grid)
from specter.noise import NoiseModel, OrnsteinUhlenbeck, SpectralPeak, White


class TestOuPath:
    def test_stationary_variance(self):
        cfg = TrajectoryConfig(dt=1.0, n_steps=100_000, n_traj=1, seed=3)
        x = ou_path(0.5, 1.0, cfg)[0]
        assert abs(x.mean()) < 0.02
        assert x.var() == pytest.approx(0.25, rel=0.03)

    @pytest.mark.parametrize("k", [1, 3, 10])
    def test_autocorrelation(self, k):
        dt, tau, b = 0.1, 1.0, 0.5
        x = ou_path(b, tau, TrajectoryConfig(dt=dt, n_steps=200_000, n_traj=1, seed=4))[0]
        c = float(np.mean(x[:-k] * x[k:]))
        assert c == pytest.approx(b * b * math.exp(-k * dt / tau), abs=0.01)

    def test_zero_amplitude(self):
        x = ou_path(0.0, 2.0, TrajectoryConfig(dt=0.1, n_steps=50, n_traj=3))
        assert np.all(x == 0.0)

    def test_deterministic(self):
        cfg = TrajectoryConfig(dt=0.1, n_steps=100, n_traj=4, seed=99)
        assert np.array_equal(ou_path(0.3, 2.0, cfg), ou_path(0.3, 2.0, cfg))
        other = TrajectoryConfig(dt=0.1, n_steps=100, n_traj=4, seed=100)
        assert not np.array_equal(ou_path(0.3, 2.0, cfg), ou_path(0.3, 2.0, other))

    def test_trajectories_do_not_depend_on_ensemble_size(self):
        a = ou_path(0.3, 2.0, TrajectoryConfig(dt=0.1, n_steps=20, n_traj=2, seed=1))
        b = ou_path(0.3, 2.0, TrajectoryConfig(dt=0.1, n_steps=20, n_traj=5, seed=1))
        assert np.array_equal(a, b[:2])

    @pytest.mark.parametrize("kw", [dict(dt=0.0), dict(n_traj=0), dict(n_steps=-1)])
    def test_config_validation(self, kw):
        with pytest.raises(ValidationError):
            TrajectoryConfig(**kw)


class TestDephasing:
    def within(self, est, se, ref, k=3.0):
        return abs(est - ref) <= k * se

    def test_white_ramsey(self):
        m = NoiseModel((White(0.04),))
        est, se = mc_coherence(m, Ramsey(30.0), TrajectoryConfig(n_traj=20000, seed=5))
        assert self.within(est, se, math.exp(-0.04 * 30 / 2))

    def test_slow_ou_ramsey(self):
        m = NoiseModel((OrnsteinUhlenbeck(0.56, 8000.0),))
        est, se = mc_coherence(m, Ramsey(2.5), TrajectoryConfig(n_traj=20000, seed=6))
        assert self.within(est, se, math.exp(-(0.56 * 2.5) ** 2 / 2), k=3.5)

    def test_slow_ou_echo(self):
        m = NoiseModel((OrnsteinUhlenbeck(0.56, 8000.0),))
        T = 60.0
        est, se = mc_coherence(m, Echo(T), TrajectoryConfig(n_traj=20000, seed=7))
        assert self.within(est, se, math.exp(-float(chi_echo_slow_ou(0.56, 8000.0, T))), k=3.5)

    def test_unbiased_against_engine(self):
        """Pooled z-scores over independent seeds: mean near 0, rms near 1."""
        m = NoiseModel((OrnsteinUhlenbeck(0.2, 3.0), White(0.01)))
        times = np.linspace(5, 60, 8)
        exact = decay_curve(m, "cpmg:n=4", times).coherence
        z = []
        for s in range(6):
            e = mc_decay_curve(m, "cpmg:n=4", times, TrajectoryConfig(n_traj=3000, seed=s))
            z.append((e.coherence - exact) / e.stderr)
        z = np.concatenate(z)
        assert abs(z.mean()) < 3 / math.sqrt(z.size) * 2
        assert 0.6 < math.sqrt(np.mean(z ** 2)) < 1.4

    def test_peaks_unsupported(self):
        m = NoiseModel((SpectralPeak(1.0, 0.1, 0.1),))
        with pytest.raises(OracleUnsupportedError):
            mc_coherence(m, Echo(5.0), TrajectoryConfig(n_traj=10))

    def test_seed_deterministic(self):
        m = NoiseModel((OrnsteinUhlenbeck(0.3, 2.0), White(0.02)))
        cfg = TrajectoryConfig(n_traj=500, seed=11)
        a = mc_decay_curve(m, "echo", [5, 10, 20], cfg)
        b = mc_decay_curve(m, "echo", [5, 10, 20], cfg)
        assert np.array_equal(a.coherence, b.coherence)
        assert np.array_equal(a.stderr, b.stderr)

    def test_block_size_does_not_matter(self, monkeypatch):
        m = NoiseModel((OrnsteinUhlenbeck(0.3, 2.0),))
        cfg = TrajectoryConfig(n_traj=250, seed=2)
        ref = mc_coherences(m, [Echo(4.0), Ramsey(2.0)], cfg).coherence
        monkeypatch.setattr(montecarlo, "BLOCK", 64)
        out = mc_coherences(m, [Echo(4.0), Ramsey(2.0)], cfg).coherence
        assert np.allclose(ref, out, rtol=0, atol=1e-15)

    def test_time_grid_contains_switches(self):
        sw = [np.array([0.0, 1.3, 4.0]), np.array([0.0, 2.0, 7.7, 9.0])]
        g = time_grid(sw, tau_min=0.5)
        for s in sw:
            assert np.all(np.isin(s, g))
        assert np.all(np.diff(g) <= 0.5 / 20 + 1e-12)


class TestFidelity:
    def test_perfect_pulse(self):
        assert pi_fidelity_analytic(PulseParams(2.0, 0.0, math.pi / 2.0)) == pytest.approx(1.0)

    def test_detuned_pulse(self):
        # Omega = sqrt(2) Omega0, so F = sin(pi / sqrt(2)) / sqrt(2)
        F = pi_fidelity_analytic(PulseParams(1.0, 1.0, math.pi))
        assert F == pytest.approx(math.sin(math.pi / math.sqrt(2)) / math.sqrt(2))
        assert F == pytest.approx(0.562, abs=1e-3)

    def test_no_drive(self):
        assert pi_fidelity_analytic(PulseParams(0.0, 0.0, 1.0)) == 0.0
        assert pi_fidelity_analytic(PulseParams(0.0, 0.3, 1.0)) == 0.0

    def test_fidelity_is_unitary_overlap(self):
        # |Tr[U_pi^dagger R]| / 2 with U_pi = -i sigma_x
        for r, d, L in [(1.0, 0.2, 3.0), (2.0, -0.5, 1.4), (0.7, 0.0, 4.0)]:
            R = pulse_unitary(r, d, L)
            U = -1j * np.array([[0, 1], [1, 0]])
            overlap = abs(np.trace(U.conj().T @ R)) / 2
            assert pi_fidelity_analytic(PulseParams(r, d, L)) == pytest.approx(overlap, abs=1e-14)

    def test_signal_examples(self):
        assert np.allclose(fidelity_sequence_signal(1.0, 0.8, np.arange(5)), 0.8)
        assert np.allclose(fidelity_sequence_signal(1 / math.sqrt(2), 1.0, np.arange(1, 6)), 0.0,
                           atol=1e-15)
        n_z = 1 - 2 * 0.987 ** 2
        assert float(fidelity_sequence_signal(0.987, 1.0, 20)) == pytest.approx((-n_z) ** 20)
        assert float(fidelity_sequence_signal(0.987, 1.0, 20)) == pytest.approx(0.346, abs=1e-3)

    def test_signal_domain(self):
        with pytest.raises(ValidationError):
            fidelity_sequence_signal(1.2, 1.0, 3)

    @given(r=st.floats(0.1, 5), d=st.floats(-2, 2), L=st.floats(0.05, 5),
           beta0=st.floats(0.1, 1))
    def test_fixed_detuning_matches_closed_form(self, r, d, L, beta0):
        p = PulseParams(r, d, L)
        sim = simulate_fidelity_protocol(p, 30, beta0=beta0)
        ref = fidelity_sequence_signal(pi_fidelity_analytic(p), beta0, np.arange(31))
        assert np.max(np.abs(sim - ref)) <= 1e-12

    def test_exact_pulse_alternates(self):
        sim = simulate_fidelity_protocol(PulseParams(1.0, 0.0, math.pi), 6, beta0=0.7)
        # reported in the flip frame: a perfect flip keeps the value
        assert np.allclose(sim, 0.7, atol=1e-14)

    def test_detuning_spread_lowers_fidelity(self):
        rabi = 2 * math.pi * 2.5
        p = PulseParams(rabi, 0.0, math.pi / rabi)
        N = np.arange(0, 41)
        y = simulate_fidelity_protocol(p, 40, TrajectoryConfig(n_traj=400, seed=1),
                                       detuning_sigma=0.1 * rabi)
        fit = fit_pi_fidelity(N, y, 1e-3)
        assert fit.F_pi < 1.0 - 1e-3

    def test_negative_count(self):
        with pytest.raises(ValidationError):
            simulate_fidelity_protocol(PulseParams(1.0, 0.0, 1.0), -1)
