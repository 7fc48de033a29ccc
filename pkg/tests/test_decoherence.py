import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specter.decoherence import (attenuation_chi, chi_cpmg_linear, chi_curve, chi_echo_composite,
                                 chi_echo_slow_ou, chi_ramsey_gaussian, chi_time_domain,
                                 decay_curve, model_timescales, timescales)
from specter.errors import IdentificationError
from specter.filters import Cpmg, Custom, Echo, Ramsey, WalshDD, build_modulation, cpmg_probe_frequency
from specter.noise import Free, NoiseModel, OrnsteinUhlenbeck, SpectralPeak, White

NV = NoiseModel((OrnsteinUhlenbeck(0.56, 8000.0), OrnsteinUhlenbeck(0.058, 4.3), White(0.007)))


def brute_force_ou_chi(b, tau, seq, n=2400):
    """chi = (b^2 / 2) int int y(t) y(s) exp(-|t - s| / tau) dt ds on a midpoint grid.

    Callers pick ``n`` so that every switch time falls on a cell edge.
    """
    m = build_modulation(seq)
    T = m.total_time
    t = (np.arange(n) + 0.5) * T / n
    y = m(t)
    K = np.exp(-np.abs(t[:, None] - t[None, :]) / tau)
    return 0.5 * b * b * float(y @ K @ y) * (T / n) ** 2


sequences = st.one_of(
    st.floats(0.5, 50).map(Ramsey),
    st.floats(0.5, 50).map(Echo),
    st.tuples(st.integers(1, 12), st.floats(0.2, 5)).map(lambda a: Cpmg(*a)),
    st.tuples(st.integers(1, 7), st.floats(1, 20), st.integers(1, 3)).map(lambda a: WalshDD(*a)),
)


class TestClosedForms:
    def test_white_ramsey(self):
        m = NoiseModel((White(0.04),))
        assert attenuation_chi(m, Ramsey(25.0)) == pytest.approx(0.5, rel=1e-12)

    def test_zero_model(self):
        assert attenuation_chi(NoiseModel(), Echo(10.0)) == 0.0

    def test_slow_ou_ramsey_is_gaussian(self):
        m = NoiseModel((OrnsteinUhlenbeck(0.56, 8000.0),))
        T = 3.0
        assert attenuation_chi(m, Ramsey(T)) == pytest.approx((0.56 * T) ** 2 / 2, rel=0.01)

    def test_slow_ou_echo_is_cubic(self):
        m = NoiseModel((OrnsteinUhlenbeck(0.56, 8000.0),))
        T = 67.4
        assert attenuation_chi(m, Echo(T)) == pytest.approx(chi_echo_slow_ou(0.56, 8000.0, T),
                                                           rel=0.01)
        assert float(chi_echo_slow_ou(0.56, 8000.0, T)) == pytest.approx(1.0, abs=0.01)

    def test_cpmg_linear(self):
        assert chi_cpmg_linear(0.0175, 100.0) == pytest.approx(0.709, abs=5e-4)
        assert chi_cpmg_linear(0.0, 50.0) == 0.0
        assert chi_cpmg_linear(0.01, 200.0) == pytest.approx(2 * chi_cpmg_linear(0.01, 100.0))

    def test_echo_laws(self):
        assert float(chi_echo_slow_ou(1.0, 1.0, 0.0)) == 0.0
        assert float(chi_echo_slow_ou(1.0, 5.0, 2.0)) == pytest.approx(
            4 * float(chi_echo_slow_ou(0.5, 5.0, 2.0)))
        assert float(chi_echo_composite(55.0, math.inf, 55.0)) == pytest.approx(1.0)
        assert float(chi_echo_composite(55.0, 69.0, 55.0)) == pytest.approx(1.507, abs=1e-3)
        assert float(chi_echo_composite(0.0, 69.0, 55.0)) == 0.0
        assert float(chi_ramsey_gaussian(2.53, 2.53)) == 1.0


class TestTimescales:
    def test_slow_bath(self):
        ts = timescales(0.56, 8000.0, want=("t2star", "t2"))
        assert ts["t2"] == pytest.approx(67.4, abs=0.05)
        assert ts["t2star"] == pytest.approx(2.525, abs=1e-3)

    def test_t0_limits(self):
        assert timescales(S_w=2 / 55, want=("t0",))["t0"] == pytest.approx(55.0)
        assert timescales(b_f=0.058, tau_f=4.3, S_w=0.007, want=("t0",))["t0"] == pytest.approx(
            55.5, abs=0.5)
        assert timescales(b_f=0.1, tau_f=2.0, want=("t0",))["t0"] == pytest.approx(50.0)

    def test_missing_components(self):
        with pytest.raises(IdentificationError):
            timescales(want=("t2star",))
        with pytest.raises(IdentificationError):
            timescales(0.5, 100.0, want=("t0",))

    def test_model_timescales(self):
        ts = model_timescales(NV)
        assert ts["t2"] == pytest.approx(67.4, abs=0.05)
        assert ts["t0"] == pytest.approx(55.5, abs=0.5)


class TestEngine:
    @pytest.mark.parametrize("seq", [Ramsey(3.0), Echo(40.0), Cpmg(8, 2.5), WalshDD(5, 10.0, 3),
                                     Custom(20.0, (1.0, 6.0, 15.0))])
    @pytest.mark.parametrize("tau", [0.7, 4.3, 60.0])
    def test_time_domain_matches_brute_force(self, seq, tau):
        m = NoiseModel((OrnsteinUhlenbeck(0.2, tau),))
        assert chi_time_domain(m, seq) == pytest.approx(brute_force_ou_chi(0.2, tau, seq),
                                                        rel=2e-3)

    @given(seq=sequences, b=st.floats(0.01, 1.0), tau=st.floats(0.1, 1e4),
           lvl=st.floats(0.0, 0.05))
    def test_quadrature_matches_time_domain(self, seq, b, tau, lvl):
        m = NoiseModel((OrnsteinUhlenbeck(b, tau), White(lvl)))
        q = attenuation_chi(m, seq)
        t = chi_time_domain(m, seq)
        assert q == pytest.approx(t, rel=1e-6, abs=1e-13)

    @given(seq=sequences)
    def test_nonnegative(self, seq):
        m = NV.with_components(SpectralPeak(1.3, 0.01, 0.05))
        assert attenuation_chi(m, seq) >= 0.0

    def test_peak_through_quadrature(self):
        # a narrow line at the CPMG probe frequency dominates the decay
        tau = 2.5
        w0 = cpmg_probe_frequency(tau)
        seq = Cpmg(32, tau)
        base = NoiseModel((White(1e-4),))
        peak = base.with_components(SpectralPeak(w0, 0.02, 0.002))
        assert attenuation_chi(peak, seq) > 10 * attenuation_chi(base, seq)

    def test_unbound_model(self):
        with pytest.raises(IdentificationError):
            attenuation_chi(NoiseModel((White(Free("S_w")),)), Echo(1.0))

    def test_curve_and_methods(self):
        times = np.array([0.0, 10.0, 20.0, 40.0])
        c = decay_curve(NV, "cpmg:tau=2.5", times)
        assert c.chi[0] == 0.0 and c.coherence[0] == 1.0
        assert np.allclose(c.coherence, np.exp(-c.chi))
        seqs = [Cpmg(int(T / 5), 2.5) for T in times[1:]]
        assert np.allclose(chi_curve(NV, seqs, "quadrature"), c.chi[1:], rtol=1e-6)

    def test_order_independent(self):
        times = np.linspace(5, 100, 20)
        fwd = decay_curve(NV, "echo", times).chi
        rev = decay_curve(NV, "echo", times[::-1]).chi[::-1]
        assert np.array_equal(fwd, rev)


class TestInvariants:
    @given(n=st.integers(16, 64), tau=st.floats(0.5, 10), wt=st.floats(2, 100),
           b=st.floats(0.01, 0.5))
    def test_cpmg_delta_filter_regime(self, n, tau, wt, b):
        # an OU spectrum falling as omega^-2 beyond the probe point
        w_m = cpmg_probe_frequency(tau)
        m = NoiseModel((OrnsteinUhlenbeck(b, wt / w_m),))
        seq = Cpmg(n, tau)
        full = attenuation_chi(m, seq)
        approx = chi_cpmg_linear(m.evaluate(w_m), seq.total_time)
        assert full == pytest.approx(approx, rel=0.10)

    def test_flat_spectrum_carries_odd_harmonics(self):
        # every odd harmonic of a flat spectrum adds 1/k^2: total weight pi^2/8
        seq = Cpmg(32, 2.5)
        m = NoiseModel((White(0.01),))
        ratio = attenuation_chi(m, seq) / chi_cpmg_linear(0.01, seq.total_time)
        assert ratio == pytest.approx(math.pi ** 2 / 8, rel=1e-12)

    @given(T2=st.floats(20, 200), T0=st.floats(20, 200), frac=st.floats(0.05, 1.0))
    def test_echo_composite(self, T2, T0, frac):
        T = frac * min(T2, T0)
        tau_s = 100.0 * max(T2, T0)
        b_s = math.sqrt(12 * tau_s / T2 ** 3)
        m = NoiseModel((OrnsteinUhlenbeck(b_s, tau_s), White(2.0 / T0)))
        full = attenuation_chi(m, Echo(T))
        assert full == pytest.approx(float(chi_echo_composite(T, T2, T0)), rel=0.05)
