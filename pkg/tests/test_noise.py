import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from specter.errors import IdentificationError, ValidationError
from specter.noise import (Free, NoiseModel, OrnsteinUhlenbeck, SpectralPeak, White,
                           bind_parameters, evaluate_psd, integrate_psd, model_from_dict,
                           model_to_dict, ou_total_power)

pos = st.floats(1e-3, 1e3, allow_nan=False, allow_infinity=False)
omega = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


def nv_model():
    return NoiseModel((OrnsteinUhlenbeck(0.56, 8000.0), OrnsteinUhlenbeck(0.058, 4.3),
                       White(0.007)))


class TestEvaluate:
    def test_lorentzian_at_zero(self):
        m = NoiseModel((OrnsteinUhlenbeck(1.0, 1.0),))
        assert evaluate_psd(m, 0.0) == pytest.approx(2.0)

    def test_lorentzian_half_power_at_inverse_tau(self):
        m = NoiseModel((OrnsteinUhlenbeck(0.3, 5.0),))
        assert evaluate_psd(m, 1 / 5.0) == pytest.approx(evaluate_psd(m, 0.0) / 2)

    def test_white_is_flat(self):
        m = NoiseModel((White(0.0364),))
        assert np.allclose(evaluate_psd(m, [0.0, 1.0, 1e3]), 0.0364)

    def test_empty_model_is_zero(self):
        assert evaluate_psd(NoiseModel(), 2.0) == 0.0

    def test_unbound_model_refuses(self):
        m = NoiseModel((OrnsteinUhlenbeck(Free("b"), 1.0),))
        with pytest.raises(IdentificationError):
            evaluate_psd(m, 1.0)

    def test_non_finite_omega(self):
        with pytest.raises(ValidationError):
            evaluate_psd(nv_model(), math.inf)

    @pytest.mark.parametrize("bad", [OrnsteinUhlenbeck(-1.0, 1.0), OrnsteinUhlenbeck(1.0, 0.0),
                                     White(-0.1), SpectralPeak(1.0, 1.0, 0.0)])
    def test_invalid_components(self, bad):
        with pytest.raises(ValidationError):
            NoiseModel((bad,))

    def test_lorentzian_peak_shape(self):
        p = SpectralPeak(2.0, 0.5, 0.1, "lorentzian")
        m = NoiseModel((p,))
        # mirrored line: value at the centre includes the far image
        far = 0.1 ** 2 / (4.0 ** 2 + 0.1 ** 2)
        assert evaluate_psd(m, 2.0) == pytest.approx(0.5 * (1 + far))


class TestTotalPower:
    @pytest.mark.parametrize("b,tau", [(1.0, 1.0), (0.56, 8000.0), (0.074, 3.3)])
    def test_b_squared(self, b, tau):
        c = OrnsteinUhlenbeck(b, tau)
        assert ou_total_power(c) == pytest.approx(b * b, rel=1e-12)

    @given(b=pos, tau=pos)
    def test_quadrature_matches_variance(self, b, tau):
        m = NoiseModel((OrnsteinUhlenbeck(b, tau),))
        assert integrate_psd(m) == pytest.approx(b * b, rel=1e-6)

    def test_independent_quadrature(self):
        # plain scipy quad on the half line, no substitution
        m = NoiseModel((OrnsteinUhlenbeck(0.3, 2.0),))
        v, _ = integrate.quad(lambda w: evaluate_psd(m, w), 0, np.inf, epsabs=0, epsrel=1e-11)
        assert 2 * v / (2 * math.pi) == pytest.approx(0.09, rel=1e-8)

    def test_gaussian_peak_power(self):
        m = NoiseModel((SpectralPeak(5.0, 0.2, 0.3),))
        expected = 2 * 0.2 * 0.3 * math.sqrt(2 * math.pi) / (2 * math.pi)
        assert integrate_psd(m) == pytest.approx(expected, rel=1e-6)

    def test_white_has_no_finite_power(self):
        with pytest.raises(ValidationError):
            integrate_psd(NoiseModel((White(1.0),)))


class TestProperties:
    @given(w=omega, b1=pos, t1=pos, lvl=st.floats(0, 10), c=st.floats(0, 100),
           a=st.floats(0, 10), g=st.floats(1e-2, 10))
    def test_nonnegative_and_even(self, w, b1, t1, lvl, c, a, g):
        m = NoiseModel((OrnsteinUhlenbeck(b1, t1), White(lvl), SpectralPeak(c, a, g)))
        v = evaluate_psd(m, w)
        assert v >= 0
        assert v == evaluate_psd(m, -w)

    @given(w=st.lists(omega, min_size=1, max_size=20))
    def test_additivity(self, w):
        comps = nv_model().components
        total = evaluate_psd(nv_model(), w)
        parts = sum(evaluate_psd(NoiseModel((c,)), w) for c in comps)
        assert np.array_equal(total, parts)

    @given(f=st.floats(1e-3, 1e3))
    def test_scaled(self, f):
        m = nv_model()
        w = np.array([0.0, 0.3, 3.0])
        assert np.allclose(m.scaled(f).evaluate(w), f * m.evaluate(w), rtol=1e-12)


class TestBinding:
    def test_substitution(self):
        m = NoiseModel((OrnsteinUhlenbeck(Free("b_f"), 3.3),))
        out = bind_parameters(m, {"b_f": 0.074})
        assert out.components[0].b == 0.074
        assert isinstance(m.components[0].b, Free)

    def test_out_of_bounds(self):
        m = NoiseModel((OrnsteinUhlenbeck(Free("b_f", 0, 1), 3.3),))
        with pytest.raises(ValidationError):
            bind_parameters(m, {"b_f": 2.0})

    def test_missing_name(self):
        m = NoiseModel((White(Free("S_w")),))
        with pytest.raises(IdentificationError):
            bind_parameters(m, {})

    def test_duplicate_free_names(self):
        with pytest.raises(ValidationError):
            NoiseModel((White(Free("x")), OrnsteinUhlenbeck(Free("x"), 1.0)))

    def test_nv_minimal_model(self):
        m = NoiseModel((OrnsteinUhlenbeck(0.56, 8000.0),
                        OrnsteinUhlenbeck(Free("b_f"), Free("tau_f")), White(Free("S_w"))))
        assert m.free_parameter_count == 3
        out = bind_parameters(m, {"b_f": 0.058, "tau_f": 4.3, "S_w": 0.007})
        w = np.linspace(0, 2, 11)
        assert np.array_equal(out.evaluate(w), nv_model().evaluate(w))

    def test_variance_examples(self):
        assert ou_total_power(OrnsteinUhlenbeck(0.56, 8000.0)) == pytest.approx(0.3136)
        assert ou_total_power(OrnsteinUhlenbeck(0.074, 3.3)) == pytest.approx(5.476e-3)


class TestSerialization:
    def test_round_trip(self):
        m = NoiseModel((OrnsteinUhlenbeck(0.56, 8000.0), White(0.007),
                        SpectralPeak(1.5, 0.01, 0.05, "lorentzian"),
                        OrnsteinUhlenbeck(Free("b_f", 0.0, 1.0), 4.3)), "test")
        doc = model_to_dict(m)
        assert model_from_dict(doc) == m

    @given(b=pos, tau=pos, lvl=pos)
    def test_round_trip_lossless(self, b, tau, lvl):
        m = NoiseModel((OrnsteinUhlenbeck(b, tau), White(lvl)))
        assert model_from_dict(model_to_dict(m)) == m

    def test_units_in_keys(self):
        doc = model_to_dict(NoiseModel((OrnsteinUhlenbeck(0.5, 2.0),)))
        params = doc["components"][0]["params"]
        assert set(params) == {"b_rad_per_us", "tau_c_us"}

    def test_bare_key_rejected(self):
        doc = {"label": "", "components": [{"type": "ou", "params": {"b": 0.5, "tau_c_us": 2}}]}
        with pytest.raises(ValidationError, match="b_rad_per_us"):
            model_from_dict(doc)
