import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from specter.datasets import Design, simulate_bundle
from specter.errors import (ClassicalModelPrecluded, IdentificationError, ProtocolFailure,
                            ValidationError)
from specter.inference import DecayRecord, PsdPoint
from specter.io import measurement_set
from specter.noise import NoiseModel, OrnsteinUhlenbeck, White
from specter.protocol import (MeasurementSet, Observation, ProtocolConfig, PsdDelta, add_peaks,
                              consistency_check, point_observation, predict_dynamics,
                              re_stage, refine_minimal, run_protocol, solve_unknowns,
                              summary_observations)
from specter.spinbath import BathSpin, CentralSpinSystem, DriveSpec, evolve_sequence

TWO_PI = 2 * math.pi
T2STAR = math.sqrt(2) / 0.56
T2 = (12 * 8000 / 0.56 ** 2) ** (1 / 3)
T0 = 55.0
POINTS = [PsdPoint(TWO_PI * 0.05, 0.0175, 0.0), PsdPoint(TWO_PI * 0.25 / 3, 0.012, 0.0),
          PsdPoint(TWO_PI * 0.10, 0.0105, 0.0)]


def chain(t2star=T2STAR, t2=T2, t0=T0, scale=1.0):
    obs = summary_observations(t2star, t2, t0)
    pts = [point_observation(PsdPoint(p.omega, scale * p.S, scale * p.sigma)) for p in POINTS]
    s0, split = re_stage(obs)
    s1, s2 = refine_minimal(s0, tau_split=split)
    smin = refine_minimal(s2, tau_split=split)[0]
    return s0, s1, s2, smin, pts


def summary_set(scale=1.0, points=True, sigma_rel=0.05):
    pts = [PsdPoint(p.omega, scale * p.S, scale * sigma_rel * p.S) for p in POINTS] if points else []
    return MeasurementSet(cpmg_points=pts,
                          summary={"t2star": (T2STAR / math.sqrt(scale), 0.0),
                                   "t2": (T2 * scale ** (-1 / 3), 0.0),
                                   "t0": (T0 / scale, 0.0)})


class TestReStage:
    def test_slow_bath_from_ramsey(self):
        s0, *_ = chain(t2star=2.53)
        assert solve_unknowns(s0).values["b_s"] == pytest.approx(0.559, abs=1e-3)

    def test_two_refinements(self):
        s0, s1, s2, _, _ = chain()
        assert (s1.label, s1.q) == ("S_s+S_w", 0)
        assert (s2.label, s2.q) == ("S_s+S_f", 1)
        assert solve_unknowns(s1).values["S_w"] == pytest.approx(2 / 55, rel=1e-9)

    def test_pure_cubic_echo(self):
        ms = MeasurementSet(summary={"t2star": (T2STAR, 0.0), "t2": (T2, 0.0),
                                     "t0": (math.inf, 0.0)})
        rep = run_protocol(ms)
        assert rep.path() == [("S0", "accepted")]
        assert rep.final.q == 0

    def test_needs_all_observations(self):
        obs = summary_observations(T2STAR, T2, T0)[:2]
        with pytest.raises(ValidationError):
            re_stage(obs)


class TestSolveAndCheck:
    def test_s1_rejected(self):
        _, s1, _, _, pts = chain()
        v = consistency_check(solve_unknowns(s1), pts[0])
        assert v.epsilon == pytest.approx(-1.13, abs=0.02)
        assert v.rejected

    def test_s2_identification(self):
        _, _, s2, _, pts = chain()
        sol = solve_unknowns(s2, pts[:1])
        assert sol.values["b_f"] == pytest.approx(0.074, rel=0.03)
        assert sol.values["tau_f"] == pytest.approx(3.4, rel=0.03)
        for p in pts[1:]:
            v = consistency_check(sol, p)
            assert 0.15 <= abs(v.epsilon) <= 0.5 and v.rejected

    def test_minimal_model(self):
        _, _, _, smin, pts = chain()
        sol = solve_unknowns(smin, pts[:2])
        assert sol.values["b_f"] == pytest.approx(0.058, rel=0.1)
        assert sol.values["tau_f"] == pytest.approx(4.3, rel=0.1)
        assert sol.values["S_w"] == pytest.approx(0.007, rel=0.1)
        v = consistency_check(sol, pts[2])
        assert abs(v.epsilon) <= 0.05 and not v.rejected

    def test_q_zero_is_identity(self):
        _, s1, _, _, _ = chain()
        out = solve_unknowns(s1)
        assert out.q == 0 and out.values == solve_unknowns(s1).values

    def test_point_count_must_match(self):
        _, _, s2, _, pts = chain()
        with pytest.raises(ValidationError):
            solve_unknowns(s2, pts[:2])

    def test_no_solution_in_bounds(self):
        _, _, s2, _, _ = chain()
        # a Lorentzian with b^2 tau = 1/T0 never exceeds 2/T0
        too_big = point_observation(PsdPoint(TWO_PI * 0.05, 0.05, 0.0))
        with pytest.raises(IdentificationError):
            solve_unknowns(s2, [too_big])

    def test_threshold_rule(self):
        _, s1, _, _, _ = chain()
        sol = solve_unknowns(s1)
        S_model = float(sol.bound_model().evaluate(TWO_PI * 0.05))
        close = Observation("x", S_model / 0.8, 0.1 * S_model / 0.8, PsdDelta(TWO_PI * 0.05))
        v = consistency_check(sol, close)
        assert v.threshold == pytest.approx(0.3)
        assert v.epsilon == pytest.approx(0.2) and not v.rejected
        assert consistency_check(sol, close, k_sigma=1.0).rejected


class TestRefinement:
    def test_s2_to_minimal(self):
        _, _, s2, smin, _ = chain()
        assert smin.label == "S_s+S_f+S_w"
        assert smin.provenance[0] == {"parent": s2.name, "added": "white"}

    def test_exhausted_menu(self):
        _, _, _, smin, _ = chain()
        with pytest.raises(ProtocolFailure):
            refine_minimal(smin)

    def test_constraints_inherited(self):
        s0, s1, s2, smin, _ = chain()
        names = [o.name for o in smin.constraints]
        assert names == ["ramsey", "echo_cubic", "echo_linear"]


class TestPeaks:
    MODEL = NoiseModel((White(0.01),))

    def test_cluster_becomes_peak(self):
        w = np.linspace(0.5, 3.0, 11)
        S = 0.01 + 0.05 * np.exp(-0.5 * ((w - 2.0) / 0.2) ** 2)
        pts = [PsdPoint(a, b, 0.001) for a, b in zip(w, S)]
        out = add_peaks(self.MODEL, pts)
        peaks = out.of_kind("peak")
        assert len(peaks) == 1
        assert peaks[0].center == pytest.approx(2.0, abs=0.05)
        assert peaks[0].amplitude == pytest.approx(0.05, rel=0.1)

    def test_no_residual(self):
        pts = [PsdPoint(w, 0.01, 0.001) for w in (0.5, 1.0, 1.5)]
        assert add_peaks(self.MODEL, pts) == self.MODEL

    def test_small_spike_ignored(self):
        pts = [PsdPoint(0.5, 0.01, 0.001), PsdPoint(1.0, 0.0125, 0.001),
               PsdPoint(1.5, 0.01, 0.001)]
        assert add_peaks(self.MODEL, pts) == self.MODEL


class TestPredict:
    def test_zero_model(self):
        c = predict_dynamics(NoiseModel(), "walsh:k=5,lambda=10", [10, 20, 120])
        assert np.all(c.coherence == 1.0)

    def test_band_from_covariance(self):
        rep = run_protocol(summary_set())
        c = predict_dynamics(rep.final, "walsh:k=5,lambda=10", 10.0 * np.arange(1, 13))
        assert c.band is not None and np.all(c.band >= 0) and np.any(c.band > 0)


class TestRunProtocol:
    def test_ledger_path(self):
        rep = run_protocol(summary_set())
        assert rep.path() == [("S0", "rejected"), ("S1", "rejected"), ("S2", "rejected"),
                              ("S3", "accepted")]
        assert rep.status == "accepted"

    def test_measurement_economy(self):
        rep = run_protocol(summary_set())
        for c in rep.ledger:
            if c.values:
                assert len(c.points_used) == c.q
            if c.status in ("rejected", "accepted") and c.epsilon is not None:
                assert c.verdict_datum not in c.points_used

    def test_ledger_monotonic(self):
        rep = run_protocol(summary_set())
        by = {c.name: c for c in rep.ledger}
        for c in rep.ledger:
            for p in c.provenance:
                if p["parent"] is not None:
                    assert c.complexity == by[p["parent"]].complexity + 1

    def test_rejections_carry_epsilon(self):
        rep = run_protocol(summary_set())
        for c in rep.ledger:
            if c.status == "rejected":
                assert c.epsilon is not None and c.verdict_datum

    def test_accepted_model_passes_every_point(self):
        cfg = ProtocolConfig()
        rep = run_protocol(summary_set(), cfg)
        for o in rep.observations[3:]:
            assert not consistency_check(rep.final, o, cfg.k_sigma, cfg.eps_floor).rejected

    @settings(max_examples=8)
    @given(c=st.floats(0.05, 20.0))
    def test_argmax_stability(self, c):
        ref = run_protocol(summary_set())
        rep = run_protocol(summary_set(scale=c))
        assert rep.path() == ref.path()
        a, b = ref.final.values, rep.final.values
        assert b["S_w"] == pytest.approx(c * a["S_w"], rel=1e-5)
        assert b["b_f"] ** 2 == pytest.approx(c * a["b_f"] ** 2, rel=1e-5)
        assert b["tau_f"] == pytest.approx(a["tau_f"], rel=1e-5)

    def test_no_points_is_unverified(self):
        rep = run_protocol(summary_set(points=False))
        assert rep.status == "unverified"
        assert any("unverified" in n for n in rep.notes)

    def test_config_from_dict(self):
        cfg = ProtocolConfig.from_dict({"k_sigma": 2, "eps_floor": 0.1,
                                        "bandwidth_cap_rad_per_us": 1.0})
        assert cfg.k_sigma == 2.0 and cfg.bandwidth_cap == 1.0
        with pytest.raises(ValidationError):
            ProtocolConfig.from_dict({"bandwidth_cap": 1.0})
        with pytest.raises(ValidationError):
            ProtocolConfig.from_dict({"heldout_policy": "random"})


class TestQuantumBathPathways:
    X_MODEL = NoiseModel((OrnsteinUhlenbeck(0.3, 5000.0), White(0.02)))
    CAP = TWO_PI * 0.2

    def low_power_set(self):
        design = Design(cpmg_mhz=(0.05, 0.10, 0.40), walsh=None)
        doc = simulate_bundle(self.X_MODEL, design, noise=0.02, seed=1, method="exact")
        ms = measurement_set(doc)
        ms.bandwidth_cap = self.CAP
        return ms

    def test_low_power_accepts_white_floor(self):
        rep = run_protocol(self.low_power_set())
        assert rep.path() == [("S0", "rejected"), ("S1", "accepted"), ("S2", "unchecked")]
        assert rep.final.values["S_w"] == pytest.approx(0.02, rel=0.15)
        assert any("bandwidth cap" in n for n in rep.notes)

    def test_high_power_is_precluded(self):
        ms = self.low_power_set()
        t = np.linspace(2, 120, 60)
        sys = CentralSpinSystem([BathSpin(TWO_PI * 0.06, TWO_PI * 2.5 / 3)])
        s = evolve_sequence(sys, DriveSpec(TWO_PI * 2.5), "echo", t)
        rng = np.random.default_rng(0)
        ms.echo = DecayRecord("echo", t, s + 0.02 * rng.standard_normal(t.size), 0.02)
        with pytest.raises(ClassicalModelPrecluded) as info:
            run_protocol(ms)
        assert info.value.record_index is not None
        assert info.value.detection is not None
