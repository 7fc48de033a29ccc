import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

import specter
from specter.errors import ValidationError
from specter.io import (canonical_hash, emit_curves, load_document,
                        measurement_set, read_curves, render_report, report_document,
                        save_document, validate_document)
from specter.protocol import run_protocol

DATA = Path(specter.__file__).parent / "data"


def record(**over):
    r = {"sequence": "echo", "times_us": [1.0, 2.0, 3.0], "signal": [0.9, 0.8, 0.7],
         "sigma": [0.01, 0.01, 0.01]}
    r.update(over)
    return r


def doc(*records, **top):
    d = {"schema_version": 1, "qubit_label": "q", "records": list(records)}
    d.update(top)
    return d


class TestValidation:
    def test_minimal_document(self):
        out = validate_document(doc(record()))
        assert out.records[0].family == "echo"
        assert out.records[0].times.tolist() == [1.0, 2.0, 3.0]

    @pytest.mark.parametrize("bad,path", [
        ({"times": [1, 2, 3]}, "$.records[0].times"),
        ({"rabi": 3.0}, "$.records[0].rabi"),
        ({"sigma": [0.01, 0.0, 0.01]}, "$.records[0].sigma"),
        ({"signal": [0.9, 0.8]}, "$.records[0]"),
        ({"times_us": [1.0, float("nan"), 3.0]}, "$.records[0].times_us"),
        ({"sequence": "spinlock"}, "$.records[0].sequence"),
    ])
    def test_errors_name_the_field(self, bad, path):
        with pytest.raises(ValidationError, match=path.replace("[", r"\[").replace("]", r"\]")
                           .replace("$", r"\$")):
            validate_document(doc(record(**bad)))

    def test_length_mismatch_message(self):
        with pytest.raises(ValidationError, match="record 0: array lengths differ"):
            validate_document(doc(record(signal=[0.9, 0.8])))

    def test_schema_version(self):
        with pytest.raises(ValidationError, match="schema_version"):
            validate_document({"records": []})
        with pytest.raises(ValidationError, match="unsupported"):
            validate_document({"schema_version": 2})

    def test_cyclic_units_converted(self):
        out = validate_document(doc(record(rabi_MHz=2.5), bandwidth_cap_kHz=500.0))
        assert out.records[0].rabi == pytest.approx(2 * math.pi * 2.5)
        assert out.bandwidth_cap == pytest.approx(2 * math.pi * 0.5)

    def test_two_units_rejected(self):
        with pytest.raises(ValidationError, match="more than one unit"):
            validate_document(doc(record(rabi_MHz=2.5, rabi_rad_per_us=15.7)))

    def test_bare_summary_key(self):
        with pytest.raises(ValidationError, match=r"\$\.summary\.t2"):
            validate_document(doc(summary={"t2star_us": 2.5, "t2": 69.0, "t0_us": 55.0}))

    def test_unknown_fields_survive(self):
        d = doc(record(lab_note="x"), operator="me")
        out = validate_document(d)
        again = out.to_dict()
        assert again["operator"] == "me" and again["records"][0]["lab_note"] == "x"

    def test_save_load_round_trip(self, tmp_path):
        d = validate_document(doc(record(meta={"role": "echo"})))
        save_document(d, tmp_path / "a.json")
        back = load_document(tmp_path / "a.json")
        assert back.to_dict() == d.to_dict()

    def test_directory_merge(self, tmp_path):
        (tmp_path / "a.json").write_text(json.dumps(doc(record())))
        (tmp_path / "b.json").write_text(json.dumps(doc(record(sequence="ramsey"))))
        out = load_document(tmp_path)
        assert [r.family for r in out.records] == ["echo", "ramsey"]

    def test_invalid_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{")
        with pytest.raises(ValidationError, match="invalid JSON"):
            load_document(tmp_path / "x.json")


class TestMeasurementSet:
    def test_roles(self):
        d = validate_document(doc(record(sequence="ramsey"), record(),
                                  record(sequence="cpmg:tau=2.5"),
                                  record(sequence="cpmg:tau=5", meta={"role": "prediction"}),
                                  record(sequence="walsh:k=5,lambda=10")))
        ms = measurement_set(d)
        assert ms.ramsey.family == "ramsey" and ms.echo.family == "echo"
        assert len(ms.cpmg_records) == 1 and len(ms.other_records) == 2

    def test_duplicate_echo(self):
        d = validate_document(doc(record(), record()))
        with pytest.raises(ValidationError, match=r"records\[1\]"):
            measurement_set(d)


class TestCurves:
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
    def test_bit_exact(self, vals):
        import tempfile
        v = np.asarray(vals)
        t = np.arange(v.size) * 0.1 + 1 / 3
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "c.csv"
            emit_curves([("echo", t, v, v / 7)], p)
            tt, vv, ee = read_curves(p)["echo"]
        assert np.array_equal(tt, t) and np.array_equal(vv, v) and np.array_equal(ee, v / 7)

    def test_header_only(self, tmp_path):
        p = tmp_path / "c.csv"
        emit_curves([], p)
        assert p.read_text() == "sequence,T_us,signal_or_coherence,sigma_or_band\n"
        assert read_curves(p) == {}

    def test_missing_band(self, tmp_path):
        p = tmp_path / "c.csv"
        emit_curves([("echo", [1.0], [0.5], None)], p)
        assert math.isnan(read_curves(p)["echo"][2][0])

    def test_bad_header(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("a,b\n")
        with pytest.raises(ValidationError):
            read_curves(p)


class TestReports:
    def nv_report(self):
        d = load_document(DATA / "nv_summary.json")
        return d, run_protocol(measurement_set(d))

    def test_deterministic(self):
        d, rep = self.nv_report()
        a = json.dumps(report_document(rep, d), sort_keys=True, default=float)
        d2, rep2 = self.nv_report()
        b = json.dumps(report_document(rep2, d2), sort_keys=True, default=float)
        assert a == b

    def test_timestamp_is_the_only_difference(self):
        d, rep = self.nv_report()
        a = report_document(rep, d, timestamp="2026-01-01T00:00:00Z")
        b = report_document(rep, d, timestamp="2026-06-01T00:00:00Z")
        a.pop("generated_at"), b.pop("generated_at")
        assert a == b

    def test_provenance(self):
        d, rep = self.nv_report()
        body = report_document(rep, d, seeds=[3])
        prov = body["provenance"]
        assert prov["seeds"] == [3] and prov["input_hash"] == canonical_hash(d.to_dict())
        assert prov["tool_version"] == specter.__version__

    def test_render_sections(self):
        d, rep = self.nv_report()
        md = render_report(report_document(rep, d))
        for head in ("## Final model", "## Ledger", "## Provenance"):
            assert head in md
        assert "| S3 |" in md

    def test_render_precluded(self):
        md = render_report({"status": "precluded", "record_index": 1, "sequence": "echo",
                            "detection": {"frequency_rad_per_us": 0.19, "contrast": 0.9}})
        assert "Quantum-bath signature" in md and "record 1" in md
        assert "## Ledger" not in md

    def test_render_unverified(self):
        d = load_document(DATA / "nv_summary.json")
        d.psd_points = []
        rep = run_protocol(measurement_set(d))
        md = render_report(report_document(rep, d))
        assert "(unverified)" in md

    def test_hash_ignores_key_order(self):
        assert canonical_hash({"a": 1, "b": 2}) == canonical_hash({"b": 2, "a": 1})
