"""Measurement documents, curve CSVs and protocol reports.

Every persisted quantity carries its unit in the key: ``times_us``,
``rabi_rad_per_us``, ``omega_rad_per_us``, ``S_per_us``.  Cyclic inputs are
accepted with explicit suffixes (``_MHz``, ``_kHz``) and converted on load.
A bare key such as ``times`` or ``tau`` is rejected rather than guessed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ValidationError
from .filters import parse_sequence_family
from .inference import DecayRecord, PsdPoint

SCHEMA_VERSION = 1

_RECORD_KEYS = {"sequence", "times_us", "signal", "sigma", "rabi_rad_per_us", "rabi_MHz", "rabi_kHz",
                "meta"}
_BARE = {"times": "times_us", "rabi": "rabi_rad_per_us", "tau": "tau_us", "omega":
         "omega_rad_per_us", "S": "S_per_us", "t2star": "t2star_us", "t2": "t2_us",
         "t0": "t0_us", "bandwidth_cap": "bandwidth_cap_rad_per_us"}
# cyclic frequency suffixes -> factor to rad/us
_CYCLIC = {"_MHz": 2 * math.pi, "_kHz": 2 * math.pi * 1e-3}


def _fail(path, msg):
    raise ValidationError(f"{path}: {msg}")


def _reject_bare(d: dict, path: str):
    for k in d:
        if k in _BARE:
            _fail(f"{path}.{k}", f"unitless field; use '{_BARE[k]}'")


def _freq(d: dict, stem: str, path: str):
    """Read a frequency given as <stem>_rad_per_us or a cyclic suffix; None if absent."""
    found = []
    if f"{stem}_rad_per_us" in d:
        found.append(float(d[f"{stem}_rad_per_us"]))
    for suf, fac in _CYCLIC.items():
        if f"{stem}{suf}" in d:
            found.append(float(d[f"{stem}{suf}"]) * fac)
    if len(found) > 1:
        _fail(f"{path}.{stem}", "given in more than one unit")
    return found[0] if found else None


def _array(rec: dict, key: str, path: str) -> np.ndarray:
    if key not in rec:
        _fail(f"{path}.{key}", "missing")
    try:
        a = np.asarray(rec[key], dtype=float)
    except (TypeError, ValueError):
        _fail(f"{path}.{key}", "not a numeric array")
    if a.ndim != 1:
        _fail(f"{path}.{key}", "must be a flat list")
    if not np.all(np.isfinite(a)):
        _fail(f"{path}.{key}", "contains non-finite values")
    return a


@dataclass
class MeasurementDocument:
    qubit_label: str = ""
    records: list = field(default_factory=list)          # DecayRecord
    psd_points: list = field(default_factory=list)       # PsdPoint
    summary: dict | None = None                          # {"t2star": (v, err), ...}
    bandwidth_cap: float | None = None
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)            # unknown top-level fields
    record_extra: list = field(default_factory=list)     # unknown fields per record

    def to_dict(self) -> dict:
        out = {"schema_version": self.schema_version, "qubit_label": self.qubit_label}
        recs = []
        for i, r in enumerate(self.records):
            d = {"sequence": r.sequence, "times_us": r.times.tolist(),
                 "signal": r.signal.tolist(), "sigma": r.sigma.tolist()}
            if r.rabi is not None:
                d["rabi_rad_per_us"] = r.rabi
            if r.meta:
                d["meta"] = dict(r.meta)
            if i < len(self.record_extra):
                d.update(self.record_extra[i])
            recs.append(d)
        out["records"] = recs
        if self.psd_points:
            out["psd_points"] = [{"omega_rad_per_us": p.omega, "S_per_us": p.S,
                                  "sigma_per_us": p.sigma, "source": p.source}
                                 for p in self.psd_points]
        if self.summary:
            out["summary"] = {f"{k}_us": [v, e] for k, (v, e) in self.summary.items()}
        if self.bandwidth_cap is not None:
            out["bandwidth_cap_rad_per_us"] = self.bandwidth_cap
        out.update(self.extra)
        return out


def validate_document(doc: dict) -> MeasurementDocument:
    """Check a parsed document and normalize units; errors name the field path."""
    if not isinstance(doc, dict):
        _fail("$", "document must be an object")
    if "schema_version" not in doc:
        _fail("$.schema_version", "missing")
    if doc["schema_version"] != SCHEMA_VERSION:
        _fail("$.schema_version", f"unsupported version {doc['schema_version']!r}")
    _reject_bare(doc, "$")
    known = {"schema_version", "qubit_label", "records", "psd_points", "summary",
             "bandwidth_cap_rad_per_us", "bandwidth_cap_MHz", "bandwidth_cap_kHz"}
    out = MeasurementDocument(qubit_label=str(doc.get("qubit_label", "")),
                              extra={k: v for k, v in doc.items() if k not in known})
    out.bandwidth_cap = _freq(doc, "bandwidth_cap", "$")
    recs = doc.get("records", [])
    if not isinstance(recs, list):
        _fail("$.records", "must be a list")
    for i, rec in enumerate(recs):
        path = f"$.records[{i}]"
        if not isinstance(rec, dict):
            _fail(path, "must be an object")
        _reject_bare(rec, path)
        if "sequence" not in rec:
            _fail(f"{path}.sequence", "missing")
        try:
            parse_sequence_family(str(rec["sequence"]))
        except ValidationError as exc:
            _fail(f"{path}.sequence", str(exc))
        t = _array(rec, "times_us", path)
        s = _array(rec, "signal", path)
        sg = _array(rec, "sigma", path)
        if not (t.size == s.size == sg.size):
            _fail(path, f"record {i}: array lengths differ (times_us {t.size}, "
                        f"signal {s.size}, sigma {sg.size})")
        if np.any(sg <= 0):
            _fail(f"{path}.sigma", "must be > 0")
        if np.any(t < 0):
            _fail(f"{path}.times_us", "must be >= 0")
        rabi = _freq(rec, "rabi", path)
        meta = rec.get("meta", {})
        if not isinstance(meta, dict):
            _fail(f"{path}.meta", "must be an object")
        out.records.append(DecayRecord(str(rec["sequence"]), t, s, sg, rabi, dict(meta)))
        out.record_extra.append({k: v for k, v in rec.items() if k not in _RECORD_KEYS})
    for i, p in enumerate(doc.get("psd_points", [])):
        path = f"$.psd_points[{i}]"
        _reject_bare(p, path)
        w = _freq(p, "omega", path)
        if w is None:
            _fail(f"{path}.omega_rad_per_us", "missing")
        for k in ("S_per_us", "sigma_per_us"):
            if k not in p:
                _fail(f"{path}.{k}", "missing")
        if not float(p["sigma_per_us"]) > 0:
            _fail(f"{path}.sigma_per_us", "must be > 0")
        out.psd_points.append(PsdPoint(w, float(p["S_per_us"]), float(p["sigma_per_us"]),
                                       str(p.get("source", "input"))))
    if "summary" in doc:
        summ = doc["summary"]
        _reject_bare(summ, "$.summary")
        out.summary = {}
        for k in ("t2star", "t2", "t0"):
            key = f"{k}_us"
            if key not in summ:
                _fail(f"$.summary.{key}", "missing")
            v = summ[key]
            v, e = (v, 0.0) if np.isscalar(v) else (v[0], v[1])
            out.summary[k] = (float(v), float(e))
    return out


def load_document(path) -> MeasurementDocument:
    """Load one JSON document, or merge every ``*.json`` in a directory."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.json"))
        if not files:
            raise ValidationError(f"{p}: no .json documents")
        docs = [load_document(f) for f in files]
        merged = docs[0]
        for d in docs[1:]:
            merged.records.extend(d.records)
            merged.record_extra.extend(d.record_extra)
            merged.psd_points.extend(d.psd_points)
            merged.summary = merged.summary or d.summary
            if merged.bandwidth_cap is None:
                merged.bandwidth_cap = d.bandwidth_cap
        return merged
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON ({exc})") from None
    return validate_document(doc)


def save_document(doc: MeasurementDocument, path):
    Path(path).write_text(json.dumps(doc.to_dict(), indent=1) + "\n")


def measurement_set(doc: MeasurementDocument):
    """Sort records into the roles the protocol expects.

    ``meta.role`` may force a role (``"prediction"`` keeps a CPMG record out
    of spectroscopy); otherwise the sequence family decides.
    """
    from .protocol import MeasurementSet

    ms = MeasurementSet(cpmg_points=list(doc.psd_points), bandwidth_cap=doc.bandwidth_cap,
                        summary=doc.summary, label=doc.qubit_label)
    for i, rec in enumerate(doc.records):
        role = rec.meta.get("role", rec.family)
        if role == "ramsey" and rec.family == "ramsey":
            if ms.ramsey is not None:
                raise ValidationError(f"$.records[{i}]: more than one Ramsey record")
            ms.ramsey = rec
        elif role == "echo" and rec.family == "echo":
            if ms.echo is not None:
                raise ValidationError(f"$.records[{i}]: more than one echo record")
            ms.echo = rec
        elif role == "cpmg" and rec.family == "cpmg" and "tau" in rec.family_args \
                and "n" not in rec.family_args:
            ms.cpmg_records.append(rec)
        else:
            ms.other_records.append(rec)
    return ms


# -- curves -------------------------------------------------------------------------------

CURVE_HEADER = ("sequence", "T_us", "signal_or_coherence", "sigma_or_band")


def _g17(x) -> str:
    return format(float(x), ".17g")


def emit_curves(curves, path):
    """Write (sequence, times, values, errs) tuples to CSV with 17 significant digits.

    ``errs`` may be None (written as empty cells).
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for seq, times, values, errs in curves:
            times = np.asarray(times, dtype=float)
            values = np.asarray(values, dtype=float)
            errs = None if errs is None else np.asarray(errs, dtype=float)
            for j in range(times.size):
                w.writerow([seq, _g17(times[j]), _g17(values[j]),
                            "" if errs is None else _g17(errs[j])])


def read_curves(path):
    """Inverse of :func:`emit_curves`; returns {sequence: (times, values, errs)}."""
    rows: dict = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if tuple(header or ()) != CURVE_HEADER:
            raise ValidationError(f"{path}: unexpected CSV header {header}")
        for seq, t, v, e in r:
            rows.setdefault(seq, ([], [], []))
            rows[seq][0].append(float(t))
            rows[seq][1].append(float(v))
            rows[seq][2].append(float(e) if e else math.nan)
    return {k: tuple(np.asarray(x) for x in v) for k, v in rows.items()}


# -- reports ------------------------------------------------------------------------------

def canonical_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":"),
                                     default=str).encode()).hexdigest()


def report_document(report, inputs: MeasurementDocument | None = None, seeds=(),
                    bath=None, timestamp: str | None = None) -> dict:
    """Assemble the persisted report: results plus provenance."""
    body = report.to_dict()
    cfg = body.get("config") or {}
    prov = {"tool_version": __version__, "config_hash": canonical_hash(cfg),
            "seeds": list(seeds)}
    if inputs is not None:
        prov["input_hash"] = canonical_hash(inputs.to_dict())
        prov["qubit_label"] = inputs.qubit_label
    body["provenance"] = prov
    if bath is not None:
        body["bath_estimates"] = bath
    if timestamp is not None:
        body["generated_at"] = timestamp
    return body


def _f(x, nd=4):
    if x is None:
        return "-"
    if isinstance(x, (int, float)):
        return f"{x:.{nd}g}"
    return str(x)


def render_report(doc: dict) -> str:
    """Markdown summary of a report document."""
    lines = [f"# Noise-model report ({doc.get('status', '?')})", ""]
    if doc.get("status") == "precluded":
        det = doc.get("detection", {})
        lines += ["## Quantum-bath signature",
                  f"Oscillatory decay in record {doc.get('record_index')} "
                  f"({doc.get('sequence', '?')}): frequency {_f(det.get('frequency_rad_per_us'))} rad/us, "
                  f"contrast {_f(det.get('contrast'))}. No classical Gaussian noise model "
                  "can describe this record.", ""]
        return "\n".join(lines)
    final = doc.get("final")
    lines.append("## Final model")
    if final is None:
        lines.append("No candidate was accepted.")
    else:
        tag = " (unverified)" if doc.get("status") == "unverified" else ""
        lines.append(f"{final['name']} {final['label']}{tag}")
        lines.append("")
        lines.append("| parameter | value | std. err. |")
        lines.append("|---|---|---|")
        se = final.get("stderr") or {}
        for k, v in (final.get("values") or {}).items():
            lines.append(f"| {k} | {_f(v)} | {_f(se.get(k))} |")
    lines.append("")
    fits = doc.get("fits") or {}
    if fits:
        lines += ["## Decay fits", "", "| record | best family | margin | tie |", "|---|---|---|---|"]
        for name, cl in fits.items():
            best = (cl.get("ranked") or ["-"])[0]
            lines.append(f"| {name} | {best} | {_f(cl.get('margin'))} | "
                         f"{cl.get('tie')} |")
        lines.append("")
    pts = doc.get("psd_points") or []
    if pts:
        lines += ["## PSD points", "", "| omega (rad/us) | S (1/us) | sigma |", "|---|---|---|"]
        for p in pts:
            lines.append(f"| {_f(p['omega_rad_per_us'])} | {_f(p['S_per_us'])} | "
                         f"{_f(p['sigma_per_us'])} |")
        lines.append("")
    lines += ["## Ledger", "", "| candidate | components | status | epsilon | datum |",
              "|---|---|---|---|---|"]
    for c in doc.get("ledger", []):
        lines.append(f"| {c['name']} | {c['label']} | {c['status']} | {_f(c.get('epsilon'))} | "
                     f"{c.get('verdict_datum') or '-'} |")
    lines.append("")
    eps = doc.get("epsilon_table") or []
    if eps:
        lines += ["## Consistency checks", "", "| candidate | datum | epsilon | threshold | "
                  "verdict | post-hoc |", "|---|---|---|---|---|---|"]
        for e in eps:
            lines.append(f"| {e['candidate']} | {e['datum']} | {_f(e['epsilon'])} | "
                         f"{_f(e['threshold'])} | {e['verdict']} | "
                         f"{'yes' if e.get('post_hoc') else ''} |")
        lines.append("")
    preds = doc.get("predictions") or []
    if preds:
        lines += ["## Predictions", ""]
        for p in preds:
            if "heldout_point" in p:
                lines.append(f"- held-out {p['heldout_point']} at "
                             f"{_f(p['omega_rad_per_us'])} rad/us: measured {_f(p['measured'])}, "
                             f"predicted {_f(p['predicted'])}")
            else:
                lines.append(f"- {p['sequence']}: reduced chi-square {_f(p['red_chi2'])} over "
                             f"{len(p['times_us'])} points")
        lines.append("")
    bath = doc.get("bath_estimates")
    if bath:
        lines += ["## Bath estimates", "", "| component | coefficient | f (ppm) | rho (cm^-3) | "
                  "r_min (nm) |", "|---|---|---|---|---|"]
        for b in bath:
            lines.append(f"| {b['component']} | {b['coefficient_used']} | {_f(b['f_ppm'])} | "
                         f"{_f(b['rho_per_cm3'])} | {_f(b['r_min_nm'])} |")
        lines.append("")
    notes = doc.get("notes") or []
    if notes:
        lines += ["## Notes", ""] + [f"- {n}" for n in notes] + [""]
    prov = doc.get("provenance") or {}
    if prov:
        lines += ["## Provenance", "", f"- tool version {prov.get('tool_version')}",
                  f"- config hash {prov.get('config_hash')}"]
        if prov.get("input_hash"):
            lines.append(f"- input hash {prov['input_hash']}")
        if prov.get("seeds"):
            lines.append(f"- seeds {prov['seeds']}")
        lines.append("")
    return "\n".join(lines)
