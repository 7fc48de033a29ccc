"""Command-line interface: ``specter <command> ...``.

Exit codes: 0 success, 2 invalid input, 3 numeric or identification
failure, 4 classical noise model precluded by an oscillatory record.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ClassicalModelPrecluded, SpecterError, ValidationError

FORMATS = ("json", "csv", "md")


def _times(spec: str) -> np.ndarray:
    """``a:b:n`` (inclusive linspace) or a comma-separated list."""
    try:
        if ":" in spec:
            a, b, n = spec.split(":")
            return np.linspace(float(a), float(b), int(n))
        return np.array([float(x) for x in spec.split(",") if x.strip()])
    except ValueError:
        raise ValidationError(f"cannot parse times/frequencies {spec!r}") from None


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"{path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _model(path):
    from .noise import model_from_dict
    m = model_from_dict(_read_json(path))
    if not m.is_bound():
        raise ValidationError(f"{path}: model has free parameters")
    return m


def _g(x):
    return format(float(x), ".17g")


def _table(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_g(x) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _md_table(header, rows) -> str:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        out.append("| " + " | ".join(f"{x:.6g}" if isinstance(x, (float, np.floating))
                                     else str(x) for x in r) + " |")
    return "\n".join(out) + "\n"


def _emit(args, text: str):
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _emit_table(args, header, rows, default="csv"):
    fmt = args.format or default
    if fmt == "json":
        _emit(args, json.dumps([dict(zip(header, [float(x) if isinstance(x, (float, np.floating))
                                                  else x for x in r])) for r in rows],
                               indent=1) + "\n")
    elif fmt == "md":
        _emit(args, _md_table(header, rows))
    else:
        _emit(args, _table(header, rows))


def _emit_doc(args, doc: dict, md=None):
    fmt = args.format or "json"
    if fmt == "md" and md is not None:
        _emit(args, md(doc))
    elif fmt == "json":
        _emit(args, json.dumps(doc, indent=1, default=float) + "\n")
    else:
        raise ValidationError(f"--format {fmt} is not available for this command")


# -- commands ---------------------------------------------------------------------------

def cmd_spectrum(args):
    from .noise import evaluate_psd
    m = _model(args.model)
    w = _times(args.omega)
    S = evaluate_psd(m, w)
    _emit_table(args, ("omega_rad_per_us", "S_per_us"), zip(w, S))


def cmd_chi(args):
    from .decoherence import decay_curve
    m = _model(args.model)
    curve = decay_curve(m, args.seq, _times(args.times), method=args.method)
    _emit_table(args, ("T_us", "chi", "coherence"),
                zip(curve.times, curve.chi, curve.coherence))


def _records(path, index=None):
    from .io import load_document
    doc = load_document(path)
    recs = doc.records
    if index is not None:
        if not 0 <= index < len(recs):
            raise ValidationError(f"--record {index} out of range ({len(recs)} records)")
        recs = [recs[index]]
    return doc, recs


def cmd_fit(args):
    from .inference import FAMILIES, classify_decay, fit_decay
    _, recs = _records(args.data, args.record)
    out = []
    for rec in recs:
        if args.family == "auto":
            cl = classify_decay(rec)
            d = cl.to_dict()
            d["best"] = cl.best.to_dict()
        elif args.family in FAMILIES:
            d = fit_decay(rec, args.family).to_dict()
        else:
            raise ValidationError(f"unknown family {args.family!r}")
        d["sequence"] = rec.sequence
        out.append(d)
    _emit_doc(args, out[0] if len(out) == 1 else {"fits": out})


def cmd_extract_psd(args):
    from .inference import extract_psd_point
    _, recs = _records(args.data)
    rows = []
    for i, rec in enumerate(recs):
        if rec.family != "cpmg" or "tau" not in rec.family_args:
            continue
        p = extract_psd_point(rec, args.red_chi2_cap, record_index=i)
        rows.append((p.omega, p.S, p.sigma))
    rows.sort()
    _emit_table(args, ("omega_rad_per_us", "S_per_us", "sigma"), rows)


def cmd_protocol_run(args):
    from .bath import bath_estimates
    from .io import load_document, measurement_set, render_report, report_document
    from .protocol import ProtocolConfig, run_protocol
    doc = load_document(args.data)
    cfg = ProtocolConfig.from_dict(_read_json(args.config)) if args.config else ProtocolConfig()
    try:
        rep = run_protocol(measurement_set(doc), cfg)
    except ClassicalModelPrecluded as exc:
        det = exc.detection or {}
        body = {"status": "precluded", "message": str(exc),
                "record_index": exc.record_index, "detection": det,
                "sequence": det.get("sequence")}
        _write_report(args, body, render_report)
        raise
    bath = bath_estimates(rep.final_model) if rep.final_model is not None else None
    body = report_document(rep, doc, seeds=[args.seed] if args.seed is not None else [],
                           bath=bath)
    _write_report(args, body, render_report)
    if rep.status == "failed":
        return 3
    return 0


def _write_report(args, body, render):
    text = json.dumps(body, indent=1, sort_keys=True, default=float) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    elif not args.md:
        sys.stdout.write(render(body) + "\n" if args.format == "md" else text)
    if args.md:
        Path(args.md).write_text(render(body) + "\n")


def cmd_predict(args):
    from .io import emit_curves
    from .noise import model_from_dict
    from .protocol import predict_dynamics
    if args.report:
        rep = _read_json(args.report)
        if not rep.get("final_model"):
            raise ValidationError(f"{args.report}: report has no final model")
        model = model_from_dict(rep["final_model"])
    elif args.model:
        model = _model(args.model)
    else:
        raise ValidationError("predict needs --model or --report")
    curve = predict_dynamics(model, args.seq, _times(args.times))
    band = curve.band if curve.band is not None else None
    if (args.format or "csv") == "csv" and args.out:
        emit_curves([(args.seq, curve.times, curve.coherence, band)], args.out)
        return 0
    rows = [(args.seq, t, c, "" if band is None else b)
            for t, c, b in zip(curve.times, curve.coherence,
                               band if band is not None else [None] * curve.times.size)]
    _emit_table(args, ("sequence", "T_us", "signal_or_coherence", "sigma_or_band"), rows)


def cmd_simulate_dataset(args):
    from .datasets import RecordPlan, simulate_bundle, simulate_record
    from .io import MeasurementDocument
    if args.preset == "nv":
        doc = simulate_bundle(seed=args.seed or 0, method=args.method, n_traj=args.ntraj,
                              noise=args.noise)
    else:
        if not (args.model and args.seq and args.times):
            raise ValidationError("simulate dataset needs --model, --seq and --times "
                                  "(or --preset nv)")
        model = _model(args.model)
        if len(args.times) not in (1, len(args.seq)):
            raise ValidationError("give one --times or one per --seq")
        times = args.times * len(args.seq) if len(args.times) == 1 else args.times
        recs = [simulate_record(model, RecordPlan(s, tuple(_times(t)), "auto"),
                                args.noise, args.seed or 0, args.method, args.ntraj)
                for s, t in zip(args.seq, times)]
        for r in recs:
            r.meta.pop("role", None)
        doc = MeasurementDocument(qubit_label="simulated", records=recs,
                                  extra={"generator": {"method": args.method,
                                                       "noise": args.noise,
                                                       "seed": args.seed or 0,
                                                       "n_traj": args.ntraj}})
    _emit_doc(args, doc.to_dict())


def cmd_simulate_sedor(args):
    from .spinbath import CentralSpinSystem, DriveSpec, evolve_sequence
    from .filters import parse_sequence_family
    system = CentralSpinSystem.from_dict(_read_json(args.bath))
    fam, fargs = parse_sequence_family(args.seq)
    if args.times:
        times = _times(args.times)
        family = args.seq
    elif "T" in fargs:
        times = np.array([float(fargs.pop("T"))])
        family = fam + (":" + ",".join(f"{k}={v}" for k, v in fargs.items()) if fargs else "")
    else:
        raise ValidationError("simulate sedor needs --times or a literal with T=")
    sig = evolve_sequence(system, DriveSpec(args.rabi, ideal=args.ideal), family, times,
                          shots=args.shots, seed=args.seed or 0)
    _emit_table(args, ("T_us", "signal"), zip(times, sig))


def cmd_fidelity_fit(args):
    from .inference import fit_pi_fidelity
    d = _read_json(args.data)
    for k in ("N", "signal"):
        if k not in d:
            raise ValidationError(f"{args.data}: missing field {k!r}")
    fit = fit_pi_fidelity(d["N"], d["signal"], d.get("sigma"), c0=args.c0)
    _emit_doc(args, fit.to_dict())


def cmd_bath_density(args):
    from .bath import COEFFICIENTS, density_from_b
    if (args.b_rad_per_s is None) == (args.b_rad_per_us is None):
        raise ValidationError("give exactly one of --b-rad-per-s or --b-rad-per-us")
    b = args.b_rad_per_s if args.b_rad_per_s is not None else args.b_rad_per_us * 1e6
    names = sorted(COEFFICIENTS) if args.coeff == "both" else [args.coeff]
    docs = [density_from_b(b, n).to_dict() for n in names]
    if (args.format or "json") == "json":
        _emit_doc(args, docs[0] if len(docs) == 1 else {"estimates": docs})
    else:
        keys = list(docs[0])
        _emit_table(args, keys, [[d[k] for k in keys] for d in docs])


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path (default stdout)")
    common.add_argument("--format", choices=FORMATS, default=argparse.SUPPRESS)

    ap = argparse.ArgumentParser(prog="specter", parents=[common],
                                 description="Self-consistent classical noise spectroscopy.")
    ap.set_defaults(seed=None, out=None, format=None)
    ap.add_argument("--version", action="version", version=f"specter {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spectrum", parents=[common], help="evaluate S(omega) of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--omega", required=True, help="a:b:n in rad/us, or a list")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("chi", parents=[common], help="attenuation chi(T) for a sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--seq", required=True, help="sequence literal, e.g. cpmg:n=32,tau=2.5")
    p.add_argument("--times", required=True, help="total times a:b:n in us")
    p.add_argument("--method", choices=("auto", "quadrature", "time_domain"), default="auto")
    p.set_defaults(func=cmd_chi)

    p = sub.add_parser("fit", parents=[common], help="fit decay families to records")
    p.add_argument("--data", required=True)
    p.add_argument("--record", type=int)
    p.add_argument("--family", default="auto")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract-psd", parents=[common], help="PSD points from CPMG records")
    p.add_argument("--data", required=True, help="document or directory of documents")
    p.add_argument("--red-chi2-cap", type=float, default=3.0)
    p.set_defaults(func=cmd_extract_psd)

    p = sub.add_parser("protocol", help="solve-and-check protocol")
    psub = p.add_subparsers(dest="action", required=True)
    q = psub.add_parser("run", parents=[common])
    q.add_argument("--data", required=True)
    q.add_argument("--config")
    q.add_argument("--md", help="also write a markdown report here")
    q.set_defaults(func=cmd_protocol_run)

    p = sub.add_parser("predict", parents=[common], help="predict coherence for a sequence")
    p.add_argument("--model")
    p.add_argument("--report", help="use the final model of a protocol report")
    p.add_argument("--seq", required=True)
    p.add_argument("--times", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="synthetic data")
    ssub = p.add_subparsers(dest="action", required=True)
    q = ssub.add_parser("dataset", parents=[common])
    q.add_argument("--model")
    q.add_argument("--seq", action="append", help="sequence family; repeatable")
    q.add_argument("--times", action="append", help="a:b:n per --seq (or one for all)")
    q.add_argument("--ntraj", type=int, default=10_000)
    q.add_argument("--noise", type=float, default=0.0, help="added readout noise")
    q.add_argument("--method", choices=("mc", "exact"), default="mc")
    q.add_argument("--preset", choices=("nv",), help="the NV-like bundle design")
    q.set_defaults(func=cmd_simulate_dataset)
    q = ssub.add_parser("sedor", parents=[common])
    q.add_argument("--bath", required=True)
    q.add_argument("--rabi", type=float, required=True, help="rad/us")
    q.add_argument("--seq", required=True)
    q.add_argument("--times")
    q.add_argument("--shots", type=int)
    q.add_argument("--ideal", action="store_true", help="instantaneous pulses")
    q.set_defaults(func=cmd_simulate_sedor)

    p = sub.add_parser("fidelity", help="pi-pulse fidelity")
    fsub = p.add_subparsers(dest="action", required=True)
    q = fsub.add_parser("fit", parents=[common])
    q.add_argument("--data", required=True, help='JSON with "N", "signal", optional "sigma"')
    q.add_argument("--c0", type=float, help="fix the baseline offset instead of fitting it")
    q.set_defaults(func=cmd_fidelity_fit)

    p = sub.add_parser("bath", help="spin-bath properties")
    bsub = p.add_subparsers(dest="action", required=True)
    q = bsub.add_parser("density", parents=[common])
    q.add_argument("--b-rad-per-s", type=float)
    q.add_argument("--b-rad-per-us", type=float)
    q.add_argument("--coeff", choices=("literature", "analytic", "both"), default="literature")
    q.set_defaults(func=cmd_bath_density)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        rc = args.func(args)
    except SpecterError as exc:
        print(f"specter: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"specter: error: {exc}", file=sys.stderr)
        return 2
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
