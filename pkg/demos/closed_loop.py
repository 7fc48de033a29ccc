"""Run the full protocol on the bundled synthetic NV dataset and print the report."""
from pathlib import Path

import specter
from specter.bath import bath_estimates
from specter.datasets import NV_TRUTH_VALUES
from specter.io import load_document, measurement_set, render_report, report_document
from specter.protocol import run_protocol

doc = load_document(Path(specter.__file__).parent / "data" / "nv_synthetic.json")
rep = run_protocol(measurement_set(doc))
print(render_report(report_document(rep, doc, bath=bath_estimates(rep.final_model))))

print("recovered vs generating values:")
for k, truth in NV_TRUTH_VALUES.items():
    got = rep.final.values[k]
    print(f"  {k:6s} {got:10.4g}  (truth {truth:g}, {100 * (got / truth - 1):+.1f}%)")
