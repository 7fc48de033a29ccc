"""Regenerate the bundled synthetic NV-like dataset with the Monte Carlo oracle.

Usage: python3 demos/make_nv_dataset.py [out.json] [--seed N] [--ntraj N]
"""
import argparse
from pathlib import Path

from specter.datasets import simulate_bundle
from specter.io import save_document

DEFAULT = Path(__file__).resolve().parents[1] / "src" / "specter" / "data" / "nv_synthetic.json"

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("out", nargs="?", default=str(DEFAULT))
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--ntraj", type=int, default=100_000)
ap.add_argument("--noise", type=float, default=0.03)
args = ap.parse_args()

doc = simulate_bundle(seed=args.seed, method="mc", n_traj=args.ntraj, noise=args.noise)
save_document(doc, args.out)
print(f"wrote {args.out}: {sum(len(r) for r in doc.records)} points in {len(doc.records)} records")
