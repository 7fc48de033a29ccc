"""Echo of a central spin with one near-resonant bath spin, at high and low drive power.

A strong pi pulse also flips the bath spin, so the echo refocuses nothing and
oscillates at half the coupling.  A weak pulse leaves the bath spin alone.
"""
import math

import numpy as np

from specter.inference import DecayRecord, detect_oscillation
from specter.spinbath import BathSpin, CentralSpinSystem, DriveSpec, evolve_sequence, t2_vs_rabi

TWO_PI = 2 * math.pi
rabi, d = TWO_PI * 2.5, TWO_PI * 0.06
t = np.linspace(2, 120, 60)
rng = np.random.default_rng(1)

print("Omega/Delta  oscillatory  frequency/(d/2)  contrast")
for ratio in (3.0, 1.0, 0.3, 0.1):
    system = CentralSpinSystem([BathSpin(d, rabi / ratio)])
    s = evolve_sequence(system, DriveSpec(rabi), "echo", t)
    det = detect_oscillation(DecayRecord("echo", t, s + 0.02 * rng.standard_normal(t.size), 0.02))
    freq = det.frequency / (d / 2) if det.oscillatory else float("nan")
    print(f"{ratio:11.1f}  {str(det.oscillatory):11s}  {freq:15.4f}  {det.contrast:8.3f}")

bath = CentralSpinSystem([BathSpin(TWO_PI * dk, TWO_PI * dl)
                          for dk, dl in [(0.02, 0.4), (0.03, 0.8), (0.05, 1.6)]])
t2 = t2_vs_rabi(bath, "cpmg:tau=2.5", [rabi, rabi / 10], 5 * np.arange(1, 41))
print(f"\nthree-spin bath, CPMG: T2 = {t2[rabi]:.1f} us at high power, "
      f"{t2[rabi / 10]:.0f} us at low power")
