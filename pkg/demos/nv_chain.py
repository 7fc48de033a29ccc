"""Walk the NV parameter chain by hand: timescales, candidates, solves and checks."""
import math

from specter.decoherence import timescales
from specter.inference import PsdPoint
from specter.protocol import (consistency_check, point_observation, re_stage, refine_minimal,
                              solve_unknowns, summary_observations)

TWO_PI = 2 * math.pi

ts = timescales(0.56, 8000.0, want=("t2star", "t2"))
print(f"slow bath b_s=0.56 rad/us, tau_s=8000 us -> T2*={ts['t2star']:.2f} us, "
      f"T2={ts['t2']:.1f} us")

obs = summary_observations(ts["t2star"], ts["t2"], 55.0)
points = [point_observation(PsdPoint(TWO_PI * nu, S, 0.0))
          for nu, S in [(0.05, 0.0175), (0.25 / 3, 0.012), (0.10, 0.0105)]]

s0, split = re_stage(obs)
s1, s2 = refine_minimal(s0, tau_split=split)
smin = refine_minimal(s2, tau_split=split)[0]

for cand in (s1, s2, smin):
    sol = solve_unknowns(cand, points[:cand.q])
    vals = ", ".join(f"{k}={v:.4g}" for k, v in sol.values.items())
    print(f"\n{cand.label}  (q={cand.q})  {vals}")
    for p in points[cand.q:]:
        v = consistency_check(sol, p)
        print(f"  check at {p.name}: epsilon={v.epsilon:+.3f} "
              f"-> {'rejected' if v.rejected else 'consistent'}")
