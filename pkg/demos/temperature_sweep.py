"""Coalescence probability versus temperature.

Raising the temperature broadens the zero-phonon line (Arrhenius-activated
dephasing), shortening T2 and with it the chance that two photons coalesce.
The estimate is the ratio of the interference dip area to the orthogonal
antibunching dip area, compared with the analytic T2 / (2 T1).

    python demos/temperature_sweep.py
"""

import json
import tempfile
from pathlib import Path

from molhom.config import validate_config
from molhom.scenarios import run_scenario

# weak pump, perfect mode overlap and no background: the regime where
# the area ratio tracks T2 / 2T1 directly
text = """
scenario = temperature_sweep
molecule.saturation = 0.05
bench.spatial_overlap = 1
run.background = false
run.duration = 0.3
run.seed = 2026
"""
cfg, notes = validate_config(text)
for n in notes:
    print("warning:", n)

with tempfile.TemporaryDirectory() as tmp:
    run_scenario(cfg, tmp)
    s = json.loads((Path(tmp) / "summary.json").read_text())

print(" T [K]   estimated   T2/2T1")
for t, est, th in zip(s["temperatures_K"], s["estimated"], s["theory"]):
    print(f"  {t:4.1f}    {est:7.4f}   {th:7.4f}")
print(f"P(5 K)/P(2 K): estimated {s['ratio_last_first']['estimated']:.3f}, "
      f"analytic {s['ratio_last_first']['theory']:.3f}")
