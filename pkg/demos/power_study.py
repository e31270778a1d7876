"""How often a between-language gap of a given size is detected at n per cell.

``python3 demos/power_study.py [reps]``; 200 reps takes under a minute.
"""

import sys

from biaslens.synth import ScenarioSpec, power_curve

if __name__ == "__main__":
    reps = int(sys.argv[1]) if len(sys.argv) > 1 else 50
    base = ScenarioSpec({(lang, m): 0.45 for lang in ("pl", "sv") for m in ("gpt-3.5", "gpt-4")},
                        n_per_cell=500, reference_language="pl")
    for pt in power_curve(base, [0.0, 0.025, 0.05, 0.075, 0.10], reps=reps, seed=0,
                          language_a="pl", language_b="sv", model="gpt-3.5"):
        print(f"delta {pt.delta:.3f}: detected in {pt.detection_rate:.3f} of {pt.n_reps} reps")
