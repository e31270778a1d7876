"""Training and algorithmic bias contrasts from point probabilities alone.

Any mapping from (language, model) to a probability works; confidence
intervals need a fitted cell table and are NaN here.
"""

from biaslens.inference import algorithmic_bias, training_bias

ABORTION = {("pl", "gpt-3.5"): 0.434, ("sv", "gpt-3.5"): 0.534, ("en", "gpt-3.5"): 0.49,
            ("pl", "gpt-4"): 0.566, ("sv", "gpt-4"): 0.670, ("en", "gpt-4"): 0.959}
CATALAN = {("ca", "gpt-3.5"): 0.3108, ("es", "gpt-3.5"): 0.6115,
           ("ca", "gpt-4"): 0.085, ("es", "gpt-4"): 0.3898}

if __name__ == "__main__":
    rows = [training_bias(ABORTION, "pl", "sv", "gpt-3.5"),
            training_bias(CATALAN, "es", "ca", "gpt-3.5")]
    rows += [algorithmic_bias(ABORTION, lang, "gpt-3.5", "gpt-4") for lang in ("pl", "sv", "en")]
    rows += [algorithmic_bias(CATALAN, lang, "gpt-3.5", "gpt-4") for lang in ("ca", "es")]
    for c in rows:
        print(f"{c.kind:<12} {c.cell_a} -> {c.cell_b}: {c.prob_a:.4f} -> {c.prob_b:.4f}, "
              f"{c.abs_diff:+.4f} ({c.rel_pct:+.2f}%)")
