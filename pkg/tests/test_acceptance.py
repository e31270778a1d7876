"""Acceptance gate: one test per criterion, each at its stated tolerance and time budget.

Every test records a PASS/FAIL line, printed together at the end of the run.
Monte Carlo criteria use seed 0.
"""

import time

import numpy as np
import pytest

from _acceptance_log import record
from _oracles import (central_fd_grad, design_for, irls_logistic, normal_approx_power,
                      quadrature_fit, random_glmm_rows)
from biaslens.glmm import THETA_FLOOR, FitOptions, fit, laplace_objective, quadrature_loglik
from biaslens.inference import algorithmic_bias, training_bias
from biaslens.labeling import holsti
from biaslens.sampler import ProviderError, ResponseStore, collect_study, mock_provider
from biaslens.study_config import get_builtin_study
from biaslens.synth import ScenarioSpec, monte_carlo_recovery, power_curve

ABORTION_CELLS = {("pl", "gpt-3.5"): 0.434, ("sv", "gpt-3.5"): 0.534, ("en", "gpt-3.5"): 0.49,
        ("pl", "gpt-4"): 0.566, ("sv", "gpt-4"): 0.670, ("en", "gpt-4"): 0.959}
CATALAN_CELLS = {("ca", "gpt-3.5"): 0.3108, ("es", "gpt-3.5"): 0.6115,
        ("ca", "gpt-4"): 0.085, ("es", "gpt-4"): 0.3898}


class _Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def _finish(number, ok, detail, elapsed, budget):
    in_time = elapsed < budget
    record(number, ok and in_time, f"{detail}; {elapsed:.2f}s (budget {budget:g}s)")
    assert ok, detail
    assert in_time, f"took {elapsed:.1f}s, budget {budget}s"


def test_criterion_1_holsti_exactness():
    with _Timer() as t:
        a91 = {f"i{k}": True for k in range(100)}
        b91 = {f"i{k}": k < 91 for k in range(100)}
        a43 = {f"j{k}": False for k in range(50)}
        b43 = {f"j{k}": k >= 43 for k in range(50)}
        h1, h2 = holsti(a91, b91), holsti(a43, b43)
    _finish(1, h1 == 0.91 and h2 == 0.86, f"91/100 -> {h1!r}, 43/50 -> {h2!r}", t.elapsed, 1)


def test_criterion_2_gradient_vs_finite_differences():
    rng = np.random.default_rng(0)
    worst = 0.0
    with _Timer() as t:
        for _ in range(60):
            n_lang, n_groups = int(rng.integers(2, 5)), int(rng.integers(2, 4))
            n = int(rng.integers(40, 401))
            rows, langs, models = random_glmm_rows(rng, n_lang, n_groups, n,
                                                   rng.uniform(0.2, 1.5, n_lang))
            d = design_for(rows, langs, models)
            beta, theta = rng.normal(0, 0.5, d.p), rng.uniform(0.1, 2.0, d.q)
            ga = laplace_objective(beta, theta, d)[1]
            gf = central_fd_grad(lambda v: laplace_objective(v[:d.p], np.exp(v[d.p:]), d)[0],
                                 np.concatenate([beta, np.log(theta)]), h=1e-5)
            worst = max(worst, float(np.max(np.abs(ga - gf) / np.abs(gf))))
    _finish(2, worst < 1e-5, f"60 instances, max relative error {worst:.2e} (< 1e-5)",
            t.elapsed, 60)


def test_criterion_3_laplace_vs_quadrature():
    rng = np.random.default_rng(0)
    worst_ll, worst_beta, n_inst = 0.0, 0.0, 0
    with _Timer() as t:
        while n_inst < 30:
            sd = rng.uniform(0.1, 0.7)
            beta = rng.normal(0, 0.7, 2)
            rows, langs, models = random_glmm_rows(rng, 2, 2, 40, [sd], beta=beta,
                                                   slopes=False)
            d = design_for(rows, langs, models, slopes=False)
            if d.y.min() == d.y.max():
                continue
            n_inst += 1
            lap = -laplace_objective(beta, [sd], d)[0]
            quad = quadrature_loglik(beta, [sd], d, n_nodes=21)
            worst_ll = max(worst_ll, abs(lap - quad) / abs(quad))
            fl = fit(d)
            bq, _, _ = quadrature_fit(d)
            worst_beta = max(worst_beta, float(np.max(np.abs(bq - fl.beta))))
    ok = worst_ll < 1e-3 and worst_beta < 1e-2
    _finish(3, ok, f"{n_inst} instances, loglik rel diff {worst_ll:.2e} (< 1e-3), "
                   f"beta diff {worst_beta:.2e} (< 1e-2)", t.elapsed, 60)


def test_criterion_4_floor_equals_irls():
    rng = np.random.default_rng(0)
    worst = 0.0
    with _Timer() as t:
        for _ in range(20):
            n_lang, n_groups = int(rng.integers(2, 5)), int(rng.integers(1, 4))
            rows, langs, models = random_glmm_rows(rng, n_lang, n_groups,
                                                   int(rng.integers(100, 401)),
                                                   np.full(n_lang, 0.5))
            d = design_for(rows, langs, models)
            fr = fit(d, FitOptions(fixed_theta=THETA_FLOOR))
            worst = max(worst, float(np.max(np.abs(fr.beta - irls_logistic(d.X, d.y)))))
    _finish(4, worst < 1e-6, f"20 instances, max |beta - beta_IRLS| {worst:.2e} (< 1e-6)",
            t.elapsed, 30)


def _recovery(number, probs, reference, budget):
    scen = ScenarioSpec(probs, 500, reference)
    with _Timer() as t:
        rep = monte_carlo_recovery(scen, reps=200, seed=0, tolerance=0.05)
    bad = []
    parts = []
    for c in rep.cells:
        good = c.within_tolerance >= 0.95 and 0.90 <= c.coverage <= 0.99
        if not good:
            bad.append(f"({c.language},{c.model})")
        parts.append(f"{c.language}/{c.model}: within {c.within_tolerance:.3f} "
                     f"cover {c.coverage:.3f}")
    ok = not bad and rep.n_failed == 0
    detail = "; ".join(parts) + (f"; failing cells {', '.join(bad)}" if bad else "") + \
        f"; failed fits {rep.n_failed}"
    _finish(number, ok, detail, t.elapsed, budget)


def test_criterion_5_recovery_abortion_cells():
    _recovery(5, ABORTION_CELLS, "pl", 600)


def test_criterion_6_recovery_catalan_cells():
    _recovery(6, CATALAN_CELLS, "es", 300)


def test_criterion_7_contrast_arithmetic():
    with _Timer() as t:
        got = {
            "sv vs pl, gpt-3.5": (training_bias(ABORTION_CELLS, "pl", "sv", "gpt-3.5").rel_pct, 23.0),
            "sv, 3.5->4": (algorithmic_bias(ABORTION_CELLS, "sv", "gpt-3.5", "gpt-4").rel_pct, 25.5),
            "pl, 3.5->4": (algorithmic_bias(ABORTION_CELLS, "pl", "gpt-3.5", "gpt-4").rel_pct, 30.4),
            "en, 3.5->4": (algorithmic_bias(ABORTION_CELLS, "en", "gpt-3.5", "gpt-4").rel_pct, 95.7),
            "ca, 3.5->4": (algorithmic_bias(CATALAN_CELLS, "ca", "gpt-3.5", "gpt-4").rel_pct, -72.65),
            # printed at integer precision; the same probabilities give -36.26
            "es, 3.5->4": (algorithmic_bias(CATALAN_CELLS, "es", "gpt-3.5", "gpt-4").rel_pct, -36.3),
        }
    es = got["es, 3.5->4"][0]
    ok = all(abs(v - want) <= 0.1 for v, want in got.values()) and round(es) == -36
    detail = ", ".join(f"{k} {v:+.2f}% (want {w:+g})" for k, (v, w) in got.items())
    _finish(7, ok, detail, t.elapsed, 1)


class _Outage:
    def __init__(self, inner, k):
        self.inner, self.k, self.n = inner, k, 0

    def complete(self, prompt, model_id, params):
        self.n += 1
        if self.n > self.k:
            raise ProviderError("interrupted")
        return self.inner.complete(prompt, model_id, params)


def test_criterion_8_sampler_contract(tmp_path):
    cfg = get_builtin_study("abortion")
    prompts = {lang.code: lang.prompt_text for lang in cfg.languages}
    probs = ABORTION_CELLS
    problems = []
    with _Timer() as t:
        store = ResponseStore.for_study(tmp_path / "full", cfg.study_id)
        first = sum(collect_study(mock_provider(0, probs, prompts), cfg, store).values())
        snapshot = store.path.read_bytes()
        again = sum(collect_study(mock_provider(0, probs, prompts), cfg,
                                  ResponseStore(store.path)).values())
        if first != 3000 or len(ResponseStore(store.path)) != 3000:
            problems.append(f"first run gave {first}")
        if again != 0 or store.path.read_bytes() != snapshot:
            problems.append("re-run changed the store")
        prefixes = [0, 1, 499, 500, 1501, 2999] + \
            [int(k) for k in np.random.default_rng(0).integers(2, 2999, 4)]
        for k in prefixes:
            path = tmp_path / f"cut{k}"
            s = ResponseStore.for_study(path, cfg.study_id)
            try:
                collect_study(_Outage(mock_provider(0, probs, prompts), k), cfg, s)
            except ProviderError:
                pass
            collect_study(mock_provider(1, probs, prompts), cfg,
                          ResponseStore.for_study(path, cfg.study_id))
            final = ResponseStore.for_study(path, cfg.study_id)
            counts = {c: len(final.cell_records(cfg.study_id, *c)) for c in cfg.cells()}
            if len(final) != 3000 or set(counts.values()) != {500}:
                problems.append(f"prefix {k}: {len(final)} records")
    detail = (f"3000 records, idempotent re-run, resumed after prefixes {prefixes}"
              if not problems else "; ".join(problems))
    _finish(8, not problems, detail, t.elapsed, 30)


def test_criterion_9_power():
    base = ScenarioSpec({(lang, m): 0.45 for lang in ("pl", "sv") for m in ("gpt-3.5", "gpt-4")},
                        500, "pl")
    with _Timer() as t:
        size, power = power_curve(base, [0.0, 0.10], reps=200, seed=0,
                                  language_a="pl", language_b="sv", model="gpt-3.5")
    oracle = normal_approx_power(0.45, 0.55, 500)
    slack = 3 * np.sqrt(oracle * (1 - oracle) / 200)
    ok = (abs(size.detection_rate - 0.05) <= 0.04 and power.detection_rate > 0.85
          and power.detection_rate >= oracle - slack
          and size.n_failed == 0 and power.n_failed == 0)
    detail = (f"delta 0: {size.detection_rate:.3f} (0.05 +/- 0.04); delta 0.10: "
              f"{power.detection_rate:.3f} (> 0.85; normal-approximation power {oracle:.3f}, "
              f"floor {oracle - slack:.3f})")
    _finish(9, ok, detail, t.elapsed, 600)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
