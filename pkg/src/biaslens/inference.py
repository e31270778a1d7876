"""Predicted cell probabilities and training / algorithmic bias contrasts."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
from scipy import special, stats

from .glmm import FitResult

__all__ = [
    "CellEstimate",
    "CellTable",
    "BiasContrast",
    "EmpiricalCell",
    "cell_table",
    "empirical_cell_table",
    "training_bias",
    "algorithmic_bias",
    "all_contrasts",
    "write_contrasts_csv",
    "CONTRAST_HEADER",
]

CONTRAST_HEADER = ("kind", "language_a", "model_a", "language_b", "model_b",
                   "prob_a", "prob_b", "abs_diff", "rel_pct", "ci_lo", "ci_hi")


@dataclass(frozen=True)
class CellEstimate:
    language: str
    model: str
    eta: float
    se_eta: float
    prob: float
    ci_lo: float
    ci_hi: float


class CellTable(Mapping):
    """Model-based cells keyed by ``(language, model)`` with their joint covariance.

    ``eta_cov`` is the covariance of the cells' linear predictors in
    iteration order; contrasts use it for delta-method intervals.
    """

    def __init__(self, cells: Iterable[CellEstimate], eta_cov=None, level: float = 0.95):
        self._cells = {(c.language, c.model): c for c in cells}
        self._keys = list(self._cells)
        self.eta_cov = None if eta_cov is None else np.asarray(eta_cov, dtype=float)
        self.level = level

    def __getitem__(self, key):
        return self._cells[key]

    def __iter__(self):
        return iter(self._keys)

    def __len__(self):
        return len(self._keys)

    def prob_diff_ci(self, a, b):
        """Delta-method interval for ``prob(b) - prob(a)``."""
        if self.eta_cov is None:
            return (math.nan, math.nan)
        ia, ib = self._keys.index(a), self._keys.index(b)
        pa, pb = self[a].prob, self[b].prob
        g = np.zeros(len(self._keys))
        g[ia] -= pa * (1 - pa)
        g[ib] += pb * (1 - pb)
        se = math.sqrt(max(float(g @ self.eta_cov @ g), 0.0))
        z = stats.norm.ppf(0.5 + self.level / 2)
        d = pb - pa
        return (float(d - z * se), float(d + z * se))


def cell_table(fit: FitResult, config=None, level: float = 0.95) -> CellTable:
    """One estimate per (language, model), with logit-scale delta-method CIs.

    The interval is built for the linear predictor from
    ``fit.prediction_cov``. That covariance includes the posterior spread of
    the random effects and the estimation error in both the fixed effects and
    the SDs. The interval is then mapped through the logistic, so it stays
    inside (0, 1).
    """
    d = fit.design
    if config is not None:
        langs = [c for c in config.language_codes if c in d.languages]
        models = [m for m in config.models if m in d.models]
    else:
        langs, models = list(d.languages), list(d.models)
    keys = [(lang, m) for lang in langs for m in models]
    L = np.array([fit.cell_design(lang, m) for lang, m in keys])
    eta = L @ fit.conditional_params
    cov = L @ fit.prediction_cov @ L.T
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    z = stats.norm.ppf(0.5 + level / 2)
    cells = [CellEstimate(language=lang, model=m, eta=float(e), se_eta=float(s),
                          prob=float(special.expit(e)),
                          ci_lo=float(special.expit(e - z * s)),
                          ci_hi=float(special.expit(e + z * s)))
             for (lang, m), e, s in zip(keys, eta, se)]
    return CellTable(cells, eta_cov=cov, level=level)


@dataclass(frozen=True)
class EmpiricalCell:
    n: int
    positives: int

    @property
    def fraction(self) -> float:
        return self.positives / self.n


def empirical_cell_table(rows) -> dict[tuple[str, str], EmpiricalCell]:
    """Raw positive fraction per observed cell; unobserved cells are absent."""
    n = defaultdict(int)
    pos = defaultdict(int)
    for r in rows:
        key = (r.language_code, r.model_id)
        n[key] += 1
        pos[key] += bool(r.outcome)
    if not n:
        raise ValueError("no rows")
    return {k: EmpiricalCell(n=n[k], positives=pos[k]) for k in n}


@dataclass(frozen=True)
class BiasContrast:
    """``cell_b`` relative to baseline ``cell_a``.

    ``rel_pct`` is NaN (and ``rel_defined`` False) when the baseline
    probability is zero.
    """

    kind: str
    cell_a: tuple[str, str]
    cell_b: tuple[str, str]
    prob_a: float
    prob_b: float
    abs_diff: float
    rel_pct: float
    ci: tuple[float, float]
    rel_defined: bool = True

    @property
    def ratio(self) -> float:
        return self.prob_b / self.prob_a if self.prob_a else math.inf

    @property
    def excludes_zero(self) -> bool:
        lo, hi = self.ci
        return bool(lo > 0 or hi < 0)

    def as_row(self) -> list:
        return [self.kind, self.cell_a[0], self.cell_a[1], self.cell_b[0], self.cell_b[1],
                self.prob_a, self.prob_b, self.abs_diff, self.rel_pct, self.ci[0], self.ci[1]]


def _prob(cells, key) -> float:
    try:
        value = cells[key]
    except KeyError:
        raise KeyError(f"cell {key} missing") from None
    return float(getattr(value, "prob", value))


def _contrast(kind, cells, a, b) -> BiasContrast:
    pa, pb = _prob(cells, a), _prob(cells, b)
    diff = pb - pa
    defined = pa != 0
    rel = 100.0 * diff / pa if defined else math.nan
    ci = cells.prob_diff_ci(a, b) if isinstance(cells, CellTable) else (math.nan, math.nan)
    return BiasContrast(kind=kind, cell_a=a, cell_b=b, prob_a=pa, prob_b=pb, abs_diff=diff,
                        rel_pct=rel, ci=ci, rel_defined=defined)


def training_bias(cells, lang_a: str, lang_b: str, model: str) -> BiasContrast:
    """Between-language contrast within one model version, baseline ``lang_a``.

    ``cells`` is a :class:`CellTable` or any mapping from ``(language, model)``
    to a probability.
    """
    if lang_a == lang_b:
        raise ValueError("training bias compares two different languages")
    return _contrast("training", cells, (lang_a, model), (lang_b, model))


def algorithmic_bias(cells, language: str, model_a: str, model_b: str) -> BiasContrast:
    """Within-language contrast across model versions, baseline ``model_a``."""
    if model_a == model_b:
        raise ValueError("algorithmic bias compares two different models")
    return _contrast("algorithmic", cells, (language, model_a), (language, model_b))


def all_contrasts(cells: CellTable, reference: str, languages, models) -> list[BiasContrast]:
    """Every non-reference language against ``reference`` within each model, and
    every language between consecutive model versions."""
    out = []
    for m in models:
        for lang in languages:
            if lang != reference:
                out.append(training_bias(cells, reference, lang, m))
    for lang in languages:
        for ma, mb in zip(models, models[1:]):
            out.append(algorithmic_bias(cells, lang, ma, mb))
    return out


def write_contrasts_csv(path, contrasts) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONTRAST_HEADER)
        for c in contrasts:
            w.writerow([_fmt(v) for v in c.as_row()])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(round(float(v), 10))
    return v
