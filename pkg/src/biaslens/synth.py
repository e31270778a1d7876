"""Synthetic labeled datasets with known cell probabilities, and Monte Carlo
studies of how well the model recovers them.

Every (language, model) cell draws from its own PCG64 stream, keyed by the
seed and a hash of the cell, so a cell's outcomes do not depend on which other
cells exist or the order they are generated in.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .glmm import FitOptions, build_design, fit
from .inference import cell_table, training_bias
from .labeling import AnalysisRow
from .study_config import ConfigError, parse_study_config

__all__ = [
    "ScenarioSpec",
    "generate",
    "monte_carlo_recovery",
    "RecoveryReport",
    "CellRecovery",
    "power_curve",
    "PowerPoint",
    "load_scenario",
    "write_power_csv",
]


@dataclass(frozen=True)
class ScenarioSpec:
    """True success probability for each (language, model) cell.

    ``languages`` and ``models`` default to the order in which they first
    appear in ``cell_probs``.
    """

    cell_probs: Mapping[tuple[str, str], float]
    n_per_cell: int
    reference_language: str
    languages: tuple[str, ...] = ()
    models: tuple[str, ...] = ()

    def __post_init__(self):
        probs = dict(self.cell_probs)
        object.__setattr__(self, "cell_probs", probs)
        if not self.languages:
            object.__setattr__(self, "languages",
                               tuple(dict.fromkeys(k[0] for k in probs)))
        if not self.models:
            object.__setattr__(self, "models", tuple(dict.fromkeys(k[1] for k in probs)))
        for key, p in probs.items():
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"cell {key} probability {p} outside [0, 1]")
        if len(self.languages) < 2 or len(self.models) < 1:
            raise ValueError("a scenario needs at least 2 languages and 1 model")
        if self.reference_language not in self.languages:
            raise ValueError(f"reference {self.reference_language!r} not among languages")
        missing = [(lang, m) for lang in self.languages for m in self.models
                   if (lang, m) not in probs]
        if missing:
            raise ValueError(f"scenario lacks probabilities for cells {missing}")
        if self.n_per_cell < 1:
            raise ValueError("n_per_cell must be >= 1")

    def cells(self) -> list[tuple[str, str]]:
        return [(lang, m) for lang in self.languages for m in self.models]


def _cell_key(language: str, model: str) -> int:
    digest = hashlib.blake2b(f"{language}\x1f{model}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def _cell_rng(seed, language, model) -> np.random.Generator:
    entropy = list(seed) if isinstance(seed, (list, tuple)) else seed
    ss = np.random.SeedSequence(entropy, spawn_key=(_cell_key(language, model),))
    return np.random.Generator(np.random.PCG64(ss))


def generate(scenario: ScenarioSpec, seed) -> list[AnalysisRow]:
    """Bernoulli outcomes, cell-major (languages outer, models inner), then draw index.

    ``seed`` is an int or a tuple of ints.
    """
    rows = []
    for lang, model in scenario.cells():
        p = scenario.cell_probs[(lang, model)]
        draws = _cell_rng(seed, lang, model).random(scenario.n_per_cell) < p
        rows.extend(AnalysisRow(outcome=bool(v), language_code=lang, model_id=model)
                    for v in draws)
    return rows


def _fit_scenario(scenario, rows, fit_options):
    design = build_design(rows, scenario.reference_language, scenario.languages,
                          scenario.models)
    return fit(design, fit_options)


@dataclass(frozen=True)
class CellRecovery:
    language: str
    model: str
    truth: float
    mean_estimate: float
    bias: float
    rmse: float
    coverage: float
    within_tolerance: float
    n_reps: int


@dataclass(frozen=True)
class RecoveryReport:
    cells: list[CellRecovery]
    reps: int
    n_failed: int
    tolerance: float
    level: float

    def cell(self, language, model) -> CellRecovery:
        return next(c for c in self.cells if (c.language, c.model) == (language, model))

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["language", "model", "truth", "mean_estimate", "bias", "rmse",
                        "coverage", "within_tolerance", "n_reps", "n_failed"])
            for c in self.cells:
                w.writerow([c.language, c.model, c.truth, f"{c.mean_estimate:.6f}",
                            f"{c.bias:.6f}", f"{c.rmse:.6f}", f"{c.coverage:.4f}",
                            f"{c.within_tolerance:.4f}", c.n_reps, self.n_failed])


def monte_carlo_recovery(scenario: ScenarioSpec, reps: int, seed: int,
                         tolerance: float = 0.05, level: float = 0.95,
                         fit_options: FitOptions | None = None) -> RecoveryReport:
    """generate -> fit -> predicted cells, ``reps`` times.

    Reports per-cell bias, RMSE, CI coverage of the true probability, and the
    fraction of reps whose estimate lies within ``tolerance`` of the truth.
    Failed fits are counted in ``n_failed`` and skipped.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    fit_options = fit_options or FitOptions()
    cells = scenario.cells()
    est = {c: [] for c in cells}
    hit = {c: [] for c in cells}
    failed = 0
    for rep in range(reps):
        rows = generate(scenario, (seed, rep))
        try:
            table = cell_table(_fit_scenario(scenario, rows, fit_options), level=level)
        except Exception:  # counted, not fatal
            failed += 1
            continue
        for c in cells:
            ce = table[c]
            est[c].append(ce.prob)
            hit[c].append(ce.ci_lo <= scenario.cell_probs[c] <= ce.ci_hi)
    out = []
    for lang, model in cells:
        truth = scenario.cell_probs[(lang, model)]
        e = np.array(est[(lang, model)])
        n_ok = len(e)
        if n_ok:
            err = e - truth
            out.append(CellRecovery(lang, model, truth, float(e.mean()), float(err.mean()),
                                    float(np.sqrt(np.mean(err ** 2))),
                                    float(np.mean(hit[(lang, model)])),
                                    float(np.mean(np.abs(err) <= tolerance)), n_ok))
        else:
            out.append(CellRecovery(lang, model, truth, math.nan, math.nan, math.nan,
                                    math.nan, math.nan, 0))
    return RecoveryReport(cells=out, reps=reps, n_failed=failed, tolerance=tolerance,
                          level=level)


@dataclass(frozen=True)
class PowerPoint:
    delta: float
    detection_rate: float
    n_reps: int
    n_failed: int


def power_curve(base_scenario: ScenarioSpec, effect_grid: Sequence[float], reps: int,
                seed: int, language_a: str, language_b: str, model: str | None = None,
                shift_models: Sequence[str] | None = None, level: float = 0.95,
                fit_options: FitOptions | None = None) -> list[PowerPoint]:
    """Rate at which the training-bias CI for ``language_b`` vs ``language_a``
    in ``model`` excludes zero, as ``language_b``'s probability is raised by each
    delta.

    The shift applies to ``language_b`` in every model in ``shift_models``
    (default: all models), i.e. a training bias common to all versions.
    """
    model = model or base_scenario.models[0]
    shift_models = tuple(shift_models or base_scenario.models)
    fit_options = fit_options or FitOptions()
    out = []
    for k, delta in enumerate(effect_grid):
        probs = dict(base_scenario.cell_probs)
        for m in shift_models:
            p = probs[(language_b, m)] + delta
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"delta {delta} moves cell ({language_b}, {m}) outside [0, 1]")
            probs[(language_b, m)] = p
        scen = replace(base_scenario, cell_probs=probs)
        detected, failed = 0, 0
        for rep in range(reps):
            rows = generate(scen, (seed, k, rep))
            try:
                table = cell_table(_fit_scenario(scen, rows, fit_options), level=level)
            except Exception:  # counted, not fatal
                failed += 1
                continue
            detected += training_bias(table, language_a, language_b, model).excludes_zero
        n_ok = reps - failed
        out.append(PowerPoint(delta=float(delta),
                              detection_rate=detected / n_ok if n_ok else math.nan,
                              n_reps=n_ok, n_failed=failed))
    return out


def write_power_csv(path, points) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["delta", "detection_rate", "n_reps", "n_failed"])
        for pt in points:
            w.writerow([pt.delta, f"{pt.detection_rate:.4f}", pt.n_reps, pt.n_failed])


def load_scenario(path) -> ScenarioSpec:
    """Read a scenario file: a study config JSON plus ``cell_probs``.

    ``cell_probs`` maps language code to ``{model_id: probability}``.
    ``samples_per_cell`` gives ``n_per_cell``.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "cell_probs" not in doc:
        raise ConfigError(f"{path}: scenario needs a 'cell_probs' object")
    raw = doc.pop("cell_probs")
    config = parse_study_config(doc)
    probs = {}
    for lang in config.language_codes:
        for m in config.models:
            try:
                probs[(lang, m)] = float(raw[lang][m])
            except (KeyError, TypeError):
                raise ConfigError(f"{path}: cell_probs lacks ({lang}, {m})") from None
    return ScenarioSpec(cell_probs=probs, n_per_cell=config.samples_per_cell,
                        reference_language=config.reference_language,
                        languages=tuple(config.language_codes), models=tuple(config.models))
