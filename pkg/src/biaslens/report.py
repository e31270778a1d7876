"""Serialized fit artifacts, the Markdown audit report and its CSV/SVG sidecars.

The report is rendered only from the fit JSON, so it is a pure function of
that file: the same file always gives the same bytes. The fit timestamp
appears in the single header comment line.
"""

from __future__ import annotations

import csv
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping
from xml.sax.saxutils import escape

from .glmm import BOUNDARY_SD, FitResult, random_effect_table, wald_inference, wald_row
from .inference import (CellEstimate, CellTable, all_contrasts, cell_table,
                        empirical_cell_table, write_contrasts_csv)
from .labeling import holsti, labels_by_coder, reliability_by_cell
from .study_config import StudyConfig

__all__ = [
    "FIGURE_HEADER",
    "STARS_NOTE",
    "STARS_INTERPRETATION",
    "fit_document",
    "write_fit_json",
    "load_fit_json",
    "reliability_section",
    "cells_from_document",
    "emit_figure_data",
    "render_svg",
    "render_report",
    "write_report",
]

FIGURE_HEADER = ("language", "model", "prob", "ci_lo", "ci_hi")
STARS_NOTE = "Note: ** p = 0.001, * p = 0.01, + p = 0.05"
STARS_INTERPRETATION = ("Stars mark two-sided Wald p-values below each threshold: "
                        "** p < 0.001, * p < 0.01, + p < 0.05.")

LANGUAGE_NAMES = {"en": "English", "sv": "Swedish", "pl": "Polish", "ca": "Catalan",
                  "es": "Spanish", "de": "German", "fr": "French", "it": "Italian"}


def _lang_label(code: str) -> str:
    name = LANGUAGE_NAMES.get(code)
    return f"{name} ({code})" if name else code


def _finite(v: float):
    return float(v) if math.isfinite(v) else None


# ---------------------------------------------------------------------------
# Reliability
# ---------------------------------------------------------------------------

def reliability_section(labels, responses, coders: tuple[str, str] | None = None):
    """Overall and per-cell Holsti between two coders, or None if fewer than two coded.

    Without ``coders`` the two coders with the most labels are compared
    (ties broken by id); the first is the one with more labels.
    """
    by_coder = labels_by_coder(labels)
    if coders is None:
        if len(by_coder) < 2:
            return None
        ranked = sorted(by_coder, key=lambda c: (-len(by_coder[c]), c))
        coders = (ranked[0], ranked[1])
    a_id, b_id = coders
    for c in coders:
        if c not in by_coder:
            raise KeyError(f"coder {c!r} has no labels")
    a, b = by_coder[a_id], by_coder[b_id]
    responses = list(responses)
    cell_of = {r.record_id: (r.language_code, r.model_id) for r in responses}
    shared = a.keys() & b.keys()
    per_cell = reliability_by_cell(a, b, responses)
    counts = {}
    for k in shared:
        if k in cell_of:
            counts[cell_of[k]] = counts.get(cell_of[k], 0) + 1
    return {
        "coder_a": a_id,
        "coder_b": b_id,
        "n_shared": len(shared),
        "holsti": holsti(a, b),
        "cells": [{"language": lang, "model": m, "n_shared": counts[(lang, m)], "holsti": h}
                  for (lang, m), h in per_cell.items()],
    }


# ---------------------------------------------------------------------------
# Fit document
# ---------------------------------------------------------------------------

def fit_document(fit: FitResult, config: StudyConfig, rows, reliability=None,
                 created_at: str | None = None, level: float = 0.95) -> dict[str, Any]:
    """Everything the report needs, as plain JSON-ready data."""
    d = fit.design
    cells = cell_table(fit, config, level=level)
    emp = empirical_cell_table(rows)
    re_rows = random_effect_table(fit)
    cell_docs = []
    for key in cells:
        c = cells[key]
        e = emp.get(key)
        cell_docs.append({
            "language": c.language, "model": c.model, "eta": c.eta, "se_eta": c.se_eta,
            "prob": c.prob, "ci_lo": c.ci_lo, "ci_hi": c.ci_hi,
            "empirical_n": e.n if e else 0,
            "empirical_positives": e.positives if e else 0,
            "empirical_fraction": e.fraction if e else None,
        })
    return {
        "study_id": config.study_id,
        "issue": config.issue,
        "positive_class": config.positive_class,
        "created_at": created_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "reference": d.reference,
        "languages": list(d.languages),
        "prompts": {lang: config.prompt(lang) for lang in d.languages},
        "models": list(d.models),
        "n_obs": d.n,
        "coefficients": [
            {"name": c.name, "estimate": c.estimate, "se": c.se, "z": _finite(c.z),
             "p": c.p, "stars": c.stars} for c in wald_inference(fit)],
        "random_effects": [
            {"model": r.model, "name": r.name, "mode": r.mode, "se": r.se, "total": r.total}
            for r in re_rows],
        "theta": {name: float(t) for name, t in zip(d.random_names, fit.theta)},
        "loglik": fit.loglik,
        "convergence": {"converged": fit.converged, "n_iter": fit.n_iter,
                        "gradient_norm": fit.gradient_norm},
        "warnings": list(fit.warnings),
        "level": level,
        "cells": cell_docs,
        "cell_eta_cov": cells.eta_cov.tolist(),
        "reliability": reliability,
    }


def write_fit_json(path, doc: Mapping[str, Any]) -> None:
    Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=2) + "\n",
                          encoding="utf-8")


def load_fit_json(path) -> dict[str, Any]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("study_id", "coefficients", "random_effects", "cells", "cell_eta_cov"):
        if key not in doc:
            raise ValueError(f"{path}: not a fit document (missing {key!r})")
    return doc


def cells_from_document(doc: Mapping[str, Any]) -> CellTable:
    cells = [CellEstimate(language=c["language"], model=c["model"], eta=c["eta"],
                          se_eta=c["se_eta"], prob=c["prob"], ci_lo=c["ci_lo"],
                          ci_hi=c["ci_hi"]) for c in doc["cells"]]
    return CellTable(cells, eta_cov=doc["cell_eta_cov"], level=doc.get("level", 0.95))


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------

def _get(cell, name):
    return cell[name] if isinstance(cell, Mapping) else getattr(cell, name)


def emit_figure_data(cells: Iterable, csv_path, svg_path=None, reference: str | None = None):
    """Write ``language,model,prob,ci_lo,ci_hi`` rows, and optionally the SVG chart."""
    cells = list(cells)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIGURE_HEADER)
        for c in cells:
            w.writerow([_get(c, "language"), _get(c, "model")]
                       + [f"{float(_get(c, k)):.6f}" for k in ("prob", "ci_lo", "ci_hi")])
    if svg_path is not None:
        Path(svg_path).write_text(render_svg(cells, reference=reference), encoding="utf-8")


PANEL_W, PANEL_H = 260, 220
MARGIN_L, MARGIN_T, MARGIN_B = 50, 40, 50


def _y(prob: float) -> float:
    return MARGIN_T + (1.0 - prob) * PANEL_H


def render_svg(cells: Iterable, reference: str | None = None) -> str:
    """Point-range chart, models on the x-axis, probability on the y-axis.

    With a ``reference`` language there is one panel per other language, each
    drawn beside the reference. Otherwise every language gets its own panel.
    Each point carries ``data-language``, ``data-model`` and ``data-prob``.
    """
    cells = list(cells)
    langs = list(dict.fromkeys(_get(c, "language") for c in cells))
    models = list(dict.fromkeys(_get(c, "model") for c in cells))
    if reference in langs and len(langs) > 1:
        panels = [[reference, lang] for lang in langs if lang != reference]
    else:
        panels = [[lang] for lang in langs]
    by_key = {(_get(c, "language"), _get(c, "model")): c for c in cells}
    width = MARGIN_L + len(panels) * (PANEL_W + MARGIN_L)
    height = MARGIN_T + PANEL_H + MARGIN_B
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">']
    for pi, panel in enumerate(panels):
        x0 = MARGIN_L + pi * (PANEL_W + MARGIN_L)
        title = " vs ".join(LANGUAGE_NAMES.get(lang, lang) for lang in reversed(panel))
        out.append(f'<g class="panel" data-panel="{pi}">')
        out.append(f'<rect x="{x0}" y="{MARGIN_T}" width="{PANEL_W}" height="{PANEL_H}" '
                   'fill="none" stroke="#999"/>')
        out.append(f'<text x="{x0 + PANEL_W / 2}" y="{MARGIN_T - 12}" '
                   f'text-anchor="middle">{escape(title)}</text>')
        for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
            out.append(f'<text x="{x0 - 6}" y="{_y(tick) + 4:.2f}" '
                       f'text-anchor="end">{tick:.2f}</text>')
        step = PANEL_W / (len(models) + 1)
        for mi, m in enumerate(models):
            out.append(f'<text x="{x0 + (mi + 1) * step:.2f}" y="{MARGIN_T + PANEL_H + 16}" '
                       f'text-anchor="middle">{escape(m)}</text>')
        for li, lang in enumerate(panel):
            off = (li - (len(panel) - 1) / 2) * 14
            for mi, m in enumerate(models):
                c = by_key.get((lang, m))
                if c is None:
                    continue
                cx = x0 + (mi + 1) * step + off
                p, lo, hi = (float(_get(c, k)) for k in ("prob", "ci_lo", "ci_hi"))
                col = colors[li % len(colors)]
                out.append(f'<line x1="{cx:.2f}" x2="{cx:.2f}" y1="{_y(hi):.4f}" '
                           f'y2="{_y(lo):.4f}" stroke="{col}"/>')
                out.append(f'<circle cx="{cx:.2f}" cy="{_y(p):.4f}" r="3.5" fill="{col}" '
                           f'data-language="{escape(lang)}" data-model="{escape(m)}" '
                           f'data-prob="{p:.6f}"/>')
        for li, lang in enumerate(panel):
            out.append(f'<text x="{x0 + 8}" y="{MARGIN_T + 14 + 13 * li}" '
                       f'fill="{colors[li % len(colors)]}">'
                       f'{escape(LANGUAGE_NAMES.get(lang, lang))}</text>')
        out.append("</g>")
    out.append(f'<g class="yscale" data-top="{MARGIN_T}" data-height="{PANEL_H}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Markdown
# ---------------------------------------------------------------------------

def _num(v, digits=3) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    return f"{v:.{digits}f}"


def _est(est, se, stars) -> str:
    return f"{_num(est)}{stars} ({_num(se)})"


def _md_table(header, rows) -> list[str]:
    lines = ["| " + " | ".join(header) + " |",
             "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(x) for x in r) + " |" for r in rows]
    return lines


def _term_label(name: str) -> str:
    if name.startswith("language[") and name.endswith("]"):
        return _lang_label(name[len("language["):-1])
    return name


def render_report(doc: Mapping[str, Any]) -> str:
    """Markdown audit report for one fit document."""
    sid = doc["study_id"]
    models = doc["models"]
    ref = doc["reference"]
    lines = [f"<!-- source: {sid}.fit.json; fitted {doc['created_at']} -->",
             f"# Bias audit: {doc['issue']} ({sid})", ""]

    lines += ["## Study", "",
              f"- Outcome (1): {doc['positive_class']}",
              f"- Reference language: {_lang_label(ref)}",
              f"- Model versions (groups): {', '.join(models)}",
              f"- Observations: {doc['n_obs']}", ""]
    lines += _md_table(["Language", "Prompt"],
                       [[_lang_label(lang), doc["prompts"][lang]] for lang in doc["languages"]])
    lines.append("")

    lines += ["## Intercoder reliability", ""]
    rel = doc.get("reliability")
    if rel:
        lines += [f"Holsti agreement between `{rel['coder_a']}` and `{rel['coder_b']}` on "
                  f"{rel['n_shared']} double-coded responses: {rel['holsti']:.3f}", ""]
        lines += _md_table(["Language", "Model", "Shared items", "Holsti"],
                           [[_lang_label(c["language"]), c["model"], c["n_shared"],
                             f"{c['holsti']:.3f}"] for c in rel["cells"]])
    else:
        lines.append("No double-coded labels supplied.")
    lines.append("")

    # coefficient table: FE column then one RE column per model; intercept last
    lines += ["## Multilevel model", ""]
    coefs = {c["name"]: c for c in doc["coefficients"]}
    res = {(r["model"], r["name"]): r for r in doc["random_effects"]}
    names = [n for n in coefs if n != "Intercept"] + ["Intercept"]
    rows = []
    for name in names:
        c = coefs[name]
        row = [_term_label(name), _est(c["estimate"], c["se"], c["stars"])]
        for m in models:
            r = res.get((m, name))
            if r is None:
                row.append("")
            elif doc["theta"].get(name, 1.0) <= BOUNDARY_SD:
                row.append("0 (SD at boundary)")
            else:
                w = wald_row(name, r["mode"], r["se"])
                row.append(_est(r["mode"], r["se"], w.stars))
        rows.append(row)
    rows.append(["SD of random effect", ""] + [""] * len(models))
    for name, sd in doc["theta"].items():
        rows.append([f"  {_term_label(name)}", _num(sd)] + [""] * len(models))
    rows.append(["Observations", str(doc["n_obs"])] + [""] * len(models))
    rows.append(["LogLik", _num(doc["loglik"])] + [""] * len(models))
    lines += _md_table(["", "FE"] + [f"RE {m}" for m in models], rows)
    lines += ["", STARS_NOTE, "", STARS_INTERPRETATION,
              "RE columns show each model version's posterior mode (conditional SE).", ""]

    lines += ["### Fixed plus random effect, by model version", ""]
    lines += _md_table(["Term"] + models,
                       [[_term_label(n)] + [_num(res[(m, n)]["total"]) if (m, n) in res else ""
                                            for m in models]
                        for n in names if any((m, n) in res for m in models)])
    lines.append("")
    conv = doc["convergence"]
    lines += [f"Converged: {'yes' if conv['converged'] else 'no'} "
              f"({conv['n_iter']} iterations, projected gradient norm "
              f"{conv['gradient_norm']:.2e}).", ""]

    lines += ["## Predicted probabilities", ""]
    level_pct = f"{100 * doc.get('level', 0.95):g}%"
    lines += _md_table(
        ["Language", "Model", "Predicted", f"{level_pct} CI", "Empirical", "n",
         "Model minus empirical"],
        [[_lang_label(c["language"]), c["model"], _num(c["prob"]),
          f"[{_num(c['ci_lo'])}, {_num(c['ci_hi'])}]",
          _num(c["empirical_fraction"]), c["empirical_n"],
          _num(c["prob"] - c["empirical_fraction"], 4)
          if c["empirical_fraction"] is not None else "NA"]
         for c in doc["cells"]])
    lines.append("")

    lines += ["## Bias decomposition", "",
              "Training bias compares languages within a model version against the "
              f"reference ({_lang_label(ref)}). Algorithmic bias compares one "
              "language across consecutive model versions.", ""]
    contrasts = all_contrasts(cells_from_document(doc), ref, doc["languages"], models)
    crow = []
    for c in contrasts:
        if c.kind == "training":
            what = f"{_lang_label(c.cell_b[0])} vs {_lang_label(c.cell_a[0])}, {c.cell_a[1]}"
        else:
            what = f"{_lang_label(c.cell_a[0])}, {c.cell_a[1]} to {c.cell_b[1]}"
        rel_pct = f"{c.rel_pct:+.1f}%" if c.rel_defined else "undefined"
        crow.append([c.kind, what, _num(c.prob_a), _num(c.prob_b), f"{c.abs_diff:+.3f}",
                     rel_pct, f"[{c.ci[0]:+.3f}, {c.ci[1]:+.3f}]"])
    lines += _md_table(["Kind", "Comparison", "Baseline", "Compared", "Difference",
                        "Relative", f"{level_pct} CI"], crow)
    lines.append("")

    lines += ["## Warnings", ""]
    if doc["warnings"]:
        lines += [f"- {w}" for w in doc["warnings"]]
    else:
        lines.append("None.")
    lines.append("")
    return "\n".join(lines)


def write_report(doc: Mapping[str, Any], out_dir, svg: bool = True) -> dict[str, Path]:
    """Write ``<study>.report.md``, ``<study>.figure.csv``, ``<study>.contrasts.csv``
    and (optionally) ``<study>.figure.svg`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sid = doc["study_id"]
    paths = {"report": out / f"{sid}.report.md", "figure": out / f"{sid}.figure.csv",
             "contrasts": out / f"{sid}.contrasts.csv"}
    if svg:
        paths["svg"] = out / f"{sid}.figure.svg"
    paths["report"].write_text(render_report(doc), encoding="utf-8")
    emit_figure_data(doc["cells"], paths["figure"], paths.get("svg"), reference=doc["reference"])
    write_contrasts_csv(paths["contrasts"],
                        all_contrasts(cells_from_document(doc), doc["reference"],
                                      doc["languages"], doc["models"]))
    return paths
