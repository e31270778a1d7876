"""Human labels: CSV I/O, Holsti intercoder reliability, and the analysis dataset."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "LabelRecord",
    "AnalysisRow",
    "LabelError",
    "MergePolicy",
    "holsti",
    "reliability_by_cell",
    "sample_for_double_coding",
    "merged_dataset",
    "read_labels",
    "write_labels",
    "labels_by_coder",
    "LABEL_HEADER",
]

LABEL_HEADER = ("response_record_id", "coder_id", "value")


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class LabelRecord:
    response_record_id: str
    coder_id: str
    value: bool


@dataclass(frozen=True)
class AnalysisRow:
    outcome: bool
    language_code: str
    model_id: str


def _as_mapping(labels) -> dict[str, bool]:
    if isinstance(labels, Mapping):
        return {str(k): bool(v) for k, v in labels.items()}
    out = {}
    for rec in labels:
        if rec.response_record_id in out:
            raise LabelError(f"item {rec.response_record_id!r} labeled twice by one coder")
        out[rec.response_record_id] = bool(rec.value)
    return out


def holsti(labels_a, labels_b) -> float:
    """Holsti agreement ``2M / (N_a + N_b)`` over the items both coders labeled.

    Parameters
    ----------
    labels_a, labels_b : mapping of item id -> bool, or iterable of LabelRecord
        One coder each.

    Raises
    ------
    LabelError
        If the coders share no items.
    """
    a, b = _as_mapping(labels_a), _as_mapping(labels_b)
    shared = a.keys() & b.keys()
    if not shared:
        raise LabelError("the two coders share no labeled items")
    agree = sum(a[k] == b[k] for k in shared)
    n = len(shared)
    return 2 * agree / (n + n)


def reliability_by_cell(labels_a, labels_b, responses) -> dict[tuple[str, str], float]:
    """Holsti per (language, model) cell; cells without shared items are omitted."""
    a, b = _as_mapping(labels_a), _as_mapping(labels_b)
    cell_of = {r.record_id: (r.language_code, r.model_id) for r in responses}
    by_cell = defaultdict(list)
    for k in a.keys() & b.keys():
        if k in cell_of:
            by_cell[cell_of[k]].append(k)
    return {cell: holsti({k: a[k] for k in ids}, {k: b[k] for k in ids})
            for cell, ids in sorted(by_cell.items())}


def sample_for_double_coding(responses, fraction: float, seed: int) -> list[str]:
    """Seeded, cell-stratified random subset of ``round(fraction * N)`` response ids.

    Cell quotas use largest-remainder allocation so they sum to the total.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    by_cell = defaultdict(list)
    for r in responses:
        by_cell[(r.language_code, r.model_id)].append(r.record_id)
    cells = sorted(by_cell)
    sizes = np.array([len(by_cell[c]) for c in cells])
    total = int(round(fraction * sizes.sum()))
    exact = fraction * sizes
    quota = np.floor(exact).astype(int)
    short = total - quota.sum()
    if short > 0:
        order = sorted(range(len(cells)), key=lambda i: (-(exact[i] - quota[i]), i))
        for i in order[:short]:
            quota[i] += 1
    rng = np.random.Generator(np.random.PCG64(seed))
    picked = []
    for cell, k in zip(cells, quota):
        ids = sorted(by_cell[cell])
        idx = rng.choice(len(ids), size=min(k, len(ids)), replace=False)
        picked.extend(ids[i] for i in sorted(idx))
    return picked


@dataclass(frozen=True)
class MergePolicy:
    """Which label becomes the outcome when a response has several.

    An adjudicated value wins, then the primary coder, then the remaining
    coders in sorted ``coder_id`` order.
    """

    primary_coder: str | None = None
    adjudication: Mapping[str, bool] | None = None


def merged_dataset(responses, labels: Iterable[LabelRecord],
                   policy: MergePolicy | None = None) -> list[AnalysisRow]:
    """One :class:`AnalysisRow` per response, in response order."""
    policy = policy or MergePolicy()
    by_item = defaultdict(dict)
    for rec in labels:
        coders = by_item[rec.response_record_id]
        if rec.coder_id in coders:
            raise LabelError(f"duplicate label for ({rec.response_record_id}, {rec.coder_id})")
        coders[rec.coder_id] = bool(rec.value)
    responses = list(responses)
    known = {r.record_id for r in responses}
    stray = sorted(set(by_item) - known)
    if stray:
        raise LabelError(f"labels reference unknown response ids: {', '.join(stray)}")
    adjud = policy.adjudication or {}
    missing = [r.record_id for r in responses
               if r.record_id not in by_item and r.record_id not in adjud]
    if missing:
        raise LabelError(f"{len(missing)} unlabeled response(s): {', '.join(missing)}")
    rows = []
    for r in responses:
        if r.record_id in adjud:
            value = bool(adjud[r.record_id])
        else:
            coders = by_item[r.record_id]
            if policy.primary_coder in coders:
                value = coders[policy.primary_coder]
            else:
                value = coders[min(coders)]
        rows.append(AnalysisRow(outcome=value, language_code=r.language_code,
                                model_id=r.model_id))
    return rows


def labels_by_coder(labels: Iterable[LabelRecord]) -> dict[str, dict[str, bool]]:
    out = defaultdict(dict)
    for rec in labels:
        out[rec.coder_id][rec.response_record_id] = bool(rec.value)
    return dict(out)


def read_labels(path) -> list[LabelRecord]:
    """Parse a label CSV with header ``response_record_id,coder_id,value``.

    Rows with an empty ``value`` (an unfilled template) are skipped.
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != LABEL_HEADER:
        raise LabelError(f"{path}: expected header {','.join(LABEL_HEADER)}")
    out = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        raw = (row["value"] or "").strip()
        if raw == "":
            continue
        if raw not in ("0", "1"):
            raise LabelError(f"{path}:{lineno}: value must be 0 or 1, got {raw!r}")
        key = (row["response_record_id"], row["coder_id"])
        if key in seen:
            raise LabelError(f"{path}:{lineno}: duplicate label for {key}")
        seen.add(key)
        out.append(LabelRecord(response_record_id=row["response_record_id"],
                               coder_id=row["coder_id"], value=raw == "1"))
    return out


def write_labels(path, rows) -> None:
    """Write label rows; ``value`` may be ``None`` for a blank template entry."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_HEADER)
        for rid, coder, value in rows:
            w.writerow([rid, coder, "" if value is None else int(bool(value))])
