"""Confusion matrices, per-class P/R/F1, macro/weighted averages and result tables."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, UsageError
from .model import HeadParams, HeadSpec, head_forward, predict_labels

log = logging.getLogger(__name__)

LANGUAGES = ("en", "fr")
# table column order: the headline pair first, then the extra pairs
PAIR_ORDER = ("en→fr", "en→en", "fr→en", "fr→fr")
FORMATS = ("text", "json", "markdown")


def language_pair(train_lang: str, test_lang: str) -> str:
    return f"{train_lang}→{test_lang}"


def split_pair(pair: str) -> tuple[str, str]:
    src, _, dst = pair.partition("→")
    return src, dst


def pair_header(pair: str) -> str:
    return "-".join(part.upper() for part in split_pair(pair))


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 counts, rows = gold class, columns = predicted class."""

    counts: tuple = ((0, 0), (0, 0))

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def to_list(self) -> list:
        return [list(row) for row in self.counts]


@dataclass(frozen=True)
class ClassMetrics:
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple
    degenerate: tuple = ()

    def to_dict(self) -> dict:
        return {
            str(c): {
                "precision": self.precision[c],
                "recall": self.recall[c],
                "f1": self.f1[c],
                "support": self.support[c],
            }
            for c in range(2)
        }


@dataclass(frozen=True)
class EvalReport:
    confusion: ConfusionMatrix
    metrics: ClassMetrics
    macro_avg_f1: float
    weighted_avg_f1: float
    accuracy: float
    language_pair: str
    run_id: str = ""
    backbone_id: str = ""
    cell_label: str = ""
    predictions: tuple = ()
    sample_ids: tuple = ()

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "language_pair": self.language_pair,
            "backbone_id": self.backbone_id,
            "cell_label": self.cell_label,
            "confusion": self.confusion.to_list(),
            "per_class": self.metrics.to_dict(),
            "degenerate": list(self.metrics.degenerate),
            "macro_avg_f1": self.macro_avg_f1,
            "weighted_avg_f1": self.weighted_avg_f1,
            "accuracy": self.accuracy,
            "n_samples": self.confusion.total,
            "predictions": list(self.predictions),
            "sample_ids": list(self.sample_ids),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        per = d["per_class"]
        metrics = ClassMetrics(
            tuple(per[str(c)]["precision"] for c in range(2)),
            tuple(per[str(c)]["recall"] for c in range(2)),
            tuple(per[str(c)]["f1"] for c in range(2)),
            tuple(per[str(c)]["support"] for c in range(2)),
            tuple(d.get("degenerate", ())),
        )
        return cls(
            ConfusionMatrix(tuple(tuple(row) for row in d["confusion"])),
            metrics,
            d["macro_avg_f1"],
            d["weighted_avg_f1"],
            d["accuracy"],
            d["language_pair"],
            d.get("run_id", ""),
            d.get("backbone_id", ""),
            d.get("cell_label", ""),
            tuple(d.get("predictions", ())),
            tuple(d.get("sample_ids", ())),
        )


def confusion(gold: Sequence[int], pred: Sequence[int]) -> ConfusionMatrix:
    gold = np.asarray(gold, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gold.shape != pred.shape:
        raise DataError(f"{len(gold)} gold labels but {len(pred)} predictions")
    if gold.size == 0:
        raise DataError("cannot build a confusion matrix from zero samples")
    if not (np.isin(gold, (0, 1)).all() and np.isin(pred, (0, 1)).all()):
        raise DataError("labels must be 0 or 1")
    counts = np.bincount(gold * 2 + pred, minlength=4).reshape(2, 2)
    return ConfusionMatrix(tuple(tuple(int(v) for v in row) for row in counts))


def class_metrics(cm: ConfusionMatrix) -> ClassMetrics:
    """Per-class precision, recall and F1. Zero denominators give 0 and a flag."""
    c = cm.counts
    precision, recall, f1, support, flags = [], [], [], [], []
    for k in range(2):
        tp = c[k][k]
        col = c[0][k] + c[1][k]
        row = c[k][0] + c[k][1]
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        if not col:
            flags.append(f"precision_undefined_class_{k}")
        if not row:
            flags.append(f"recall_undefined_class_{k}")
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        precision.append(p)
        recall.append(r)
        f1.append(f)
        support.append(row)
    return ClassMetrics(tuple(precision), tuple(recall), tuple(f1), tuple(support), tuple(flags))


def macro_avg(metrics: ClassMetrics) -> float:
    if sum(metrics.support) == 0:
        raise DataError("macro average undefined: no support")
    return (metrics.f1[0] + metrics.f1[1]) / 2


def weighted_avg(metrics: ClassMetrics) -> float:
    total = sum(metrics.support)
    if total == 0:
        raise DataError("weighted average undefined: no support")
    return (metrics.support[0] * metrics.f1[0] + metrics.support[1] * metrics.f1[1]) / total


def report_from_predictions(
    gold: Sequence[int], pred: Sequence[int], language_pair: str, run_id: str = "", **extra
) -> EvalReport:
    cm = confusion(gold, pred)
    m = class_metrics(cm)
    acc = (cm.counts[0][0] + cm.counts[1][1]) / cm.total
    return EvalReport(
        cm, m, macro_avg(m), weighted_avg(m), acc, language_pair, run_id,
        predictions=tuple(int(p) for p in pred), **extra,
    )


def evaluate(
    params: HeadParams,
    spec: HeadSpec,
    features,
    gold: Sequence[int],
    language_pair: str,
    run_id: str = "",
    sample_ids: Sequence[str] = (),
    backbone_id: str = "",
    cell_label: str = "",
) -> EvalReport:
    rows = getattr(features, "rows", features)
    if sample_ids == () and hasattr(features, "sample_ids"):
        sample_ids = features.sample_ids
    if len(rows) != len(gold):
        raise DataError(f"{len(rows)} feature rows but {len(gold)} labels")
    probs, _ = head_forward(np.asarray(rows, dtype=np.float64), params, spec, "eval")
    pred = predict_labels(np.atleast_2d(probs))
    return report_from_predictions(
        gold, pred, language_pair, run_id,
        sample_ids=tuple(sample_ids), backbone_id=backbone_id, cell_label=cell_label,
    )


def cross_lingual_matrix(reports: Iterable[EvalReport]) -> dict:
    """Best report by macro F1 per (backbone, pair); ties go to the lower run_id."""
    groups: dict = {}
    for r in reports:
        if r.language_pair not in PAIR_ORDER:
            log.warning("ignoring report %s with pair %s", r.run_id, r.language_pair)
            continue
        groups.setdefault((r.backbone_id, r.language_pair), []).append(r)
    best = {key: min(rs, key=lambda r: (-r.macro_avg_f1, r.run_id)) for key, rs in groups.items()}
    for b in dict.fromkeys(b for b, _ in groups):
        for pair in PAIR_ORDER:
            if (b, pair) not in best:
                log.warning("no run for backbone %s on pair %s", b or "?", pair)
    return best


# --------------------------------------------------------------------------
# rendering


def round2(x: float) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _table(reports: Sequence[EvalReport]) -> tuple[str, list, list, dict]:
    """Pick the layout: one pair -> models x cells, several pairs -> models x pairs."""
    pairs = {r.language_pair for r in reports}
    if len(pairs) == 1:
        (pair,) = pairs
        cols = list(dict.fromkeys(r.cell_label or r.run_id for r in reports))
        rows = list(dict.fromkeys(r.backbone_id for r in reports))
        cells: dict = {}
        for r in reports:
            key = (r.backbone_id, r.cell_label or r.run_id)
            if key not in cells or r.macro_avg_f1 > cells[key].macro_avg_f1:
                cells[key] = r
        return f"Model ({pair_header(pair)})", rows, cols, cells
    best = cross_lingual_matrix(reports)
    rows = list(dict.fromkeys(b for b, _ in best))
    cols = [p for p in PAIR_ORDER if any(p == q for _, q in best)]
    return "Model", rows, cols, best


def _row_label(backbone: str, multi_pair: bool) -> str:
    return f"Best {backbone}" if multi_pair else backbone


def build_tables(reports: Sequence[EvalReport]) -> list[dict]:
    """Tables as plain data: one per metric, values at full precision."""
    if not reports:
        raise UsageError("no reports to render")
    corner, rows, cols, cells = _table(reports)
    multi = corner == "Model"
    tables = []
    for metric, title in (("macro_avg_f1", "macro avg."), ("weighted_avg_f1", "weighted avg.")):
        header = "Extra language pairs" if multi else "Epochs, Learning rates"
        tables.append(
            {
                "metric": metric,
                "title": f"{header} ({title})",
                "corner": corner,
                "columns": [pair_header(c) if multi else c for c in cols],
                "rows": [
                    {
                        "model": _row_label(b, multi),
                        "values": [getattr(cells[(b, c)], metric) if (b, c) in cells else None for c in cols],
                        "run_ids": [cells[(b, c)].run_id if (b, c) in cells else None for c in cols],
                    }
                    for b in rows
                ],
            }
        )
    return tables


def render_report(reports: Sequence[EvalReport], fmt: str = "text") -> str:
    if fmt not in FORMATS:
        raise UsageError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")
    tables = build_tables(reports)
    if fmt == "json":
        doc = {"tables": tables, "reports": [r.to_dict() for r in reports]}
        return json.dumps(doc, ensure_ascii=False, indent=1) + "\n"
    out = []
    for t in tables:
        head = [t["corner"], *t["columns"]]
        body = [[r["model"], *("-" if v is None else round2(v) for v in r["values"])] for r in t["rows"]]
        if fmt == "markdown":
            out.append(f"**{t['title']}**\n")
            out.append("| " + " | ".join(head) + " |")
            out.append("|" + "|".join(["---"] + ["---:"] * (len(head) - 1)) + "|")
            out.extend("| " + " | ".join(row) + " |" for row in body)
        else:
            widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
            out.append(t["title"])
            out.append("  ".join(h.ljust(w) for h, w in zip(head, widths)).rstrip())
            out.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in body)
        out.append("")
    return "\n".join(out)
