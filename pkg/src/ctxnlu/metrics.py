"""Micro/macro F1, the top-2 score over (utterance, conversation) label pairs, and evaluation reports."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence


def f1_scores(
    predictions: Sequence[Hashable], labels: Sequence[Hashable], num_classes: int | None = None
) -> tuple[float, float]:
    """(micro, macro) F1 for single-label predictions.

    Macro averages per-class F1 over every class that occurs in either the
    labels or the predictions; a class that is predicted but never true (or
    the reverse) contributes 0. ``num_classes`` only range-checks integer ids.
    """
    if len(predictions) != len(labels):
        raise ValueError(f"f1_scores: {len(predictions)} predictions for {len(labels)} labels")
    if len(labels) == 0:
        raise ValueError("f1_scores: empty input")
    if num_classes is not None:
        bad = [v for v in list(predictions) + list(labels) if not 0 <= int(v) < num_classes]
        if bad:
            raise ValueError(f"f1_scores: class id {bad[0]} outside [0, {num_classes})")
    per_class = per_class_scores(predictions, labels)
    micro = sum(p == y for p, y in zip(predictions, labels)) / len(labels)
    macro = sum(s["f1"] for s in per_class.values()) / len(per_class)
    return micro, macro


def per_class_scores(predictions, labels) -> dict:
    tp, fp, fn = Counter(), Counter(), Counter()
    for p, y in zip(predictions, labels):
        if p == y:
            tp[y] += 1
        else:
            fp[p] += 1
            fn[y] += 1
    out = {}
    for c in sorted(set(labels) | set(predictions), key=str):
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        rec = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        f1 = 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]) if tp[c] else 0.0
        out[c] = {"precision": prec, "recall": rec, "f1": f1, "support": tp[c] + fn[c], "tp": tp[c], "fp": fp[c], "fn": fn[c]}
    return out


def top2_score(y_u, y_c, pred_1, pred_2) -> float:
    """Joint score of a predicted intent pair against the utterance and conversation labels.

    Equal labels: 1 if either prediction hits it. Distinct labels: 1 if both
    predictions fall in {y_u, y_c}, 0.5 if one does, else 0. Membership is
    tested per prediction, so a repeated prediction inside the label set
    counts as both falling in it.
    """
    if y_u == y_c:
        return 1.0 if pred_1 == y_u or pred_2 == y_u else 0.0
    hit_1 = pred_1 in (y_u, y_c)
    hit_2 = pred_2 in (y_u, y_c)
    if hit_1 and hit_2:
        return 1.0
    if hit_1 or hit_2:
        return 0.5
    return 0.0


class CatalogMismatch(ValueError):
    pass


@dataclass
class HeadReport:
    micro_f1: float
    macro_f1: float
    per_intent: dict
    confusion: dict


@dataclass
class EvalReport:
    model: str
    n: int
    utterance: HeadReport
    conversation: HeadReport | None
    top2: float
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        def pct(x):
            return "-" if x is None else f"{100 * x:.2f}"

        conv = self.conversation
        return {
            "model": self.model,
            "utterance_micro_f1": pct(self.utterance.micro_f1),
            "utterance_macro_f1": pct(self.utterance.macro_f1),
            "conversation_micro_f1": pct(conv.micro_f1 if conv else None),
            "conversation_macro_f1": pct(conv.macro_f1 if conv else None),
            "top2_score": pct(self.top2),
        }

    def summary(self) -> dict:
        conv = self.conversation
        return {
            "utterance_micro_f1": self.utterance.micro_f1,
            "utterance_macro_f1": self.utterance.macro_f1,
            "conversation_micro_f1": None if conv is None else conv.micro_f1,
            "conversation_macro_f1": None if conv is None else conv.macro_f1,
            "top2": self.top2,
        }


def head_report(predictions, labels) -> HeadReport:
    micro, macro = f1_scores(predictions, labels)
    confusion: dict = {}
    for p, y in zip(predictions, labels):
        confusion.setdefault(y, Counter())[p] += 1
    return HeadReport(micro, macro, per_class_scores(predictions, labels), {k: dict(v) for k, v in confusion.items()})


def build_report(
    model_name: str,
    utt_pred: Sequence[str],
    conv_pred: Sequence[str] | None,
    pairs: Sequence[tuple[str, str]],
    y_u: Sequence[str],
    y_c: Sequence[str],
) -> EvalReport:
    utt = head_report(list(utt_pred), list(y_u))
    conv = None if conv_pred is None else head_report(list(conv_pred), list(y_c))
    scores = [top2_score(u, c, a, b) for u, c, (a, b) in zip(y_u, y_c, pairs)]
    return EvalReport(model_name, len(y_u), utt, conv, sum(scores) / len(scores))


TABLE_COLUMNS = [
    "model",
    "utterance_micro_f1",
    "utterance_macro_f1",
    "conversation_micro_f1",
    "conversation_macro_f1",
    "top2_score",
]


def comparison_csv(rows: Sequence[dict], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "-") for c in columns})
    return buf.getvalue()


def format_table(rows: Sequence[dict], columns: Sequence[str] = TABLE_COLUMNS) -> str:
    cells = [list(columns)] + [[str(r.get(c, "-")) for c in columns] for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(columns))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
