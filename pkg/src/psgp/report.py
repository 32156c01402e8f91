"""Per-subject risk report card.

One line per outcome: the subject's current score, the mean score of
disease-positive training subjects, the subject's percentile within that
positive group, and a status that reads "Above average" exactly when the
current score strictly exceeds the positive mean.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError, InsufficientClassError
from .signalio import Modality

STATUS_ABOVE = "Above average"
STATUS_BELOW = "At/Below average"

_HEADERS = ("Outcome", "Current", "Positive mean", "Percentile", "Status")


@dataclass(frozen=True)
class ReportRow:
    outcome: str
    current: float
    positive_mean: float
    percentile: float
    status: str


@dataclass(frozen=True)
class ReportCard:
    subject_id: str
    modality: Modality
    rows: tuple[ReportRow, ...]


def build_report_card(
    subject_id: str,
    modality: Modality,
    current_scores: Mapping[str, float],
    positive_scores: Mapping[str, Sequence[float]],
    outcomes: Sequence[str],
) -> ReportCard:
    rows = []
    for outcome in outcomes:
        if outcome not in current_scores:
            raise DataError(f"subject {subject_id!r} has no score for outcome {outcome!r}")
        positives = np.asarray(positive_scores.get(outcome, ()), dtype=np.float64)
        if positives.size == 0:
            raise InsufficientClassError(
                f"outcome {outcome!r} has no positive reference subjects"
            )
        current = float(current_scores[outcome])
        mean = float(positives.mean())
        percentile = 100.0 * float((positives <= current).sum()) / positives.size
        status = STATUS_ABOVE if current > mean else STATUS_BELOW
        rows.append(ReportRow(outcome, current, mean, percentile, status))
    return ReportCard(subject_id, modality, tuple(rows))


def render_report_card(card: ReportCard) -> str:
    """Fixed-width table; two spaces between columns, numbers right-aligned
    at two decimals. Identical cards render to identical strings."""
    name_w = max([len(_HEADERS[0])] + [len(r.outcome) for r in card.rows])
    widths = (name_w, 8, 13, 10, max(len(STATUS_ABOVE), len(STATUS_BELOW)))
    header = "  ".join(
        [_HEADERS[0].ljust(widths[0])]
        + [h.rjust(w) for h, w in zip(_HEADERS[1:4], widths[1:4])]
        + [_HEADERS[4].ljust(widths[4])]
    ).rstrip()
    lines = [header]
    for r in card.rows:
        lines.append(
            "  ".join(
                [
                    r.outcome.ljust(widths[0]),
                    f"{r.current:.2f}".rjust(widths[1]),
                    f"{r.positive_mean:.2f}".rjust(widths[2]),
                    f"{r.percentile:.1f}".rjust(widths[3]),
                    r.status,
                ]
            ).rstrip()
        )
    return "\n".join(lines) + "\n"


def report_card_csv(card: ReportCard) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["outcome", "current", "positive_mean", "percentile", "status"])
    for r in card.rows:
        writer.writerow(
            [r.outcome, f"{r.current:.6f}", f"{r.positive_mean:.6f}", f"{r.percentile:.1f}", r.status]
        )
    return buf.getvalue()
