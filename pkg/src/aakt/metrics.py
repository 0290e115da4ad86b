"""Overlap-aware evaluation metrics and positional analyses.

Predictions arrive as per-interaction records carrying a freshness flag so
overlapping evaluation windows never count the same interaction twice. AUC is
the Mann-Whitney statistic (ties at half weight), accuracy thresholds at 0.5
with ties predicting correct, and RMSE is the root mean squared gap between
probability and label. A slice with only one label class has no defined AUC
and is reported as absent rather than 0.5.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import StudentSequence
from .sequencing import (
    DEFAULT_TIME_CLIP,
    DEFAULT_TIME_FACTOR,
    Window,
    build_alternate_sequence,
    window_eval,
)


@dataclass(frozen=True)
class PredictionRecord:
    student_id: str
    interaction_index: int
    position_in_window: int  # question slot, 1-based, up to max_len / 2
    prob: float
    label: int
    fresh: bool = True


@dataclass
class MetricReport:
    auc: float | None
    acc: float
    rmse: float
    per_position_auc: list[float | None] = field(default_factory=list)
    smoothed_auc: list[float] = field(default_factory=list)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "acc": self.acc,
            "rmse": self.rmse,
            "per_position_auc": self.per_position_auc,
            "smoothed_auc": self.smoothed_auc,
            "counts": self.counts,
        }

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)


def _fresh_arrays(records: Iterable[PredictionRecord]) -> tuple[np.ndarray, np.ndarray]:
    pairs = [(r.label, r.prob) for r in records if r.fresh]
    if not pairs:
        return np.empty(0), np.empty(0)
    arr = np.asarray(pairs, dtype=np.float64)
    return arr[:, 0], arr[:, 1]


def auc(records: Iterable[PredictionRecord]) -> float | None:
    """Rank-based AUC over fresh records; None when only one class is present."""
    labels, probs = _fresh_arrays(records)
    return auc_from_arrays(labels, probs)


def auc_from_arrays(labels: np.ndarray, probs: np.ndarray) -> float | None:
    labels = np.asarray(labels, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(probs, kind="mergesort")
    sorted_probs = probs[order]
    sorted_labels = labels[order]
    # Average ranks within tie groups (1-based).
    ranks = np.empty(len(probs))
    i = 0
    while i < len(probs):
        j = i
        while j < len(probs) and sorted_probs[j] == sorted_probs[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j + 1)
        i = j
    rank_sum_pos = ranks[sorted_labels == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def acc(records: Iterable[PredictionRecord]) -> float:
    """Fraction of correct 0.5-threshold decisions; prob == 0.5 predicts 1."""
    labels, probs = _fresh_arrays(records)
    if len(labels) == 0:
        raise ValueError("acc needs at least one fresh record")
    return float(((probs >= 0.5) == (labels == 1)).mean())


def rmse(records: Iterable[PredictionRecord]) -> float:
    labels, probs = _fresh_arrays(records)
    if len(labels) == 0:
        raise ValueError("rmse needs at least one fresh record")
    return float(np.sqrt(np.mean((probs - labels) ** 2)))


def per_position_auc(records: Iterable[PredictionRecord], max_len: int) -> list[float | None]:
    """One AUC per question slot (1..max_len/2); absent slots give None.

    This mirrors transposing a batch to position-major order and scoring each
    position's prediction column on its own, which is how the positional
    profile of a windowed evaluation run is drawn.
    """
    n_slots = max_len // 2
    buckets: list[list[PredictionRecord]] = [[] for _ in range(n_slots)]
    for r in records:
        if r.fresh and 1 <= r.position_in_window <= n_slots:
            buckets[r.position_in_window - 1].append(r)
    return [auc(bucket) if bucket else None for bucket in buckets]


def smoothed_auc(
    series: Sequence[float], window_fraction: float = 0.2, window: int | None = None
) -> list[float]:
    """Moving average of a positional AUC series.

    The window defaults to ``window_fraction`` of the series length (at least
    1). A series shorter than the window collapses to its single mean.
    """
    values = [float(v) for v in series]
    if window is None:
        window = max(1, round(window_fraction * len(values)))
    if window < 1:
        raise ValueError("window length must be >= 1")
    if not values:
        return []
    if len(values) < window:
        return [float(np.mean(values))]
    csum = np.concatenate(([0.0], np.cumsum(values)))
    return list((csum[window:] - csum[:-window]) / window)


WindowScorer = Callable[[list[Window]], np.ndarray]


def collect_predictions(
    scorer: WindowScorer,
    sequences: list[StudentSequence],
    max_len: int,
    overlap_ratio: float,
    time_factor: float = DEFAULT_TIME_FACTOR,
    time_clip: float = DEFAULT_TIME_CLIP,
) -> list[PredictionRecord]:
    """Score every sequence through overlapping eval windows.

    Every covered question slot yields one record; the fresh flag marks the
    single window that owns each interaction. ``scorer`` maps a window list to
    an array of per-slot probabilities, shape (n_windows, max_len / 2).
    """
    windows: list[Window] = []
    labels: list[list[int]] = []
    for seq in sequences:
        tokens = build_alternate_sequence(seq, time_factor, time_clip)
        for w in window_eval(tokens, max_len, overlap_ratio, seq.student_id):
            windows.append(w)
            labels.append([tokens[w.start + 2 * s].label for s in range(w.n_valid_slots)])
    if not windows:
        return []
    probs = scorer(windows)
    records = []
    for w, lab, p in zip(windows, labels, probs):
        for slot in range(w.n_valid_slots):
            records.append(
                PredictionRecord(
                    student_id=w.student_id,
                    interaction_index=w.start // 2 + slot,
                    position_in_window=slot + 1,
                    prob=float(p[slot]),
                    label=lab[slot],
                    fresh=w.fresh_mask[slot],
                )
            )
    return records


def compute_report(
    records: list[PredictionRecord], max_len: int, smooth_fraction: float = 0.2
) -> MetricReport:
    fresh = [r for r in records if r.fresh]
    positional = per_position_auc(records, max_len)
    defined = [v for v in positional if v is not None]
    return MetricReport(
        auc=auc(fresh),
        acc=acc(fresh),
        rmse=rmse(fresh),
        per_position_auc=positional,
        smoothed_auc=smoothed_auc(defined, smooth_fraction) if defined else [],
        counts={
            "records": len(records),
            "fresh": len(fresh),
            "positives": sum(r.label == 1 for r in fresh),
            "negatives": sum(r.label == 0 for r in fresh),
        },
    )


def overlap_ratio_sweep(
    scorer: WindowScorer,
    sequences: list[StudentSequence],
    ratios: Sequence[float],
    max_len: int,
    time_factor: float = DEFAULT_TIME_FACTOR,
    time_clip: float = DEFAULT_TIME_CLIP,
) -> list[tuple[float, float | None]]:
    """Mean AUC over fresh records for each overlap ratio.

    Larger ratios leave every scored interaction more warm-up context, so the
    curve shows how much history the predictions need; each ratio must still
    give an even window step.
    """
    out = []
    for ratio in ratios:
        records = collect_predictions(scorer, sequences, max_len, ratio, time_factor, time_clip)
        out.append((float(ratio), auc(records)))
    return out


def metric_correlations(
    reports: Sequence[MetricReport],
) -> dict[tuple[str, str], float | None]:
    """Pairwise Pearson correlations between ACC, AUC, and RMSE across reports."""
    if len(reports) < 3:
        raise ValueError("need at least 3 reports to correlate metrics")
    cols = {
        "acc": np.array([r.acc for r in reports], dtype=np.float64),
        "auc": np.array([np.nan if r.auc is None else r.auc for r in reports], dtype=np.float64),
        "rmse": np.array([r.rmse for r in reports], dtype=np.float64),
    }

    def corr(a: np.ndarray, b: np.ndarray) -> float | None:
        if np.isnan(a).any() or np.isnan(b).any():
            return None
        if a.std() == 0 or b.std() == 0:
            return None
        return float(np.corrcoef(a, b)[0, 1])

    return {
        ("acc", "auc"): corr(cols["acc"], cols["auc"]),
        ("auc", "rmse"): corr(cols["auc"], cols["rmse"]),
        ("acc", "rmse"): corr(cols["acc"], cols["rmse"]),
    }


def write_series_csv(path: str | Path, series: Sequence[float | None], name: str) -> None:
    """Positional series as CSV: slot index, normalized position, value."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["position", "normalized_position", name])
        n = max(len(series), 1)
        for i, value in enumerate(series):
            writer.writerow([i + 1, (i + 1) / n, "" if value is None else value])


def write_sweep_csv(path: str | Path, pairs: Sequence[tuple[float, float | None]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["overlap_ratio", "auc"])
        for ratio, value in pairs:
            writer.writerow([ratio, "" if value is None else value])
