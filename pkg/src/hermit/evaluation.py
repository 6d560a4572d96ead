"""Scoring: overlap and exact-span P/R/F1, exact match, fold statistics.

Per-task P/R/F1 counts a predicted chunk as a hit when it overlaps a gold
chunk with the same label. Span F1 requires identical boundaries. Intent
scores treat the utterance-level DA and FR labels as one multi-class label.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import TASKS, AnnotatedSentence, Chunk, extract_chunks


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def intent_counts(gold: Sequence[str | None], predicted: Sequence[str | None]) -> ConfusionCounts:
    """Multi-class counting, one decision per utterance.

    A missing prediction (None) is only a false negative.
    """
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold labels vs {len(predicted)} predictions")
    tp = fp = fn = 0
    for g, p in zip(gold, predicted):
        if g is not None and g == p:
            tp += 1
            continue
        if p is not None:
            fp += 1
        if g is not None:
            fn += 1
    return ConfusionCounts(tp, fp, fn)


def match_overlapping(gold: Sequence[Chunk], predicted: Sequence[Chunk]) -> ConfusionCounts:
    """One-to-one greedy matching in gold order for a single sentence."""
    used = [False] * len(predicted)
    tp = 0
    for g in gold:
        for j, p in enumerate(predicted):
            if not used[j] and p.label == g.label and p.overlaps(g):
                used[j] = True
                tp += 1
                break
    return ConfusionCounts(tp, len(predicted) - tp, len(gold) - tp)


def entity_counts(gold: Sequence, predicted: Sequence) -> ConfusionCounts:
    """Overlap-based counts over a corpus (list of per-sentence chunk lists).

    A flat chunk list is read as a single sentence.
    """
    if (gold and isinstance(gold[0], Chunk)) or (predicted and isinstance(predicted[0], Chunk)):
        return match_overlapping(gold, predicted)
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold sentences vs {len(predicted)} predicted")
    total = ConfusionCounts()
    for g, p in zip(gold, predicted):
        total = total + match_overlapping(g, p)
    return total


def combined_counts(intent: ConfusionCounts, entity: ConfusionCounts) -> ConfusionCounts:
    return intent + entity


def span_counts(gold_rows: Sequence[Sequence[str]], pred_rows: Sequence[Sequence[str]]
                ) -> ConfusionCounts:
    """Exact (start, end, label) chunk matches; predictions are repaired first."""
    if len(gold_rows) != len(pred_rows):
        raise ValueError(f"{len(gold_rows)} gold rows vs {len(pred_rows)} predicted")
    tp = fp = fn = 0
    for g, p in zip(gold_rows, pred_rows):
        gs = Counter(extract_chunks(g, repair=True))
        ps = Counter(extract_chunks(p, repair=True))
        hit = sum((gs & ps).values())
        tp += hit
        fp += sum(ps.values()) - hit
        fn += sum(gs.values()) - hit
    return ConfusionCounts(tp, fp, fn)


def span_f1(gold_rows, pred_rows) -> tuple[float, float, float]:
    c = span_counts(gold_rows, pred_rows)
    return c.precision, c.recall, c.f1


def exact_match(gold_rows: Sequence[Sequence[str]], pred_rows: Sequence[Sequence[str]]) -> float:
    if len(gold_rows) != len(pred_rows):
        raise ValueError(f"{len(gold_rows)} gold rows vs {len(pred_rows)} predicted")
    if not gold_rows:
        return 0.0
    return sum(tuple(g) == tuple(p) for g, p in zip(gold_rows, pred_rows)) / len(gold_rows)


def combined_em(gold: Mapping[str, Sequence[Sequence[str]]],
                pred: Mapping[str, Sequence[Sequence[str]]]) -> float:
    """Fraction of sentences whose every layer is predicted exactly."""
    n = len(gold[TASKS[0]])
    if not n:
        return 0.0
    hits = 0
    for i in range(n):
        hits += all(tuple(gold[t][i]) == tuple(pred[t][i]) for t in TASKS)
    return hits / n


def utterance_label(tags: Sequence[str]) -> str | None:
    """Label of the chunk covering the most tokens, earliest on ties."""
    chunks = extract_chunks(tags, repair=True)
    if not chunks:
        return None
    return max(chunks, key=lambda c: (c.end - c.start, -c.start)).label


def intent_label(da_tags: Sequence[str], fr_tags: Sequence[str]) -> str | None:
    da, fr = utterance_label(da_tags), utterance_label(fr_tags)
    if da is None or fr is None:
        return None
    return f"{da}_{fr}"


# ------------------------------------------------------------------ reports

@dataclass
class TaskScores:
    counts: ConfusionCounts
    span: ConfusionCounts
    em: float

    def metrics(self) -> dict[str, float]:
        c, s = self.counts, self.span
        return {"tp": c.tp, "fp": c.fp, "fn": c.fn,
                "precision": c.precision, "recall": c.recall, "f1": c.f1,
                "span_precision": s.precision, "span_recall": s.recall, "span_f1": s.f1,
                "em": self.em}


@dataclass
class MetricsReport:
    tasks: dict[str, TaskScores]
    intent: ConfusionCounts
    combined_em: float
    sentences: int
    extra: dict = field(default_factory=dict)

    @property
    def entity(self) -> ConfusionCounts:
        return self.tasks["ar"].counts

    @property
    def combined(self) -> ConfusionCounts:
        """DA + FR + AR confusion matrices summed."""
        total = ConfusionCounts()
        for t in TASKS:
            total = total + self.tasks[t].counts
        return total

    @property
    def intent_entity(self) -> ConfusionCounts:
        return combined_counts(self.intent, self.entity)

    def metrics(self) -> dict[str, float]:
        """Flat ``group.metric`` view used for model selection and aggregation."""
        out = {}
        for t in TASKS:
            for k, v in self.tasks[t].metrics().items():
                out[f"{t}.{k}"] = v
        for name, c in (("intent", self.intent), ("entity", self.entity),
                        ("combined", self.combined), ("intent_entity", self.intent_entity)):
            out.update({f"{name}.tp": c.tp, f"{name}.fp": c.fp, f"{name}.fn": c.fn,
                        f"{name}.precision": c.precision, f"{name}.recall": c.recall,
                        f"{name}.f1": c.f1})
        out["combined.em"] = self.combined_em
        return out

    def to_text(self) -> str:
        m = self.metrics()
        lines = [f"sentences: {self.sentences}",
                 f"{'':<14}{'P':>8}{'R':>8}{'F1':>8}{'spanF1':>8}{'EM':>8}"]
        names = {"da": "dialogue act", "fr": "frame", "ar": "frame element"}
        for t in TASKS:
            lines.append(f"{names[t]:<14}" + "".join(
                f"{100 * m[f'{t}.{k}']:8.2f}"
                for k in ("precision", "recall", "f1", "span_f1", "em")))
        lines.append(f"{'combined':<14}" + "".join(
            f"{100 * m[f'combined.{k}']:8.2f}" for k in ("precision", "recall", "f1"))
            + f"{'--':>8}{100 * self.combined_em:8.2f}")
        for name in ("intent", "entity", "intent_entity"):
            lines.append(f"{name:<14}" + "".join(
                f"{100 * m[f'{name}.{k}']:8.2f}" for k in ("precision", "recall", "f1")))
        return "\n".join(lines) + "\n"


def evaluate(gold: Sequence[AnnotatedSentence], predicted: Sequence) -> MetricsReport:
    """Score predictions (anything with ``tags(task)``) against gold sentences."""
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold sentences vs {len(predicted)} predictions")
    rows_g = {t: [tuple(s.tags(t)) for s in gold] for t in TASKS}
    rows_p = {t: [tuple(p.tags(t)) for p in predicted] for t in TASKS}
    for i, s in enumerate(gold):
        for t in TASKS:
            if len(rows_p[t][i]) != len(s):
                raise ValueError(f"sentence {s.id!r}: {t} prediction has "
                                 f"{len(rows_p[t][i])} tags for {len(s)} tokens")
    tasks = {}
    for t in TASKS:
        g_chunks = [extract_chunks(r) for r in rows_g[t]]
        p_chunks = [extract_chunks(r, repair=True) for r in rows_p[t]]
        tasks[t] = TaskScores(entity_counts(g_chunks, p_chunks),
                              span_counts(rows_g[t], rows_p[t]),
                              exact_match(rows_g[t], rows_p[t]))
    intents = intent_counts([intent_label(a, b) for a, b in zip(rows_g["da"], rows_g["fr"])],
                            [intent_label(a, b) for a, b in zip(rows_p["da"], rows_p["fr"])])
    return MetricsReport(tasks, intents, combined_em(rows_g, rows_p), len(gold))


def report_records(metrics: Mapping[str, tuple[float, float]]) -> str:
    """One ``task<TAB>metric<TAB>mean<TAB>std`` line per metric."""
    lines = []
    for key in sorted(metrics):
        task, metric = key.split(".", 1)
        mean, std = metrics[key]
        lines.append(f"{task}\t{metric}\t{mean:.6f}\t{std:.6f}")
    return "\n".join(lines) + "\n"


def single_report_records(report: MetricsReport) -> str:
    return report_records({k: (float(v), 0.0) for k, v in report.metrics().items()})


# ----------------------------------------------------------- fold statistics

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Arithmetic mean and population standard deviation."""
    if not values:
        raise ValueError("need at least one value")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def aggregate_folds(reports: Sequence[MetricsReport]) -> dict[str, tuple[float, float]]:
    if not reports:
        raise ValueError("need at least one report")
    per_fold = [r.metrics() for r in reports]
    return {k: mean_std([m[k] for m in per_fold]) for k in per_fold[0]}


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float | None  # min(W+, W-); None when every difference is zero
    z: float
    p: float
    n: int
    w_plus: float
    w_minus: float
    method: str


def _avg_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_lower_tail(ranks: np.ndarray, w: float) -> float:
    """P(W+ <= w) under random signs, by dynamic programming on doubled ranks."""
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    limit = int(math.floor(2 * w + 1e-9))
    return float(counts[:limit + 1].sum() / 2.0 ** len(ranks))


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float],
                         method: str = "auto") -> WilcoxonResult:
    """Two-sided signed-rank test on paired samples.

    ``method`` is "exact", "normal" or "auto" (exact up to 25 non-zero pairs).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) == 0:
        raise ValueError("paired samples must be equal-length, non-empty sequences")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(None, 0.0, 1.0, 0, 0.0, 0.0, "degenerate")
    ranks = _avg_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    mu = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_sizes ** 3) - tie_sizes).sum()) / 48.0
    z = (w - mu) / math.sqrt(var) if var > 0 else 0.0
    if method == "auto":
        method = "exact" if n <= 25 else "normal"
    if method == "exact":
        p = min(1.0, 2.0 * _exact_lower_tail(ranks, w))
    elif method == "normal":
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, z, p, n, w_plus, w_minus, method)

