"""Classification, ranking and significance measures for statement predictions."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .codegraph import StatementType

SCHEMA_VERSION = 1


class MetricError(ValueError):
    pass


# --------------------------------------------------------------------------- classification


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def degenerate(self) -> bool:
        """Precision or recall is undefined (reported as 0)."""
        return self.tp + self.fp == 0 or self.tp + self.fn == 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class ClassificationResult:
    f1: float
    precision: float
    recall: float
    confusion: Confusion
    degenerate: bool


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> Confusion:
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise MetricError(f"length mismatch: {p.shape[0]} predictions vs {y.shape[0]} labels")
    return Confusion(int(np.sum(p & y)), int(np.sum(p & ~y)), int(np.sum(~p & ~y)), int(np.sum(~p & y)))


def classification_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float) -> ClassificationResult:
    """Thresholded (score >= threshold) F1, precision and recall."""
    s = np.asarray(scores, dtype=float)
    if s.shape != np.asarray(labels).shape:
        raise MetricError(f"length mismatch: {len(s)} scores vs {len(labels)} labels")
    return from_confusion(confusion(s >= threshold, labels))


def from_confusion(c: Confusion) -> ClassificationResult:
    return ClassificationResult(c.f1, c.precision, c.recall, c, c.degenerate)


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks, ties sharing the mean of the ranks they span."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=float)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    return ranks


def _check_binary(labels: np.ndarray) -> Tuple[int, int]:
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise MetricError("both classes must be present")
    return pos, neg


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    y = np.asarray(labels).astype(bool)
    pos, neg = _check_binary(y)
    r = average_ranks(scores)
    u = r[y].sum() - pos * (pos + 1) / 2.0
    return float(u / (pos * neg))


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Average precision: step-wise area under the precision-recall curve."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(int)
    pos, _ = _check_binary(y)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # evaluate only at the last index of each group of tied scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = tp[last]
    prec = tps / (last + 1)
    rec = tps / pos
    prev = np.r_[0.0, rec[:-1]]
    return float(np.sum((rec - prev) * prec))


# --------------------------------------------------------------------------- ranking


@dataclass(frozen=True)
class RankedFunctionResult:
    function_id: str
    lines: Tuple[int, ...]  # in ranked order
    scores: Tuple[float, ...]
    labels: Tuple[int, ...]

    @property
    def n_relevant(self) -> int:
        return int(sum(self.labels))


def rank_function(function_id: str, lines: Sequence[int], scores: Sequence[float], labels: Sequence[int]) -> RankedFunctionResult:
    """Order statements by descending score, ties by ascending line number."""
    if not (len(lines) == len(scores) == len(labels)):
        raise MetricError("lines, scores and labels must have equal length")
    order = sorted(range(len(lines)), key=lambda i: (-float(scores[i]), lines[i]))
    return RankedFunctionResult(
        function_id,
        tuple(int(lines[i]) for i in order),
        tuple(float(scores[i]) for i in order),
        tuple(int(labels[i]) for i in order),
    )


def _require(results: Sequence[RankedFunctionResult]) -> None:
    if not results:
        raise MetricError("no ranked results")
    for r in results:
        if r.n_relevant == 0:
            raise MetricError(f"function {r.function_id} has no vulnerable statement")


def average_precision_at_k(r: RankedFunctionResult, k: int = 5) -> float:
    hits = 0
    total = 0.0
    for i, rel in enumerate(r.labels[:k], start=1):
        if rel:
            hits += 1
            total += hits / i
    return total / min(k, r.n_relevant)


def map_at_k(results: Sequence[RankedFunctionResult], k: int = 5) -> float:
    _require(results)
    return float(np.mean([average_precision_at_k(r, k) for r in results]))


def ndcg_single(r: RankedFunctionResult, k: int = 5) -> float:
    dcg = sum(rel / math.log2(i + 1) for i, rel in enumerate(r.labels[:k], start=1))
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, r.n_relevant) + 1))
    return dcg / idcg


def ndcg_at_k(results: Sequence[RankedFunctionResult], k: int = 5) -> float:
    _require(results)
    return float(np.mean([ndcg_single(r, k) for r in results]))


def first_ranking(r: RankedFunctionResult) -> int:
    for i, rel in enumerate(r.labels, start=1):
        if rel:
            return i
    raise MetricError(f"function {r.function_id} has no vulnerable statement")


def mfr(results: Sequence[RankedFunctionResult]) -> float:
    _require(results)
    return float(np.mean([first_ranking(r) for r in results]))


def first_rank_histogram(results: Sequence[RankedFunctionResult]) -> Dict[int, int]:
    return dict(sorted(Counter(first_ranking(r) for r in results).items()))


def n_at_k(
    results: Sequence[RankedFunctionResult],
    k: int = 5,
    mode: str = "vulnerable",
    flagged: Optional[Dict[str, Sequence[int]]] = None,
) -> float:
    """Share of functions whose top-k statements contain a truly vulnerable one.

    ``mode="all"`` also scores non-vulnerable functions: one counts as a hit
    when none of its top-k lines is flagged. ``flagged`` maps function id to
    the flagged lines and is required in that mode.
    """
    if not results:
        raise MetricError("no ranked results")
    if mode == "vulnerable":
        _require(results)
        return float(np.mean([any(r.labels[:k]) for r in results]))
    if mode != "all":
        raise ValueError(f"unknown N@k mode {mode!r}")
    if flagged is None:
        raise MetricError("mode 'all' needs the flagged lines of every function")
    hits = []
    for r in results:
        if r.n_relevant:
            hits.append(any(r.labels[:k]))
        else:
            marked = set(flagged.get(r.function_id, ()))
            hits.append(not any(ln in marked for ln in r.lines[:k]))
    return float(np.mean(hits))


# --------------------------------------------------------------------------- statement types


@dataclass(frozen=True)
class TypeRow:
    stmt_type: str
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def f1(self) -> float:
        return Confusion(self.tp, self.fp, self.tn, self.fn).f1

    def to_json(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn, "f1": self.f1}


def statement_type_report(predictions: Sequence[int], labels: Sequence[int], types: Sequence[str]) -> List[TypeRow]:
    """Per statement type confusion counts, sorted by F1 (highest first).

    Every category appears, including ones with no statements (all zero).
    """
    if not (len(predictions) == len(labels) == len(types)):
        raise MetricError("predictions, labels and types must have equal length")
    names = [t.name if isinstance(t, StatementType) else str(t) for t in types]
    rows = []
    order = [t.name for t in StatementType]
    for name in order + sorted(set(names) - set(order)):
        idx = [i for i, t in enumerate(names) if t == name]
        c = confusion([predictions[i] for i in idx], [labels[i] for i in idx])
        rows.append(TypeRow(name, c.tp, c.fp, c.tn, c.fn))
    position = {n: i for i, n in enumerate(order)}
    rows.sort(key=lambda r: (-r.f1, position.get(r.stmt_type, len(order))))
    return rows


# --------------------------------------------------------------------------- significance


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int  # non-zero differences used
    method: str  # "exact" | "normal"


def _exact_cdf(doubled_ranks: Sequence[int], w2: int) -> float:
    """P(W+ <= w) under the null, with ranks doubled so ties stay integral."""
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return float(sum(counts[: w2 + 1])) / 2 ** len(doubled_ranks)


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact_limit: int = 25) -> WilcoxonResult:
    """Two-sided paired signed-rank test of a against b.

    Zero differences are dropped and tied magnitudes share average ranks.
    The statistic is min(W+, W-). Up to ``exact_limit`` pairs the p-value is
    exact; beyond that a tie-corrected normal approximation with continuity
    correction is used.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MetricError("samples must have equal length")
    if len(a) < 5:
        raise MetricError(f"need at least 5 pairs, got {len(a)}")
    d = b - a
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise MetricError("all differences are zero")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_limit:
        doubled = [int(round(2 * r)) for r in ranks]
        p = min(1.0, 2.0 * _exact_cdf(doubled, int(round(2 * w))))
        return WilcoxonResult(w, p, n, "exact")
    mean = n * (n + 1) / 4.0
    ties = Counter(np.abs(d).tolist()).values()
    var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t**3 - t for t in ties) / 48.0
    z = (w - mean + 0.5) / math.sqrt(var) if var > 0 else 0.0
    p = min(1.0, math.erfc(-z / math.sqrt(2)))
    return WilcoxonResult(w, p, n, "normal")


# --------------------------------------------------------------------------- reports


@dataclass
class FunctionPrediction:
    """Model output for one function, in graph node order."""

    function_id: str
    lines: List[int]
    stmt_types: List[str]
    labels: List[int]
    stmt_prob: List[float]  # before gating; used for ranking
    gated_prob: List[float]
    predicted: List[int]
    func_label: int
    func_pred: Optional[int] = None


@dataclass
class EvalReport:
    f1: float
    prec: float
    rec: float
    rocauc: Optional[float]
    prauc: Optional[float]
    n5: Optional[float]
    map5: Optional[float]
    ndcg5: Optional[float]
    mfr: Optional[float]
    first_rank_histogram: Dict[int, int]
    per_type: List[TypeRow]
    threshold: float
    confusion: Confusion
    n_functions: int = 0
    n_vulnerable_functions: int = 0
    extra: Dict[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "f1": self.f1,
            "prec": self.prec,
            "rec": self.rec,
            "rocauc": self.rocauc,
            "prauc": self.prauc,
            "n5": self.n5,
            "map5": self.map5,
            "ndcg5": self.ndcg5,
            "mfr": self.mfr,
            "first_rank_histogram": {str(k): v for k, v in self.first_rank_histogram.items()},
            "per_type": {r.stmt_type: r.to_json() for r in self.per_type},
            "threshold": self.threshold,
            "confusion": {"tp": self.confusion.tp, "fp": self.confusion.fp, "tn": self.confusion.tn, "fn": self.confusion.fn},
            "n_functions": self.n_functions,
            "n_vulnerable_functions": self.n_vulnerable_functions,
            **self.extra,
        }


def _maybe(fn, *args, **kwargs) -> Optional[float]:
    try:
        return fn(*args, **kwargs)
    except MetricError:
        return None


def evaluate_predictions(
    preds: Sequence[FunctionPrediction],
    threshold: float,
    k: int = 5,
    n5_mode: str = "vulnerable",
    prauc_mode: str = "pooled",
) -> EvalReport:
    """Build the full report; metrics that are undefined for the input are ``None``."""
    labels = np.concatenate([np.asarray(p.labels, dtype=int) for p in preds]) if preds else np.zeros(0, int)
    gated = np.concatenate([np.asarray(p.gated_prob, dtype=float) for p in preds]) if preds else np.zeros(0)
    predicted = np.concatenate([np.asarray(p.predicted, dtype=int) for p in preds]) if preds else np.zeros(0, int)
    types = [t for p in preds for t in p.stmt_types]
    conf = confusion(predicted, labels)
    ranked = [rank_function(p.function_id, p.lines, p.stmt_prob, p.labels) for p in preds]
    vul = [r for r in ranked if r.n_relevant]
    if prauc_mode == "pooled":
        prauc = _maybe(pr_auc, gated, labels)
    elif prauc_mode == "per_function":
        vals = [_maybe(pr_auc, p.gated_prob, p.labels) for p in preds]
        vals = [v for v in vals if v is not None]
        prauc = float(np.mean(vals)) if vals else None
    else:
        raise ValueError(f"unknown prauc_mode {prauc_mode!r}")
    if n5_mode == "all":
        flagged = {p.function_id: [ln for ln, f in zip(p.lines, p.predicted) if f] for p in preds}
        n5 = _maybe(n_at_k, ranked, k, "all", flagged)
    else:
        n5 = _maybe(n_at_k, vul, k) if vul else None
    return EvalReport(
        f1=conf.f1,
        prec=conf.precision,
        rec=conf.recall,
        rocauc=_maybe(roc_auc, gated, labels),
        prauc=prauc,
        n5=n5,
        map5=_maybe(map_at_k, vul, k) if vul else None,
        ndcg5=_maybe(ndcg_at_k, vul, k) if vul else None,
        mfr=_maybe(mfr, vul) if vul else None,
        first_rank_histogram=first_rank_histogram(vul),
        per_type=statement_type_report(predicted.tolist(), labels.tolist(), types),
        threshold=float(threshold),
        confusion=conf,
        n_functions=len(preds),
        n_vulnerable_functions=len(vul),
    )


def mean_report(reports: Iterable[EvalReport], key: str) -> Optional[float]:
    vals = [getattr(r, key) for r in reports]
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None
