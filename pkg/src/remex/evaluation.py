"""Threshold fitting and classification/ranking metrics.

Per-type decision thresholds are fitted on validation scores (largest F1,
smallest such threshold, decision rule p >= t) and frozen; reports carry
per-type and micro-averaged confusion metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .data import KnowledgeGraph, Triplet
from .errors import EvalError, ThresholdError

ScoredExample = tuple[float, int]


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def select_threshold(scores: Sequence[ScoredExample]) -> float:
    """Smallest threshold (among the observed scores) maximizing F1 under
    the decision rule p >= t."""
    if not scores:
        raise ThresholdError("no scores to fit a threshold on")
    ps = np.array([p for p, _ in scores], dtype=np.float64)
    ys = np.array([int(y) for _, y in scores], dtype=np.int64)
    if not ys.any():
        raise ThresholdError("threshold fitting needs at least one positive")
    best_t, best_f1 = None, -1.0
    for t in np.unique(ps):
        pred = ps >= t
        tp = int(np.sum(pred & (ys == 1)))
        fp = int(np.sum(pred & (ys == 0)))
        fn = int(np.sum(~pred & (ys == 1)))
        f1 = _f1_from_counts(tp, fp, fn)
        if f1 > best_f1 + 1e-15:
            best_f1, best_t = f1, float(t)
    return best_t


@dataclass
class ThresholdSet:
    """Per-relation-type decision thresholds."""

    values: dict[str, float]

    def __post_init__(self):
        for name, t in self.values.items():
            if not 0.0 <= t <= 1.0:
                raise ThresholdError(f"threshold for {name} outside [0,1]: {t}")

    def __getitem__(self, name: str) -> float:
        return self.values[name]

    @classmethod
    def fit(cls, scores_per_type: Mapping[str, Sequence[ScoredExample]]
            ) -> "ThresholdSet":
        return cls({name: select_threshold(scores)
                    for name, scores in scores_per_type.items()})


@dataclass
class TypeMetrics:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    @property
    def f1(self) -> float:
        return _f1_from_counts(self.tp, self.fp, self.fn)

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn,
                "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


@dataclass
class EvalReport:
    per_type: dict[str, TypeMetrics]
    micro: TypeMetrics = field(default_factory=TypeMetrics)

    def as_record(self) -> dict:
        out = {"micro": self.micro.as_dict()}
        for name, m in self.per_type.items():
            out[name] = m.as_dict()
        return out

    def format_table(self) -> str:
        rows = [("micro", self.micro)] + sorted(self.per_type.items())
        lines = [f"{'type':<8}{'acc':>8}{'prec':>8}{'rec':>8}{'f1':>8}"
                 f"{'tp':>6}{'fp':>6}{'fn':>6}{'tn':>6}"]
        for name, m in rows:
            lines.append(f"{name:<8}{m.accuracy:>8.4f}{m.precision:>8.4f}"
                         f"{m.recall:>8.4f}{m.f1:>8.4f}{m.tp:>6}{m.fp:>6}"
                         f"{m.fn:>6}{m.tn:>6}")
        return "\n".join(lines)


def compute_report(scores_per_type: Mapping[str, Sequence[ScoredExample]],
                   thresholds: ThresholdSet) -> EvalReport:
    """Binary metrics per type with p >= threshold_k; micro metrics pool
    the confusion counts across all scored types."""
    per_type: dict[str, TypeMetrics] = {}
    micro = TypeMetrics()
    for name, scores in scores_per_type.items():
        t = thresholds[name]
        m = TypeMetrics()
        for p, y in scores:
            pred = p >= t
            if pred and y:
                m.tp += 1
            elif pred and not y:
                m.fp += 1
            elif not pred and y:
                m.fn += 1
            else:
                m.tn += 1
        per_type[name] = m
        micro.tp += m.tp
        micro.fp += m.fp
        micro.fn += m.fn
        micro.tn += m.tn
    return EvalReport(per_type, micro)


def scores_by_type(pairs: Sequence[tuple[np.ndarray, np.ndarray]],
                   type_names: Sequence[str]
                   ) -> dict[str, list[ScoredExample]]:
    """Rearrange (probability vector, label vector) rows into per-type
    score lists; all-zero label rows feed negatives to every type."""
    out: dict[str, list[ScoredExample]] = {name: [] for name in type_names}
    for p_vec, label in pairs:
        for k, name in enumerate(type_names):
            out[name].append((float(p_vec[k]), int(label[k])))
    return out


def rank_metrics(queries: Sequence[tuple[np.ndarray, int]],
                 ks: Sequence[int] = (1, 3, 10)) -> dict[str, float]:
    """Filtered MRR / Hits@k from per-query candidate scores.

    Each query is (scores over candidates, index of the true candidate).
    Ties count against the true candidate so a constant scorer cannot
    look perfect.
    """
    if not queries:
        raise EvalError("no ranking queries")
    rr, hits = [], {k: 0 for k in ks}
    for scores, true_idx in queries:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.size == 0:
            raise EvalError("empty candidate set")
        if not 0 <= true_idx < scores.size:
            raise EvalError(f"true index {true_idx} outside candidate set")
        true_score = scores[true_idx]
        others = np.delete(scores, true_idx)
        rank = 1 + int(np.sum(others >= true_score))
        rr.append(1.0 / rank)
        for k in ks:
            if rank <= k:
                hits[k] += 1
    out = {"mrr": float(np.mean(rr))}
    for k in ks:
        out[f"hits@{k}"] = hits[k] / len(queries)
    return out


def rank_over_corruptions(score_fn: Callable[[str, str, str], float],
                          kg: KnowledgeGraph, triplets: Sequence[Triplet],
                          ks: Sequence[int] = (1, 3, 10),
                          max_candidates: Optional[int] = None,
                          seed: int = 0) -> dict[str, float]:
    """Object-corruption ranking in the filtered setting: candidates are
    all nodes that do not form a true edge (the query's own object kept)."""
    queries = []
    rng = np.random.default_rng(seed)
    for trip in triplets:
        candidates = [n for n in kg.nodes
                      if n == trip.object
                      or (n != trip.subject
                          and not kg.has_edge(trip.subject, trip.relation, n))]
        if max_candidates is not None and len(candidates) > max_candidates:
            keep = {trip.object}
            rest = [n for n in candidates if n != trip.object]
            picked = rng.choice(len(rest), size=max_candidates - 1,
                                replace=False)
            keep.update(rest[i] for i in picked)
            candidates = [n for n in candidates if n in keep]
        scores = np.array([score_fn(trip.subject, trip.relation, n)
                           for n in candidates])
        queries.append((scores, candidates.index(trip.object)))
    return rank_metrics(queries, ks)
