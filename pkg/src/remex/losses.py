"""Loss functions and negative sampling for the co-training objectives.

The BCE terms are the negated log-likelihoods of the per-type probability
estimates; the alignment variants add symmetric KL coupling (remap_m) or
best-logit distillation (remap_b) on top.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops
from .data import CooccurrenceMatrix, KnowledgeGraph, Triplet
from .errors import SamplingError
from .seeding import stable_seed


def bce_loss(p: Tensor, r: np.ndarray) -> Tensor:
    """-sum_k [r_k log p_k + (1-r_k) log(1-p_k)]; expects p pre-clamped."""
    r = np.asarray(r, dtype=p.data.dtype)
    pos = ops.mul(Tensor(r), ops.log(p))
    neg = ops.mul(Tensor(1.0 - r), ops.log(ops.sub(1.0, p)))
    return ops.neg(ops.sum_(ops.add(pos, neg)))


def softmax_normalize(p: Tensor) -> Tensor:
    """Turn the K probability entries into a distribution over types."""
    return ops.softmax(p, axis=-1)


def kl_div(dist_a: Tensor, dist_b: Tensor) -> Tensor:
    """sum_k b_k log(b_k / a_k) — the literal argument order used by the
    alignment terms. Both inputs must be strictly positive."""
    ratio = ops.sub(ops.log(dist_b), ops.log(dist_a))
    return ops.sum_(ops.mul(dist_b, ratio))


def best_logit(p_text: Tensor, p_graph: Tensor, r: np.ndarray) -> Tensor:
    """Per type: the higher probability where the label is 1, the lower
    where it is 0. Ties resolve to the text value, and gradient flows
    through both inputs."""
    r = np.asarray(r, dtype=p_text.data.dtype)
    hi = ops.maximum(p_text, p_graph)
    lo = ops.minimum(p_text, p_graph)
    return ops.add(ops.mul(Tensor(r), hi), ops.mul(Tensor(1.0 - r), lo))


@dataclass
class ModalLogits:
    """Both modalities' probability vectors for one (s, o) pair, with
    their softmax-normalized distributions."""

    p_text: Tensor
    p_graph: Tensor
    dist_text: Tensor
    dist_graph: Tensor
    p_best: Optional[Tensor] = None
    dist_best: Optional[Tensor] = None

    @classmethod
    def from_probs(cls, p_text: Tensor, p_graph: Tensor,
                   r: Optional[np.ndarray] = None,
                   with_best: bool = False) -> "ModalLogits":
        out = cls(p_text, p_graph, softmax_normalize(p_text),
                  softmax_normalize(p_graph))
        if with_best:
            if r is None:
                raise ValueError("best-logit needs the label vector")
            out.p_best = best_logit(p_text, p_graph, r)
            out.dist_best = softmax_normalize(out.p_best)
        return out


def remap_m_loss(loss_text: Tensor, loss_graph: Tensor, dist_text: Tensor,
                 dist_graph: Tensor, lambda_m: float) -> Tensor:
    """L^T + L^G + lambda_m * (kl(p^T, p^G) + kl(p^G, p^T)).

    lambda_m == 0 short-circuits so the result is bit-identical to the
    plain sum.
    """
    base = ops.add(loss_text, loss_graph)
    if lambda_m == 0.0:
        return base
    sym = ops.add(kl_div(dist_text, dist_graph), kl_div(dist_graph, dist_text))
    return ops.add(base, ops.mul(float(lambda_m), sym))


def remap_b_loss(loss_text: Tensor, loss_graph: Tensor, p_text: Tensor,
                 p_graph: Tensor, r: np.ndarray, lambda_b: float) -> Tensor:
    """L^T + L^G + lambda_b * (L^B + kl(p^B, p^T) + kl(p^B, p^G)) with the
    best-logit vector p^B distilled from both modalities."""
    base = ops.add(loss_text, loss_graph)
    if lambda_b == 0.0:
        return base
    p_best = best_logit(p_text, p_graph, r)
    loss_best = bce_loss(p_best, r)
    dist_best = softmax_normalize(p_best)
    align = ops.add(kl_div(dist_best, softmax_normalize(p_text)),
                    kl_div(dist_best, softmax_normalize(p_graph)))
    return ops.add(base, ops.mul(float(lambda_b), ops.add(loss_best, align)))


def sample_negatives(cooc: CooccurrenceMatrix,
                     positives: Iterable[tuple[str, str]], threshold: int,
                     n: int, seed: int) -> list[tuple[str, str]]:
    """Pairs recorded with co-occurrence below the threshold, minus known
    positives, sampled uniformly without replacement."""
    if n < 0:
        raise ValueError("negative sample size must be >= 0")
    excluded = set()
    for a, b in positives:
        excluded.add((a, b))
        excluded.add((b, a))
    pool = [pair for pair, count in cooc.items()
            if count < threshold and pair not in excluded]
    if len(pool) < n:
        warnings.warn(f"negative pool has {len(pool)} pairs; requested {n}")
        return pool
    rng = np.random.default_rng(stable_seed(seed, "negatives"))
    picked = rng.choice(len(pool), size=n, replace=False)
    return [pool[i] for i in sorted(picked)]


def corrupt_negatives(kg: KnowledgeGraph, triplet: Triplet, n: int,
                      seed: int) -> list[Triplet]:
    """Replace the object with uniform random nodes whose corrupted
    triplet is absent from the graph (and is not a self-loop)."""
    candidates = [node for node in kg.nodes
                  if node != triplet.subject
                  and not kg.has_edge(triplet.subject, triplet.relation, node)]
    if not candidates:
        raise SamplingError(f"no valid corruption for {triplet}")
    rng = np.random.default_rng(stable_seed(seed, "corrupt", triplet.subject,
                                            triplet.relation, triplet.object))
    picks = rng.choice(len(candidates), size=n, replace=True)
    return [Triplet(triplet.subject, triplet.relation, candidates[i])
            for i in picks]
