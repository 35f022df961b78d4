"""Relation scoring functions.

Probability scorers (linear, TransE-style, TuckER-style) map entity
embeddings and a relation embedding to a per-type probability; DistMult
and ComplEx baselines emit raw scores. Probabilities are clamped away
from {0, 1} so downstream logs stay finite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops, parameter
from .errors import ShapeError

PROB_EPS = 1e-7


@dataclass
class RelationEmbeddings:
    """K relation vectors plus a role tag (text / graph / shared)."""

    R: Tensor
    role: str = "shared"

    @classmethod
    def create(cls, rng: np.random.Generator, K: int, d_r: int, role: str,
               dtype=np.float32) -> "RelationEmbeddings":
        data = rng.normal(0.0, 1.0 / np.sqrt(d_r), (K, d_r))
        return cls(parameter(data, f"rel.{role}", dtype=dtype), role)

    @property
    def K(self) -> int:
        return self.R.data.shape[0]

    @property
    def d_r(self) -> int:
        return self.R.data.shape[1]

    def row(self, k: int) -> Tensor:
        return ops.reshape(ops.gather_rows(self.R, [k]), (self.d_r,))

    def rows(self, ks) -> Tensor:
        return ops.gather_rows(self.R, list(ks))

    def parameters(self) -> dict[str, Tensor]:
        return {f"rel.{self.role}": self.R}


def shared_relations(text_rel: RelationEmbeddings,
                     graph_rel: RelationEmbeddings,
                     dtype=None) -> RelationEmbeddings:
    """Average the two modality relation matrices into one shared set.

    Both modality scorers then hold the same Tensor, so gradients from
    either side update the same parameters.
    """
    if text_rel.R.data.shape != graph_rel.R.data.shape:
        raise ShapeError(f"relation shapes differ: {text_rel.R.data.shape} "
                         f"vs {graph_rel.R.data.shape}")
    data = 0.5 * (text_rel.R.data + graph_rel.R.data)
    if dtype is None:
        dtype = text_rel.R.data.dtype
    return RelationEmbeddings(parameter(data, "rel.shared", dtype=dtype),
                              "shared")


@dataclass
class TuckerKernel:
    """Core tensor of a TuckER-style scorer; one per modality."""

    core: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d_s: int, d_r: int, d_o: int,
               name: str = "tucker.core", dtype=np.float32) -> "TuckerKernel":
        scale = 1.0 / np.sqrt(d_s * d_r)
        return cls(parameter(rng.normal(0.0, scale, (d_s, d_r, d_o)), name,
                             dtype=dtype))

    def parameters(self) -> dict[str, Tensor]:
        return {self.core.name or "tucker.core": self.core}


@dataclass
class LinearHead:
    """Per-type weight vectors and biases for the linear scorer."""

    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, K: int, d: int,
               name: str = "linear", dtype=np.float32) -> "LinearHead":
        return cls(parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (K, d)),
                             f"{name}.W", dtype=dtype),
                   parameter(np.zeros(K), f"{name}.b", dtype=dtype))

    @property
    def K(self) -> int:
        return self.W.data.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {self.W.name: self.W, self.b.name: self.b}


def clamp_prob(p: Tensor) -> Tensor:
    return ops.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def score_linear(h_s: Tensor, h_o: Tensor, head: LinearHead) -> Tensor:
    """p_k = sigmoid(W_k . (h_s + h_o) + b_k), vector over the K types."""
    logits = ops.add(ops.matmul(head.W, ops.add(h_s, h_o)), head.b)
    return clamp_prob(ops.sigmoid(logits))


def score_transe(h_s: Tensor, h_o: Tensor, r_k: Tensor, gamma: float = 1.0,
                 literal: bool = False) -> Tensor:
    """Translation scorer on the squared distance ||h_s + r_k - h_o||^2.

    Default maps small distance to high probability via
    sigmoid(gamma - dist^2); the literal flag scores sigmoid(dist^2)
    instead (increasing in distance).
    """
    diff = ops.sub(ops.add(h_s, r_k), h_o)
    dist2 = ops.l2_norm_sq(diff)
    logit = dist2 if literal else ops.sub(float(gamma), dist2)
    return clamp_prob(ops.sigmoid(logit))


def score_tucker(h_s: Tensor, h_o: Tensor, r_k: Tensor,
                 kernel: TuckerKernel) -> Tensor:
    """p = sigmoid(core x_1 h_s x_2 r_k x_3 h_o)."""
    t = ops.mode_contract(kernel.core, h_s, 0)
    t = ops.mode_contract(t, r_k, 0)
    logit = ops.mode_contract(t, h_o, 0)
    return clamp_prob(ops.sigmoid(logit))


def score_tucker_batch(H_s: Tensor, R_k: Tensor, H_o: Tensor,
                       kernel: TuckerKernel) -> Tensor:
    """Probabilities for a batch of (subject, relation, object) rows."""
    return clamp_prob(ops.sigmoid(ops.trilinear(kernel.core, H_s, R_k, H_o)))


def score_distmult(h_s: Tensor, h_o: Tensor, r_k: Tensor) -> Tensor:
    """Raw trilinear-diagonal score sum_d h_s[d] r_k[d] h_o[d].

    The entity product is taken first so swapping subject and object is
    bit-exact, not merely close.
    """
    return ops.sum_(ops.mul(ops.mul(h_s, h_o), r_k))


def score_distmult_batch(H_s: Tensor, R_k: Tensor, H_o: Tensor) -> Tensor:
    return ops.sum_(ops.mul(ops.mul(H_s, H_o), R_k), axis=1)


def _split_complex(v: Tensor) -> tuple[Tensor, Tensor]:
    n = v.data.shape[-1]
    if n % 2:
        raise ShapeError(f"complex embedding length {n} is odd; expected "
                         f"real and imaginary halves")
    m = n // 2
    if v.data.ndim == 1:
        re = ops.gather_rows(v, list(range(m)))
        im = ops.gather_rows(v, list(range(m, n)))
    else:
        b = v.data.shape[0]
        flat = ops.reshape(v, (b * 2, m))
        re = ops.gather_rows(flat, list(range(0, 2 * b, 2)))
        im = ops.gather_rows(flat, list(range(1, 2 * b, 2)))
    return re, im


def score_complex(h_s: Tensor, h_o: Tensor, r_k: Tensor) -> Tensor:
    """Re(sum_d h_s[d] r_k[d] conj(h_o[d])) with stacked re/im halves."""
    hr, hi = _split_complex(h_s)
    rr, ri = _split_complex(r_k)
    tr, ti = _split_complex(h_o)
    axis = None if h_s.data.ndim == 1 else 1
    term = ops.add(
        ops.add(ops.mul(ops.mul(hr, rr), tr), ops.mul(ops.mul(hi, rr), ti)),
        ops.sub(ops.mul(ops.mul(hr, ri), ti), ops.mul(ops.mul(hi, ri), tr)))
    return ops.sum_(term, axis=axis)


def score_complex_batch(H_s: Tensor, R_k: Tensor, H_o: Tensor) -> Tensor:
    return score_complex(H_s, H_o, R_k)
