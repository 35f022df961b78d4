"""Heterogeneous graph attention encoder.

Initial node vectors are projected per node type, then combined per meta
path with node-level attention (per-head sigmoid-scored softmax over the
meta-path neighborhood, self node included), and the per-path embeddings
are mixed by semantic-level attention into one embedding per node.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import Tensor, ops, parameter
from .data import KnowledgeGraph, RelationVocab
from .errors import ShapeError, VocabularyError
from .seeding import stable_seed


@dataclass(frozen=True)
class MetaPath:
    """Relation-type sequence walked subject-to-object."""

    name: str
    relations: tuple[str, ...]

    def __post_init__(self):
        if len(self.relations) < 1:
            raise ShapeError("meta path needs at least one relation type")

    @classmethod
    def from_string(cls, text: str) -> "MetaPath":
        relations = tuple(part.strip() for part in text.split(",") if part.strip())
        return cls(",".join(relations), relations)

    def validate(self, vocab: RelationVocab) -> None:
        for rel in self.relations:
            if rel not in vocab.scored_types:
                raise VocabularyError(
                    f"meta path {self.name!r}: {rel!r} is not a scored "
                    f"relation type")


def default_metapaths(vocab: RelationVocab) -> tuple[MetaPath, ...]:
    """All length-1 paths plus the two-hop MC,MC path."""
    paths = [MetaPath(rel, (rel,)) for rel in vocab.scored_types]
    if "MC" in vocab.scored_types:
        paths.append(MetaPath("MC,MC", ("MC", "MC")))
    return tuple(paths)


def metapath_neighbors(kg: KnowledgeGraph, metapath: MetaPath,
                       node: str) -> set[str]:
    """End nodes of all walks from ``node`` along the path, plus the node."""
    if not kg.has_node(node):
        raise VocabularyError(f"unknown node {node!r}")
    frontier = {node}
    for rel in metapath.relations:
        frontier = {o for u in frontier for o in kg.neighbors(rel, u)}
    frontier.add(node)
    return frontier


@dataclass
class HanParams:
    """Projections, per-path node attention, and semantic attention.

    Attention vectors are stored per head as rows of length 2*d_head; the
    first half scores the center node's head slice, the second half the
    neighbor's.
    """

    proj_w: dict[str, Tensor]
    proj_b: dict[str, Tensor]
    att: dict[str, Tensor]
    sem_q: Tensor
    sem_w: Tensor
    sem_b: Tensor
    n_heads: int
    d_head: int

    @property
    def d_ha(self) -> int:
        return self.n_heads * self.d_head

    @classmethod
    def create(cls, rng: np.random.Generator, d_hi: int, d_ha: int,
               n_heads: int, path_names: Sequence[str],
               d_sem: Optional[int] = None, node_types: Sequence[str] = ("disease",),
               dtype=np.float32) -> "HanParams":
        if d_ha % n_heads != 0:
            raise ShapeError(f"d_ha={d_ha} not divisible by n_heads={n_heads}")
        d_head = d_ha // n_heads
        if d_sem is None:
            d_sem = d_ha
        proj_w, proj_b = {}, {}
        for t in node_types:
            scale = 1.0 / np.sqrt(d_hi)
            proj_w[t] = parameter(rng.normal(0.0, scale, (d_hi, d_ha)),
                                  f"han.proj_w.{t}", dtype=dtype)
            proj_b[t] = parameter(np.zeros(d_ha), f"han.proj_b.{t}", dtype=dtype)
        att = {}
        for name in path_names:
            scale = 1.0 / np.sqrt(2 * d_head)
            att[name] = parameter(rng.normal(0.0, scale, (n_heads, 2 * d_head)),
                                  f"han.att.{name}", dtype=dtype)
        sem_scale = 1.0 / np.sqrt(d_ha)
        return cls(proj_w=proj_w, proj_b=proj_b, att=att,
                   sem_q=parameter(rng.normal(0.0, 1.0 / np.sqrt(d_sem), d_sem),
                                   "han.sem_q", dtype=dtype),
                   sem_w=parameter(rng.normal(0.0, sem_scale, (d_sem, d_ha)),
                                   "han.sem_w", dtype=dtype),
                   sem_b=parameter(np.zeros(d_sem), "han.sem_b", dtype=dtype),
                   n_heads=n_heads, d_head=d_head)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for t, w in self.proj_w.items():
            out[f"han.proj_w.{t}"] = w
            out[f"han.proj_b.{t}"] = self.proj_b[t]
        for name, a in self.att.items():
            out[f"han.att.{name}"] = a
        out["han.sem_q"] = self.sem_q
        out["han.sem_w"] = self.sem_w
        out["han.sem_b"] = self.sem_b
        return out


@dataclass
class NodeEmbeddings:
    """encode output: combined Z plus per-path parts and semantic weights."""

    nodes: tuple[str, ...]
    Z: Tensor
    per_path: dict[str, Tensor]
    beta: Tensor


class GraphEncoder:
    """HAN over a fixed graph with precomputed, capped neighborhoods.

    Neighborhoods larger than ``neighbor_cap`` keep the self node and a
    without-replacement sample of the rest, drawn from the sorted neighbor
    list with a seed derived from (seed, path, node), so encodings do not
    depend on edge storage order.
    """

    def __init__(self, kg: KnowledgeGraph, metapaths: Sequence[MetaPath],
                 params: HanParams, h_init: np.ndarray, neighbor_cap: int = 64,
                 seed: int = 0, attention: str = "sigmoid",
                 leaky_alpha: float = 0.2, node_type: str = "disease"):
        if h_init.shape[0] != kg.num_nodes:
            raise ShapeError(f"h_init has {h_init.shape[0]} rows for "
                             f"{kg.num_nodes} nodes")
        if attention not in ("sigmoid", "leaky_relu"):
            raise ValueError(f"unknown attention activation {attention!r}")
        for path in metapaths:
            if path.name not in params.att:
                raise ShapeError(f"no attention vector for path {path.name!r}")
        self.kg = kg
        self.metapaths = tuple(metapaths)
        self.params = params
        self.node_type = node_type
        self.attention = attention
        self.leaky_alpha = leaky_alpha
        dtype = params.sem_q.data.dtype
        self.h_init = Tensor(np.asarray(h_init, dtype=dtype))
        self._neighborhoods = {
            path.name: self._capped_neighborhoods(path, neighbor_cap, seed)
            for path in self.metapaths}

    def _capped_neighborhoods(self, path: MetaPath, cap: int, seed: int):
        index = self.kg.node_index
        per_node: list[list[int]] = []
        for node in self.kg.nodes:
            names = sorted(metapath_neighbors(self.kg, path, node))
            if len(names) > cap:
                others = [n for n in names if n != node]
                rng = np.random.default_rng(stable_seed(seed, path.name, node))
                keep = rng.choice(len(others), size=cap - 1, replace=False)
                names = [node] + [others[i] for i in sorted(keep)]
            per_node.append([index[n] for n in names])
        width = max(len(ns) for ns in per_node)
        idx = np.zeros((len(per_node), width), dtype=np.intp)
        mask = np.zeros((len(per_node), width), dtype=bool)
        for i, ns in enumerate(per_node):
            idx[i, :len(ns)] = ns
            mask[i, :len(ns)] = True
        return idx, mask

    def _projected(self) -> Tensor:
        w = self.params.proj_w[self.node_type]
        b = self.params.proj_b[self.node_type]
        return ops.add(ops.matmul(self.h_init, w), b)

    def _path_embedding(self, hp: Tensor, path: MetaPath,
                        subset: np.ndarray) -> Tensor:
        K, dh = self.params.n_heads, self.params.d_head
        idx = self._neighborhoods[path.name][0][subset]
        mask = self._neighborhoods[path.name][1][subset]
        m, width = idx.shape
        center = ops.reshape(ops.gather_rows(hp, subset), (m, 1, K, dh))
        nbr = ops.reshape(ops.gather_rows(hp, idx), (m, width, K, dh))
        ones = np.ones((1, width, 1, 1), dtype=hp.data.dtype)
        center_b = ops.mul(center, Tensor(ones))
        pair = ops.concat([center_b, nbr], axis=3)
        raw = ops.contract("mjkc,kc->mjk", pair, self.params.att[path.name])
        if self.attention == "sigmoid":
            scored = ops.sigmoid(raw)
        else:
            scored = ops.leaky_relu(raw, alpha=self.leaky_alpha)
        mask3 = np.broadcast_to(mask[:, :, None], (m, width, K))
        weights = ops.masked_softmax(scored, mask3, axis=1)
        mixed = ops.contract("mjk,mjkd->mkd", weights, nbr)
        return ops.reshape(ops.sigmoid(mixed), (m, K * dh))

    def encode_detailed(self, nodes: Sequence[str]) -> NodeEmbeddings:
        if len(nodes) == 0:
            raise ShapeError("encode needs at least one node")
        index = self.kg.node_index
        try:
            subset = np.array([index[n] for n in nodes], dtype=np.intp)
        except KeyError as exc:
            raise VocabularyError(f"unknown node {exc}") from None
        hp = self._projected()
        per_path: dict[str, Tensor] = {}
        z_list = []
        for path in self.metapaths:
            z_p = self._path_embedding(hp, path, subset)
            per_path[path.name] = z_p
            z_list.append(z_p)
        beta, Z = semantic_level_attention(self.params, z_list)
        return NodeEmbeddings(tuple(nodes), Z, per_path, beta)

    def encode(self, nodes: Sequence[str]) -> Tensor:
        return self.encode_detailed(nodes).Z


def node_level_attention(params: HanParams, h_prime: Tensor, path: MetaPath,
                         node_position: int, neighbor_positions: Sequence[int],
                         attention: str = "sigmoid",
                         leaky_alpha: float = 0.2) -> Tensor:
    """Single-node node-level attention over explicit neighbor rows.

    ``h_prime`` holds projected embeddings; positions index its rows. The
    return value is the concatenated per-head mixture for the one node.
    """
    K, dh = params.n_heads, params.d_head
    n = len(neighbor_positions)
    if n == 0:
        raise ShapeError("neighborhood must contain at least the node itself")
    center = ops.reshape(ops.gather_rows(h_prime, [node_position]),
                         (1, 1, K, dh))
    nbr = ops.reshape(ops.gather_rows(h_prime, list(neighbor_positions)),
                      (1, n, K, dh))
    ones = np.ones((1, n, 1, 1), dtype=h_prime.data.dtype)
    pair = ops.concat([ops.mul(center, Tensor(ones)), nbr], axis=3)
    raw = ops.contract("mjkc,kc->mjk", pair, params.att[path.name])
    scored = ops.sigmoid(raw) if attention == "sigmoid" \
        else ops.leaky_relu(raw, alpha=leaky_alpha)
    weights = ops.softmax(scored, axis=1)
    mixed = ops.contract("mjk,mjkd->mkd", weights, nbr)
    return ops.reshape(ops.sigmoid(mixed), (K * dh,))


def semantic_level_attention(params: HanParams,
                             per_path: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    """Combine per-path embedding matrices; returns (beta, Z)."""
    if not per_path:
        raise ShapeError("need at least one meta-path embedding matrix")
    shapes = {t.data.shape for t in per_path}
    if len(shapes) != 1:
        raise ShapeError(f"per-path matrices disagree in shape: {shapes}")
    scores = []
    for z_p in per_path:
        hidden = ops.tanh(ops.add(
            ops.contract("md,sd->ms", z_p, params.sem_w), params.sem_b))
        scores.append(ops.reshape(
            ops.mean(ops.contract("ms,s->m", hidden, params.sem_q)), (1,)))
    beta = ops.softmax(ops.concat(scores, axis=0), axis=0)
    Z = ops.contract("p,pmd->md", beta, ops.stack(list(per_path), axis=0))
    return beta, Z
