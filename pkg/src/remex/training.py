"""Training loops: per-modality pre-training and multimodal co-training.

Three stages mirror the method: the text side trains a sentence encoder
with entity pooling against bag labels, the graph side trains a HAN
encoder over the disease graph, and co-training fuses both through a
shared relation matrix plus the variant alignment losses. All sampling
is seeded through stable_seed so single-threaded runs reproduce
bit-identically.
"""
from __future__ import annotations

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.optim import Adam, lr_schedule
from .autodiff.tensor import Tape, Tensor
from .config import RunConfig, config_from_dict
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .data import (CooccurrenceMatrix, InitialEmbeddings, KnowledgeGraph,
                   RelationVocab, SentenceBag, TokenTable, split_aligned)
from .errors import AvailabilityError, DataError, NumericError
from .graph_encoder import GraphEncoder, HanParams, MetaPath
from .losses import (bce_loss, remap_b_loss, remap_m_loss, sample_negatives,
                     softmax_normalize)
from .scoring import (LinearHead, RelationEmbeddings, TuckerKernel,
                      clamp_prob, shared_relations)
from .seeding import stable_seed
from .text_encoder import (MarkerVocab, PoolingParams, TextEncoder,
                           TinyAttentionBackbone)


class MetricsWriter:
    """Line-delimited JSON records, one step per line, sorted keys so the
    same run produces byte-identical files."""

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


def _emit(metrics: Optional[MetricsWriter], record: dict) -> None:
    if metrics is not None:
        metrics.write(record)


@dataclass
class TrainData:
    """Everything the training stages read: graph, bags, co-occurrence
    counts, and initial node embeddings."""

    kg: KnowledgeGraph
    bags: list[SentenceBag]
    vocab: RelationVocab
    table: TokenTable
    markers: MarkerVocab
    cooc: Optional[CooccurrenceMatrix] = None
    init: Optional[InitialEmbeddings] = None

    @classmethod
    def from_world(cls, world) -> "TrainData":
        if world.bags is None or world.table is None:
            raise DataError("world has no generated bags; run gen_bags first")
        return cls(kg=world.kg, bags=list(world.bags), vocab=world.vocab,
                   table=world.table, markers=world.markers, cooc=world.cooc,
                   init=world.init)

    def multimodal(self):
        return split_aligned(self.bags, self.kg)


def split_items(items: Sequence, valid_fraction: float, test_fraction: float,
                seed: int) -> tuple[list, list, list]:
    """Seeded (train, valid, test) partition by shuffled index."""
    n = len(items)
    rng = np.random.default_rng(stable_seed(seed, "split", n))
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    n_valid = int(round(n * valid_fraction))
    test_idx = set(order[:n_test].tolist())
    valid_idx = set(order[n_test:n_test + n_valid].tolist())
    train, valid, test = [], [], []
    for i, item in enumerate(items):
        if i in test_idx:
            test.append(item)
        elif i in valid_idx:
            valid.append(item)
        else:
            train.append(item)
    return train, valid, test


def split_bags(bags: Sequence[SentenceBag], valid_fraction: float,
               test_fraction: float, seed: int):
    return split_items(bags, valid_fraction, test_fraction, seed)


def holdout_split(data: TrainData, config: RunConfig
                  ) -> tuple["TrainData", list, list]:
    """Split bags into train/valid/test and drop held-out pairs' edges
    from the training graph (nodes are kept so held-out pairs remain
    scoreable, but no label can leak through an edge or a neighborhood).

    Returns (training data over the reduced graph, valid bags, test bags).
    """
    train_bags, valid_bags, test_bags = split_items(
        list(data.bags), config.train.valid_fraction,
        config.train.test_fraction, config.seed)
    held_out = {b.pair for b in valid_bags + test_bags}
    kept = [e for e in data.kg.edges
            if (e.subject, e.object) not in held_out]
    nodes = set(data.kg.nodes)
    for b in data.bags:
        nodes.update(b.pair)
    train_kg = KnowledgeGraph(kept, data.kg.vocab,
                              extra_nodes=sorted(nodes),
                              node_type=data.kg.node_type)
    cell_data = dataclasses.replace(data, kg=train_kg, bags=train_bags)
    return cell_data, valid_bags, test_bags


# ---------------------------------------------------------------------------
# model bundles

@dataclass
class TextModel:
    """Sentence encoder with pooling plus its relation scorer."""

    encoder: TextEncoder
    relations: RelationEmbeddings
    vocab: RelationVocab
    scoring: str
    core: Optional[TuckerKernel] = None
    head: Optional[LinearHead] = None
    transe_gamma: float = 1.0
    transe_literal: bool = False

    def score_pair(self, bag: SentenceBag, mode: str = "eval",
                   rng: Optional[np.random.Generator] = None) -> Tensor:
        """Probability vector over the K scored types for one bag."""
        h_s, h_o = self.encoder.encode_pair(bag, mode=mode, rng=rng,
                                            project=True)
        d = h_s.data.shape[0]
        H_s = ops.reshape(h_s, (1, d))
        H_o = ops.reshape(h_o, (1, d))
        out = _score_types_batch(self.scoring, H_s, H_o, self.relations,
                                 self.core, self.head, self.transe_gamma,
                                 self.transe_literal)
        return ops.reshape(out, (self.vocab.K,))

    def parameters(self) -> dict[str, Tensor]:
        out = {f"text.{k}": v for k, v in self.encoder.parameters().items()}
        out.update(self.relations.parameters())
        if self.core is not None:
            out.update(self.core.parameters())
        if self.head is not None:
            out.update(self.head.parameters())
        return out


@dataclass
class GraphModel:
    """HAN encoder over the graph plus its relation scorer."""

    encoder: GraphEncoder
    relations: RelationEmbeddings
    vocab: RelationVocab
    scoring: str
    core: Optional[TuckerKernel] = None
    head: Optional[LinearHead] = None
    transe_gamma: float = 1.0
    transe_literal: bool = False

    @property
    def kg(self) -> KnowledgeGraph:
        return self.encoder.kg

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> Tensor:
        """[len(pairs), K] probabilities. Nodes of the whole batch form
        the pool the semantic attention averages over, so scores depend
        on batch composition; evaluation therefore chunks deterministically.
        """
        nodes = sorted({n for pair in pairs for n in pair})
        Z = self.encoder.encode(nodes)
        index = {n: i for i, n in enumerate(nodes)}
        s_idx = [index[s] for s, _ in pairs]
        o_idx = [index[o] for _, o in pairs]
        H_s = ops.gather_rows(Z, s_idx)
        H_o = ops.gather_rows(Z, o_idx)
        return _score_types_batch(self.scoring, H_s, H_o, self.relations,
                                  self.core, self.head, self.transe_gamma,
                                  self.transe_literal)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"graph.{k}": v
               for k, v in self.encoder.params.parameters().items()}
        out.update(self.relations.parameters())
        if self.core is not None:
            out.update(self.core.parameters())
        if self.head is not None:
            out.update(self.head.parameters())
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.parameters().items()}
        out["graph.h_init"] = self.encoder.h_init.data
        return out


@dataclass
class CotrainedModel:
    """Both modality models sharing one relation matrix."""

    text: TextModel
    graph: GraphModel
    relations: RelationEmbeddings
    variant: str

    def parameters(self) -> dict[str, Tensor]:
        out = self.text.parameters()
        out.update(self.graph.parameters())
        return out


def _score_types_batch(scoring: str, H_s: Tensor, H_o: Tensor,
                       relations: RelationEmbeddings,
                       core: Optional[TuckerKernel],
                       head: Optional[LinearHead],
                       gamma: float, literal: bool) -> Tensor:
    """[b, K] probabilities for paired subject/object row batches."""
    b = H_s.data.shape[0]
    K = relations.K
    if scoring == "linear":
        logits = ops.add(ops.contract("bd,kd->bk", ops.add(H_s, H_o), head.W),
                         ops.reshape(head.b, (1, K)))
        return clamp_prob(ops.sigmoid(logits))
    # expand to one row per (pair, type)
    pair_rows = np.repeat(np.arange(b), K)
    type_rows = np.tile(np.arange(K), b)
    S = ops.gather_rows(H_s, pair_rows)
    O = ops.gather_rows(H_o, pair_rows)
    R = ops.gather_rows(relations.R, type_rows)
    if scoring == "tucker":
        flat = clamp_prob(ops.sigmoid(ops.trilinear(core.core, S, R, O)))
    elif scoring == "transe":
        dist2 = ops.l2_norm_sq(ops.sub(ops.add(S, R), O), axis=1)
        logit = dist2 if literal else ops.sub(float(gamma), dist2)
        flat = clamp_prob(ops.sigmoid(logit))
    else:
        raise ValueError(f"unknown scorer {scoring!r}")
    return ops.reshape(flat, (b, K))


# ---------------------------------------------------------------------------
# model construction

def build_text_model(config: RunConfig, data: TrainData) -> TextModel:
    d = config.dims
    rng = np.random.default_rng(stable_seed(config.seed, "text-init"))
    backbone = TinyAttentionBackbone.create(rng, len(data.table), d.d_hs)
    pooling = PoolingParams.create(rng, d.d_hs, d_h=d.d_h)
    encoder = TextEncoder(backbone, pooling, data.table, data.markers,
                          l_max=d.l_max, d_l=d.d_l)
    relations = RelationEmbeddings.create(rng, data.vocab.K, d.d_r, "text")
    model = TextModel(encoder, relations, data.vocab, config.train.scoring,
                      transe_gamma=config.train.transe_gamma,
                      transe_literal=config.train.transe_literal)
    if config.train.scoring == "tucker":
        model.core = TuckerKernel.create(rng, d.d_h, d.d_r, d.d_h,
                                         name="text.tucker.core")
    elif config.train.scoring == "linear":
        model.head = LinearHead.create(rng, data.vocab.K, d.d_h,
                                       name="text.linear")
    return model


def init_node_matrix(kg: KnowledgeGraph, config: RunConfig,
                     init: Optional[InitialEmbeddings]) -> np.ndarray:
    """Initial node features: the loaded decomposition vectors, or a
    symmetric-uniform draw under the no_ehr_init ablation."""
    d_hi = config.dims.d_hi
    if config.train.no_ehr_init or init is None:
        if init is None and not config.train.no_ehr_init:
            raise DataError("graph pre-training needs initial node "
                            "embeddings; set train.no_ehr_init to start "
                            "from random features instead")
        rng = np.random.default_rng(stable_seed(config.seed, "node-init"))
        limit = math.sqrt(6.0 / (kg.num_nodes + d_hi))
        return rng.uniform(-limit, limit, (kg.num_nodes, d_hi))
    if init.dim != d_hi:
        raise DataError(f"initial embeddings have dim {init.dim}, config "
                        f"expects dims.d_hi={d_hi}")
    return init.matrix_for(kg.nodes)


def build_graph_model(config: RunConfig, data: TrainData,
                      h_init: Optional[np.ndarray] = None) -> GraphModel:
    d = config.dims
    rng = np.random.default_rng(stable_seed(config.seed, "graph-init"))
    paths = [MetaPath.from_string(p) for p in config.metapaths]
    for p in paths:
        p.validate(data.vocab)
    params = HanParams.create(rng, d.d_hi, d.d_ha, d.n_heads,
                              [p.name for p in paths])
    if h_init is None:
        h_init = init_node_matrix(data.kg, config, data.init)
    encoder = GraphEncoder(data.kg, paths, params, h_init,
                           neighbor_cap=config.graph.neighbor_cap,
                           seed=config.seed)
    relations = RelationEmbeddings.create(rng, data.vocab.K, d.d_r, "graph")
    model = GraphModel(encoder, relations, data.vocab, config.train.scoring,
                       transe_gamma=config.train.transe_gamma,
                       transe_literal=config.train.transe_literal)
    if config.train.scoring == "tucker":
        model.core = TuckerKernel.create(rng, d.d_ha, d.d_r, d.d_ha,
                                         name="graph.tucker.core")
    elif config.train.scoring == "linear":
        model.head = LinearHead.create(rng, data.vocab.K, d.d_ha,
                                       name="graph.linear")
    return model


# ---------------------------------------------------------------------------
# text pre-training

def _text_epoch_bags(pos: list, na: list, config: RunConfig,
                     epoch: int) -> list:
    ratio = config.train.negative_ratio
    want = int(round(ratio * len(pos)))
    picked = []
    if na and want and config.train.include_na_bags:
        rng = np.random.default_rng(
            stable_seed(config.seed, "text-negatives", epoch))
        take = min(want, len(na))
        idx = rng.choice(len(na), size=take, replace=False)
        picked = [na[i] for i in sorted(idx)]
    order = pos + picked
    rng = np.random.default_rng(stable_seed(config.seed, "text-order", epoch))
    return [order[i] for i in rng.permutation(len(order))]


def pretrain_text(data: TrainData, config: RunConfig,
                  bags: Optional[Sequence[SentenceBag]] = None,
                  metrics: Optional[MetricsWriter] = None) -> TextModel:
    """Minimize the text-side BCE over labeled bags plus zero-labeled
    negatives, with Adam, gradient accumulation, and linear warmup."""
    model = build_text_model(config, data)
    pool = list(data.bags if bags is None else bags)
    pos = [b for b in pool if not b.is_na]
    na = [b for b in pool if b.is_na]
    if config.train.negative_ratio == 0.0:
        warnings.warn("negative ratio 0: text training sees positives only")
    if not pos:
        raise DataError("no labeled bags to pre-train on")

    tc = config.text
    opt = Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    n_examples = len(pos) + (min(int(round(config.train.negative_ratio
                                           * len(pos))), len(na))
                             if config.train.include_na_bags else 0)
    micro_per_epoch = math.ceil(n_examples / tc.batch_size)
    steps_per_epoch = max(1, math.ceil(micro_per_epoch / tc.grad_accum))
    total_steps = max(1, config.text.epochs * steps_per_epoch)

    opt_step = 0
    for epoch in range(tc.epochs):
        order = _text_epoch_bags(pos, na, config, epoch)
        pending = 0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            step_id = epoch * micro_per_epoch + start // tc.batch_size
            try:
                with Tape() as tape:
                    total = None
                    for bag in batch:
                        rng = np.random.default_rng(stable_seed(
                            config.seed, "text-sentences", epoch, bag.subject,
                            bag.object))
                        p = model.score_pair(bag, mode="train", rng=rng)
                        loss = bce_loss(p, bag.label)
                        total = loss if total is None else ops.add(total, loss)
                    batch_loss = ops.mul(1.0 / len(batch), total)
                    scaled = ops.mul(1.0 / tc.grad_accum, batch_loss)
                tape.backward(scaled)
                pending += 1
                lr_scale = lr_schedule("linear", opt_step, total_steps,
                                       warmup_rate=tc.warmup_rate)
                if pending == tc.grad_accum or \
                        start + tc.batch_size >= len(order):
                    opt.step(lr_scale)
                    opt.zero_grad()
                    pending = 0
                    opt_step += 1
            except NumericError as exc:
                raise NumericError(f"text pre-training diverged at epoch "
                                   f"{epoch}, step {step_id}: {exc}") from None
            _emit(metrics, {"phase": "pretrain-text", "epoch": epoch,
                            "step": step_id,
                            "loss_text": float(batch_loss.data),
                            "lr": tc.lr * lr_scale})
    return model


# ---------------------------------------------------------------------------
# graph pre-training

def graph_training_pairs(data: TrainData, config: RunConfig
                         ) -> list[tuple[tuple[str, str], np.ndarray]]:
    """(pair, label-vector) examples: every edge-bearing pair, or only
    the bag-aligned ones under the no_unaligned ablation."""
    groups = data.kg.pairs()
    if config.train.no_unaligned:
        md = data.multimodal()
        keep = {p.bag.pair for p in md.aligned}
        groups = {pair: edges for pair, edges in groups.items()
                  if pair in keep}
    out = []
    for pair in sorted(groups):
        names = [e.relation for e in groups[pair]]
        out.append((pair, data.vocab.label_vector(names)))
    return out


def _graph_epoch_examples(examples: list, data: TrainData, config: RunConfig,
                          epoch: int, all_positive_pairs) -> list:
    ratio = config.train.negative_ratio
    out = list(examples)
    want = int(round(ratio * len(examples)))
    if want and data.cooc is not None:
        zeros = np.zeros(data.vocab.K)
        negs = sample_negatives(data.cooc, all_positive_pairs,
                                config.train.cooc_threshold, want,
                                stable_seed(config.seed, "graph-negatives",
                                            epoch))
        out.extend((pair, zeros) for pair in negs)
    rng = np.random.default_rng(stable_seed(config.seed, "graph-order",
                                            epoch))
    return [out[i] for i in rng.permutation(len(out))]


def pretrain_graph(data: TrainData, config: RunConfig,
                   pairs: Optional[list] = None,
                   metrics: Optional[MetricsWriter] = None) -> GraphModel:
    """Minimize the graph-side BCE over edge-bearing pairs (multi-label
    across the K types) plus sampled low-co-occurrence negatives."""
    model = build_graph_model(config, data)
    examples = graph_training_pairs(data, config) if pairs is None else pairs
    if not examples:
        raise DataError("no graph pairs to pre-train on")
    all_positive = set(data.kg.pairs())

    gc = config.graph
    opt = Adam(model.parameters(), lr=gc.lr, weight_decay=gc.weight_decay)
    for epoch in range(gc.epochs):
        order = _graph_epoch_examples(examples, data, config, epoch,
                                      all_positive)
        lr_scale = lr_schedule("steplr", epoch, max(1, gc.epochs),
                               gamma=gc.step_gamma, period=1)
        for start in range(0, len(order), gc.batch_size):
            batch = order[start:start + gc.batch_size]
            step_id = start // gc.batch_size
            try:
                with Tape() as tape:
                    probs = model.score_pairs([pair for pair, _ in batch])
                    labels = np.stack([label for _, label in batch])
                    batch_loss = ops.mul(1.0 / len(batch),
                                         bce_loss(probs, labels))
                tape.backward(batch_loss)
                opt.step(lr_scale)
                opt.zero_grad()
            except NumericError as exc:
                raise NumericError(f"graph pre-training diverged at epoch "
                                   f"{epoch}, step {step_id}: {exc}") \
                    from None
            _emit(metrics, {"phase": "pretrain-graph", "epoch": epoch,
                            "step": step_id,
                            "loss_graph": float(batch_loss.data),
                            "lr": gc.lr * lr_scale})
    return model


# ---------------------------------------------------------------------------
# co-training

def _variant_loss(variant: str, loss_t: Tensor, loss_g: Tensor, p_t: Tensor,
                  p_g: Tensor, label: np.ndarray, config: RunConfig) -> Tensor:
    if variant == "remap":
        return ops.add(loss_t, loss_g)
    if variant == "remap_m":
        return remap_m_loss(loss_t, loss_g, softmax_normalize(p_t),
                            softmax_normalize(p_g), config.train.lambda_m)
    if variant == "remap_b":
        return remap_b_loss(loss_t, loss_g, p_t, p_g, label,
                            config.train.lambda_b)
    raise ValueError(f"unknown variant {variant!r}")


def cotrain(data: TrainData, text_model: TextModel, graph_model: GraphModel,
            config: RunConfig, metrics: Optional[MetricsWriter] = None,
            aligned: Optional[list] = None) -> CotrainedModel:
    """Fuse the pretrained modalities: share the relation matrix, then
    jointly minimize the variant loss over aligned bags, interleaving
    graph-only batches of unaligned pairs."""
    shared = shared_relations(text_model.relations, graph_model.relations)
    text_model.relations = shared
    graph_model.relations = shared
    model = CotrainedModel(text_model, graph_model, shared,
                           config.train.variant)

    md = data.multimodal()
    if aligned is None:
        aligned = [(p.bag, p.bag.label) for p in md.aligned]
        if config.train.include_na_bags:
            aligned = aligned + [(b, b.label) for b in data.bags if b.is_na]
    usable = []
    for bag, label in aligned:
        if graph_model.kg.has_node(bag.subject) and \
                graph_model.kg.has_node(bag.object):
            usable.append((bag, label))
        else:
            warnings.warn(f"pair {bag.pair} lacks graph nodes; skipped "
                          f"during co-training")
    if not usable:
        raise DataError("no aligned pairs with both modalities available")

    unaligned = []
    if not config.train.no_unaligned:
        groups: dict[tuple[str, str], list] = {}
        for e in md.unaligned_triplets:
            groups.setdefault((e.subject, e.object), []).append(e.relation)
        unaligned = [(pair, data.vocab.label_vector(names))
                     for pair, names in sorted(groups.items())]

    tc = config.text
    opt = Adam(model.parameters(), lr=tc.lr, weight_decay=tc.weight_decay)
    micro_per_epoch = math.ceil(len(usable) / tc.batch_size)
    joint_steps = max(1, math.ceil(micro_per_epoch / tc.grad_accum))
    graph_batches = micro_per_epoch // config.train.unaligned_ratio \
        if unaligned else 0
    total_steps = max(1, config.train.cotrain_epochs
                      * (joint_steps + graph_batches))

    opt_step = 0
    unaligned_cursor = 0
    for epoch in range(config.train.cotrain_epochs):
        rng = np.random.default_rng(stable_seed(config.seed, "cotrain-order",
                                                epoch))
        order = [usable[i] for i in rng.permutation(len(usable))]
        pending = 0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            micro = start // tc.batch_size
            step_id = epoch * micro_per_epoch + micro
            try:
                with Tape() as tape:
                    probs_g = graph_model.score_pairs(
                        [bag.pair for bag, _ in batch])
                    total = None
                    sum_t = sum_g = 0.0
                    for i, (bag, label) in enumerate(batch):
                        srng = np.random.default_rng(stable_seed(
                            config.seed, "cotrain-sentences", epoch,
                            bag.subject, bag.object))
                        p_t = text_model.score_pair(bag, mode="train",
                                                    rng=srng)
                        p_g = ops.reshape(
                            ops.gather_rows(probs_g, [i]), (data.vocab.K,))
                        loss_t = bce_loss(p_t, label)
                        loss_g = bce_loss(p_g, label)
                        sum_t += float(loss_t.data)
                        sum_g += float(loss_g.data)
                        ex = _variant_loss(config.train.variant, loss_t,
                                           loss_g, p_t, p_g, label, config)
                        total = ex if total is None else ops.add(total, ex)
                    batch_loss = ops.mul(1.0 / len(batch), total)
                    scaled = ops.mul(1.0 / tc.grad_accum, batch_loss)
                tape.backward(scaled)
                pending += 1
                lr_scale = lr_schedule("linear", opt_step, total_steps,
                                       warmup_rate=tc.warmup_rate)
                if pending == tc.grad_accum or \
                        start + tc.batch_size >= len(order):
                    opt.step(lr_scale)
                    opt.zero_grad()
                    pending = 0
                    opt_step += 1
            except NumericError as exc:
                raise NumericError(f"co-training diverged at epoch {epoch}, "
                                   f"step {step_id}: {exc}") from None
            mean_t = sum_t / len(batch)
            mean_g = sum_g / len(batch)
            _emit(metrics, {"phase": "cotrain", "epoch": epoch,
                            "step": step_id, "loss_text": mean_t,
                            "loss_graph": mean_g,
                            "loss_align": float(batch_loss.data)
                            - mean_t - mean_g,
                            "loss_total": float(batch_loss.data),
                            "lr": tc.lr * lr_scale})

            if unaligned and (micro + 1) % config.train.unaligned_ratio == 0:
                chunk = []
                for _ in range(min(config.train.unaligned_batch,
                                   len(unaligned))):
                    chunk.append(unaligned[unaligned_cursor])
                    unaligned_cursor = (unaligned_cursor + 1) % len(unaligned)
                try:
                    with Tape() as tape:
                        probs = graph_model.score_pairs(
                            [pair for pair, _ in chunk])
                        labels = np.stack([label for _, label in chunk])
                        g_loss = ops.mul(1.0 / len(chunk),
                                         bce_loss(probs, labels))
                    tape.backward(g_loss)
                    lr_scale = lr_schedule("linear", opt_step, total_steps,
                                           warmup_rate=tc.warmup_rate)
                    opt.step(lr_scale)
                    opt.zero_grad()
                    opt_step += 1
                except NumericError as exc:
                    raise NumericError(f"co-training diverged at epoch "
                                       f"{epoch}, step {step_id} (graph-only "
                                       f"batch): {exc}") from None
                _emit(metrics, {"phase": "cotrain-graph", "epoch": epoch,
                                "step": step_id,
                                "loss_graph": float(g_loss.data),
                                "lr": tc.lr * lr_scale})
    return model


# ---------------------------------------------------------------------------
# inference

def predict(model, pair: tuple[str, str], modality: str,
            bag: Optional[SentenceBag] = None) -> np.ndarray:
    """Probability vector for one (subject, object) query.

    modality 'text' needs the pair's sentence bag; 'graph' needs both
    nodes in the graph; 'both' takes the element-wise max of the two.
    """
    if modality not in ("text", "graph", "both"):
        raise ValueError(f"unknown modality {modality!r}")
    text_model = model.text if isinstance(model, CotrainedModel) else \
        (model if isinstance(model, TextModel) else None)
    graph_model = model.graph if isinstance(model, CotrainedModel) else \
        (model if isinstance(model, GraphModel) else None)

    p_t = p_g = None
    if modality in ("text", "both"):
        if text_model is None:
            raise AvailabilityError("model has no text component")
        if bag is None:
            raise AvailabilityError(f"text prediction for {pair} needs a "
                                    f"sentence bag")
        if bag.pair != tuple(pair):
            raise AvailabilityError(f"bag is for {bag.pair}, query is "
                                    f"{tuple(pair)}")
        p_t = text_model.score_pair(bag, mode="eval").data
    if modality in ("graph", "both"):
        if graph_model is None:
            raise AvailabilityError("model has no graph component")
        for node in pair:
            if not graph_model.kg.has_node(node):
                raise AvailabilityError(f"node {node!r} not in the graph")
        p_g = ops.reshape(graph_model.score_pairs([tuple(pair)]),
                          (graph_model.vocab.K,)).data
    if modality == "text":
        return np.asarray(p_t, dtype=float)
    if modality == "graph":
        return np.asarray(p_g, dtype=float)
    return np.maximum(np.asarray(p_t, dtype=float),
                      np.asarray(p_g, dtype=float))


def score_bags_eval(text_model: TextModel,
                    bags: Sequence[SentenceBag]) -> np.ndarray:
    """[n, K] eval-mode probabilities, one row per bag."""
    rows = [text_model.score_pair(bag, mode="eval").data for bag in bags]
    return np.stack(rows) if rows else np.zeros((0, text_model.vocab.K))


def score_pairs_eval(graph_model: GraphModel,
                     pairs: Sequence[tuple[str, str]],
                     batch_size: int = 512) -> np.ndarray:
    """[n, K] eval-mode probabilities with fixed chunking, so the
    batch-dependent semantic pool is reproducible."""
    rows = []
    for start in range(0, len(pairs), batch_size):
        chunk = list(pairs[start:start + batch_size])
        rows.append(graph_model.score_pairs(chunk).data)
    return np.concatenate(rows) if rows else \
        np.zeros((0, graph_model.vocab.K))


# ---------------------------------------------------------------------------
# persistence

def model_components(model) -> tuple[str, ...]:
    if isinstance(model, CotrainedModel):
        return ("text", "graph", "shared-relations")
    if isinstance(model, TextModel):
        return ("text",)
    if isinstance(model, GraphModel):
        return ("graph",)
    raise TypeError(f"not a model bundle: {type(model).__name__}")


def save_model(path, model, config: RunConfig,
               thresholds: Optional[dict] = None) -> None:
    arrays = {k: v.data for k, v in model.parameters().items()}
    graph_model = model.graph if isinstance(model, CotrainedModel) else \
        (model if isinstance(model, GraphModel) else None)
    if graph_model is not None:
        arrays["graph.h_init"] = graph_model.encoder.h_init.data
    save_checkpoint(path, arrays, config=config.as_dict(),
                    components=model_components(model),
                    thresholds=thresholds)


def load_model(path, data: TrainData):
    """Rebuild a model bundle from a checkpoint plus the data artifacts
    (token table, graph) it was trained against."""
    ck = load_checkpoint(path)
    config = config_from_dict(ck.config)
    has_text = "text" in ck.components
    has_graph = "graph" in ck.components
    text_model = graph_model = None
    if has_text:
        text_model = build_text_model(config, data)
    if has_graph:
        graph_model = build_graph_model(config, data,
                                        h_init=ck.array("graph.h_init"))
    if has_text and has_graph:
        shared = shared_relations(text_model.relations,
                                  graph_model.relations)
        text_model.relations = shared
        graph_model.relations = shared
        model = CotrainedModel(text_model, graph_model, shared,
                               config.train.variant)
    else:
        model = text_model if has_text else graph_model
        if model is None:
            raise AvailabilityError("checkpoint carries no model component")
    restore_into(ck, model.parameters())
    return model, ck
