"""Seeded synthetic data with planted structure.

A ground-truth TuckER parameterization generates the knowledge graph,
sentence bags, and co-occurrence counts, so training runs have a known
signal to recover: every emitted edge scores at least p_hi under the
planted parameters and every negative-pool pair at most p_lo.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import (CooccurrenceMatrix, InitialEmbeddings, KnowledgeGraph,
                   RelationVocab, SentenceBag, Sentence, Triplet)
from .errors import GenerationError
from .seeding import stable_seed
from .text_encoder import MarkerVocab
from .data import TokenTable

DEFAULT_TRIGGERS = {"DDx": "differential", "MC": "provokes",
                    "MBC": "stems_from"}

DEFAULT_TEMPLATES = (
    ("records", "link", "{subj}", "{trigger}", "{obj}", "directly"),
    ("the", "study", "of", "{subj}", "{trigger}", "{obj}", "cohorts"),
    ("{subj}", "notes", "{trigger}", "{obj}", "frequently"),
)

NOISE_WORDS = ("about", "random", "clinic", "note", "finding", "observed",
               "series", "report")


@dataclass
class PlantedWorld:
    """Ground truth plus every artifact generated from it."""

    seed: int
    entities: tuple[str, ...]
    E: np.ndarray
    R: np.ndarray
    W: np.ndarray
    vocab: RelationVocab
    kg: KnowledgeGraph
    negative_pool: tuple[tuple[str, str], ...]
    p_hi: float
    p_lo: float
    bags: Optional[list[SentenceBag]] = None
    table: Optional[TokenTable] = None
    markers: Optional[MarkerVocab] = None
    cooc: Optional[CooccurrenceMatrix] = None
    init: Optional[InitialEmbeddings] = None

    def word_of(self, entity: str) -> str:
        return entity.lower()

    @property
    def positive_pairs(self) -> list[tuple[str, str]]:
        return sorted(self.kg.pairs())


def _planted_logits(E: np.ndarray, R: np.ndarray, W: np.ndarray) -> np.ndarray:
    """logits[i, k, j] for subject i, type k, object j."""
    t = np.einsum("ia,abc->ibc", E, W)
    t = np.einsum("ibc,kb->ikc", t, R)
    return np.einsum("ikc,jc->ikj", t, E)


def plant_kg(n_entities: int, K: int, d: int, density: float, p_hi: float,
             p_lo: float, seed: int, max_rescales: int = 8,
             logit_scale: float = 3.0, logit_shift: float = 4.5
             ) -> PlantedWorld:
    """Sample ground-truth embeddings and emit the edges they imply.

    Edges are every (subject, type, object) whose planted probability
    reaches p_hi, highest scores first, capped at density * n * (n-1) * K.
    Pairs whose scores stay at or below p_lo in both directions for every
    type form the negative pool.

    Sparsity is planted, not emergent: every entity carries a constant
    final coordinate, and one core slot is solved (least squares against
    the relation rows) so each type's score picks up a -logit_shift
    offset. Typical pairs then land well below 0.5 while the upper tail
    still clears p_hi, mirroring how few disease pairs are related.
    """
    if n_entities < 4:
        raise GenerationError("need at least 4 entities")
    if not 0.0 < density < 1.0:
        raise GenerationError("density must be in (0, 1)")
    if not 0.0 < p_lo < p_hi < 1.0:
        raise GenerationError("need 0 < p_lo < p_hi < 1")
    if d < 2:
        raise GenerationError("need embedding dimension >= 2")
    if K == 3:
        vocab = RelationVocab()
    else:
        vocab = RelationVocab(tuple(f"R{k}" for k in range(K)))
    rng = np.random.default_rng(stable_seed(seed, "plant"))
    entities = tuple(f"C{i:04d}" for i in range(n_entities))
    E = rng.normal(0.0, 1.0, (n_entities, d)) / np.sqrt(d)
    E[:, -1] = 1.0
    R = rng.normal(0.0, 1.0, (K, d)) / np.sqrt(d)
    W_rand = rng.normal(0.0, logit_scale, (d, d, d))

    logit_hi = np.log(p_hi / (1.0 - p_hi))
    logit_lo = np.log(p_lo / (1.0 - p_lo))
    scale, shift = 1.0, float(logit_shift)
    W = None
    for attempt in range(max_rescales):
        W = W_rand * scale
        slot, *_ = np.linalg.lstsq(R, -shift * np.ones(K), rcond=None)
        W[-1, :, -1] = slot
        logits = _planted_logits(E, R, W)
        np.einsum("iki->ik", logits)[:] = -np.inf  # no self-loops
        has_edges = bool((logits >= logit_hi).any())
        both = np.maximum(logits, np.transpose(logits, (2, 1, 0)))
        pair_max = both.max(axis=1)
        np.fill_diagonal(pair_max, np.inf)
        has_pool = bool((pair_max <= logit_lo).any())
        if has_edges and has_pool:
            break
        if not has_edges:
            scale *= 1.5
        if not has_pool:
            shift *= 1.5
    else:
        raise GenerationError(f"could not plant both tails (p_hi={p_hi}, "
                              f"p_lo={p_lo}) after {max_rescales} rescales")

    cap = int(density * n_entities * (n_entities - 1) * K)
    cand = np.argwhere(logits >= logit_hi)
    order = np.argsort(-logits[cand[:, 0], cand[:, 1], cand[:, 2]],
                       kind="stable")
    edges = []
    for row in cand[order][:cap]:
        i, k, j = (int(x) for x in row)
        edges.append(Triplet(entities[i], vocab.scored_types[k], entities[j]))

    both_dirs = np.maximum(logits, np.transpose(logits, (2, 1, 0)))
    pair_max = both_dirs.max(axis=1)
    pool = []
    for i in range(n_entities):
        for j in range(i + 1, n_entities):
            if pair_max[i, j] <= logit_lo:
                pool.append((entities[i], entities[j]))
    kg = KnowledgeGraph(edges, vocab, extra_nodes=entities)
    return PlantedWorld(seed, entities, E, R, W, vocab, kg, tuple(pool),
                        p_hi, p_lo)


def gen_bags(world: PlantedWorld,
             templates: Sequence[Sequence[str]] = DEFAULT_TEMPLATES,
             noise_rate: float = 0.0, seed: int = 0, n_max_sentences: int = 4,
             na_bags: Optional[int] = None) -> list[SentenceBag]:
    """Sentence bags for every positive pair plus NA bags from the
    negative pool. Triggers are corrupted with probability noise_rate;
    corruption never produces another trigger token."""
    table = TokenTable()
    for tpl in templates:
        for tok in tpl:
            if not tok.startswith("{"):
                table.add(tok)
    for w in NOISE_WORDS:
        table.add(w)
    for name in DEFAULT_TRIGGERS.values():
        table.add(name)
    for rel in world.vocab.scored_types:
        if rel not in DEFAULT_TRIGGERS:
            table.add(f"trigger_{rel.lower()}")
    for e in world.entities:
        table.add(world.word_of(e))
    markers = MarkerVocab.build(table)

    def trigger_token(rel: str) -> str:
        return DEFAULT_TRIGGERS.get(rel, f"trigger_{rel.lower()}")

    grouped = world.kg.pairs()
    bags = []
    pair_rels = [(pair, sorted({t.relation for t in trips}))
                 for pair, trips in sorted(grouped.items())]
    if na_bags is None:
        na_bags = min(len(world.negative_pool), len(pair_rels))
    if na_bags:
        pool = list(world.negative_pool)
        rng = np.random.default_rng(stable_seed(seed, "na-pairs"))
        picked = sorted(rng.choice(len(pool), size=min(na_bags, len(pool)),
                                   replace=False))
        pair_rels += [(pool[i], []) for i in picked]

    for (subj, obj), rels in pair_rels:
        rng = np.random.default_rng(stable_seed(seed, "bag", subj, obj))
        n_sent = int(rng.integers(1, n_max_sentences + 1))
        sentences = []
        for _ in range(n_sent):
            tpl = templates[int(rng.integers(len(templates)))]
            if rels:
                rel = rels[int(rng.integers(len(rels)))]
                trig = trigger_token(rel)
                if rng.uniform() < noise_rate:
                    trig = NOISE_WORDS[int(rng.integers(len(NOISE_WORDS)))]
            else:
                trig = NOISE_WORDS[int(rng.integers(len(NOISE_WORDS)))]
            tokens, subj_pos, obj_pos = [], [], []
            for tok in tpl:
                if tok == "{subj}":
                    subj_pos.append(len(tokens))
                    tokens += [markers.subject_open["t047"],
                               table.id_of(world.word_of(subj)),
                               markers.subject_close["t047"]]
                elif tok == "{obj}":
                    obj_pos.append(len(tokens))
                    tokens += [markers.object_open["t047"],
                               table.id_of(world.word_of(obj)),
                               markers.object_close["t047"]]
                elif tok == "{trigger}":
                    tokens.append(table.id_of(trig))
                else:
                    tokens.append(table.id_of(tok))
            sentences.append(Sentence(tuple(tokens), tuple(subj_pos),
                                      tuple(obj_pos),
                                      title=(table.id_of(world.word_of(subj)),)))
        label = world.vocab.label_vector(rels if rels
                                         else [world.vocab.na_name])
        bags.append(SentenceBag(subj, obj, label, tuple(sentences)))

    world.bags, world.table, world.markers = bags, table, markers
    return bags


def gen_cooc(world: PlantedWorld, hi_count: int, lo_count: int,
             seed: int = 0) -> CooccurrenceMatrix:
    """Counts >= hi_count on positive pairs, <= lo_count on the negative
    pool, so any threshold in (lo, hi] separates them."""
    if not hi_count > lo_count >= 0:
        raise GenerationError("need hi_count > lo_count >= 0")
    rng = np.random.default_rng(stable_seed(seed, "cooc"))
    m = CooccurrenceMatrix()
    for a, b in world.positive_pairs:
        m.set(a, b, hi_count + int(rng.integers(0, 5)))
    for a, b in world.negative_pool:
        m.set(a, b, int(rng.integers(0, lo_count + 1)))
    world.cooc = m
    return m


def gen_init_embeddings(world: PlantedWorld, d_hi: int,
                        cooc: Optional[CooccurrenceMatrix] = None
                        ) -> InitialEmbeddings:
    """Spectral node features: truncated SVD of the symmetric
    co-occurrence count matrix."""
    if cooc is None:
        cooc = world.cooc
    if cooc is None:
        raise GenerationError("generate the co-occurrence matrix first")
    n = len(world.entities)
    if d_hi > n:
        raise GenerationError(f"d_hi={d_hi} exceeds entity count {n}")
    index = {e: i for i, e in enumerate(world.entities)}
    C = np.zeros((n, n))
    for (a, b), count in cooc.items():
        C[index[a], index[b]] = count
        C[index[b], index[a]] = count
    U, S, _ = np.linalg.svd(C, hermitian=True)
    vecs = U[:, :d_hi] * np.sqrt(S[:d_hi])[None, :]
    init = InitialEmbeddings(d_hi, {e: vecs[i].copy()
                                    for i, e in enumerate(world.entities)})
    world.init = init
    return init


def build_world(n_entities: int = 200, K: int = 3, d: int = 16,
                density: float = 0.01, p_hi: float = 0.9, p_lo: float = 0.1,
                noise_rate: float = 0.0, hi_count: int = 50,
                lo_count: int = 2, d_hi: int = 24, seed: int = 7,
                n_max_sentences: int = 4) -> PlantedWorld:
    """One-call generation of the full artifact set at desk scale."""
    world = plant_kg(n_entities, K, d, density, p_hi, p_lo, seed)
    gen_bags(world, noise_rate=noise_rate, seed=seed,
             n_max_sentences=n_max_sentences)
    gen_cooc(world, hi_count, lo_count, seed)
    gen_init_embeddings(world, d_hi)
    return world
