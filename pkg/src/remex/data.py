"""Data model and ingestion.

Knowledge graph, sentence bags, aligned/unaligned splits, co-occurrence
counts, initial node embeddings, token table, entity linking, and the
sentence-cleaning rules. File formats:

* KG: UTF-8 TSV ``subject<TAB>relation<TAB>object``; ``#`` comments skipped.
* Bags: one JSON record per line with fields ``subject``, ``object``,
  ``relations`` (list of names), ``sentences`` (list of objects with
  ``tokens``, ``subj_marker_idx``, ``obj_marker_idx``, ``title``). Tokens
  are strings resolved against the token table.
* Co-occurrence: lines ``cui_a<SP>cui_b<SP>count``.
* Initial embeddings: header ``N d_hi`` then ``cui v1 ... v_{d_hi}``.
* Token table: one token per line; the line number is the id.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ParseError, ValidationError, VocabularyError


@dataclass(frozen=True)
class RelationVocab:
    """Ordered scored relation types plus the absence label.

    The absence label (NA) is not a scored output; it is represented
    downstream as the all-zero label vector over the K scored types.
    """

    scored_types: tuple[str, ...] = ("DDx", "MC", "MBC")
    na_name: str = "NA"

    def __post_init__(self):
        if len(self.scored_types) < 1:
            raise ValidationError("at least one scored relation type required")
        if len(set(self.scored_types)) != len(self.scored_types):
            raise ValidationError("scored relation types must be unique")
        if self.na_name in self.scored_types:
            raise ValidationError("absence label collides with a scored type")

    @property
    def K(self) -> int:
        return len(self.scored_types)

    def index(self, name: str) -> int:
        try:
            return self.scored_types.index(name)
        except ValueError:
            raise VocabularyError(f"unknown relation type {name!r}") from None

    def is_known(self, name: str) -> bool:
        return name == self.na_name or name in self.scored_types

    def label_vector(self, relations: Iterable[str]) -> np.ndarray:
        """Multi-hot vector over scored types; NA alone maps to all zeros."""
        names = list(relations)
        vec = np.zeros(self.K, dtype=np.float64)
        if self.na_name in names:
            if len(names) > 1:
                raise ValidationError(
                    f"{self.na_name} cannot be combined with scored relations: "
                    f"{names}")
            return vec
        for name in names:
            vec[self.index(name)] = 1.0
        return vec


class Triplet(NamedTuple):
    subject: str
    relation: str
    object: str


class KnowledgeGraph:
    """Directed multigraph over disease concepts.

    Adjacency is indexed per relation type; neighbor lists are sorted so
    downstream sampling does not depend on file order.
    """

    def __init__(self, edges: Sequence[Triplet], vocab: RelationVocab,
                 extra_nodes: Iterable[str] = (), node_type: str = "disease"):
        seen = set()
        deduped = []
        for e in edges:
            if e.subject == e.object:
                raise ValidationError(f"self-loop edge rejected: {e}")
            if not vocab.is_known(e.relation):
                raise VocabularyError(f"unknown relation type {e.relation!r}")
            if e not in seen:
                seen.add(e)
                deduped.append(e)
        self.vocab = vocab
        self.edges: tuple[Triplet, ...] = tuple(deduped)
        self.node_type = node_type
        node_set = set(extra_nodes)
        for e in self.edges:
            node_set.add(e.subject)
            node_set.add(e.object)
        self.nodes: tuple[str, ...] = tuple(sorted(node_set))
        self.node_index: dict[str, int] = {n: i for i, n in enumerate(self.nodes)}
        adjacency: dict[str, dict[str, list[str]]] = {}
        for e in self.edges:
            adjacency.setdefault(e.relation, {}).setdefault(e.subject, []) \
                     .append(e.object)
        self.adjacency: dict[str, dict[str, tuple[str, ...]]] = {
            rel: {s: tuple(sorted(objs)) for s, objs in by_subject.items()}
            for rel, by_subject in adjacency.items()}
        self._edge_set = seen

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def has_edge(self, subject: str, relation: str, object_: str) -> bool:
        return Triplet(subject, relation, object_) in self._edge_set

    def has_node(self, node: str) -> bool:
        return node in self.node_index

    def neighbors(self, relation: str, node: str) -> tuple[str, ...]:
        """Out-neighbors of ``node`` along ``relation`` (sorted)."""
        if node not in self.node_index:
            raise VocabularyError(f"unknown node {node!r}")
        return self.adjacency.get(relation, {}).get(node, ())

    def pairs(self) -> dict[tuple[str, str], tuple[Triplet, ...]]:
        """Edges grouped by (subject, object)."""
        grouped: dict[tuple[str, str], list[Triplet]] = {}
        for e in self.edges:
            grouped.setdefault((e.subject, e.object), []).append(e)
        return {k: tuple(v) for k, v in grouped.items()}

    def check_adjacency(self) -> None:
        """Round-trip the adjacency index against the edge list."""
        rebuilt = set()
        for rel, by_subject in self.adjacency.items():
            for s, objs in by_subject.items():
                for o in objs:
                    rebuilt.add(Triplet(s, rel, o))
        if rebuilt != self._edge_set:
            raise ValidationError("adjacency index inconsistent with edge list")


def load_kg(path, vocab: RelationVocab) -> KnowledgeGraph:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.rstrip("\n")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            parts = stripped.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError(f"{path}:{lineno}: expected "
                                 f"`subject<TAB>relation<TAB>object`, got "
                                 f"{stripped!r}")
            s, r, o = (p.strip() for p in parts)
            if not vocab.is_known(r):
                raise VocabularyError(f"{path}:{lineno}: unknown relation {r!r}")
            edges.append(Triplet(s, r, o))
    return KnowledgeGraph(edges, vocab)


def write_kg(path, edges: Iterable[Triplet]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in edges:
            fh.write(f"{e.subject}\t{e.relation}\t{e.object}\n")


_MARKER_RE = re.compile(r"^<[SO]-[^<>/\s]+/?>$")
_STRUCTURAL = ("<sep>", "<empty_title>")

WORD = "word"
MARKER = "marker"
STRUCTURAL = "structural"


def token_kind(token: str) -> str:
    if _MARKER_RE.match(token):
        return MARKER
    if token in _STRUCTURAL:
        return STRUCTURAL
    return WORD


class TokenTable:
    """Bidirectional token <-> id map with marker classification."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = []
        self._ids: dict[str, int] = {}
        for t in tokens:
            self.add(t)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def add(self, token: str) -> int:
        if token in self._ids:
            return self._ids[token]
        idx = len(self._tokens)
        self._tokens.append(token)
        self._ids[token] = idx
        return idx

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def kind_of_id(self, idx: int) -> str:
        return token_kind(self._tokens[idx])

    def is_marker_id(self, idx: int) -> bool:
        return self.kind_of_id(idx) == MARKER

    @classmethod
    def from_file(cls, path) -> "TokenTable":
        table = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                tok = line.rstrip("\n")
                if not tok:
                    continue
                if tok in table:
                    raise ParseError(f"{path}:{lineno}: duplicate token {tok!r}")
                table.add(tok)
        return table

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")


@dataclass(frozen=True)
class Sentence:
    """Token-id sequence with open-marker positions and title tokens."""

    tokens: tuple[int, ...]
    subj_markers: tuple[int, ...]
    obj_markers: tuple[int, ...]
    title: tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class SentenceBag:
    subject: str
    object: str
    label: np.ndarray
    sentences: tuple[Sentence, ...]

    def __eq__(self, other):
        if not isinstance(other, SentenceBag):
            return NotImplemented
        return (self.subject == other.subject and self.object == other.object
                and np.array_equal(self.label, other.label)
                and self.sentences == other.sentences)

    @property
    def size(self) -> int:
        return len(self.sentences)

    @property
    def pair(self) -> tuple[str, str]:
        return (self.subject, self.object)

    @property
    def is_na(self) -> bool:
        return not self.label.any()


def _validate_sentence(sent: Sentence, table: TokenTable, where: str) -> None:
    n = len(sent.tokens)
    if not sent.subj_markers or not sent.obj_markers:
        raise ValidationError(f"{where}: sentence needs at least one subject "
                              f"and one object marker")
    for side, positions in (("subject", sent.subj_markers),
                            ("object", sent.obj_markers)):
        for pos in positions:
            if not 0 <= pos < n:
                raise ValidationError(f"{where}: {side} marker index {pos} out "
                                      f"of range for length {n}")
            if not table.is_marker_id(sent.tokens[pos]):
                raise ValidationError(f"{where}: {side} marker index {pos} does "
                                      f"not address a marker token")


def load_bags(path, vocab: RelationVocab, table: TokenTable) -> list[SentenceBag]:
    bags = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: bad JSON: {exc}") from None
            bags.append(_bag_from_record(record, vocab, table,
                                         where=f"{path}:{lineno} (bag {len(bags)})"))
    return bags


def _bag_from_record(record: Mapping, vocab: RelationVocab, table: TokenTable,
                     where: str) -> SentenceBag:
    try:
        subject = record["subject"]
        object_ = record["object"]
        relations = record["relations"]
        raw_sentences = record["sentences"]
    except KeyError as exc:
        raise ParseError(f"{where}: missing field {exc}") from None
    for name in relations:
        if not vocab.is_known(name):
            raise VocabularyError(f"{where}: unknown relation {name!r}")
    label = vocab.label_vector(relations)
    if not raw_sentences:
        raise ValidationError(f"{where}: bag has no sentences")
    sentences = []
    for j, raw in enumerate(raw_sentences):
        sent_where = f"{where}, sentence {j}"
        try:
            tokens = tuple(table.id_of(t) for t in raw["tokens"])
            title = tuple(table.id_of(t) for t in raw.get("title", []))
            subj_markers = tuple(int(i) for i in raw["subj_marker_idx"])
            obj_markers = tuple(int(i) for i in raw["obj_marker_idx"])
        except KeyError as exc:
            raise ParseError(f"{sent_where}: missing field {exc}") from None
        except VocabularyError as exc:
            raise VocabularyError(f"{sent_where}: {exc}") from None
        sent = Sentence(tokens, subj_markers, obj_markers, title)
        _validate_sentence(sent, table, sent_where)
        sentences.append(sent)
    return SentenceBag(subject, object_, label, tuple(sentences))


def bag_to_record(bag: SentenceBag, vocab: RelationVocab,
                  table: TokenTable) -> dict:
    if bag.is_na:
        relations = [vocab.na_name]
    else:
        relations = [vocab.scored_types[k] for k in range(vocab.K)
                     if bag.label[k]]
    return {
        "subject": bag.subject,
        "object": bag.object,
        "relations": relations,
        "sentences": [
            {"tokens": [table.token(t) for t in s.tokens],
             "subj_marker_idx": list(s.subj_markers),
             "obj_marker_idx": list(s.obj_markers),
             "title": [table.token(t) for t in s.title]}
            for s in bag.sentences],
    }


def write_bags(path, records: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


class AlignedPair(NamedTuple):
    bag: SentenceBag
    edges: tuple[Triplet, ...]


@dataclass(frozen=True)
class MultimodalDataset:
    """Bags plus graph with the aligned/unaligned partition."""

    bags: tuple[SentenceBag, ...]
    kg: KnowledgeGraph
    aligned: tuple[AlignedPair, ...]
    unaligned_triplets: tuple[Triplet, ...]
    unaligned_bags: tuple[SentenceBag, ...]

    @property
    def num_bags(self) -> int:
        return len(self.bags)

    @property
    def num_triplets(self) -> int:
        return self.kg.num_edges

    @property
    def aligned_triplet_count(self) -> int:
        return sum(len(p.edges) for p in self.aligned)

    def check_partition(self) -> None:
        aligned_edges = [e for p in self.aligned for e in p.edges]
        combined = aligned_edges + list(self.unaligned_triplets)
        if len(combined) != len(set(combined)) or \
                set(combined) != set(self.kg.edges):
            raise ValidationError("aligned/unaligned triplets do not "
                                  "partition the edge list")


def split_aligned(bags: Sequence[SentenceBag],
                  kg: KnowledgeGraph) -> MultimodalDataset:
    """Partition triplets and bags by (subject, object) overlap.

    A bag aligns with every edge sharing its endpoint pair. If several bags
    carry the same pair, the first keeps the alignment and the rest are
    treated as unaligned so the triplet<->bag pairing stays one-to-one.
    """
    pair_groups = kg.pairs()
    matched_pairs = set()
    aligned = []
    unaligned_bags = []
    for bag in bags:
        key = bag.pair
        if key in pair_groups and key not in matched_pairs:
            matched_pairs.add(key)
            aligned.append(AlignedPair(bag, pair_groups[key]))
        else:
            unaligned_bags.append(bag)
    unaligned_triplets = tuple(e for pair, edges in sorted(pair_groups.items())
                               if pair not in matched_pairs for e in edges)
    return MultimodalDataset(tuple(bags), kg, tuple(aligned),
                             unaligned_triplets, tuple(unaligned_bags))


class CooccurrenceMatrix:
    """Symmetric sparse pair -> count map."""

    def __init__(self, entries: Optional[Mapping[tuple[str, str], int]] = None):
        self._entries: dict[tuple[str, str], int] = {}
        if entries:
            for (a, b), count in entries.items():
                self.set(a, b, count)

    @staticmethod
    def _key(a: str, b: str) -> tuple[str, str]:
        return (a, b) if a <= b else (b, a)

    def set(self, a: str, b: str, count: int) -> None:
        if count < 0 or int(count) != count:
            raise ValidationError(f"co-occurrence count must be a non-negative "
                                  f"integer, got {count!r} for ({a}, {b})")
        self._entries[self._key(a, b)] = int(count)

    def get(self, a: str, b: str) -> int:
        return self._entries.get(self._key(a, b), 0)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> list[tuple[tuple[str, str], int]]:
        return sorted(self._entries.items())


def load_cooc(path) -> CooccurrenceMatrix:
    matrix = CooccurrenceMatrix()
    seen: set[tuple[str, str]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected "
                                 f"`cui_a cui_b count`, got {stripped!r}")
            a, b, raw_count = parts
            try:
                count = int(raw_count)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad count "
                                 f"{raw_count!r}") from None
            key = CooccurrenceMatrix._key(a, b)
            if key in seen:
                if matrix.get(a, b) != count:
                    raise ValidationError(f"{path}:{lineno}: conflicting counts "
                                          f"for pair ({a}, {b})")
                continue
            seen.add(key)
            try:
                matrix.set(a, b, count)
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return matrix


def write_cooc(path, matrix: CooccurrenceMatrix) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for (a, b), count in matrix.items():
            fh.write(f"{a} {b} {count}\n")


@dataclass
class InitialEmbeddings:
    """Pretrained node vectors with a mean-vector fallback."""

    dim: int
    vectors: dict[str, np.ndarray]
    fallback: np.ndarray = field(init=False)

    def __post_init__(self):
        for cui, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise ValidationError(f"embedding for {cui} has shape "
                                      f"{vec.shape}, expected ({self.dim},)")
        if self.vectors:
            self.fallback = np.mean(np.stack(list(self.vectors.values())), axis=0)
        else:
            self.fallback = np.zeros(self.dim)

    def __contains__(self, cui: str) -> bool:
        return cui in self.vectors

    def get(self, cui: str) -> np.ndarray:
        return self.vectors.get(cui, self.fallback)

    def matrix_for(self, nodes: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(n) for n in nodes])


def load_init_embeddings(path) -> InitialEmbeddings:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ParseError(f"{path}:1: expected header `N d_hi`")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError:
            raise ParseError(f"{path}:1: expected integer header") from None
        vectors: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise ParseError(f"{path}:{lineno}: expected cui plus {dim} "
                                 f"floats, got {len(parts) - 1}")
            cui = parts[0]
            if cui in vectors:
                raise ParseError(f"{path}:{lineno}: duplicate entry {cui!r}")
            try:
                vectors[cui] = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad float") from None
    if len(vectors) != count:
        raise ParseError(f"{path}: header says {count} rows, found "
                         f"{len(vectors)}")
    return InitialEmbeddings(dim, vectors)


def write_init_embeddings(path, vectors: Mapping[str, np.ndarray],
                          dim: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(vectors)} {dim}\n")
        for cui in sorted(vectors):
            values = " ".join(repr(float(v)) for v in vectors[cui])
            fh.write(f"{cui} {values}\n")


def link_entities(text: Sequence[str], dictionary: Mapping,
                  nested: bool = True) -> list[tuple[tuple[int, int], str]]:
    """Nested forward maximum matching.

    Scans left to right, emits the longest dictionary match at each
    position, and (in the nested variant) every dictionary term lying
    strictly inside an emitted span. Returns ((start, end), cui) with spans
    sorted by start, longer spans first at equal starts.
    """
    terms = {}
    for key, cui in dictionary.items():
        key_t = tuple(key.split()) if isinstance(key, str) else tuple(key)
        if not key_t:
            raise ValidationError("empty dictionary term")
        terms[key_t] = cui
    if not terms:
        raise ValidationError("dictionary must be non-empty")
    max_len = max(len(k) for k in terms)
    tokens = tuple(text)
    n = len(tokens)
    out = []
    i = 0
    while i < n:
        match_len = 0
        for L in range(min(max_len, n - i), 0, -1):
            candidate = tokens[i:i + L]
            if candidate in terms:
                out.append(((i, i + L), terms[candidate]))
                match_len = L
                break
        if match_len == 0:
            i += 1
            continue
        if nested and match_len > 1:
            for a in range(i, i + match_len):
                for b in range(a + 1, i + match_len + 1):
                    if b - a == match_len:
                        continue
                    sub = tokens[a:b]
                    if sub in terms:
                        out.append(((a, b), terms[sub]))
        i += match_len
    out.sort(key=lambda item: (item[0][0], -(item[0][1] - item[0][0])))
    return out


@dataclass(frozen=True)
class RawSentence:
    """Pre-tokenization sentence view used by the cleaning rules."""

    word_count: int
    subj_pos: int
    obj_pos: int
    relation: str
    payload: object = None


DEFAULT_REVERSE_MAP = {"MC": "MBC", "MBC": "MC"}
DEFAULT_SYMMETRIC = ("DDx", "NA")


def clean_sentences(sentences: Iterable[RawSentence],
                    reverse_map: Optional[Mapping[str, str]] = None,
                    symmetric: Sequence[str] = DEFAULT_SYMMETRIC,
                    min_words: int = 5) -> list[RawSentence]:
    """Drop short sentences; fix reversed entity order.

    A sentence whose object mention precedes its subject mention is moved
    to the reverse relation (swapping the mention roles); symmetric
    relations are kept as-is; directional relations without a reverse are
    dropped.
    """
    if reverse_map is None:
        reverse_map = DEFAULT_REVERSE_MAP
    out = []
    for sent in sentences:
        if sent.word_count < min_words:
            continue
        if sent.obj_pos >= sent.subj_pos or sent.relation in symmetric:
            out.append(sent)
            continue
        if sent.relation in reverse_map:
            out.append(RawSentence(sent.word_count, subj_pos=sent.obj_pos,
                                   obj_pos=sent.subj_pos,
                                   relation=reverse_map[sent.relation],
                                   payload=sent.payload))
        # no reverse relation: dropped
    return out
