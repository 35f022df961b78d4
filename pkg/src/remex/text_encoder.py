"""Bag-of-sentences text encoder.

Entity mentions are wrapped in typed marker tokens, each sentence runs
through a pluggable backbone, the vectors at open-marker positions are
gathered across the bag, and self-attention pooling turns them into one
embedding per entity role.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .autodiff import Tensor, ops, parameter
from .data import MARKER, Sentence, SentenceBag, TokenTable, token_kind
from .errors import RemexError, ShapeError, TokenizeError, VocabularyError
from .seeding import stable_seed


class PoolingError(RemexError):
    """No marker positions available to pool over."""


class TruncationWarning(UserWarning):
    """A tokenized sequence exceeded d_l and was shortened."""


@dataclass
class MarkerVocab:
    """Typed entity-marker tokens plus the structural tokens.

    Built over a TokenTable; marker ids are disjoint from word ids because
    the angle-bracket forms can never collide with plain words.
    """

    subject_open: dict[str, int]
    subject_close: dict[str, int]
    object_open: dict[str, int]
    object_close: dict[str, int]
    sep: int
    empty_title: int

    @classmethod
    def build(cls, table: TokenTable,
              semtypes: Sequence[str] = ("t047",)) -> "MarkerVocab":
        so, sc, oo, oc = {}, {}, {}, {}
        for t in semtypes:
            so[t] = table.add(f"<S-{t}>")
            sc[t] = table.add(f"<S-{t}/>")
            oo[t] = table.add(f"<O-{t}>")
            oc[t] = table.add(f"<O-{t}/>")
        return cls(so, sc, oo, oc, table.add("<sep>"),
                   table.add("<empty_title>"))

    @property
    def semtypes(self) -> tuple[str, ...]:
        return tuple(sorted(self.subject_open))

    def open_ids(self, role: str) -> set[int]:
        return set((self.subject_open if role == "subject"
                    else self.object_open).values())


def _pair_positions(tokens: Sequence[int], table: TokenTable) -> dict[int, int]:
    """Map close-marker position -> its open-marker position."""
    stacks: dict[str, list[int]] = {}
    close_to_open: dict[int, int] = {}
    for i, tid in enumerate(tokens):
        form = table.token(tid)
        if token_kind(form) != MARKER:
            continue
        if form.endswith("/>"):
            base = form[:-2] + ">"
            if stacks.get(base):
                close_to_open[i] = stacks[base].pop()
        else:
            stacks.setdefault(form, []).append(i)
    return close_to_open


def truncate_marked(tokens: Sequence[int], subj_markers: Sequence[int],
                    obj_markers: Sequence[int], limit: int,
                    table: TokenTable):
    """Shorten to ``limit`` tokens from the end without splitting a marker
    pair; dropping a close marker drops its open marker too. Returns
    (tokens, I_s, I_o, truncated?)."""
    if len(tokens) <= limit:
        return tuple(tokens), tuple(subj_markers), tuple(obj_markers), False
    close_to_open = _pair_positions(tokens, table)
    keep = [True] * len(tokens)
    kept = len(tokens)
    i = len(tokens) - 1
    while kept > limit and i >= 0:
        if keep[i]:
            keep[i] = False
            kept -= 1
            opener = close_to_open.get(i)
            if opener is not None and keep[opener]:
                keep[opener] = False
                kept -= 1
        i -= 1
    new_index = {}
    j = 0
    for i, k in enumerate(keep):
        if k:
            new_index[i] = j
            j += 1
    new_tokens = tuple(t for i, t in enumerate(tokens) if keep[i])
    new_s = tuple(new_index[p] for p in subj_markers if keep[p])
    new_o = tuple(new_index[p] for p in obj_markers if keep[p])
    return new_tokens, new_s, new_o, True


def tokenize_with_markers(word_ids: Sequence[int],
                          subject_spans: Sequence[tuple[int, int, str]],
                          object_spans: Sequence[tuple[int, int, str]],
                          title_ids: Sequence[int], markers: MarkerVocab,
                          table: TokenTable, d_l: int):
    """Insert typed markers around entity spans and append the title.

    Spans are (start, end, semtype) over the word sequence, half-open.
    Returns (token ids, I_s, I_o) with I_s/I_o holding open-marker
    positions. Sequences longer than d_l are shortened from the end
    (marker pairs kept whole) with a TruncationWarning.
    """
    n = len(word_ids)
    spans = [(s, e, st, "subject") for (s, e, st) in subject_spans] + \
            [(s, e, st, "object") for (s, e, st) in object_spans]
    for s, e, st, role in spans:
        if not (0 <= s < e <= n):
            raise TokenizeError(f"{role} span [{s},{e}) out of range for "
                                f"length {n}")
    ordered = sorted(spans)
    for (s1, e1, _, r1), (s2, e2, _, r2) in zip(ordered, ordered[1:]):
        if s2 < e1:
            raise TokenizeError(f"overlapping spans [{s1},{e1}) ({r1}) and "
                                f"[{s2},{e2}) ({r2})")
    open_at: dict[int, tuple[str, str]] = {}
    close_after: dict[int, tuple[str, str]] = {}
    for s, e, st, role in spans:
        open_at[s] = (role, st)
        close_after[e - 1] = (role, st)
    out: list[int] = []
    subj_pos: list[int] = []
    obj_pos: list[int] = []
    for i, w in enumerate(word_ids):
        if i in open_at:
            role, st = open_at[i]
            if role == "subject":
                if st not in markers.subject_open:
                    raise VocabularyError(f"semantic type {st!r} has no markers")
                subj_pos.append(len(out))
                out.append(markers.subject_open[st])
            else:
                if st not in markers.object_open:
                    raise VocabularyError(f"semantic type {st!r} has no markers")
                obj_pos.append(len(out))
                out.append(markers.object_open[st])
        out.append(w)
        if i in close_after:
            role, st = close_after[i]
            out.append(markers.subject_close[st] if role == "subject"
                       else markers.object_close[st])
    out.append(markers.sep)
    if title_ids:
        out.extend(title_ids)
    else:
        out.append(markers.empty_title)
    tokens, i_s, i_o, truncated = truncate_marked(out, subj_pos, obj_pos,
                                                  d_l, table)
    if truncated:
        warnings.warn(f"sequence of {len(out)} tokens shortened to {d_l}",
                      TruncationWarning)
    return tokens, i_s, i_o


class TextBackbone(Protocol):
    d_hs: int

    def encode(self, token_ids: Sequence[int]) -> Tensor: ...

    def parameters(self) -> dict[str, Tensor]: ...


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    enc = np.zeros((length, dim))
    enc[:, 0::2] = np.sin(angles[:, 0::2])
    enc[:, 1::2] = np.cos(angles[:, 1::2])
    return enc


class TinyAttentionBackbone:
    """Trainable embedding table + sinusoidal positions + one
    self-attention mixing layer with a residual connection.

    Deterministic in every mode (no dropout), so eval reproducibility
    holds by construction.
    """

    def __init__(self, embedding: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                 wo: Tensor):
        self.embedding = embedding
        self.wq, self.wk, self.wv, self.wo = wq, wk, wv, wo
        self.d_hs = embedding.data.shape[1]
        self._pos_cache: Optional[np.ndarray] = None

    @classmethod
    def create(cls, rng: np.random.Generator, vocab_size: int, d_hs: int,
               dtype=np.float32) -> "TinyAttentionBackbone":
        def mat(shape, name, scale):
            return parameter(rng.normal(0.0, scale, shape), name, dtype=dtype)

        return cls(
            embedding=mat((vocab_size, d_hs), "backbone.embedding", 0.1),
            wq=mat((d_hs, d_hs), "backbone.wq", 1.0 / np.sqrt(d_hs)),
            wk=mat((d_hs, d_hs), "backbone.wk", 1.0 / np.sqrt(d_hs)),
            wv=mat((d_hs, d_hs), "backbone.wv", 1.0 / np.sqrt(d_hs)),
            wo=mat((d_hs, d_hs), "backbone.wo", 1.0 / np.sqrt(d_hs)))

    def _positions(self, length: int) -> np.ndarray:
        if self._pos_cache is None or self._pos_cache.shape[0] < length:
            self._pos_cache = sinusoidal_positions(max(length, 64), self.d_hs) \
                .astype(self.embedding.data.dtype)
        return self._pos_cache[:length]

    def encode(self, token_ids: Sequence[int]) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.intp)
        if ids.size == 0:
            raise ShapeError("cannot encode an empty token sequence")
        x = ops.add(ops.gather_rows(self.embedding, ids),
                    Tensor(self._positions(len(ids))))
        q = ops.matmul(x, self.wq)
        k = ops.matmul(x, self.wk)
        v = ops.matmul(x, self.wv)
        scores = ops.mul(ops.contract("ld,md->lm", q, k),
                         1.0 / np.sqrt(self.d_hs))
        attn = ops.softmax(scores, axis=-1)
        return ops.add(x, ops.matmul(ops.matmul(attn, v), self.wo))

    def parameters(self) -> dict[str, Tensor]:
        return {"backbone.embedding": self.embedding, "backbone.wq": self.wq,
                "backbone.wk": self.wk, "backbone.wv": self.wv,
                "backbone.wo": self.wo}


@dataclass
class PoolingParams:
    """Self-attention pooling vector and optional scorer-side projection."""

    omega: Tensor
    proj: Optional[Tensor] = None

    @classmethod
    def create(cls, rng: np.random.Generator, d_hs: int,
               d_h: Optional[int] = None, dtype=np.float32) -> "PoolingParams":
        omega = parameter(rng.normal(0.0, 1.0 / np.sqrt(d_hs), d_hs),
                          "pool.omega", dtype=dtype)
        proj = None
        if d_h is not None:
            proj = parameter(rng.normal(0.0, 1.0 / np.sqrt(d_hs), (d_hs, d_h)),
                             "pool.proj", dtype=dtype)
        return cls(omega, proj)

    def parameters(self) -> dict[str, Tensor]:
        out = {"pool.omega": self.omega}
        if self.proj is not None:
            out["pool.proj"] = self.proj
        return out


def pool_entity(encoded: Sequence[Tensor],
                positions: Sequence[Sequence[int]], params: PoolingParams,
                project: bool = False) -> Tensor:
    """Gather open-marker vectors across the bag and pool with
    softmax(omega . tanh(column)) weights."""
    gathered = []
    for h_m, pos in zip(encoded, positions):
        if len(pos):
            gathered.append(ops.gather_rows(h_m, list(pos)))
    if not gathered:
        raise PoolingError("no marker positions to pool over")
    cols = gathered[0] if len(gathered) == 1 else ops.concat(gathered, axis=0)
    scores = ops.contract("pd,d->p", ops.tanh(cols), params.omega)
    weights = ops.softmax(scores, axis=0)
    pooled = ops.contract("p,pd->d", weights, cols)
    if project:
        if params.proj is None:
            raise ShapeError("projection requested but no projection matrix")
        pooled = ops.matmul(pooled, params.proj)
    return pooled


def select_sentences(bag: SentenceBag, l_max: int, mode: str,
                     rng: Optional[np.random.Generator] = None,
                     seed: Optional[int] = None) -> list[Sentence]:
    """Training picks l_max distinct sentences at random; eval takes the
    first l_max, so evaluation never depends on sampling state."""
    if bag.size <= l_max:
        return list(bag.sentences)
    if mode == "eval":
        return list(bag.sentences[:l_max])
    if rng is None:
        rng = np.random.default_rng(stable_seed(seed or 0, "bag", bag.subject,
                                                bag.object))
    picked = sorted(rng.choice(bag.size, size=l_max, replace=False))
    return [bag.sentences[i] for i in picked]


def compose_sequence(sent: Sentence, markers: MarkerVocab) -> tuple[int, ...]:
    """Backbone-ready sequence: marked tokens, then <sep>, then the title
    (or <empty_title>). Marker positions are unaffected because everything
    is appended after the sentence body."""
    tail = sent.title if sent.title else (markers.empty_title,)
    return tuple(sent.tokens) + (markers.sep,) + tuple(tail)


def encode_bag(bag: SentenceBag, backbone: TextBackbone, table: TokenTable,
               markers: MarkerVocab, l_max: int, d_l: int,
               mode: str = "eval",
               rng: Optional[np.random.Generator] = None):
    """Encode up to l_max sentences; returns (encoded, subj_positions,
    obj_positions) aligned by sentence."""
    selected = select_sentences(bag, l_max, mode, rng)
    encoded, subj_positions, obj_positions = [], [], []
    for sent in selected:
        seq = compose_sequence(sent, markers)
        i_s, i_o = sent.subj_markers, sent.obj_markers
        if len(seq) > d_l:
            seq, i_s, i_o, _ = truncate_marked(seq, i_s, i_o, d_l, table)
            warnings.warn(f"bag ({bag.subject}, {bag.object}): sentence of "
                          f"{len(compose_sequence(sent, markers))} tokens "
                          f"shortened to {d_l}", TruncationWarning)
        encoded.append(backbone.encode(seq))
        subj_positions.append(i_s)
        obj_positions.append(i_o)
    return encoded, subj_positions, obj_positions


class TextEncoder:
    """Backbone + pooling bundled per modality."""

    def __init__(self, backbone: TextBackbone, pooling: PoolingParams,
                 table: TokenTable, markers: MarkerVocab, l_max: int,
                 d_l: int):
        self.backbone = backbone
        self.pooling = pooling
        self.table = table
        self.markers = markers
        self.l_max = l_max
        self.d_l = d_l

    def encode_pair(self, bag: SentenceBag, mode: str = "eval",
                    rng: Optional[np.random.Generator] = None,
                    project: bool = False) -> tuple[Tensor, Tensor]:
        encoded, subj_pos, obj_pos = encode_bag(
            bag, self.backbone, self.table, self.markers, self.l_max,
            self.d_l, mode, rng)
        h_s = pool_entity(encoded, subj_pos, self.pooling, project=project)
        h_o = pool_entity(encoded, obj_pos, self.pooling, project=project)
        return h_s, h_o

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.backbone.parameters())
        out.update(self.pooling.parameters())
        return out
