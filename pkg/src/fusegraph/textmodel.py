"""Monomedia text scoring.

Two scoring models over a token index:

* ``lm_score``: query likelihood under a Dirichlet-smoothed unigram language
  model, p(v|d) = (tf(v,d) + mu * p(v|C)) / (|d| + mu), multiplied over query
  tokens.
* ``le_score``: the same product, but each query token v is generated through
  a per-term translation distribution p(v|u) estimated from term co-occurrence,
  so a document can match a query token it never contains.

Scoring works in log space; a token absent from the whole collection has zero
background mass and therefore zeroes the product (it is not an error).

Batch helpers score every query against its candidate documents (documents
sharing at least one query term, expanded through the translation table for
``le``) so that the resulting score vectors are genuinely sparse.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DataFormatError, UnknownDocumentError
from .store import DocTable, Document, Query, ScoreVector, SimMatrix, format_score, _read_lines


@dataclass(frozen=True)
class TextModelParams:
    """Dirichlet smoothing mass and the translation-row size cap."""

    dirichlet_mu: float = 1000.0
    entailment_cap: int = 10

    def __post_init__(self):
        if self.dirichlet_mu <= 0:
            raise ValueError("dirichlet_mu must be positive")
        if self.entailment_cap < 1:
            raise ValueError("entailment_cap must be at least 1")


@dataclass
class TextIndex:
    """Immutable term statistics for one document collection."""

    vocabulary: dict[str, int]
    terms: tuple[str, ...]
    doc_table: DocTable
    doc_term_counts: tuple[dict[int, int], ...]
    collection_term_counts: np.ndarray
    doc_lengths: np.ndarray
    total_tokens: int
    postings: dict[int, np.ndarray]
    stopwords: frozenset[str] = frozenset()

    @property
    def num_docs(self) -> int:
        return len(self.doc_table)

    @property
    def num_terms(self) -> int:
        return len(self.terms)

    def doc_position(self, doc_id: str) -> int:
        return self.doc_table.position(doc_id)

    def background_prob(self, term_id: int) -> float:
        return float(self.collection_term_counts[term_id]) / self.total_tokens


def build_index(docs: Sequence[Document], stopwords: Iterable[str] = ()) -> TextIndex:
    """Count terms per document after stopword removal."""
    stop = set(stopwords)
    vocabulary: dict[str, int] = {}
    per_doc: list[dict[int, int]] = []
    for doc in docs:
        counts: dict[int, int] = {}
        for token in doc.text_tokens:
            if token in stop:
                continue
            term_id = vocabulary.setdefault(token, len(vocabulary))
            counts[term_id] = counts.get(term_id, 0) + 1
        per_doc.append(counts)

    total = sum(sum(c.values()) for c in per_doc)
    if total == 0:
        raise DataFormatError("corpus has no tokens after stopword removal")

    n_terms = len(vocabulary)
    collection = np.zeros(n_terms, dtype=np.int64)
    lengths = np.zeros(len(docs), dtype=np.int64)
    postings_lists: dict[int, list[int]] = {}
    for pos, counts in enumerate(per_doc):
        lengths[pos] = sum(counts.values())
        for term_id, tf in counts.items():
            collection[term_id] += tf
            postings_lists.setdefault(term_id, []).append(pos)

    terms = tuple(sorted(vocabulary, key=vocabulary.get))
    postings = {t: np.asarray(ps, dtype=np.intp) for t, ps in postings_lists.items()}
    return TextIndex(
        vocabulary=vocabulary,
        terms=terms,
        doc_table=DocTable(tuple(d.doc_id for d in docs)),
        doc_term_counts=tuple(per_doc),
        collection_term_counts=collection,
        doc_lengths=lengths,
        total_tokens=int(total),
        postings=postings,
        stopwords=frozenset(stop),
    )


def smoothed_term_prob(index: TextIndex, mu: float, term: str, doc_id: str) -> float:
    """Dirichlet-smoothed p(term | doc); 0 for terms outside the collection."""
    pos = index.doc_position(doc_id)
    term_id = index.vocabulary.get(term)
    tf = 0.0
    background = 0.0
    if term_id is not None:
        tf = float(index.doc_term_counts[pos].get(term_id, 0))
        background = index.background_prob(term_id)
    return (tf + mu * background) / (float(index.doc_lengths[pos]) + mu)


def lm_score(index: TextIndex, params: TextModelParams,
             query_tokens: Sequence[str], doc_id: str) -> float:
    """Query likelihood with Dirichlet smoothing; empty queries score 1."""
    log_total = 0.0
    for token in query_tokens:
        p = smoothed_term_prob(index, params.dirichlet_mu, token, doc_id)
        if p <= 0.0:
            return 0.0
        log_total += math.log(p)
    return math.exp(log_total)


# ---------------------------------------------------------------------------
# term translation table


@dataclass
class EntailmentTable:
    """Per-term sparse translation distributions p(target | source).

    ``rows[u]`` maps target term ids to probabilities summing to 1, holds at
    most ``cap`` entries and always gives the source term itself positive mass.
    """

    rows: dict[int, dict[int, float]]
    cap: int
    _sources: dict[int, list[tuple[int, float]]] | None = field(
        default=None, repr=False, compare=False)

    def sources(self, target: int) -> list[tuple[int, float]]:
        """All (source, p(target|source)) pairs with positive probability."""
        if self._sources is None:
            transpose: dict[int, list[tuple[int, float]]] = {}
            for u, row in self.rows.items():
                for v, p in row.items():
                    transpose.setdefault(v, []).append((u, p))
            for pairs in transpose.values():
                pairs.sort()
            self._sources = transpose
        return self._sources.get(target, [])


def identity_table(index: TextIndex, cap: int = 10) -> EntailmentTable:
    return EntailmentTable({t: {t: 1.0} for t in range(index.num_terms)}, cap)


def _presence_mutual_information(n_docs: int, n_u: int, n_v: int, n_uv: int) -> float:
    """Mutual information of the two presence indicators, in nats."""
    cells = (
        (n_uv, n_u, n_v),
        (n_u - n_uv, n_u, n_docs - n_v),
        (n_v - n_uv, n_docs - n_u, n_v),
        (n_docs - n_u - n_v + n_uv, n_docs - n_u, n_docs - n_v),
    )
    total = 0.0
    for joint, ma, mb in cells:
        if joint <= 0:
            continue
        total += (joint / n_docs) * math.log(joint * n_docs / (ma * mb))
    return max(total, 0.0)


def estimate_entailment(index: TextIndex, params: TextModelParams) -> EntailmentTable:
    """Build translation rows from document-level co-occurrence.

    A target term qualifies only if it co-occurs with the source in at least
    one document and carries positive mutual information; the source term is
    always kept so exact matches never lose all mass. Rows where every
    association is zero degrade to the identity on the source term.
    """
    n_docs = index.num_docs
    doc_freq = np.zeros(index.num_terms, dtype=np.int64)
    pair_counts: Counter[tuple[int, int]] = Counter()
    for counts in index.doc_term_counts:
        present = sorted(counts)
        for t in present:
            doc_freq[t] += 1
        for a, b in combinations(present, 2):
            pair_counts[(a, b)] += 1

    cooccur: dict[int, list[int]] = {}
    for (a, b), _ in pair_counts.items():
        cooccur.setdefault(a, []).append(b)
        cooccur.setdefault(b, []).append(a)

    rows: dict[int, dict[int, float]] = {}
    for u in range(index.num_terms):
        n_u = int(doc_freq[u])
        self_score = _presence_mutual_information(n_docs, n_u, n_u, n_u)
        scored: list[tuple[float, int]] = []
        for v in cooccur.get(u, ()):
            key = (u, v) if u < v else (v, u)
            mi = _presence_mutual_information(
                n_docs, n_u, int(doc_freq[v]), pair_counts[key])
            if mi > 0.0:
                scored.append((mi, v))
        scored.sort(key=lambda sv: (-sv[0], sv[1]))
        weights = {u: self_score}
        for mi, v in scored[: params.entailment_cap - 1]:
            weights[v] = mi
        total = sum(weights.values())
        if total <= 0.0:
            rows[u] = {u: 1.0}
        else:
            rows[u] = {v: w / total for v, w in sorted(weights.items())}
    return EntailmentTable(rows, params.entailment_cap)


def le_score(index: TextIndex, table: EntailmentTable, params: TextModelParams,
             query_tokens: Sequence[str], doc_id: str) -> float:
    """Translation-based likelihood: each query token may be generated by any
    of its source terms under the document's smoothed language model."""
    pos = index.doc_position(doc_id)
    mu = params.dirichlet_mu
    counts = index.doc_term_counts[pos]
    denom = float(index.doc_lengths[pos]) + mu
    log_total = 0.0
    for token in query_tokens:
        target = index.vocabulary.get(token)
        mass = 0.0
        if target is not None:
            for source, p_translate in table.sources(target):
                tf = float(counts.get(source, 0))
                p_doc = (tf + mu * index.background_prob(source)) / denom
                mass += p_translate * p_doc
        if mass <= 0.0:
            return 0.0
        log_total += math.log(mass)
    return math.exp(log_total)


def save_entailment_table(table: EntailmentTable, index: TextIndex, path) -> None:
    """Persist rows as 'source<TAB>target<TAB>probability' triplets."""
    with open(path, "w", encoding="utf-8") as fh:
        for u in sorted(table.rows):
            for v, p in sorted(table.rows[u].items()):
                fh.write(f"{index.terms[u]}\t{index.terms[v]}\t{format_score(p)}\n")


def load_entailment_table(path, index: TextIndex, cap: int = 10) -> EntailmentTable:
    rows: dict[int, dict[int, float]] = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError("expected 'source<TAB>target<TAB>probability'",
                                  path, line_no)
        source, target, p_text = parts
        if source not in index.vocabulary or target not in index.vocabulary:
            raise UnknownDocumentError(f"unknown term in {line!r}", path, line_no)
        try:
            p = float(p_text)
        except ValueError:
            raise DataFormatError(f"malformed probability {p_text!r}", path, line_no) from None
        rows.setdefault(index.vocabulary[source], {})[index.vocabulary[target]] = p
    return EntailmentTable(rows, cap)


# ---------------------------------------------------------------------------
# batch scoring


def _smoothed_dense(index: TextIndex, mu: float) -> np.ndarray:
    """Dense (docs x terms) matrix of Dirichlet-smoothed term probabilities."""
    n, v = index.num_docs, index.num_terms
    tf = np.zeros((n, v))
    for pos, counts in enumerate(index.doc_term_counts):
        for term_id, count in counts.items():
            tf[pos, term_id] = count
    background = index.collection_term_counts / index.total_tokens
    return (tf + mu * background[None, :]) / (index.doc_lengths[:, None] + mu)


def _log_generation_matrix(index: TextIndex, params: TextModelParams,
                           table: EntailmentTable | None) -> np.ndarray:
    """log p(target term | doc) for every (doc, term), optionally routed
    through the translation table."""
    smoothed = _smoothed_dense(index, params.dirichlet_mu)
    if table is None:
        return np.log(smoothed)
    data, rows_ix, cols_ix = [], [], []
    for u, row in table.rows.items():
        for v, p in row.items():
            rows_ix.append(u)
            cols_ix.append(v)
            data.append(p)
    translate = sp.csr_matrix(
        (data, (rows_ix, cols_ix)), shape=(index.num_terms, index.num_terms))
    generated = smoothed @ translate
    with np.errstate(divide="ignore"):
        return np.log(generated)


def _candidate_positions(index: TextIndex, token_ids: Sequence[int],
                         table: EntailmentTable | None) -> np.ndarray:
    source_ids: set[int] = set()
    for v in token_ids:
        if table is None:
            source_ids.add(v)
        else:
            source_ids.update(u for u, _ in table.sources(v))
    chunks = [index.postings[u] for u in source_ids if u in index.postings]
    if not chunks:
        return np.empty(0, dtype=np.intp)
    return np.unique(np.concatenate(chunks))


class BatchTextScorer:
    """Scores token sequences against all candidate documents at once.

    The per-document values match ``lm_score``/``le_score`` up to floating
    point reassociation; candidates are the documents reachable through at
    least one (possibly translated) query term, so every other document
    scores exactly zero.
    """

    def __init__(self, index: TextIndex, params: TextModelParams,
                 table: EntailmentTable | None = None):
        self.index = index
        self.params = params
        self.table = table
        self._log_gen = _log_generation_matrix(index, params, table)

    def _score_ids(self, token_ids: Sequence[int],
                   exclude_position: int | None = None) -> ScoreVector:
        index = self.index
        dim = index.num_docs
        if not token_ids:
            return ScoreVector({}, dim)
        cand = _candidate_positions(index, token_ids, self.table)
        if exclude_position is not None:
            cand = cand[cand != exclude_position]
        if cand.size == 0:
            return ScoreVector({}, dim)
        log_scores = self._log_gen[np.ix_(cand, np.asarray(token_ids))].sum(axis=1)
        scores = np.exp(log_scores)
        entries = {int(p): float(s) for p, s in zip(cand, scores) if s > 0.0}
        return ScoreVector(entries, dim)

    def score_tokens(self, tokens: Sequence[str]) -> ScoreVector:
        """Sparse scores for one query. Stopwords used at indexing time are
        dropped; any other token outside the collection vocabulary zeroes
        every product, so the result is empty."""
        index = self.index
        kept = [t for t in tokens if t not in index.stopwords]
        token_ids = [index.vocabulary[t] for t in kept if t in index.vocabulary]
        if len(token_ids) < len(kept):
            return ScoreVector({}, index.num_docs)
        return self._score_ids(token_ids)

    def score_queries(self, queries: Sequence[Query]) -> dict[str, ScoreVector]:
        return {q.query_id: self.score_tokens(q.text_tokens) for q in queries}

    def similarity_matrix(self, row_cap: int | None = None) -> SimMatrix:
        """Document-document scores, each row using the row document's indexed
        terms as the query. Self similarity is left out so diffusion graphs
        carry no self loops."""
        index = self.index
        rows: dict[int, ScoreVector] = {}
        for pos, counts in enumerate(index.doc_term_counts):
            if not counts:
                continue
            token_ids = [t for t, tf in sorted(counts.items()) for _ in range(tf)]
            row = self._score_ids(token_ids, exclude_position=pos)
            if row.nnz == 0:
                continue
            if row_cap is not None and row.nnz > row_cap:
                keep = sorted(row.entries.items(), key=lambda kv: (-kv[1], kv[0]))[:row_cap]
                row = ScoreVector(dict(keep), row.dimension)
            rows[pos] = row
        return SimMatrix(rows, index.num_docs)
