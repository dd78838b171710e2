"""Data model and persistence for collections, score vectors, similarity
matrices, relevance judgments and ranked runs.

All on-disk formats are line oriented, UTF-8, LF terminated:

* score vectors:       ``query_id<TAB>doc_id<TAB>score``
* similarity matrices: ``doc_id<TAB>doc_id<TAB>score``
* qrels:               ``query_id 0 doc_id rel`` with rel in {0, 1}
* runs:                ``query_id Q0 doc_id rank score tag``

Scores are serialized with ``repr`` so that save/load round-trips are exact.
Zero scores are never stored: sparse structures treat 0 as absence, and a
loader drops explicit zeros. Loaded objects are immutable by convention and
safe to share across parallel query workers.
"""

from __future__ import annotations

import math
import re
import string
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DataFormatError,
    DuplicateEntryError,
    NegativeScoreError,
    UnknownDocumentError,
)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_token(token: str) -> str:
    """Lowercase a token and strip punctuation characters."""
    return token.lower().translate(_PUNCT_TABLE)


def tokenize(text: str) -> tuple[str, ...]:
    """Split on whitespace, lowercase and strip punctuation, drop empties."""
    return tuple(t for t in (normalize_token(w) for w in text.split()) if t)


def format_score(x: float) -> str:
    """Shortest decimal representation that round-trips through float()."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# core types


@dataclass
class DescriptorSet:
    """A document's low-level feature vectors with optional (x, y) locations."""

    vectors: np.ndarray                    # (T, D)
    locations: np.ndarray | None = None    # (T, 2), normalized to [0, 1]^2

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass
class Document:
    doc_id: str
    text_tokens: tuple[str, ...] = ()
    visual_descriptors: DescriptorSet | None = None


@dataclass
class Query:
    query_id: str
    text_tokens: tuple[str, ...]
    visual_descriptors: DescriptorSet | None = None

    def __post_init__(self):
        if not self.text_tokens:
            raise DataFormatError(f"query {self.query_id!r} has no text tokens")


@dataclass(frozen=True)
class DocTable:
    """Ordered universe of document ids; positions index score vectors."""

    ids: tuple[str, ...]

    @cached_property
    def index(self) -> dict[str, int]:
        return {doc_id: i for i, doc_id in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, doc_id: str, path=None, line_no=None) -> int:
        try:
            return self.index[doc_id]
        except KeyError:
            raise UnknownDocumentError(f"unknown document id {doc_id!r}",
                                       path=path, line_no=line_no) from None


@dataclass
class ScoreVector:
    """Sparse non-negative scores over a fixed universe of positions.

    Stored values are strictly positive; a missing position means 0.
    """

    entries: dict[int, float]
    dimension: int

    @property
    def nnz(self) -> int:
        return len(self.entries)

    def get(self, i: int) -> float:
        return self.entries.get(i, 0.0)

    def items_sorted(self) -> list[tuple[int, float]]:
        return sorted(self.entries.items())

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dimension)
        if self.entries:
            idx = np.fromiter(self.entries.keys(), dtype=np.intp, count=len(self.entries))
            vals = np.fromiter(self.entries.values(), dtype=np.float64, count=len(self.entries))
            dense[idx] = vals
        return dense

    @classmethod
    def from_dense(cls, values: np.ndarray) -> "ScoreVector":
        entries = {int(i): float(v) for i, v in enumerate(values) if v != 0.0}
        return cls(entries, int(values.shape[0]))


@dataclass
class SimMatrix:
    """Square sparse matrix stored as per-row ScoreVectors. No symmetry is
    imposed; absent rows are zero rows."""

    rows: dict[int, ScoreVector]
    dimension: int

    def row(self, i: int) -> ScoreVector:
        r = self.rows.get(i)
        if r is None:
            return ScoreVector({}, self.dimension)
        return r

    @property
    def entry_count(self) -> int:
        return sum(r.nnz for r in self.rows.values())

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.dimension, self.dimension))
        for i, r in self.rows.items():
            for j, v in r.entries.items():
                dense[i, j] = v
        return dense


@dataclass
class Qrels:
    """Binary relevance judgments: query id to the set of relevant doc ids."""

    relevant: dict[str, set[str]] = field(default_factory=dict)

    def num_relevant(self, query_id: str) -> int:
        return len(self.relevant.get(query_id, ()))

    def is_relevant(self, query_id: str, doc_id: str) -> bool:
        return doc_id in self.relevant.get(query_id, ())

    def query_ids(self) -> list[str]:
        return sorted(self.relevant)


# ---------------------------------------------------------------------------
# line-level helpers


def _read_lines(path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line:
                yield line_no, line


def _parse_score(text: str, path, line_no: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"malformed score {text!r}", path, line_no) from None
    if math.isnan(value) or math.isinf(value):
        raise DataFormatError(f"non-finite score {text!r}", path, line_no)
    if value < 0:
        raise NegativeScoreError(f"negative score {value}", path, line_no)
    return value


# ---------------------------------------------------------------------------
# documents, queries, descriptors, stopwords


def load_documents(path) -> list[Document]:
    """Read ``doc_id<TAB>token token ...`` lines. The token field may be
    empty; tokens are lowercased and stripped of punctuation."""
    docs: list[Document] = []
    seen: set[str] = set()
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) not in (1, 2):
            raise DataFormatError("expected 'doc_id<TAB>tokens'", path, line_no)
        doc_id = parts[0]
        if not doc_id:
            raise DataFormatError("empty document id", path, line_no)
        if doc_id in seen:
            raise DuplicateEntryError(f"duplicate document id {doc_id!r}", path, line_no)
        seen.add(doc_id)
        tokens = tokenize(parts[1]) if len(parts) == 2 else ()
        docs.append(Document(doc_id, tokens))
    return docs


def save_documents(docs: Sequence[Document], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(f"{doc.doc_id}\t{' '.join(doc.text_tokens)}\n")


def load_queries(path) -> list[Query]:
    queries: list[Query] = []
    seen: set[str] = set()
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError("expected 'query_id<TAB>tokens'", path, line_no)
        query_id, text = parts
        if query_id in seen:
            raise DuplicateEntryError(f"duplicate query id {query_id!r}", path, line_no)
        seen.add(query_id)
        tokens = tokenize(text)
        if not tokens:
            raise DataFormatError(f"query {query_id!r} has no tokens", path, line_no)
        queries.append(Query(query_id, tokens))
    return queries


def save_queries(queries: Sequence[Query], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(f"{q.query_id}\t{' '.join(q.text_tokens)}\n")


def load_descriptors(path) -> dict[str, DescriptorSet]:
    """Read ``id<TAB>x<TAB>y<TAB>v1,...,vD`` lines grouped by id."""
    vectors: dict[str, list[list[float]]] = {}
    locations: dict[str, list[tuple[float, float]]] = {}
    dim: int | None = None
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataFormatError("expected 'id<TAB>x<TAB>y<TAB>v1,...,vD'", path, line_no)
        key, xs, ys, vec_text = parts
        try:
            x, y = float(xs), float(ys)
            vec = [float(v) for v in vec_text.split(",")]
        except ValueError:
            raise DataFormatError("malformed descriptor line", path, line_no) from None
        if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
            raise DataFormatError(f"location ({x}, {y}) outside [0,1]^2", path, line_no)
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise DataFormatError(
                f"descriptor dimension {len(vec)} != {dim}", path, line_no)
        vectors.setdefault(key, []).append(vec)
        locations.setdefault(key, []).append((x, y))
    return {
        key: DescriptorSet(np.asarray(vectors[key], dtype=np.float64),
                           np.asarray(locations[key], dtype=np.float64))
        for key in vectors
    }


def save_descriptors(sets: Mapping[str, DescriptorSet], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(sets):
            ds = sets[key]
            locs = ds.locations
            if locs is None:
                raise DataFormatError(f"descriptor set {key!r} has no locations")
            for t in range(len(ds)):
                vec = ",".join(format_score(v) for v in ds.vectors[t])
                fh.write(f"{key}\t{format_score(locs[t, 0])}\t{format_score(locs[t, 1])}\t{vec}\n")


def attach_descriptors(docs: Sequence[Document], sets: Mapping[str, DescriptorSet]) -> None:
    """Attach loaded descriptor sets to documents in place; ids without a
    descriptor set keep None."""
    for doc in docs:
        ds = sets.get(doc.doc_id)
        if ds is not None:
            doc.visual_descriptors = ds


def load_stopwords(path) -> set[str]:
    words = set()
    for _, line in _read_lines(path):
        words.add(normalize_token(line.strip()))
    words.discard("")
    return words


# ---------------------------------------------------------------------------
# score vectors and similarity matrices


def load_score_vectors(path, docs: DocTable) -> dict[str, ScoreVector]:
    """Load per-query sparse score vectors keyed by query id.

    Explicit zero scores are legal input but are not stored.
    """
    out: dict[str, dict[int, float]] = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError("expected 'query_id<TAB>doc_id<TAB>score'", path, line_no)
        query_id, doc_id, score_text = parts
        score = _parse_score(score_text, path, line_no)
        pos = docs.position(doc_id, path, line_no)
        entries = out.setdefault(query_id, {})
        if pos in entries:
            raise DuplicateEntryError(
                f"duplicate entry ({query_id!r}, {doc_id!r})", path, line_no)
        entries[pos] = score
    return {
        qid: ScoreVector({p: s for p, s in entries.items() if s > 0}, len(docs))
        for qid, entries in out.items()
    }


def save_score_vectors(vectors: Mapping[str, ScoreVector], docs: DocTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for query_id in sorted(vectors):
            for pos, score in vectors[query_id].items_sorted():
                fh.write(f"{query_id}\t{docs.ids[pos]}\t{format_score(score)}\n")


def load_sim_matrix(path, docs: DocTable) -> SimMatrix:
    rows: dict[int, dict[int, float]] = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError("expected 'doc_id<TAB>doc_id<TAB>score'", path, line_no)
        row_id, col_id, score_text = parts
        score = _parse_score(score_text, path, line_no)
        i = docs.position(row_id, path, line_no)
        j = docs.position(col_id, path, line_no)
        row = rows.setdefault(i, {})
        if j in row:
            raise DuplicateEntryError(
                f"duplicate entry ({row_id!r}, {col_id!r})", path, line_no)
        row[j] = score
    n = len(docs)
    out = {}
    for i, entries in rows.items():
        kept = {j: s for j, s in entries.items() if s > 0}
        if kept:
            out[i] = ScoreVector(kept, n)
    return SimMatrix(out, n)


def save_sim_matrix(matrix: SimMatrix, docs: DocTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in sorted(matrix.rows):
            row_id = docs.ids[i]
            for j, score in matrix.rows[i].items_sorted():
                fh.write(f"{row_id}\t{docs.ids[j]}\t{format_score(score)}\n")


# ---------------------------------------------------------------------------
# qrels and runs


def load_qrels(path) -> Qrels:
    relevant: dict[str, set[str]] = {}
    for line_no, line in _read_lines(path):
        parts = line.split()
        if len(parts) != 4 or parts[1] != "0":
            raise DataFormatError("expected 'query_id 0 doc_id rel'", path, line_no)
        query_id, _, doc_id, rel_text = parts
        if rel_text not in ("0", "1"):
            raise DataFormatError(f"relevance must be 0 or 1, got {rel_text!r}", path, line_no)
        if rel_text == "1":
            relevant.setdefault(query_id, set()).add(doc_id)
        else:
            relevant.setdefault(query_id, set())
    return Qrels(relevant)


def save_qrels(qrels: Qrels, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for query_id in sorted(qrels.relevant):
            for doc_id in sorted(qrels.relevant[query_id]):
                fh.write(f"{query_id} 0 {doc_id} 1\n")


def ranked_entries(scores: ScoreVector, docs: DocTable) -> list[tuple[str, float]]:
    """Order nonzero scores by descending value, then ascending doc id."""
    pairs = [(docs.ids[pos], value) for pos, value in scores.entries.items()]
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return pairs


def save_run(run: Mapping[str, Sequence[tuple[str, float]]], path,
             tag: str = "fusegraph") -> None:
    """Write ranked lists in TREC run format.

    Ties get deterministic ranks: descending score, then ascending doc id.
    NaN scores are rejected because they cannot be ordered.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for query_id in sorted(run):
            entries = list(run[query_id])
            for doc_id, score in entries:
                if math.isnan(score):
                    raise DataFormatError(
                        f"NaN score for ({query_id!r}, {doc_id!r})", path)
            entries.sort(key=lambda p: (-p[1], p[0]))
            for rank, (doc_id, score) in enumerate(entries, start=1):
                fh.write(f"{query_id} Q0 {doc_id} {rank} {format_score(score)} {tag}\n")


_RUN_LINE = re.compile(r"^(\S+) Q0 (\S+) (\d+) (\S+) (\S+)$")


def load_run(path) -> dict[str, list[tuple[str, float]]]:
    run: dict[str, list[tuple[str, float]]] = {}
    for line_no, line in _read_lines(path):
        m = _RUN_LINE.match(line)
        if not m:
            raise DataFormatError("expected 'query_id Q0 doc_id rank score tag'", path, line_no)
        query_id, doc_id, _, score_text, _ = m.groups()
        try:
            score = float(score_text)
        except ValueError:
            raise DataFormatError(f"malformed score {score_text!r}", path, line_no) from None
        run.setdefault(query_id, []).append((doc_id, score))
    return run
