"""Per-query semantic filtering.

Given a query's text scores over the whole collection, keep the l
highest-scoring documents where l = min(number of nonzero scores, m_cap),
then restrict every score vector and similarity matrix to that subset,
reindexed into a dense local space of size l. Retained values are copied
bit for bit; everything outside the selection becomes zero by omission.

A query whose text scores are identically zero cannot be filtered; it is
reported as unanswerable rather than crashing a batch run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import ConfigError, EmptyTextResultError
from .store import DocTable, ScoreVector, SimMatrix

DEFAULT_M_CAP = 1000


@dataclass(frozen=True)
class FilteredContext:
    """The reduced per-query workspace over the selected documents.

    ``selected`` holds doc ids ordered by descending text score (ties broken
    by ascending doc id); ``selected_positions`` holds the matching positions
    in the collection-wide universe; ``index_map`` maps doc id to the local
    index in [0, l).
    """

    query_id: str
    selected: tuple[str, ...]
    selected_positions: tuple[int, ...]
    index_map: dict[str, int]
    text_scores: ScoreVector
    visual_scores: ScoreVector | None
    text_sim: SimMatrix | None
    visual_sim: SimMatrix | None
    m_cap: int = DEFAULT_M_CAP

    @property
    def l(self) -> int:
        return len(self.selected)

    def local_doc_ids(self) -> tuple[str, ...]:
        return self.selected


def select_top_l(scores: ScoreVector, docs: DocTable, m_cap: int = DEFAULT_M_CAP) -> list[int]:
    """Positions of the top-l documents by descending score, ties broken by
    ascending doc id; l = min(nnz, m_cap)."""
    if m_cap < 1:
        raise ConfigError(f"m_cap must be positive, got {m_cap}")
    if scores.nnz == 0:
        raise EmptyTextResultError()
    ordered = sorted(scores.entries.items(), key=lambda pv: (-pv[1], docs.ids[pv[0]]))
    return [pos for pos, _ in ordered[: min(scores.nnz, m_cap)]]


def _local_vector(source: ScoreVector, positions: Sequence[int]) -> ScoreVector:
    entries = {}
    for local, pos in enumerate(positions):
        value = source.entries.get(pos)
        if value is not None:
            entries[local] = value
    return ScoreVector(entries, len(positions))


def _local_matrix(source: SimMatrix, positions: Sequence[int]) -> SimMatrix:
    to_local = {pos: local for local, pos in enumerate(positions)}
    rows = {}
    for local, pos in enumerate(positions):
        row = source.rows.get(pos)
        if row is None:
            continue
        entries = {}
        for col, value in row.entries.items():
            dest = to_local.get(col)
            if dest is not None:
                entries[dest] = value
        if entries:
            rows[local] = ScoreVector(entries, len(positions))
    return SimMatrix(rows, len(positions))


def build_context(query_id: str,
                  text_scores: ScoreVector,
                  docs: DocTable,
                  m_cap: int = DEFAULT_M_CAP,
                  visual_scores: ScoreVector | None = None,
                  text_sim: SimMatrix | None = None,
                  visual_sim: SimMatrix | None = None) -> FilteredContext:
    """Select the top-l documents by text score and restrict all inputs."""
    try:
        positions = select_top_l(text_scores, docs, m_cap)
    except EmptyTextResultError:
        raise EmptyTextResultError(query_id) from None
    selected = tuple(docs.ids[pos] for pos in positions)
    return FilteredContext(
        query_id=query_id,
        selected=selected,
        selected_positions=tuple(positions),
        index_map={doc_id: local for local, doc_id in enumerate(selected)},
        text_scores=_local_vector(text_scores, positions),
        visual_scores=(_local_vector(visual_scores, positions)
                       if visual_scores is not None else None),
        text_sim=_local_matrix(text_sim, positions) if text_sim is not None else None,
        visual_sim=_local_matrix(visual_sim, positions) if visual_sim is not None else None,
        m_cap=m_cap,
    )


def filter_vector(scores: ScoreVector, ctx: FilteredContext) -> ScoreVector:
    """Restrict a collection-wide vector to the context's selection."""
    return _local_vector(scores, ctx.selected_positions)


def filter_matrix(matrix: SimMatrix, ctx: FilteredContext) -> SimMatrix:
    """Restrict a collection-wide matrix to the selection, reindexed locally."""
    return _local_matrix(matrix, ctx.selected_positions)
