"""Score diffusion over a filtered per-query document graph.

One parameterized iteration covers three retrieval strategies:

* a single propagation step through the other modality's similarity rows
  (``cross_media``, equivalently ``diffuse`` with one iteration, no prior
  and no matrix mixing);
* a restart-biased random walk run to its stationary distribution
  (``random_walk``, i.e. no neighbor thresholding, iterate to convergence);
* the general case: per-step thresholding to the k strongest entries,
  convex mixing of the two similarity matrices, a prior pulling mass back
  toward the query's own scores, iterated until stable.

The update is

    x' ~ K(x, k) . [ (1 - gamma) * P + gamma * e . prior ]

with P the row-normalized mix ``beta * S_same + (1 - beta) * S_cross``
(``same`` is the prior's modality, so beta = 0 propagates purely through the
other modality) and e the all-ones column. Each iterate is renormalized;
with probability normalization the iterate is scaled to unit L1 mass, with
minmax normalization it is rescaled to span [0, 1].

Thresholding keeps ties: entries equal to the k-th highest value survive, so
the support may exceed k.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, NotConvergedError, ZeroMassError
from .filtering import FilteredContext
from .store import ScoreVector, SimMatrix

PROBABILITY = "probability"
MINMAX = "minmax"
_NORMALIZATIONS = (PROBABILITY, MINMAX)


@dataclass(frozen=True)
class FusionWeights:
    """Convex weights for the late combination of the four score vectors:
    filtered text, filtered visual, and the two diffusion directions."""

    text: float = 1.0
    visual: float = 0.0
    diffusion_tv: float = 0.0
    diffusion_vt: float = 0.0

    def validate(self) -> None:
        values = (self.text, self.visual, self.diffusion_tv, self.diffusion_vt)
        if any(w < 0 for w in values):
            raise ConfigError(f"fusion weights must be non-negative: {values}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise ConfigError(f"fusion weights must sum to 1: {values}")

    @classmethod
    def parse(cls, text: str) -> "FusionWeights":
        parts = text.split(",")
        if len(parts) != 4:
            raise ConfigError(f"expected 4 comma-separated weights, got {text!r}")
        try:
            w = cls(*(float(p) for p in parts))
        except ValueError:
            raise ConfigError(f"malformed weight in {text!r}") from None
        w.validate()
        return w


@dataclass(frozen=True)
class DiffusionConfig:
    """Parameter bundle for one diffusion run.

    ``k=None`` disables thresholding (all l entries kept); ``iterations=None``
    iterates until the L1 change drops below ``epsilon``, raising after
    ``max_iter`` steps without convergence.
    """

    direction: str = "tv"
    k: int | None = 10
    gamma: float = 0.3
    beta: float = 0.0
    iterations: int | None = 1
    epsilon: float = 1e-9
    max_iter: int = 1000
    normalization: str = PROBABILITY

    def validate(self) -> None:
        if self.direction not in ("tv", "vt"):
            raise ConfigError(f"direction must be 'tv' or 'vt', got {self.direction!r}")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be positive")
        if self.normalization not in _NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")


@dataclass(frozen=True)
class DiffusionTrace:
    """Per-iteration diagnostics: L1 change between successive iterates and,
    under probability normalization, the iterate mass before rescaling."""

    deltas: tuple[float, ...]
    masses: tuple[float, ...]
    iterations: int
    converged: bool


# ---------------------------------------------------------------------------
# sparse vector and matrix operations


def knn_threshold(vector: ScoreVector, k: int) -> ScoreVector:
    """Zero out entries strictly below the k-th highest value.

    Ties at the threshold are kept, so the output support may exceed k.
    With k at or above the support size the vector passes through unchanged.
    """
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if k >= vector.nnz:
        return ScoreVector(dict(vector.entries), vector.dimension)
    ordered = sorted(vector.entries.values(), reverse=True)
    threshold = ordered[k - 1]
    return ScoreVector(
        {i: v for i, v in vector.entries.items() if v >= threshold},
        vector.dimension)


def l1_normalize(vector: ScoreVector) -> ScoreVector:
    """Scale a non-negative vector to unit L1 mass."""
    total = sum(v for _, v in vector.items_sorted())
    if total <= 0.0:
        raise ZeroMassError("cannot normalize a zero vector")
    return ScoreVector({i: v / total for i, v in vector.entries.items()},
                       vector.dimension)


def mix_matrices(first: SimMatrix, second: SimMatrix, beta: float) -> SimMatrix:
    """Entrywise (1 - beta) * first + beta * second.

    The endpoints return an exact copy of the corresponding input.
    """
    if first.dimension != second.dimension:
        raise ValueError(
            f"dimension mismatch: {first.dimension} vs {second.dimension}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 0.0:
        return _copy_matrix(first)
    if beta == 1.0:
        return _copy_matrix(second)
    n = first.dimension
    rows: dict[int, ScoreVector] = {}
    for i in sorted(set(first.rows) | set(second.rows)):
        a = first.rows.get(i)
        b = second.rows.get(i)
        entries: dict[int, float] = {}
        cols = set(a.entries if a else ()) | set(b.entries if b else ())
        for j in sorted(cols):
            va = a.entries.get(j, 0.0) if a else 0.0
            vb = b.entries.get(j, 0.0) if b else 0.0
            entries[j] = (1.0 - beta) * va + beta * vb
        rows[i] = ScoreVector(entries, n)
    return SimMatrix(rows, n)


def _copy_matrix(matrix: SimMatrix) -> SimMatrix:
    return SimMatrix(
        {i: ScoreVector(dict(r.entries), r.dimension) for i, r in matrix.rows.items()},
        matrix.dimension)


def row_stochastic(matrix: SimMatrix) -> tuple[SimMatrix, tuple[int, ...]]:
    """Scale every nonzero row to unit L1 mass.

    All-zero rows stay zero and are reported as dangling; with a positive
    prior weight the walk re-enters through the prior, and the per-step
    renormalization absorbs the lost mass otherwise.
    """
    rows = {i: l1_normalize(r) for i, r in matrix.rows.items()}
    dangling = tuple(i for i in range(matrix.dimension) if i not in rows)
    return SimMatrix(rows, matrix.dimension), dangling


def minmax_normalize(vector: ScoreVector) -> tuple[ScoreVector, bool]:
    """Map values onto [0, 1] over the full candidate set (zeros included).

    A constant vector has no spread; it comes back all zero with the flag set.
    """
    if vector.nnz == 0:
        return ScoreVector({}, vector.dimension), True
    values = vector.entries.values()
    high = max(values)
    low = min(values) if vector.nnz == vector.dimension else 0.0
    if high == low:
        return ScoreVector({}, vector.dimension), True
    span = high - low
    entries = {i: (v - low) / span for i, v in vector.entries.items() if v != low}
    return ScoreVector(entries, vector.dimension), False


def minmax_rows(matrix: SimMatrix) -> tuple[SimMatrix, tuple[int, ...]]:
    """Per-row minmax scaling; constant rows become zero rows and are flagged."""
    rows: dict[int, ScoreVector] = {}
    flagged: list[int] = []
    for i in sorted(matrix.rows):
        scaled, degenerate = minmax_normalize(matrix.rows[i])
        if degenerate:
            flagged.append(i)
        elif scaled.nnz:
            rows[i] = scaled
    return SimMatrix(rows, matrix.dimension), tuple(flagged)


def late_fuse(weights: FusionWeights,
              text_scores: ScoreVector | None,
              visual_scores: ScoreVector | None,
              score_tv: ScoreVector | None,
              score_vt: ScoreVector | None) -> ScoreVector:
    """Weighted elementwise sum of the available score vectors.

    A missing component is only legal with weight zero (the text-only
    scenario sets the visual and vt weights to zero).
    """
    weights.validate()
    paired = (
        ("text", weights.text, text_scores),
        ("visual", weights.visual, visual_scores),
        ("diffusion_tv", weights.diffusion_tv, score_tv),
        ("diffusion_vt", weights.diffusion_vt, score_vt),
    )
    dim: int | None = None
    for name, w, comp in paired:
        if comp is None:
            if w != 0.0:
                raise ConfigError(f"weight {w} on absent component {name!r}")
            continue
        if dim is None:
            dim = comp.dimension
        elif comp.dimension != dim:
            raise ValueError(
                f"component {name!r} has dimension {comp.dimension}, expected {dim}")
    assert dim is not None
    dense = np.zeros(dim)
    for _, w, comp in paired:
        if w != 0.0 and comp is not None:
            dense += w * comp.to_dense()
    return ScoreVector.from_dense(dense)


# ---------------------------------------------------------------------------
# dense engine


def _minmax_dense(values: np.ndarray) -> np.ndarray:
    high = values.max(initial=0.0)
    low = values.min(initial=0.0)
    if high == low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def _threshold_dense(values: np.ndarray, k: int | None) -> np.ndarray:
    if k is None or k >= values.shape[0]:
        return values
    kth = np.partition(values, values.shape[0] - k)[values.shape[0] - k]
    return np.where(values >= kth, values, 0.0)


def _normalize_rows_dense(matrix: np.ndarray, normalization: str) -> np.ndarray:
    out = np.zeros_like(matrix)
    if normalization == PROBABILITY:
        sums = matrix.sum(axis=1)
        alive = sums > 0
        out[alive] = matrix[alive] / sums[alive, None]
    else:
        for i in range(matrix.shape[0]):
            out[i] = _minmax_dense(matrix[i])
    return out


def _prior_dense(ctx: FilteredContext, cfg: DiffusionConfig) -> np.ndarray:
    if cfg.direction == "tv":
        source = ctx.text_scores
    else:
        source = ctx.visual_scores
        if source is None:
            raise ConfigError("direction 'vt' requires filtered visual scores")
    dense = source.to_dense()
    if cfg.normalization == PROBABILITY:
        total = dense.sum()
        if total <= 0.0:
            raise ZeroMassError(f"query {ctx.query_id!r}: prior vector has no mass")
        return dense / total
    return _minmax_dense(dense)


def _transition_dense(ctx: FilteredContext, cfg: DiffusionConfig) -> np.ndarray:
    if cfg.direction == "tv":
        same, cross = ctx.text_sim, ctx.visual_sim
        same_name, cross_name = "text", "visual"
    else:
        same, cross = ctx.visual_sim, ctx.text_sim
        same_name, cross_name = "visual", "text"
    if cfg.beta < 1.0 and cross is None:
        raise ConfigError(
            f"beta={cfg.beta} needs the filtered {cross_name} similarity matrix")
    if cfg.beta > 0.0 and same is None:
        raise ConfigError(
            f"beta={cfg.beta} needs the filtered {same_name} similarity matrix")
    if cfg.beta == 0.0:
        mixed = cross.to_dense()
    elif cfg.beta == 1.0:
        mixed = same.to_dense()
    else:
        mixed = cfg.beta * same.to_dense() + (1.0 - cfg.beta) * cross.to_dense()
    if mixed.shape[0] != ctx.l:
        raise ValueError(
            f"similarity matrix dimension {mixed.shape[0]} != context size {ctx.l}")
    return _normalize_rows_dense(mixed, cfg.normalization)


def diffuse(ctx: FilteredContext, cfg: DiffusionConfig) -> tuple[ScoreVector, DiffusionTrace]:
    """Run the configured diffusion on a filtered context.

    The iterate starts at the (normalized) prior. A fixed iteration budget
    may stop early once the L1 change falls below epsilon (the iterate is
    stable at that point); iterating to convergence raises NotConvergedError
    when max_iter is exhausted first.
    """
    cfg.validate()
    prior = _prior_dense(ctx, cfg)
    transition = _transition_dense(ctx, cfg)
    gamma = cfg.gamma
    x = prior.copy()
    budget = cfg.iterations if cfg.iterations is not None else cfg.max_iter
    deltas: list[float] = []
    masses: list[float] = []
    converged = False
    for _ in range(budget):
        kept = _threshold_dense(x, cfg.k)
        propagated = kept @ transition
        if cfg.normalization == PROBABILITY:
            y = (1.0 - gamma) * propagated + (gamma * float(kept.sum())) * prior
            total = float(y.sum())
            if total <= 0.0:
                raise ZeroMassError(
                    f"query {ctx.query_id!r}: diffusion iterate collapsed to zero")
            masses.append(total)
            x_next = y / total
        else:
            y = (1.0 - gamma) * propagated + gamma * prior
            x_next = _minmax_dense(y)
            if not x_next.any():
                raise ZeroMassError(
                    f"query {ctx.query_id!r}: diffusion iterate collapsed to zero")
        delta = float(np.abs(x_next - x).sum())
        deltas.append(delta)
        x = x_next
        if delta < cfg.epsilon:
            converged = True
            break
    if cfg.iterations is None and not converged:
        raise NotConvergedError(len(deltas), deltas[-1])
    trace = DiffusionTrace(tuple(deltas), tuple(masses), len(deltas), converged)
    return ScoreVector.from_dense(x), trace


def cross_media(ctx: FilteredContext, k: int | None, direction: str = "tv",
                normalization: str = PROBABILITY) -> ScoreVector:
    """One propagation step: threshold the normalized prior to its k
    strongest entries and push it through the other modality's row-normalized
    similarity matrix. No prior mixing, no iteration."""
    cfg = DiffusionConfig(direction=direction, k=k, gamma=0.0, beta=0.0,
                          iterations=1, normalization=normalization)
    cfg.validate()
    prior = _prior_dense(ctx, cfg)
    transition = _transition_dense(ctx, cfg)
    kept = _threshold_dense(prior, k)
    propagated = kept @ transition
    if normalization == PROBABILITY:
        total = float(propagated.sum())
        if total <= 0.0:
            raise ZeroMassError(
                f"query {ctx.query_id!r}: propagated scores are all zero")
        result = propagated / total
    else:
        result = _minmax_dense(propagated)
        if not result.any():
            raise ZeroMassError(
                f"query {ctx.query_id!r}: propagated scores are all zero")
    return ScoreVector.from_dense(result)


def random_walk(ctx: FilteredContext, cfg: DiffusionConfig) -> tuple[ScoreVector, DiffusionTrace]:
    """Stationary distribution of the restart-biased walk: no thresholding,
    iterate until the L1 change drops below epsilon."""
    if cfg.k is not None and cfg.k < ctx.l:
        raise ConfigError(
            f"random walk keeps every entry: k must cover all {ctx.l} documents")
    if cfg.iterations is not None:
        raise ConfigError("random walk iterates until convergence")
    return diffuse(ctx, cfg)
