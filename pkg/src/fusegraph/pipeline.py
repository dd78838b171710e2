"""End-to-end batch orchestration: monomedia scoring, per-query filtering,
diffusion, late fusion, ranking and evaluation, plus parameter-grid sweeps.

Loaded artifacts are immutable and every per-query step is a pure function,
so queries are independent; execution is sequential to keep output files
byte-reproducible for a given configuration and seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .diffusion import (
    MINMAX,
    PROBABILITY,
    DiffusionConfig,
    DiffusionTrace,
    FusionWeights,
    diffuse,
    l1_normalize,
    late_fuse,
    minmax_normalize,
)
from .errors import (
    ConfigError,
    DataFormatError,
    EmptyTextResultError,
    FusegraphError,
    NotConvergedError,
    ZeroMassError,
)
from .evaluation import EvalReport, TTestResult, evaluate_run, paired_ttest
from .filtering import DEFAULT_M_CAP, FilteredContext, build_context
from .store import (
    DocTable,
    Document,
    Qrels,
    Query,
    ScoreVector,
    SimMatrix,
    format_score,
    load_sim_matrix,
    save_sim_matrix,
    _read_lines,
)
from .textmodel import (
    BatchTextScorer,
    EntailmentTable,
    TextIndex,
    TextModelParams,
    build_index,
    estimate_entailment,
)
from .visual import GmmModel, fisher_diag, fisher_kernel, fit_gmm, spatial_pyramid_fv

PRESETS: dict[str, dict] = {
    # one propagation step over a small neighborhood, prior-biased
    "cm-default": {"k": 10, "gamma": 0.3, "beta": 0.0, "iterations": 1},
    # classic restart walk: full neighborhood, iterate to convergence
    "rw-classic": {"k": None, "gamma": 0.3, "beta": 0.0, "iterations": None},
    # thresholded walk to convergence
    "gd-default": {"k": 10, "gamma": 0.3, "beta": 0.0, "iterations": None},
}

ASYMMETRIC = "asymmetric"
SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class PipelineConfig:
    scenario: str = SYMMETRIC
    k: int | None = 10
    gamma: float = 0.3
    beta: float = 0.0
    iterations: int | None = 1
    normalization: str = PROBABILITY
    weights: FusionWeights = FusionWeights(1.0, 0.0, 0.0, 0.0)
    m_cap: int = DEFAULT_M_CAP
    epsilon: float = 1e-9
    max_iter: int = 1000
    seed: int = 0
    tag: str = "fusegraph"

    def validate(self) -> None:
        if self.scenario not in (ASYMMETRIC, SYMMETRIC):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        self.weights.validate()
        if self.scenario == ASYMMETRIC:
            if self.weights.visual != 0.0 or self.weights.diffusion_vt != 0.0:
                raise ConfigError(
                    "the asymmetric scenario has no visual query: "
                    "visual and vt weights must be zero")
        self.diffusion_config("tv").validate()

    def diffusion_config(self, direction: str) -> DiffusionConfig:
        return DiffusionConfig(
            direction=direction, k=self.k, gamma=self.gamma, beta=self.beta,
            iterations=self.iterations, epsilon=self.epsilon,
            max_iter=self.max_iter, normalization=self.normalization)

    def with_preset(self, name: str) -> "PipelineConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(self, **PRESETS[name])


@dataclass
class CollectionData:
    """Everything a run needs, already loaded and indexed."""

    docs: DocTable
    query_ids: tuple[str, ...]
    text_scores: dict[str, ScoreVector]
    visual_scores: dict[str, ScoreVector] | None
    text_sim: SimMatrix | None
    visual_sim: SimMatrix | None
    qrels: Qrels


@dataclass
class RunResult:
    rankings: dict[str, list[tuple[str, float]]]
    failures: dict[str, str]
    iterations: dict[str, dict[str, int]]
    config: PipelineConfig


def _normalized_component(vector: ScoreVector | None, normalization: str) -> ScoreVector | None:
    """Put a raw filtered score vector on the scale the run fuses in. An
    empty vector stays empty (the query has no evidence in that modality)."""
    if vector is None or vector.nnz == 0:
        return vector
    if normalization == PROBABILITY:
        return l1_normalize(vector)
    return minmax_normalize(vector)[0]


def fuse_context(ctx: FilteredContext, cfg: PipelineConfig) -> tuple[ScoreVector, dict[str, DiffusionTrace]]:
    """Compute the configured diffusion scores on one filtered context and
    fuse them with the normalized monomedia scores."""
    weights = cfg.weights
    traces: dict[str, DiffusionTrace] = {}
    score_tv = score_vt = None
    if weights.diffusion_tv > 0.0:
        score_tv, traces["tv"] = diffuse(ctx, cfg.diffusion_config("tv"))
    if weights.diffusion_vt > 0.0:
        score_vt, traces["vt"] = diffuse(ctx, cfg.diffusion_config("vt"))
    fused = late_fuse(
        weights,
        _normalized_component(ctx.text_scores, cfg.normalization),
        _normalized_component(ctx.visual_scores, cfg.normalization),
        score_tv,
        score_vt,
    )
    return fused, traces


def _ranked(fused: ScoreVector, ctx: FilteredContext) -> list[tuple[str, float]]:
    pairs = [(ctx.selected[i], v) for i, v in fused.entries.items()]
    pairs.sort(key=lambda p: (-p[1], p[0]))
    return pairs


def build_query_context(data: CollectionData, query_id: str, cfg: PipelineConfig) -> FilteredContext:
    text = data.text_scores.get(query_id, ScoreVector({}, len(data.docs)))
    visual = None
    if cfg.scenario == SYMMETRIC and data.visual_scores is not None:
        visual = data.visual_scores.get(query_id)
    return build_context(
        query_id, text, data.docs, cfg.m_cap,
        visual_scores=visual, text_sim=data.text_sim, visual_sim=data.visual_sim)


def run_pipeline(data: CollectionData, cfg: PipelineConfig) -> tuple[RunResult, EvalReport]:
    """Filter, diffuse, fuse and rank every query, then evaluate.

    Per-query failures (no text match, zero diffusion mass, no convergence)
    are collected and the run continues; those queries retrieve nothing.
    """
    cfg.validate()
    rankings: dict[str, list[tuple[str, float]]] = {}
    failures: dict[str, str] = {}
    iterations: dict[str, dict[str, int]] = {}
    for query_id in sorted(data.query_ids):
        try:
            ctx = build_query_context(data, query_id, cfg)
        except EmptyTextResultError:
            failures[query_id] = "empty text result"
            continue
        try:
            fused, traces = fuse_context(ctx, cfg)
        except (ZeroMassError, NotConvergedError) as exc:
            failures[query_id] = str(exc)
            continue
        rankings[query_id] = _ranked(fused, ctx)
        if traces:
            iterations[query_id] = {d: t.iterations for d, t in traces.items()}
    report = evaluate_run(rankings, data.qrels)
    report.failures.update(failures)
    return RunResult(rankings, failures, iterations, cfg), report


# ---------------------------------------------------------------------------
# parameter sweeps


@dataclass
class SweepCell:
    params: dict[str, object]
    map_score: float | None
    ttest: TTestResult | None
    status: str
    query_failures: int = 0


@dataclass
class SweepTable:
    dimensions: tuple[str, ...]
    cells: list[SweepCell]
    baseline_label: str
    baseline_map: float


_SWEEPABLE = ("k", "gamma", "beta", "iterations", "normalization", "weights", "m_cap")


def run_sweep(data: CollectionData, base: PipelineConfig,
              grid: Mapping[str, Sequence], baseline: PipelineConfig,
              baseline_label: str = "baseline") -> SweepTable:
    """Evaluate the cartesian product of the grid and test each cell against
    the baseline configuration with a paired t-test. A failing cell is
    recorded with its reason instead of aborting the sweep."""
    if not grid:
        raise ConfigError("sweep grid is empty")
    for key in grid:
        if key not in _SWEEPABLE:
            raise ConfigError(f"cannot sweep over {key!r}; choose from {_SWEEPABLE}")
    keys = tuple(grid.keys())
    _, baseline_report = run_pipeline(data, baseline)

    cells: list[SweepCell] = []
    for combo in product(*(grid[k] for k in keys)):
        params = dict(zip(keys, combo))
        cfg = replace(base, **params)
        try:
            result, report = run_pipeline(data, cfg)
        except FusegraphError as exc:
            cells.append(SweepCell(params, None, None, str(exc)))
            continue
        ttest = None
        if len(report.per_query_ap) >= 2:
            ttest = paired_ttest(report.per_query_ap, baseline_report.per_query_ap)
        cells.append(SweepCell(params, report.map_score, ttest, "ok",
                               len(result.failures)))
    return SweepTable(keys, cells, baseline_label, baseline_report.map_score)


# ---------------------------------------------------------------------------
# monomedia scoring over a whole collection


def score_text_collection(documents: Sequence[Document], queries: Sequence[Query],
                          stopwords: Sequence[str], params: TextModelParams,
                          model: str = "lm", row_cap: int | None = None,
                          ) -> tuple[dict[str, ScoreVector], SimMatrix, TextIndex, EntailmentTable | None]:
    """Build the index, score all queries and the document-document matrix."""
    if model not in ("lm", "le"):
        raise ConfigError(f"text model must be 'lm' or 'le', got {model!r}")
    index = build_index(documents, stopwords)
    table = estimate_entailment(index, params) if model == "le" else None
    scorer = BatchTextScorer(index, params, table)
    return scorer.score_queries(queries), scorer.similarity_matrix(row_cap), index, table


def _pyramid_signatures(gmm: GmmModel, items: Sequence, diag: np.ndarray) -> np.ndarray:
    rows = []
    for item in items:
        if item.visual_descriptors is None or len(item.visual_descriptors) == 0:
            rows.append(np.zeros(gmm.signature_dim * 8))
        else:
            rows.append(spatial_pyramid_fv(gmm, item.visual_descriptors, diag).values)
    return np.vstack(rows)


def score_visual_collection(documents: Sequence[Document], queries: Sequence[Query],
                            n_components: int, seed: int,
                            row_cap: int | None = None,
                            ) -> tuple[dict[str, ScoreVector], SimMatrix, GmmModel]:
    """Fit the visual vocabulary on the pooled document descriptors, encode
    every document and query, and score with the signature dot product.

    Negative kernel values mean dissimilarity and are dropped (scores stay
    non-negative); self similarities are excluded from the matrix. Queries
    without descriptors get empty score vectors.
    """
    pooled = [d.visual_descriptors.vectors for d in documents
              if d.visual_descriptors is not None and len(d.visual_descriptors)]
    if not pooled:
        raise DataFormatError("no document descriptors to fit the visual vocabulary")
    gmm = fit_gmm(np.vstack(pooled), n_components, seed)
    diag = fisher_diag(gmm)

    doc_sig = _pyramid_signatures(gmm, documents, diag)
    n = len(documents)
    kernel = doc_sig @ doc_sig.T
    rows: dict[int, ScoreVector] = {}
    for i in range(n):
        entries: dict[int, float] = {}
        for j in range(n):
            if i == j:
                continue
            value = float(kernel[i, j])
            if value > 0.0:
                entries[j] = value
        if row_cap is not None and len(entries) > row_cap:
            kept = sorted(entries.items(), key=lambda kv: (-kv[1], kv[0]))[:row_cap]
            entries = dict(kept)
        if entries:
            rows[i] = ScoreVector(entries, n)
    matrix = SimMatrix(rows, n)

    scores: dict[str, ScoreVector] = {}
    for query in queries:
        if query.visual_descriptors is None or len(query.visual_descriptors) == 0:
            scores[query.query_id] = ScoreVector({}, n)
            continue
        q_sig = spatial_pyramid_fv(gmm, query.visual_descriptors, diag).values
        values = doc_sig @ q_sig
        scores[query.query_id] = ScoreVector(
            {i: float(v) for i, v in enumerate(values) if v > 0.0}, n)
    return scores, matrix, gmm


# ---------------------------------------------------------------------------
# collection manifests and filtered workspaces on disk


MANIFEST_KEYS = ("docs", "descriptors", "queries", "query_descriptors",
                 "qrels", "stopwords")


def read_manifest(path) -> dict[str, Path | None]:
    """Resolve the file paths listed in a collection manifest."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"malformed manifest: {exc}", path) from None
    base = path.parent
    resolved: dict[str, Path | None] = {}
    for key in MANIFEST_KEYS:
        value = raw.get(key)
        resolved[key] = (base / value) if value else None
    for key in ("docs", "queries", "qrels"):
        if resolved[key] is None or not resolved[key].exists():
            raise DataFormatError(f"manifest lacks a readable {key!r} entry", path)
    return resolved


def write_manifest(out_dir, entries: Mapping[str, str | None],
                   extra: Mapping[str, object] | None = None) -> Path:
    payload: dict[str, object] = {k: entries.get(k) for k in MANIFEST_KEYS if entries.get(k)}
    if extra:
        payload.update(extra)
    manifest_path = Path(out_dir) / "manifest.json"
    manifest_path.write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path


def save_filtered(contexts: Mapping[str, FilteredContext], failures: Mapping[str, str],
                  out_dir) -> None:
    """Persist per-query filtered workspaces.

    ``selected.tsv`` fixes the selection order and the filtered text scores;
    matrices go to one file per query under ``text_sim/`` and ``visual_sim/``,
    keyed by the selected doc ids.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "selected.tsv", "w", encoding="utf-8") as fh:
        for query_id in sorted(contexts):
            ctx = contexts[query_id]
            for local, doc_id in enumerate(ctx.selected):
                fh.write(f"{query_id}\t{local}\t{doc_id}\t"
                         f"{format_score(ctx.text_scores.entries[local])}\n")
    with open(out / "visual_scores.tsv", "w", encoding="utf-8") as fh:
        for query_id in sorted(contexts):
            ctx = contexts[query_id]
            if ctx.visual_scores is None:
                continue
            for local, value in ctx.visual_scores.items_sorted():
                fh.write(f"{query_id}\t{ctx.selected[local]}\t{format_score(value)}\n")
    for sub, attr in (("text_sim", "text_sim"), ("visual_sim", "visual_sim")):
        sub_dir = out / sub
        sub_dir.mkdir(exist_ok=True)
        for query_id in sorted(contexts):
            ctx = contexts[query_id]
            matrix = getattr(ctx, attr)
            if matrix is None:
                continue
            save_sim_matrix(matrix, DocTable(ctx.selected), sub_dir / f"{query_id}.tsv")
    meta = {
        "m_cap": max((c.m_cap for c in contexts.values()), default=DEFAULT_M_CAP),
        "queries": sorted(contexts),
        "failures": dict(sorted(failures.items())),
        "has_visual_scores": any(c.visual_scores is not None for c in contexts.values()),
    }
    (out / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_filtered(in_dir) -> tuple[dict[str, FilteredContext], dict[str, str]]:
    """Reload filtered workspaces. The reloaded context's universe is the
    selection itself, so positions coincide with local indices."""
    base = Path(in_dir)
    meta_path = base / "meta.json"
    if not meta_path.exists():
        raise DataFormatError("not a filtered workspace (meta.json missing)", base)
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    m_cap = int(meta.get("m_cap", DEFAULT_M_CAP))

    selections: dict[str, list[tuple[int, str, float]]] = {}
    for line_no, line in _read_lines(base / "selected.tsv"):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataFormatError("expected 'query<TAB>rank<TAB>doc<TAB>score'",
                                  base / "selected.tsv", line_no)
        query_id, rank_text, doc_id, score_text = parts
        selections.setdefault(query_id, []).append(
            (int(rank_text), doc_id, float(score_text)))

    visual_raw: dict[str, list[tuple[str, float]]] = {}
    visual_path = base / "visual_scores.tsv"
    if visual_path.exists():
        for line_no, line in _read_lines(visual_path):
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError("expected 'query<TAB>doc<TAB>score'",
                                      visual_path, line_no)
            query_id, doc_id, score_text = parts
            visual_raw.setdefault(query_id, []).append((doc_id, float(score_text)))

    contexts: dict[str, FilteredContext] = {}
    for query_id, rows in selections.items():
        rows.sort()
        selected = tuple(doc_id for _, doc_id, _ in rows)
        index_map = {doc_id: local for local, doc_id in enumerate(selected)}
        l = len(selected)
        text_scores = ScoreVector(
            {local: score for local, (_, _, score) in enumerate(rows)}, l)
        visual_scores = None
        if meta.get("has_visual_scores"):
            entries = {index_map[d]: s for d, s in visual_raw.get(query_id, [])}
            visual_scores = ScoreVector(entries, l)
        table = DocTable(selected)
        text_sim = visual_sim = None
        text_path = base / "text_sim" / f"{query_id}.tsv"
        if text_path.exists():
            text_sim = load_sim_matrix(text_path, table)
        vis_path = base / "visual_sim" / f"{query_id}.tsv"
        if vis_path.exists():
            visual_sim = load_sim_matrix(vis_path, table)
        contexts[query_id] = FilteredContext(
            query_id=query_id,
            selected=selected,
            selected_positions=tuple(range(l)),
            index_map=index_map,
            text_scores=text_scores,
            visual_scores=visual_scores,
            text_sim=text_sim,
            visual_sim=visual_sim,
            m_cap=m_cap,
        )
    failures = {str(k): str(v) for k, v in meta.get("failures", {}).items()}
    return contexts, failures
