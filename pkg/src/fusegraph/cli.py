"""Batch command line: ingest, monomedia scoring, semantic filtering,
diffusion, late fusion, evaluation, parameter sweeps and synthetic data.

Exit codes: 0 on success, 1 on configuration errors, 2 on data errors.
"""

from __future__ import annotations

import dataclasses
import os
import sys
from pathlib import Path

import click

from . import pipeline, report, synth
from .diffusion import (
    PROBABILITY,
    DiffusionConfig,
    FusionWeights,
    diffuse,
)
from .errors import (
    ConfigError,
    DataFormatError,
    EmptyTextResultError,
    FusegraphError,
    NotConvergedError,
    ZeroMassError,
)
from .evaluation import evaluate_run, paired_ttest
from .filtering import build_context
from .store import (
    DocTable,
    ScoreVector,
    _read_lines,
    attach_descriptors,
    format_score,
    load_descriptors,
    load_documents,
    load_qrels,
    load_queries,
    load_run,
    load_score_vectors,
    load_sim_matrix,
    load_stopwords,
    save_run,
    save_score_vectors,
    save_sim_matrix,
)
from .textmodel import TextModelParams, save_entailment_table
from .visual import save_gmm


def parse_k(text: str | None):
    if text is None:
        return None
    if text in ("l", "all"):
        return None
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"--k expects an integer or 'l', got {text!r}") from None


def parse_iters(text: str | None):
    if text is None:
        return None
    if text in ("inf", "conv", "converge"):
        return None
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"--iters expects an integer or 'inf', got {text!r}") from None


def _load_collection_inputs(manifest_path, with_descriptors: bool = False):
    paths = pipeline.read_manifest(manifest_path)
    docs = load_documents(paths["docs"])
    queries = load_queries(paths["queries"])
    if with_descriptors:
        if paths["descriptors"] is not None and paths["descriptors"].exists():
            attach_descriptors(docs, load_descriptors(paths["descriptors"]))
        if paths["query_descriptors"] is not None and paths["query_descriptors"].exists():
            attach_descriptors(queries, load_descriptors(paths["query_descriptors"]))
    stopwords = set()
    if paths["stopwords"] is not None and paths["stopwords"].exists():
        stopwords = load_stopwords(paths["stopwords"])
    qrels = load_qrels(paths["qrels"])
    return paths, docs, queries, stopwords, qrels


@click.group()
def cli():
    """Graph-based fusion of text and visual relevance scores."""


@cli.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--profile", type=click.Choice(["custom", "bundled", "noisy-second-hop"]),
              default="custom", show_default=True,
              help="Named generator profiles ignore the shape flags below.")
@click.option("--seed", type=int, default=None)
@click.option("--clusters", type=int, default=6, show_default=True)
@click.option("--docs-per-cluster", type=int, default=25, show_default=True)
@click.option("--queries-per-cluster", type=int, default=4, show_default=True)
@click.option("--vocab-per-cluster", type=int, default=12, show_default=True)
@click.option("--background-vocab", type=int, default=40, show_default=True)
@click.option("--tokens-per-doc", type=int, default=20, show_default=True)
@click.option("--text-noise", type=float, default=0.5, show_default=True)
@click.option("--text-overlap", type=float, default=0.0, show_default=True)
@click.option("--descriptors-per-doc", type=int, default=15, show_default=True)
@click.option("--descriptor-dim", type=int, default=6, show_default=True)
@click.option("--visual-noise", type=float, default=0.2, show_default=True)
@click.option("--visual-overlap", type=float, default=0.0, show_default=True)
@click.option("--cluster-spread", type=float, default=1.0, show_default=True)
def synth_cmd(out_dir, profile, seed, **shape):
    """Generate a clustered synthetic collection on disk."""
    if profile == "bundled":
        spec = synth.bundled_collection()
    elif profile == "noisy-second-hop":
        spec = synth.noisy_second_hop_collection()
    else:
        spec = synth.SynthSpec(seed=0, **shape)
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    manifest = synth.make_synthetic(spec, out_dir)
    click.echo(f"wrote collection manifest {manifest}")


@cli.command("ingest")
@click.option("--docs", required=True, type=click.Path(exists=True))
@click.option("--queries", required=True, type=click.Path(exists=True))
@click.option("--qrels", required=True, type=click.Path(exists=True))
@click.option("--descriptors", type=click.Path(exists=True))
@click.option("--query-descriptors", type=click.Path(exists=True))
@click.option("--stopwords", type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def ingest_cmd(docs, queries, qrels, descriptors, query_descriptors, stopwords, out_dir):
    """Validate raw collection files and write a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    loaded_docs = load_documents(docs)
    loaded_queries = load_queries(queries)
    load_qrels(qrels)
    if descriptors:
        attach_descriptors(loaded_docs, load_descriptors(descriptors))
    if query_descriptors:
        attach_descriptors(loaded_queries, load_descriptors(query_descriptors))
    if stopwords:
        load_stopwords(stopwords)

    def rel(p):
        return os.path.relpath(p, out) if p else None

    manifest = pipeline.write_manifest(out, {
        "docs": rel(docs), "queries": rel(queries), "qrels": rel(qrels),
        "descriptors": rel(descriptors), "query_descriptors": rel(query_descriptors),
        "stopwords": rel(stopwords),
    }, extra={"n_docs": len(loaded_docs), "n_queries": len(loaded_queries)})
    click.echo(f"ingested {len(loaded_docs)} documents, {len(loaded_queries)} queries")
    click.echo(f"wrote {manifest}")


@cli.command("score-text")
@click.option("--collection", required=True, type=click.Path(exists=True))
@click.option("--model", type=click.Choice(["lm", "le"]), default="lm", show_default=True)
@click.option("--mu", type=float, default=1000.0, show_default=True,
              help="Dirichlet smoothing mass.")
@click.option("--entailment-cap", type=int, default=10, show_default=True)
@click.option("--row-cap", type=int, default=None)
@click.option("--scores-out", required=True, type=click.Path())
@click.option("--matrix-out", type=click.Path())
@click.option("--table-out", type=click.Path(), help="Persist the translation table.")
def score_text_cmd(collection, model, mu, entailment_cap, row_cap,
                   scores_out, matrix_out, table_out):
    """Score every query and document pair with the text model."""
    _, docs, queries, stopwords, _ = _load_collection_inputs(collection)
    params = TextModelParams(dirichlet_mu=mu, entailment_cap=entailment_cap)
    scores, matrix, index, table = pipeline.score_text_collection(
        docs, queries, sorted(stopwords), params, model=model, row_cap=row_cap)
    save_score_vectors(scores, index.doc_table, scores_out)
    click.echo(f"wrote text scores for {len(scores)} queries to {scores_out}")
    if matrix_out:
        save_sim_matrix(matrix, index.doc_table, matrix_out)
        click.echo(f"wrote text similarity matrix ({matrix.entry_count} entries) to {matrix_out}")
    if table_out:
        if table is None:
            raise ConfigError("--table-out requires --model le")
        save_entailment_table(table, index, table_out)
        click.echo(f"wrote translation table to {table_out}")


@cli.command("score-visual")
@click.option("--collection", required=True, type=click.Path(exists=True))
@click.option("--components", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--row-cap", type=int, default=None)
@click.option("--scores-out", required=True, type=click.Path())
@click.option("--matrix-out", type=click.Path())
@click.option("--gmm-out", type=click.Path())
def score_visual_cmd(collection, components, seed, row_cap, scores_out, matrix_out, gmm_out):
    """Fit the visual vocabulary and score with signature dot products."""
    _, docs, queries, _, _ = _load_collection_inputs(collection, with_descriptors=True)
    scores, matrix, gmm = pipeline.score_visual_collection(
        docs, queries, components, seed, row_cap=row_cap)
    table = DocTable(tuple(d.doc_id for d in docs))
    save_score_vectors(scores, table, scores_out)
    click.echo(f"wrote visual scores for {len(scores)} queries to {scores_out}")
    if matrix_out:
        save_sim_matrix(matrix, table, matrix_out)
        click.echo(f"wrote visual similarity matrix ({matrix.entry_count} entries) to {matrix_out}")
    if gmm_out:
        save_gmm(gmm, gmm_out)
        click.echo(f"wrote visual vocabulary to {gmm_out}")


@cli.command("filter")
@click.option("--collection", required=True, type=click.Path(exists=True))
@click.option("--text-scores", "text_scores_path", required=True, type=click.Path(exists=True))
@click.option("--visual-scores", "visual_scores_path", type=click.Path(exists=True))
@click.option("--text-matrix", "text_matrix_path", type=click.Path(exists=True))
@click.option("--visual-matrix", "visual_matrix_path", type=click.Path(exists=True))
@click.option("--m-cap", type=int, default=1000, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def filter_cmd(collection, text_scores_path, visual_scores_path,
               text_matrix_path, visual_matrix_path, m_cap, out_dir):
    """Build the per-query top-l workspaces."""
    _, docs, queries, _, _ = _load_collection_inputs(collection)
    table = DocTable(tuple(d.doc_id for d in docs))
    text_scores = load_score_vectors(text_scores_path, table)
    visual_scores = (load_score_vectors(visual_scores_path, table)
                     if visual_scores_path else None)
    text_sim = load_sim_matrix(text_matrix_path, table) if text_matrix_path else None
    visual_sim = load_sim_matrix(visual_matrix_path, table) if visual_matrix_path else None

    contexts = {}
    failures = {}
    empty = ScoreVector({}, len(table))
    for query in queries:
        qid = query.query_id
        try:
            contexts[qid] = build_context(
                qid, text_scores.get(qid, empty), table, m_cap,
                visual_scores=visual_scores.get(qid) if visual_scores else None,
                text_sim=text_sim, visual_sim=visual_sim)
        except EmptyTextResultError:
            failures[qid] = "empty text result"
    pipeline.save_filtered(contexts, failures, out_dir)
    click.echo(f"filtered {len(contexts)} queries "
               f"({len(failures)} unanswerable) into {out_dir}")


def _diffusion_options(fn):
    fn = click.option("--preset", type=click.Choice(sorted(pipeline.PRESETS)))(fn)
    fn = click.option("--k", "k_text", default=None,
                      help="Neighbor cap; integer or 'l' for no thresholding.")(fn)
    fn = click.option("--gamma", type=float, default=None, help="Prior weight.")(fn)
    fn = click.option("--beta", type=float, default=None, help="Matrix mix weight.")(fn)
    fn = click.option("--iters", "iters_text", default=None,
                      help="Iteration count or 'inf' for until convergence.")(fn)
    fn = click.option("--epsilon", type=float, default=1e-9, show_default=True)(fn)
    fn = click.option("--max-iter", type=int, default=1000, show_default=True)(fn)
    fn = click.option("--norm", "normalization",
                      type=click.Choice(["probability", "minmax"]),
                      default="probability", show_default=True)(fn)
    return fn


def _resolve_diffusion_params(preset, k_text, gamma, beta, iters_text):
    values = {"k": 10, "gamma": 0.3, "beta": 0.0, "iterations": 1}
    if preset:
        values.update(pipeline.PRESETS[preset])
    if k_text is not None:
        values["k"] = parse_k(k_text)
    if gamma is not None:
        values["gamma"] = gamma
    if beta is not None:
        values["beta"] = beta
    if iters_text is not None:
        values["iterations"] = parse_iters(iters_text)
    return values


@cli.command("diffuse")
@click.option("--filtered", "filtered_dir", required=True, type=click.Path(exists=True))
@click.option("--direction", type=click.Choice(["tv", "vt"]), default="tv", show_default=True)
@_diffusion_options
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--trace-out", type=click.Path())
def diffuse_cmd(filtered_dir, direction, preset, k_text, gamma, beta, iters_text,
                epsilon, max_iter, normalization, out_path, trace_out):
    """Run the diffusion on every filtered query workspace."""
    contexts, prior_failures = pipeline.load_filtered(filtered_dir)
    values = _resolve_diffusion_params(preset, k_text, gamma, beta, iters_text)
    cfg = DiffusionConfig(direction=direction, epsilon=epsilon, max_iter=max_iter,
                          normalization=normalization, **values)
    cfg.validate()
    failures = dict(prior_failures)
    traces = {}
    with open(out_path, "w", encoding="utf-8") as fh:
        for qid in sorted(contexts):
            ctx = contexts[qid]
            try:
                scores, trace = diffuse(ctx, cfg)
            except (ZeroMassError, NotConvergedError, ConfigError) as exc:
                failures[qid] = str(exc)
                continue
            traces[qid] = trace
            for local, value in scores.items_sorted():
                fh.write(f"{qid}\t{ctx.selected[local]}\t{format_score(value)}\n")
    if trace_out:
        with open(trace_out, "w", encoding="utf-8") as fh:
            fh.write("query_id\titerations\tconverged\tlast_delta\n")
            for qid in sorted(traces):
                t = traces[qid]
                last = t.deltas[-1] if t.deltas else 0.0
                fh.write(f"{qid}\t{t.iterations}\t{'yes' if t.converged else 'no'}"
                         f"\t{format_score(last)}\n")
    click.echo(f"diffused {len(traces)} queries ({len(failures)} failed) to {out_path}")


def _load_component_scores(path, contexts):
    """Read a 'query<TAB>doc<TAB>score' file back into per-context local vectors."""
    raw: dict[str, dict[str, float]] = {}
    for line_no, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataFormatError("expected 'query<TAB>doc<TAB>score'", path, line_no)
        qid, doc_id, score_text = parts
        raw.setdefault(qid, {})[doc_id] = float(score_text)
    out = {}
    for qid, ctx in contexts.items():
        per_doc = raw.get(qid, {})
        entries = {}
        for doc_id, value in per_doc.items():
            local = ctx.index_map.get(doc_id)
            if local is None:
                raise DataFormatError(
                    f"document {doc_id!r} is outside query {qid!r}'s selection", path)
            if value != 0.0:
                entries[local] = value
        out[qid] = ScoreVector(entries, ctx.l)
    return out


@cli.command("fuse")
@click.option("--filtered", "filtered_dir", required=True, type=click.Path(exists=True))
@click.option("--alpha", default="1,0,0,0", show_default=True,
              help="Weights for text, visual, tv and vt components.")
@click.option("--tv", "tv_path", type=click.Path(exists=True))
@click.option("--vt", "vt_path", type=click.Path(exists=True))
@click.option("--norm", "normalization", type=click.Choice(["probability", "minmax"]),
              default="probability", show_default=True)
@click.option("--tag", default="fusegraph", show_default=True)
@click.option("--run-out", required=True, type=click.Path())
@click.option("--scores-out", type=click.Path())
def fuse_cmd(filtered_dir, alpha, tv_path, vt_path, normalization, tag, run_out, scores_out):
    """Late-fuse component scores and write the ranked run."""
    contexts, failures = pipeline.load_filtered(filtered_dir)
    weights = FusionWeights.parse(alpha)
    weights.validate()
    tv_scores = _load_component_scores(tv_path, contexts) if tv_path else {}
    vt_scores = _load_component_scores(vt_path, contexts) if vt_path else {}

    from .diffusion import late_fuse

    run = {}
    fused_vectors = {}
    for qid in sorted(contexts):
        ctx = contexts[qid]
        fused = late_fuse(
            weights,
            pipeline._normalized_component(ctx.text_scores, normalization),
            pipeline._normalized_component(ctx.visual_scores, normalization),
            tv_scores.get(qid),
            vt_scores.get(qid),
        )
        fused_vectors[qid] = (fused, ctx)
        run[qid] = pipeline._ranked(fused, ctx)
    save_run(run, run_out, tag=tag)
    if scores_out:
        with open(scores_out, "w", encoding="utf-8") as fh:
            for qid in sorted(fused_vectors):
                fused, ctx = fused_vectors[qid]
                for local, value in fused.items_sorted():
                    fh.write(f"{qid}\t{ctx.selected[local]}\t{format_score(value)}\n")
    click.echo(f"fused {len(run)} queries ({len(failures)} previously failed) "
               f"into {run_out}")


@cli.command("evaluate")
@click.option("--run", "run_path", required=True, type=click.Path(exists=True))
@click.option("--qrels", "qrels_path", required=True, type=click.Path(exists=True))
@click.option("--baseline-run", type=click.Path(exists=True),
              help="Second run for a paired significance test.")
@click.option("--out-dir", type=click.Path())
def evaluate_cmd(run_path, qrels_path, baseline_run, out_dir):
    """Score a run file against qrels (MAP, optional paired t-test)."""
    qrels = load_qrels(qrels_path)
    run = load_run(run_path)
    rep = evaluate_run(run, qrels)
    click.echo(f"MAP {rep.map_score:.6f} over {len(rep.per_query_ap)} queries"
               + (f" ({len(rep.skipped)} skipped: no relevant docs)" if rep.skipped else ""))
    if baseline_run:
        base_rep = evaluate_run(load_run(baseline_run), qrels)
        ttest = paired_ttest(rep.per_query_ap, base_rep.per_query_ap)
        rep.ttest = ttest
        verdict = "significant" if ttest.significant else "not significant"
        if ttest.degenerate:
            verdict = "degenerate (zero variance)"
        click.echo(f"baseline MAP {base_rep.map_score:.6f}; "
                   f"paired t = {ttest.statistic:.4f} (dof {ttest.dof}), {verdict} at 95%")
    if out_dir:
        written = report.write_eval_outputs(rep, out_dir)
        click.echo("wrote " + ", ".join(str(p) for p in written))


def _parse_grid_values(name, text):
    if name == "k":
        return [parse_k(v) for v in text.split(",")]
    if name == "iterations":
        return [parse_iters(v) for v in text.split(",")]
    if name == "gamma" or name == "beta":
        return [float(v) for v in text.split(",")]
    if name == "normalization":
        return text.split(",")
    if name == "weights":
        return [FusionWeights.parse(v) for v in text.split(";")]
    raise ConfigError(f"unknown grid dimension {name!r}")


@cli.command("sweep")
@click.option("--collection", required=True, type=click.Path(exists=True))
@click.option("--text-scores", "text_scores_path", required=True, type=click.Path(exists=True))
@click.option("--visual-scores", "visual_scores_path", type=click.Path(exists=True))
@click.option("--text-matrix", "text_matrix_path", type=click.Path(exists=True))
@click.option("--visual-matrix", "visual_matrix_path", type=click.Path(exists=True))
@click.option("--scenario", type=click.Choice(["symmetric", "asymmetric"]),
              default="symmetric", show_default=True)
@click.option("--alpha", default="0.25,0.25,0.25,0.25", show_default=True)
@click.option("--grid-k", help="Comma list, e.g. '10,50,l'.")
@click.option("--grid-gamma", help="Comma list, e.g. '0,0.3'.")
@click.option("--grid-beta", help="Comma list.")
@click.option("--grid-iters", help="Comma list, e.g. '1,5,inf'.")
@click.option("--grid-norm", help="Comma list of normalizations.")
@click.option("--grid-alpha", help="Semicolon list of weight tuples.")
@click.option("--baseline", type=click.Choice(["text", "visual"]), default="text",
              show_default=True)
@_diffusion_options
@click.option("--m-cap", type=int, default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path())
def sweep_cmd(collection, text_scores_path, visual_scores_path, text_matrix_path,
              visual_matrix_path, scenario, alpha, grid_k, grid_gamma, grid_beta,
              grid_iters, grid_norm, grid_alpha, baseline, preset, k_text, gamma,
              beta, iters_text, epsilon, max_iter, normalization, m_cap, seed, out_dir):
    """Evaluate a parameter grid and test each cell against a baseline."""
    _, docs, queries, _, qrels = _load_collection_inputs(collection)
    table = DocTable(tuple(d.doc_id for d in docs))
    data = pipeline.CollectionData(
        docs=table,
        query_ids=tuple(q.query_id for q in queries),
        text_scores=load_score_vectors(text_scores_path, table),
        visual_scores=(load_score_vectors(visual_scores_path, table)
                       if visual_scores_path else None),
        text_sim=(load_sim_matrix(text_matrix_path, table)
                  if text_matrix_path else None),
        visual_sim=(load_sim_matrix(visual_matrix_path, table)
                    if visual_matrix_path else None),
        qrels=qrels,
    )
    values = _resolve_diffusion_params(preset, k_text, gamma, beta, iters_text)
    base = pipeline.PipelineConfig(
        scenario=scenario, normalization=normalization,
        weights=FusionWeights.parse(alpha), m_cap=m_cap,
        epsilon=epsilon, max_iter=max_iter, seed=seed, **values)

    grid = {}
    for name, text in (("k", grid_k), ("gamma", grid_gamma), ("beta", grid_beta),
                       ("iterations", grid_iters), ("normalization", grid_norm),
                       ("weights", grid_alpha)):
        if text:
            grid[name] = _parse_grid_values(name, text)
    if not grid:
        raise ConfigError("provide at least one --grid-* option")

    if baseline == "text":
        baseline_cfg = dataclasses.replace(base, weights=FusionWeights(1, 0, 0, 0))
    else:
        baseline_cfg = dataclasses.replace(base, weights=FusionWeights(0, 1, 0, 0))
    sweep_table = pipeline.run_sweep(data, base, grid, baseline_cfg,
                                     baseline_label=f"{baseline}-only")
    written = report.write_sweep_outputs(sweep_table, out_dir)
    header, rows = report.sweep_rows(sweep_table)
    click.echo(report.render_text_table(header, rows), nl=False)
    click.echo("wrote " + ", ".join(str(p) for p in written))


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(1)
    except (DataFormatError, OSError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(2)
    except (FusegraphError, ValueError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
