"""Seeded synthetic image/text collections for desk-scale experiments.

Documents belong to clusters. Each cluster owns a small topic vocabulary
(token ``c<i>w0`` acts as the cluster's head term) and a Gaussian descriptor
generator; relevance is cluster membership. Noise knobs blur the signal:

* ``text_noise``: probability that a token draw is replaced by a background
  term shared across clusters;
* ``text_overlap``: probability that a topic draw comes from the next
  cluster's vocabulary instead;
* ``visual_noise``: probability that a descriptor is drawn from a broad
  background distribution instead of the cluster's Gaussian;
* ``visual_overlap``: pulls the cluster centers together.

Queries combine the cluster head term, two topic draws and one background
term, so even under full text noise a query still matches documents through
the shared background vocabulary. Generation is deterministic per seed and
writes the standard collection files plus a manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .store import (
    DescriptorSet,
    Document,
    Qrels,
    Query,
    save_descriptors,
    save_documents,
    save_qrels,
    save_queries,
)


@dataclass(frozen=True)
class SynthSpec:
    clusters: int = 6
    docs_per_cluster: int = 25
    queries_per_cluster: int = 4
    vocab_per_cluster: int = 12
    background_vocab: int = 40
    tokens_per_doc: int = 20
    text_noise: float = 0.5
    text_overlap: float = 0.0
    descriptors_per_doc: int = 15
    descriptor_dim: int = 6
    visual_noise: float = 0.2
    visual_overlap: float = 0.0
    cluster_spread: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "clusters": self.clusters,
            "docs_per_cluster": self.docs_per_cluster,
            "queries_per_cluster": self.queries_per_cluster,
            "vocab_per_cluster": self.vocab_per_cluster,
            "background_vocab": self.background_vocab,
            "tokens_per_doc": self.tokens_per_doc,
            "descriptors_per_doc": self.descriptors_per_doc,
            "descriptor_dim": self.descriptor_dim,
        }
        for name, value in counts.items():
            if value < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        ratios = {
            "text_noise": self.text_noise,
            "text_overlap": self.text_overlap,
            "visual_noise": self.visual_noise,
            "visual_overlap": self.visual_overlap,
        }
        for name, value in ratios.items():
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.cluster_spread <= 0:
            raise ConfigError("cluster_spread must be positive")


def bundled_collection() -> SynthSpec:
    """Default collection: imperfect text, informative visual neighborhoods."""
    return SynthSpec(
        clusters=6, docs_per_cluster=25, queries_per_cluster=4,
        vocab_per_cluster=12, background_vocab=40, tokens_per_doc=20,
        text_noise=0.55, text_overlap=0.1,
        descriptors_per_doc=15, descriptor_dim=6,
        visual_noise=0.15, visual_overlap=0.0, cluster_spread=1.0,
        seed=12,
    )


def noisy_second_hop_collection() -> SynthSpec:
    """Variant whose visual graph has informative first hops but noisy longer
    paths, so iterating the diffusion degrades precision."""
    return SynthSpec(
        clusters=4, docs_per_cluster=30, queries_per_cluster=5,
        vocab_per_cluster=10, background_vocab=30, tokens_per_doc=18,
        text_noise=0.4, text_overlap=0.1,
        descriptors_per_doc=12, descriptor_dim=6,
        visual_noise=0.45, visual_overlap=0.35, cluster_spread=1.0,
        seed=9,
    )


def _topic_terms(cluster: int, spec: SynthSpec) -> list[str]:
    return [f"c{cluster:02d}w{j}" for j in range(spec.vocab_per_cluster)]


def _head_term(cluster: int) -> str:
    return f"c{cluster:02d}w0"


def generate_collection(spec: SynthSpec) -> tuple[list[Document], list[Query], Qrels]:
    """Materialize documents, queries and judgments in memory."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    background = [f"bg{j}" for j in range(spec.background_vocab)]
    separation = 6.0 * spec.cluster_spread * (1.0 - spec.visual_overlap)
    directions = rng.standard_normal((spec.clusters, spec.descriptor_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = directions * separation
    background_sd = max(separation, spec.cluster_spread)

    def draw_topic(cluster: int) -> str:
        pool_cluster = cluster
        if spec.text_overlap > 0 and rng.random() < spec.text_overlap:
            pool_cluster = (cluster + 1) % spec.clusters
        terms = _topic_terms(pool_cluster, spec)
        return terms[int(rng.integers(len(terms)))]

    def draw_background() -> str:
        return background[int(rng.integers(len(background)))]

    def draw_descriptors(cluster: int, count: int) -> DescriptorSet:
        vectors = np.empty((count, spec.descriptor_dim))
        for t in range(count):
            if spec.visual_noise > 0 and rng.random() < spec.visual_noise:
                vectors[t] = rng.normal(0.0, background_sd, spec.descriptor_dim)
            else:
                vectors[t] = rng.normal(centers[cluster], spec.cluster_spread)
        locations = rng.uniform(0.0, 1.0, (count, 2))
        return DescriptorSet(vectors, locations)

    documents: list[Document] = []
    queries: list[Query] = []
    relevant: dict[str, set[str]] = {}
    for cluster in range(spec.clusters):
        cluster_doc_ids = []
        for d in range(spec.docs_per_cluster):
            tokens = []
            if rng.random() < spec.text_noise:
                tokens.append(draw_background())
            else:
                tokens.append(_head_term(cluster))
            for _ in range(spec.tokens_per_doc - 1):
                if rng.random() < spec.text_noise:
                    tokens.append(draw_background())
                else:
                    tokens.append(draw_topic(cluster))
            doc_id = f"c{cluster:02d}d{d:03d}"
            cluster_doc_ids.append(doc_id)
            documents.append(Document(
                doc_id, tuple(tokens),
                draw_descriptors(cluster, spec.descriptors_per_doc)))
        for j in range(spec.queries_per_cluster):
            tokens = (_head_term(cluster), draw_topic(cluster),
                      draw_topic(cluster), draw_background())
            query_id = f"c{cluster:02d}q{j:02d}"
            queries.append(Query(
                query_id, tokens,
                draw_descriptors(cluster, spec.descriptors_per_doc)))
            relevant[query_id] = set(cluster_doc_ids)
    return documents, queries, Qrels(relevant)


def make_synthetic(spec: SynthSpec, out_dir) -> Path:
    """Write a synthetic collection to disk; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    documents, queries, qrels = generate_collection(spec)

    save_documents(documents, out / "docs.tsv")
    save_descriptors(
        {d.doc_id: d.visual_descriptors for d in documents}, out / "descriptors.tsv")
    save_queries(queries, out / "queries.tsv")
    save_descriptors(
        {q.query_id: q.visual_descriptors for q in queries},
        out / "query_descriptors.tsv")
    save_qrels(qrels, out / "qrels.txt")
    (out / "stopwords.txt").write_text("", encoding="utf-8")

    manifest = {
        "docs": "docs.tsv",
        "descriptors": "descriptors.tsv",
        "queries": "queries.tsv",
        "query_descriptors": "query_descriptors.tsv",
        "qrels": "qrels.txt",
        "stopwords": "stopwords.txt",
        "n_docs": len(documents),
        "n_queries": len(queries),
        "generator": asdict(spec),
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest_path
