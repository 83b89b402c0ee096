"""Embeddings, query-gallery distances, CMC and mAP."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import Dataset, FeatureMap, PartitionSpec
from .gcnnet import ModelParams, embed_parts
from .optim import prepare_inputs, variant_setup

DEFAULT_RANKS = (1, 5, 10)


def embed_features(features: np.ndarray, params: ModelParams, spec: PartitionSpec = PartitionSpec(),
                   variant: str = "phgcn", delta=None, normalize: bool = True) -> np.ndarray:
    """Concatenated fused part vectors for stacked maps (n, rows, cols, dim) -> (n, N*width).

    ``pgcn`` keeps only the finest level as a single-level graph; ``nogcn`` drops
    the structure stream and uses the appearance features alone (beta = 1).
    Part heads are not used, so any model whose GCN and projection shapes fit
    can be embedded under any variant.
    """
    spec, use_gcn = variant_setup(spec, variant)
    X, A = prepare_inputs(features, spec, delta, params.dtype)
    Z = embed_parts(X, A, params, use_gcn)
    emb = Z.reshape(Z.shape[0], -1).astype(np.float64)
    if normalize:
        norms = np.linalg.norm(emb, axis=1, keepdims=True)
        emb = np.divide(emb, norms, out=np.zeros_like(emb), where=norms > 0)
    return emb


def embed(fmap: FeatureMap, params: ModelParams, spec: PartitionSpec = PartitionSpec(),
          variant: str = "phgcn", delta=None, normalize: bool = True) -> np.ndarray:
    return embed_features(fmap.values[None], params, spec, variant, delta, normalize)[0]


def pairwise_distances(queries, gallery, chunk: int = 256) -> np.ndarray:
    """Euclidean distances, computed from explicit differences (exact zero on equal rows)."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if queries.shape[1] != gallery.shape[1]:
        raise ValueError(f"embedding dims differ: {queries.shape[1]} vs {gallery.shape[1]}")
    out = np.empty((len(queries), len(gallery)))
    for s in range(0, len(queries), chunk):
        diff = queries[s:s + chunk, None, :] - gallery[None, :, :]
        out[s:s + chunk] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def ranked_relevance(distmat, query_labels, gallery_labels):
    """Per valid query, the 0/1 relevance of the gallery in ranked order.

    Ranking key: distance, then gallery label, then gallery index. Returns
    (list of relevance arrays, indices of queries with no gallery match).
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    query_labels = np.asarray(query_labels)
    gallery_labels = np.asarray(gallery_labels)
    index = np.arange(len(gallery_labels))
    rel, excluded = [], []
    for q in range(distmat.shape[0]):
        matches = gallery_labels == query_labels[q]
        if not matches.any():
            excluded.append(q)
            continue
        order = np.lexsort((index, gallery_labels, distmat[q]))
        rel.append(matches[order])
    return rel, excluded


def cmc(distmat, query_labels, gallery_labels, ranks=DEFAULT_RANKS) -> dict[int, float]:
    """Fraction of queries whose first correct match is within the top k (k clamped to the gallery)."""
    rel, _ = ranked_relevance(distmat, query_labels, gallery_labels)
    n_gallery = np.asarray(distmat).shape[1]
    if not rel:
        raise ValueError("no query has a matching gallery identity")
    first = np.array([int(np.argmax(r)) + 1 for r in rel])
    return {k: float(np.mean(first <= min(k, n_gallery))) for k in ranks}


def average_precision(relevance) -> float:
    relevance = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(relevance)
    if hits.size == 0:
        raise ValueError("no relevant item")
    precision_at_hit = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hit.mean())


def mean_ap(distmat, query_labels, gallery_labels) -> float:
    rel, _ = ranked_relevance(distmat, query_labels, gallery_labels)
    if not rel:
        raise ValueError("no query has a matching gallery identity")
    return float(np.mean([average_precision(r) for r in rel]))


@dataclass
class EvalReport:
    variant: str
    map: float
    cmc: dict[str, float]
    num_queries: int
    num_gallery: int
    excluded_queries: int
    seed: int | None = None
    config_digest: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        known = {k: d.pop(k) for k in list(d) if k in cls.__dataclass_fields__}
        return cls(**known, extra=d)


def evaluate(params: ModelParams, dataset: Dataset, spec: PartitionSpec = PartitionSpec(),
             variant: str = "phgcn", delta=None, seed=None, config_digest=None,
             ranks=DEFAULT_RANKS) -> EvalReport:
    q_feats, q_labels = dataset.subset("query")
    g_feats, g_labels = dataset.subset("gallery")
    if len(q_labels) == 0 or len(g_labels) == 0:
        raise ValueError("evaluation needs non-empty query and gallery splits")
    q_emb = embed_features(q_feats, params, spec, variant, delta)
    g_emb = embed_features(g_feats, params, spec, variant, delta)
    dist = pairwise_distances(q_emb, g_emb)
    _, excluded = ranked_relevance(dist, q_labels, g_labels)
    values = cmc(dist, q_labels, g_labels, ranks)
    return EvalReport(
        variant=variant,
        map=mean_ap(dist, q_labels, g_labels),
        cmc={str(k): v for k, v in values.items()},
        num_queries=len(q_labels) - len(excluded),
        num_gallery=len(g_labels),
        excluded_queries=len(excluded),
        seed=seed,
        config_digest=config_digest,
    )
