"""Retrieval evaluation: cosine ranking, Rank-K accuracy, and mAP.

Texts are queries and images the gallery.  Ranking is by descending cosine
similarity with ties broken by ascending gallery index so results are
bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import data as datamod
from .encoders import EncoderParams, encode

FEATURE_STAGES = ("high", "low", "concat")


@dataclass(frozen=True)
class MetricsReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    n_queries: int
    n_gallery: int

    def to_dict(self) -> dict:
        return {"rank1": self.rank1, "rank5": self.rank5,
                "rank10": self.rank10, "map": self.map,
                "n_queries": self.n_queries, "n_gallery": self.n_gallery}

    def to_text(self) -> str:
        return "".join(f"{k} {v}\n" for k, v in self.to_dict().items())


def cosine_similarity_matrix(Q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities; zero rows contribute zero similarity."""
    Q, G = np.asarray(Q, dtype=np.float64), np.asarray(G, dtype=np.float64)
    if Q.shape[1] != G.shape[1]:
        raise ValueError(f"feature dims differ: {Q.shape} vs {G.shape}")
    qn = np.linalg.norm(Q, axis=1, keepdims=True)
    gn = np.linalg.norm(G, axis=1, keepdims=True)
    Qn = np.divide(Q, qn, out=np.zeros_like(Q), where=qn > 0)
    Gn = np.divide(G, gn, out=np.zeros_like(G), where=gn > 0)
    return Qn @ Gn.T


def _ranked_gallery(sim: np.ndarray) -> np.ndarray:
    # stable sort of -sim keeps equal scores in ascending gallery order
    return np.argsort(-sim, axis=1, kind="stable")


def rank_k(sim: np.ndarray, query_ids, gallery_ids, K: int) -> float:
    """Fraction of queries with a same-identity gallery item in the top K."""
    sim = np.asarray(sim)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    matches = query_ids[:, None] == gallery_ids[None, :]
    missing = np.where(~matches.any(axis=1))[0]
    if missing.size:
        raise ValueError(f"queries without any gallery match: {missing.tolist()}")
    order = _ranked_gallery(sim)
    hits = 0
    for i in range(sim.shape[0]):
        if matches[i, order[i, :K]].any():
            hits += 1
    return hits / sim.shape[0]


def mean_ap(sim: np.ndarray, query_ids, gallery_ids) -> float:
    """Mean average precision: per query, precision at each true-match rank
    averaged over that query's matches."""
    sim = np.asarray(sim)
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    matches = query_ids[:, None] == gallery_ids[None, :]
    missing = np.where(~matches.any(axis=1))[0]
    if missing.size:
        raise ValueError(f"queries without any gallery match: {missing.tolist()}")
    order = _ranked_gallery(sim)
    aps = []
    for i in range(sim.shape[0]):
        rel = matches[i, order[i]]
        ranks = np.where(rel)[0] + 1  # 1-based ranks of true matches
        precisions = np.arange(1, ranks.size + 1) / ranks
        aps.append(precisions.mean())
    return float(np.mean(aps))


def compute_report(sim: np.ndarray, query_ids, gallery_ids) -> MetricsReport:
    return MetricsReport(
        rank1=rank_k(sim, query_ids, gallery_ids, 1),
        rank5=rank_k(sim, query_ids, gallery_ids, 5),
        rank10=rank_k(sim, query_ids, gallery_ids, 10),
        map=mean_ap(sim, query_ids, gallery_ids),
        n_queries=sim.shape[0],
        n_gallery=sim.shape[1],
    )


def encode_instances(params: EncoderParams, ds: datamod.Dataset,
                     modality: int, stage: str) -> tuple[np.ndarray, np.ndarray]:
    """Encode every instance of one modality; returns (features, identities)."""
    if stage not in FEATURE_STAGES:
        raise ValueError(f"unknown feature stage {stage!r}")
    rows = [i for i, inst in enumerate(ds.instances) if inst.modality == modality]
    X = np.array([ds.instances[i].feature for i in rows])
    ids = np.array([ds.instances[i].identity for i in rows])
    feats = encode(params, X)
    if stage == "high":
        F = feats.high.data
    elif stage == "low":
        F = feats.low.data
    else:
        F = np.concatenate([feats.low.data, feats.high.data], axis=1)
    return F, ids


def evaluate(visual: EncoderParams, textual: EncoderParams,
             ds: datamod.Dataset, stage: str = "high") -> MetricsReport:
    """Full retrieval pass: all texts query all images."""
    G, gids = encode_instances(visual, ds, datamod.IMAGE, stage)
    Q, qids = encode_instances(textual, ds, datamod.TEXT, stage)
    return compute_report(cosine_similarity_matrix(Q, G), qids, gids)
