"""Exact KNN graph over contour sample points and its fixed-length summary."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptors import FeatureVector

__all__ = ["EdgeGraph", "build_knn_graph", "graph_summary_stats", "assemble_edge_feature",
           "STATS_DIM", "DEFAULT_K", "dump_graph"]

STATS_DIM = 8
DEFAULT_K = 5


@dataclass(frozen=True)
class EdgeGraph:
    positions: np.ndarray  # n x 2, (row, col) px
    features: np.ndarray  # n x d_edge
    edges: np.ndarray  # e x 2 directed (i, j)
    k: int

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def build_knn_graph(points, features, k: int = DEFAULT_K) -> EdgeGraph:
    """Directed graph linking each node to its ``k`` nearest other nodes.

    Exact all-pairs distances; equal distances go to the lower index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    feats = np.asarray(features, dtype=np.float64)
    feats = feats.reshape(len(pts), -1) if feats.size or len(pts) else feats.reshape(0, 0)
    if len(feats) != len(pts):
        raise ValueError("points and features are not aligned")
    n = len(pts)
    kk = min(k, n - 1)
    if kk <= 0:
        return EdgeGraph(pts, feats, np.zeros((0, 2), dtype=np.int64), k)
    diff = pts[:, None, :] - pts[None, :, :]
    dist2 = (diff ** 2).sum(axis=2)
    np.fill_diagonal(dist2, np.inf)
    # stable sort keeps lower indices first among equal distances
    order = np.argsort(dist2, axis=1, kind="stable")[:, :kk]
    src = np.repeat(np.arange(n), kk)
    return EdgeGraph(pts, feats, np.stack([src, order.ravel()], axis=1).astype(np.int64), k)


def _clustering(n: int, edges: np.ndarray) -> np.ndarray:
    adj = np.zeros((n, n), dtype=bool)
    adj[edges[:, 0], edges[:, 1]] = True
    adj |= adj.T
    a = adj.astype(np.float64)
    deg = a.sum(axis=1)
    triangles = np.einsum("ij,jk,ki->i", a, a, a) / 2.0
    possible = deg * (deg - 1) / 2.0
    return np.divide(triangles, possible, out=np.zeros(n), where=possible > 0)


def graph_summary_stats(g: EdgeGraph) -> np.ndarray:
    """``[nodes, edges, mean in-degree, in-degree var, mean edge length,
    edge length var, mean clustering (undirected), mean cosine of linked features]``."""
    n, e = g.n_nodes, g.n_edges
    if n == 0:
        return np.zeros(STATS_DIM)
    indeg = np.bincount(g.edges[:, 1], minlength=n).astype(np.float64) if e else np.zeros(n)
    if e:
        src, dst = g.edges[:, 0], g.edges[:, 1]
        lengths = np.linalg.norm(g.positions[src] - g.positions[dst], axis=1)
        fa, fb = g.features[src], g.features[dst]
        denom = np.linalg.norm(fa, axis=1) * np.linalg.norm(fb, axis=1)
        cos = np.divide((fa * fb).sum(axis=1), denom, out=np.zeros(e), where=denom > 0)
        mean_len, var_len, mean_cos = lengths.mean(), lengths.var(), cos.mean()
        clust = _clustering(n, g.edges).mean()
    else:
        mean_len = var_len = mean_cos = clust = 0.0
    return np.array([n, e, indeg.mean(), indeg.var(), mean_len, var_len, clust, mean_cos], dtype=np.float64)


def assemble_edge_feature(pooled, stats) -> FeatureVector:
    pooled = np.asarray(pooled, dtype=np.float64).ravel()
    stats = np.asarray(stats, dtype=np.float64).ravel()
    if stats.size != STATS_DIM:
        raise ValueError(f"expected {STATS_DIM} graph statistics, got {stats.size}")
    return FeatureVector("edge", np.concatenate([pooled, stats]))


def dump_graph(g: EdgeGraph, path) -> Path:
    doc = {
        "nodes": [{"pos": [float(r), float(c)], "feature_dim": int(g.features.shape[1]) if g.features.ndim == 2 else 0}
                  for r, c in g.positions],
        "edges": g.edges.tolist(),
        "k": g.k,
    }
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path
