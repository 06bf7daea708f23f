"""Per-modality z-scoring, weighted concatenation and the fusion-weight grid search."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import compute_metrics, confusion_matrix
from .numkit import ShapeError

__all__ = ["Normalizer", "FusionConfig", "fit_normalizer", "fuse", "GridSpec", "default_grid",
           "grid_search_weights", "write_heatmap_csv", "STD_FLOOR"]

STD_FLOOR = 1e-8
BLOCKS = ("cell", "tissue", "edge")


@dataclass(frozen=True)
class Normalizer:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def apply(self, modality: str, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mu = self.mean[modality]
        if x.shape[-1] != mu.size:
            raise ShapeError(f"{modality}: got dim {x.shape[-1]}, normalizer expects {mu.size}")
        return (x - mu) / self.std[modality]

    def to_json(self) -> dict:
        return {m: {"mean": self.mean[m].tolist(), "std": self.std[m].tolist()} for m in self.mean}

    @classmethod
    def from_json(cls, doc: dict) -> "Normalizer":
        return cls({m: np.array(v["mean"]) for m, v in doc.items()},
                   {m: np.array(v["std"]) for m, v in doc.items()})


def fit_normalizer(features: dict[str, np.ndarray]) -> Normalizer:
    """Per-dimension mean and (population) stddev, stddev floored at 1e-8."""
    means, stds = {}, {}
    for modality, x in features.items():
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ValueError(f"{modality}: need at least 2 training samples")
        means[modality] = x.mean(axis=0)
        stds[modality] = np.maximum(x.std(axis=0), STD_FLOOR)
    return Normalizer(means, stds)


@dataclass(frozen=True)
class FusionConfig:
    alpha: float
    beta: float
    gamma: float
    normalizer: Normalizer | None = None

    def __post_init__(self):
        w = np.array([self.alpha, self.beta, self.gamma], dtype=np.float64)
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("fusion weights must be finite and nonnegative")

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


def fuse(x_cell, x_tissue, x_edge, config: FusionConfig) -> np.ndarray:
    """``[alpha * z(X_C), beta * z(X_T), gamma * z(X_E)]`` on a vector or row matrix."""
    if config.normalizer is None:
        raise ValueError("fusion config has no fitted normalizer")
    blocks = []
    for modality, x, wgt in zip(BLOCKS, (x_cell, x_tissue, x_edge), config.weights):
        blocks.append(wgt * config.normalizer.apply(modality, x))
    if len({b.shape[:-1] for b in blocks}) != 1:
        raise ShapeError("modalities have different sample counts")
    return np.concatenate(blocks, axis=-1)


@dataclass(frozen=True)
class GridSpec:
    alphas: tuple[float, ...]
    betas: tuple[float, ...]
    gammas: tuple[float, ...]

    def points(self):
        for g in self.gammas:
            for a in self.alphas:
                for b in self.betas:
                    yield (a, b, g)

    def __len__(self) -> int:
        return len(self.alphas) * len(self.betas) * len(self.gammas)


def default_grid() -> GridSpec:
    steps = tuple(round(0.1 * i, 1) for i in range(11))
    return GridSpec(steps, steps, (0.0, 0.25, 0.5, 0.75, 1.0))


def _evaluate_point(train, val, normalizer, weights, svm_params, K):
    from .svm import predict, train_multiclass

    cfg = FusionConfig(*weights, normalizer)
    (trf, try_), (vaf, vay) = train, val
    Xtr = fuse(trf["cell"], trf["tissue"], trf["edge"], cfg)
    Xva = fuse(vaf["cell"], vaf["tissue"], vaf["edge"], cfg)
    ens = train_multiclass(Xtr, try_, K=K, **svm_params)
    pred, _ = predict(ens, Xva)
    m = compute_metrics(confusion_matrix(vay, pred, K))
    return m.accuracy, m.weighted_f1


def grid_search_weights(train, val, grid: GridSpec, normalizer: Normalizer,
                        svm_params: dict | None = None, K: int | None = None, jobs: int = 1):
    """Train/evaluate one ensemble per grid point.

    Best = highest weighted F1, then accuracy, then smallest ``(a, b, g)``.
    Returns ``(FusionConfig, rows)`` with rows ``(a, b, g, acc, weighted_f1)``
    in grid order.
    """
    points = list(grid.points())
    if not points:
        raise ValueError("empty grid")
    svm_params = svm_params or {}
    K = int(max(np.max(train[1]), np.max(val[1]))) + 1 if K is None else K
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        from functools import partial
        fn = partial(_evaluate_point, train, val, normalizer, svm_params=svm_params, K=K)
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(fn, points))
    else:
        results = [_evaluate_point(train, val, normalizer, p, svm_params, K) for p in points]
    rows = [(a, b, g, acc, f1) for (a, b, g), (acc, f1) in zip(points, results)]
    best = min(rows, key=lambda r: (-r[4], -r[3], r[0], r[1], r[2]))
    return FusionConfig(best[0], best[1], best[2], normalizer), rows


def write_heatmap_csv(rows, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "beta", "gamma", "acc", "weighted_f1"])
        for a, b, g, acc, f1 in rows:
            w.writerow([f"{a:g}", f"{b:g}", f"{g:g}", f"{acc:.6f}", f"{f1:.6f}"])
    return path
