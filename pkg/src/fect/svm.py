"""Linear soft-margin SVM trained in the dual, with one-vs-one voting.

Binary training is SMO: each step picks the maximal-violating pair by the
second-order rule of Fan, Chen & Lin (2005) and solves the two-variable
subproblem in closed form, so ``0 <= lambda_i <= C`` and
``sum(lambda_i y_i) = 0`` hold after every update.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .numkit import ShapeError

__all__ = [
    "BinarySvm",
    "SvmEnsemble",
    "DegenerateLabelsError",
    "train_binary_svm",
    "kkt_violation",
    "dual_objective",
    "primal_objective",
    "train_multiclass",
    "predict",
    "save_ensemble",
    "load_ensemble",
    "LogisticRegression",
    "train_logistic_regression",
]

DEFAULT_C = 1.0
DEFAULT_TOL = 1e-3
DEFAULT_MAX_ITER = 10_000
_TAU = 1e-12


class DegenerateLabelsError(ValueError):
    def __init__(self):
        super().__init__("degenerate labels")


@dataclass
class BinarySvm:
    w: np.ndarray
    b: float
    C: float
    lambdas: np.ndarray
    iterations: int = 0
    kkt: float = float("nan")
    dual_trace: list[float] = field(default_factory=list)

    def decision(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.w.size:
            raise ShapeError(f"feature dim {x.shape[-1]} != model dim {self.w.size}")
        return x @ self.w + self.b


def _check_binary(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"X {X.shape} and y {y.shape} do not align")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("labels must be -1 or +1")
    return X, y


def dual_objective(lambdas, X, y) -> float:
    """``sum(lambda) - 0.5 * ||sum(lambda_i y_i x_i)||^2`` (to be maximised)."""
    w = (np.asarray(lambdas) * np.asarray(y)) @ np.asarray(X, dtype=np.float64)
    return float(np.sum(lambdas) - 0.5 * w @ w)


def primal_objective(model: BinarySvm, X, y) -> float:
    margins = np.asarray(y) * model.decision(X)
    return float(0.5 * model.w @ model.w + model.C * np.maximum(0.0, 1.0 - margins).sum())


def train_binary_svm(X, y, C: float = DEFAULT_C, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER) -> BinarySvm:
    """SMO on the linear-kernel dual.

    Stops when the maximal KKT gap ``max_up(-y G) - min_low(-y G)`` drops
    below ``tol`` or after ``max_iter`` sweeps of ``n`` pair updates. The
    dual objective is logged once per sweep.
    """
    X, y = _check_binary(X, y)
    if C <= 0:
        raise ValueError("C must be positive")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelsError()
    n = len(y)
    gram = X @ X.T
    Q = gram * np.outer(y, y)
    diag = np.diag(Q).copy()
    lam = np.zeros(n)
    grad = -np.ones(n)  # gradient of 0.5 l'Ql - e'l
    trace = [0.0]
    it = 0
    limit = max_iter * n
    neg_inf = -np.inf
    pos = y > 0
    while it < limit:
        yg = -y * grad
        up = np.where(pos, lam < C, lam > 0)
        low = np.where(pos, lam > 0, lam < C)
        yg_up = np.where(up, yg, neg_inf)
        i = int(np.argmax(yg_up))
        gmax = yg_up[i]
        yg_low = np.where(low, yg, np.inf)
        gmin = yg_low.min()
        if gmax == neg_inf or gmin == np.inf or gmax - gmin < tol:
            break
        # second-order choice of j among violators in I_low
        b_ij = gmax - yg_low
        a_ij = diag[i] + diag - 2.0 * y[i] * y * Q[i]
        a_ij = np.where(a_ij > 0, a_ij, _TAU)
        score = np.where(b_ij > 0, b_ij * b_ij / a_ij, neg_inf)
        j = int(np.argmax(score))

        a = diag[i] + diag[j] - 2.0 * y[i] * y[j] * Q[i, j]
        a = a if a > 0 else _TAU
        old_i, old_j = lam[i], lam[j]
        if y[i] != y[j]:
            delta = (-grad[i] - grad[j]) / a
            diff = old_i - old_j
            lam_i, lam_j = old_i + delta, old_j + delta
            if diff > 0 and lam_j < 0:
                lam_j, lam_i = 0.0, diff
            elif diff <= 0 and lam_i < 0:
                lam_i, lam_j = 0.0, -diff
            if diff > 0 and lam_i > C:
                lam_i, lam_j = C, C - diff
            elif diff <= 0 and lam_j > C:
                lam_j, lam_i = C, C + diff
        else:
            delta = (grad[i] - grad[j]) / a
            total = old_i + old_j
            lam_i, lam_j = old_i - delta, old_j + delta
            if total > C and lam_i > C:
                lam_i, lam_j = C, total - C
            elif total <= C and lam_j < 0:
                lam_j, lam_i = 0.0, total
            if total > C and lam_j > C:
                lam_j, lam_i = C, total - C
            elif total <= C and lam_i < 0:
                lam_i, lam_j = 0.0, total
        lam_i = min(max(lam_i, 0.0), C)
        lam_j = min(max(lam_j, 0.0), C)
        lam[i], lam[j] = lam_i, lam_j
        grad += Q[i] * (lam_i - old_i) + Q[j] * (lam_j - old_j)
        it += 1
        if it % n == 0:
            trace.append(float(lam.sum() - 0.5 * lam @ (Q @ lam)))

    yg = -y * grad
    free = (lam > 0) & (lam < C)
    if free.any():
        b = float(yg[free].mean())
    else:
        up = ((y > 0) & (lam < C)) | ((y < 0) & (lam > 0))
        low = ((y > 0) & (lam > 0)) | ((y < 0) & (lam < C))
        hi = yg[up].max() if up.any() else yg.max()
        lo = yg[low].min() if low.any() else yg.min()
        b = float(0.5 * (hi + lo))
    w = (lam * y) @ X
    trace.append(float(lam.sum() - 0.5 * lam @ (Q @ lam)))
    model = BinarySvm(w, b, float(C), lam, iterations=it, dual_trace=trace)
    model.kkt = kkt_violation(model, X, y)
    return model


def kkt_violation(model: BinarySvm, X, y, eps: float = 1e-12) -> float:
    """Largest dual KKT residual over the training set.

    ``lambda = 0`` needs margin >= 1, ``0 < lambda < C`` needs margin == 1,
    ``lambda = C`` needs margin <= 1; ``eps`` decides which bound is active.
    """
    X, y = _check_binary(X, y)
    if len(model.lambdas) != len(y):
        raise ShapeError("model was trained on a different number of samples")
    margins = y * model.decision(X)
    lam = model.lambdas
    at_zero = lam <= eps
    at_c = lam >= model.C - eps
    free = ~at_zero & ~at_c
    viol = np.zeros(len(y))
    viol[at_zero] = np.maximum(0.0, 1.0 - margins[at_zero])
    viol[at_c] = np.maximum(0.0, margins[at_c] - 1.0)
    viol[free] = np.abs(margins[free] - 1.0)
    return float(viol.max()) if len(viol) else 0.0


# ---------------------------------------------------------------- multiclass

@dataclass
class SvmEnsemble:
    K: int
    models: dict[tuple[int, int], BinarySvm]
    fusion: object = None

    @property
    def dim(self) -> int:
        return next(iter(self.models.values())).w.size


def train_multiclass(X, y, C: float = DEFAULT_C, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER, K: int | None = None) -> SvmEnsemble:
    """One binary model per class pair ``(i, j)``, ``i < j``; class ``i`` is +1."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).ravel()
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError(f"X {X.shape} and y {y.shape} do not align")
    K = int(y.max()) + 1 if K is None else K
    if K < 2:
        raise ValueError("need at least two classes")
    counts = np.bincount(y, minlength=K)
    if len(counts) > K or (counts == 0).any():
        raise ValueError(f"every class in 0..{K - 1} needs samples; counts {counts.tolist()}")
    models = {}
    for i, j in combinations(range(K), 2):
        sel = (y == i) | (y == j)
        models[(i, j)] = train_binary_svm(X[sel], np.where(y[sel] == i, 1.0, -1.0), C, tol, max_iter)
    return SvmEnsemble(K, models)


def predict(ensemble: SvmEnsemble, X, tie_tol: float = 1e-9):
    """Majority vote over pairwise models.

    A decision value >= 0 votes for the lower class of the pair. Vote ties
    go to the tied class with the largest summed signed decision value;
    sums within ``tie_tol`` of each other count as equal, leaving the lowest
    index. Returns ``(labels, votes)``; a 1-D input gives a scalar label.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != ensemble.dim:
        raise ShapeError(f"feature dim {X.shape[1]} != model dim {ensemble.dim}")
    n, K = len(X), ensemble.K
    votes = np.zeros((n, K), dtype=np.int64)
    strength = np.zeros((n, K))
    for (i, j), model in ensemble.models.items():
        f = model.decision(X)
        win_i = f >= 0
        votes[win_i, i] += 1
        votes[~win_i, j] += 1
        strength[:, i] += f
        strength[:, j] -= f
    labels = np.empty(n, dtype=np.int64)
    for r in range(n):
        tied = np.flatnonzero(votes[r] == votes[r].max())
        best = strength[r, tied].max()
        labels[r] = tied[np.flatnonzero(strength[r, tied] >= best - tie_tol)[0]]
    if single:
        return int(labels[0]), votes[0]
    return labels, votes


_MAGIC = b"FECTSVM1"


def save_ensemble(ensemble: SvmEnsemble, path) -> Path:
    """Little-endian: magic, K u32, then per pair i, j, dim (u32), w (f64), b, C (f64)."""
    parts = [_MAGIC, struct.pack("<I", ensemble.K)]
    for (i, j), m in sorted(ensemble.models.items()):
        parts.append(struct.pack("<3I", i, j, m.w.size))
        parts.append(np.ascontiguousarray(m.w, dtype="<f8").tobytes())
        parts.append(struct.pack("<2d", m.b, m.C))
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def load_ensemble(path) -> SvmEnsemble:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not an SVM model file")
    (K,) = struct.unpack_from("<I", data, 8)
    off = 12
    models = {}
    for _ in range(K * (K - 1) // 2):
        i, j, dim = struct.unpack_from("<3I", data, off)
        off += 12
        w = np.frombuffer(data, dtype="<f8", count=dim, offset=off).copy()
        off += 8 * dim
        b, C = struct.unpack_from("<2d", data, off)
        off += 16
        models[(i, j)] = BinarySvm(w, b, C, np.zeros(0))
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return SvmEnsemble(K, models)


# -------------------------------------------------------- baseline classifier

@dataclass
class LogisticRegression:
    W: np.ndarray
    b: np.ndarray

    def predict(self, X) -> np.ndarray:
        return np.argmax(np.asarray(X, dtype=np.float64) @ self.W + self.b, axis=1)


def train_logistic_regression(X, y, K: int | None = None, lr: float = 0.1, epochs: int = 500,
                              l2: float = 1e-3) -> LogisticRegression:
    """Multinomial logistic regression by full-batch gradient descent."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    K = int(y.max()) + 1 if K is None else K
    n, d = X.shape
    W = np.zeros((d, K))
    b = np.zeros(K)
    onehot = np.eye(K)[y]
    for _ in range(epochs):
        z = X @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        W -= lr * (X.T @ g + l2 * W)
        b -= lr * g.sum(axis=0)
    return LogisticRegression(W, b)
