"""Dense linear-algebra helpers shared by every numerical module.

Matrices are plain 2-D ``float64`` numpy arrays. ``SeededRng`` is a
counter-based SplitMix64 stream so that seeded draws are identical across
platforms and numpy versions.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "SeededRng",
    "as_matrix",
    "matmul",
    "softmax_rows",
    "pinv_iterative",
    "pinv_iterative_trace",
    "penrose_residuals",
    "pca_project",
]

DEFAULT_PINV_ITERS = 6


class ShapeError(ValueError):
    """Raised when array dimensions do not fit an operation."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction."""
    m = as_matrix(m)
    if m.size == 0:
        raise ShapeError("softmax of an empty matrix")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _pinv_init(a: np.ndarray) -> np.ndarray:
    norm1 = np.abs(a).sum(axis=0).max()
    norm_inf = np.abs(a).sum(axis=1).max()
    return a.T / (norm1 * norm_inf)


def pinv_iterative_trace(a, iters: int = DEFAULT_PINV_ITERS) -> list[np.ndarray]:
    """All iterates ``[Z_0, ..., Z_iters]`` of the cubic Newton-Schulz scheme.

    ``Z_{j+1} = Z_j (13I - AZ_j (15I - AZ_j (7I - AZ_j))) / 4`` started from
    ``A^T / (||A||_1 ||A||_inf)``. The backward pass of the Nystrom aggregator
    replays these iterates.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"pseudoinverse needs a square matrix, got {a.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(a):
        return [np.zeros_like(a)] * (iters + 1)
    eye = np.eye(a.shape[0])
    z = _pinv_init(a)
    trace = [z]
    for _ in range(iters):
        az = a @ z
        z = 0.25 * z @ (13 * eye - az @ (15 * eye - az @ (7 * eye - az)))
        trace.append(z)
    return trace


def pinv_iterative(a, iters: int = DEFAULT_PINV_ITERS) -> np.ndarray:
    return pinv_iterative_trace(a, iters)[-1]


def penrose_residuals(a, z) -> tuple[float, float]:
    """Relative Frobenius residuals ``(|AZA - A|/|A|, |ZAZ - Z|/|Z|)``."""
    a = as_matrix(a)
    z = as_matrix(z)
    na = np.linalg.norm(a)
    nz = np.linalg.norm(z)
    r1 = np.linalg.norm(a @ z @ a - a) / na if na > 0 else 0.0
    r2 = np.linalg.norm(z @ a @ z - z) / nz if nz > 0 else 0.0
    return float(r1), float(r2)


def pca_project(x, k: int) -> np.ndarray:
    """Project centered rows of ``x`` onto the top-``k`` principal directions.

    Sign of each direction is fixed so its largest-magnitude loading is
    positive, which keeps the output deterministic.
    """
    x = as_matrix(x, "X")
    n, d = x.shape
    if n < 2:
        raise ShapeError("PCA needs at least two samples")
    if k > d or k < 1:
        raise ShapeError(f"cannot keep {k} components of {d}-dim data")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    basis = evecs[:, order]
    idx = np.argmax(np.abs(basis), axis=0)
    basis = basis * np.sign(basis[idx, np.arange(k)])
    out = xc @ basis
    return out - out.mean(axis=0)


_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _splitmix64(counters: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = counters * _GAMMA
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


class SeededRng:
    """SplitMix64 stream (Steele, Lea & Flood constants).

    Draw ``i`` is ``mix((seed + i + 1) * 0x9E3779B97F4A7C15)``, evaluated in
    vectorized uint64 arithmetic. Derived distributions:

    * uniform: top 53 bits scaled by 2**-53
    * normal: Box-Muller on pairs of uniforms
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def raw(self, size: int) -> np.ndarray:
        start = (self.seed + self._counter + 1) & _MASK64
        counters = (np.arange(size, dtype=np.uint64) + np.uint64(start))
        self._counter += size
        return _splitmix64(counters)

    def random(self, size=None):
        shape = () if size is None else size
        n = int(np.prod(shape))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u.reshape(shape) if size is not None else float(u[0])

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        shape = () if size is None else size
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        return z.reshape(shape) if size is not None else float(z[0])

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.random(size if size is not None else 1)
        v = low + np.floor(u * (high - low)).astype(np.int64)
        return v if size is not None else int(v[0])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.random(n), kind="stable")

    def spawn(self, key: int) -> "SeededRng":
        """Independent child stream keyed by ``key``."""
        child_seed = int(_splitmix64(np.array([(self.seed ^ (int(key) * 0x2545F4914F6CDD1D)) & _MASK64],
                                              dtype=np.uint64))[0])
        return SeededRng(child_seed)
