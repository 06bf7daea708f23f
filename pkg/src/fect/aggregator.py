"""Attention aggregator with a learnable pooling token.

One transformer-style block without layer norm:

    T = X W_in,  H = [p; T]
    Q, K, V = H W_q, H W_k, H W_v                     (split into heads)
    O_h = softmax(Q_h K_h^T / sqrt(D / heads)) V_h     (exact path)
    Z = H + concat(O_h) W_o
    pooled = Z[0],  logits = pooled head_W + head_b

The Nystrom path replaces each head's softmax with

    softmax(Q K~^T / s) pinv(softmax(Q~ K~^T / s)) softmax(Q~ K^T / s)

where the landmarks ``Q~``, ``K~`` are the pooling row itself plus segment
means over a seeded shuffle of the token rows. Gradients are analytic,
including the unrolled Newton-Schulz pseudoinverse iterations.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descriptors import FeatureVector
from .numkit import DEFAULT_PINV_ITERS, SeededRng, ShapeError, pinv_iterative_trace

__all__ = [
    "PARAM_ORDER",
    "AggregatorModel",
    "TrainConfig",
    "EmptyBagError",
    "attention_forward",
    "nystrom_attention_forward",
    "attention_outputs",
    "loss_and_grads",
    "train_aggregator",
    "grad_check",
    "aggregate",
    "learning_rate",
    "save_model",
    "load_model",
]

PARAM_ORDER = ("W_in", "pool_token", "W_q", "W_k", "W_v", "W_o", "head_W", "head_b")
DEFAULT_DIM = 64
DEFAULT_HEADS = 4
DEFAULT_LANDMARKS = 16
_VALUE_PATH = ("W_v", "W_o", "head_W")


class EmptyBagError(ValueError):
    def __init__(self):
        super().__init__("empty bag")


@dataclass
class AggregatorModel:
    d: int
    D: int
    heads: int
    K: int
    params: dict[str, np.ndarray]
    landmarks: int = DEFAULT_LANDMARKS
    pinv_iters: int = DEFAULT_PINV_ITERS
    landmark_seed: int = 0
    history: list[tuple[int | None, float | None, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} is not divisible by heads={self.heads}")
        for name, shape in self.shapes().items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        d, D, K = self.d, self.D, self.K
        return {"W_in": (d, D), "pool_token": (D,), "W_q": (D, D), "W_k": (D, D), "W_v": (D, D),
                "W_o": (D, D), "head_W": (D, K), "head_b": (K,)}

    @classmethod
    def init(cls, d: int, K: int, D: int = DEFAULT_DIM, heads: int = DEFAULT_HEADS, seed: int = 0,
             std: float = 0.02, fan_in: bool = True, **hyper) -> "AggregatorModel":
        """Seeded Gaussian init with zero head bias.

        ``W_in``, ``pool_token``, ``W_q`` and ``W_k`` draw from N(0, std),
        which keeps the initial attention close to uniform. With ``fan_in``
        the value path (``W_v``, ``W_o``, ``head_W``) uses N(0, 1/fan_in)
        instead so the head sees the tokens at O(1) scale; otherwise every
        tensor uses N(0, std).
        """
        rng = SeededRng(seed)
        probe = cls.__new__(cls)
        probe.d, probe.D, probe.K = d, D, K
        params = {}
        for name, shape in cls.shapes(probe).items():
            if name == "head_b":
                params[name] = np.zeros(shape)
            elif fan_in and name in _VALUE_PATH:
                params[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
            else:
                params[name] = rng.normal(0.0, std, size=shape)
        return cls(d, D, heads, K, params, **hyper)

    def copy(self) -> "AggregatorModel":
        return AggregatorModel(self.d, self.D, self.heads, self.K,
                               {k: v.copy() for k, v in self.params.items()},
                               self.landmarks, self.pinv_iters, self.landmark_seed, list(self.history))

    @property
    def head_dim(self) -> int:
        return self.D // self.heads


def learning_rate(lr0: float, epoch: int, step: int = 7, factor: float = 0.5) -> float:
    return lr0 * factor ** (epoch // step)


# ------------------------------------------------------------------ forward

def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_back(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    return a * (da - (da * a).sum(axis=-1, keepdims=True))


def _landmark_matrix(n_tokens: int, m: int, seed: int) -> np.ndarray:
    """Averaging matrix (L x (n+1)): row 0 keeps the pooling row, the rest
    average near-equal segments of a seeded shuffle of the token rows."""
    segments = min(m, n_tokens)
    perm = SeededRng(seed).permutation(n_tokens) + 1
    avg = np.zeros((segments + 1, n_tokens + 1))
    avg[0, 0] = 1.0
    for i, seg in enumerate(np.array_split(perm, segments)):
        avg[i + 1, seg] = 1.0 / len(seg)
    return avg


def _check_bag(tokens, model: AggregatorModel) -> np.ndarray:
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyBagError()
    if x.shape[1] != model.d:
        raise ShapeError(f"token dim {x.shape[1]} != model input dim {model.d}")
    return x


def _forward(x: np.ndarray, model: AggregatorModel, nystrom: bool, all_rows: bool = False,
             landmarks: int | None = None):
    """Shared forward. Only the pooling-row query reaches the loss, so the
    exact path computes a single attention row unless ``all_rows``."""
    p = model.params
    h = np.vstack([p["pool_token"], x @ p["W_in"]])
    q, k, v = h @ p["W_q"], h @ p["W_k"], h @ p["W_v"]
    nh, dh = model.heads, model.head_dim
    scale = 1.0 / np.sqrt(dh)
    rows = slice(None) if all_rows else slice(0, 1)
    heads = []
    outs = []
    avg = None
    if nystrom:
        m = model.landmarks if landmarks is None else landmarks
        if m < 1:
            raise ValueError("landmarks must be >= 1")
        avg = _landmark_matrix(len(x), m, model.landmark_seed)
    for i in range(nh):
        cols = slice(i * dh, (i + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        if not nystrom:
            a = _softmax(qh[rows] @ kh.T * scale)
            outs.append(a @ vh)
            heads.append({"a": a})
        else:
            ql, kl = avg @ qh, avg @ kh
            a1 = _softmax(qh[rows] @ kl.T * scale)
            a2 = _softmax(ql @ kl.T * scale)
            a3 = _softmax(ql @ kh.T * scale)
            trace = pinv_iterative_trace(a2, model.pinv_iters)
            z = trace[-1]
            b = a3 @ vh
            c = z @ b
            outs.append(a1 @ c)
            heads.append({"ql": ql, "kl": kl, "a1": a1, "a2": a2, "a3": a3, "trace": trace, "b": b, "c": c})
    o = np.hstack(outs)
    pooled = h[0] + o[0] @ p["W_o"]
    logits = pooled @ p["head_W"] + p["head_b"]
    cache = {"x": x, "h": h, "q": q, "k": k, "v": v, "o": o, "heads": heads, "avg": avg,
             "pooled": pooled, "nystrom": nystrom, "scale": scale}
    return pooled, logits, cache


def attention_forward(tokens, model: AggregatorModel) -> tuple[np.ndarray, np.ndarray]:
    """Exact multi-head attention; returns ``(pooled, logits)``."""
    pooled, logits, _ = _forward(_check_bag(tokens, model), model, nystrom=False)
    return pooled, logits


def nystrom_attention_forward(tokens, model: AggregatorModel, landmarks: int | None = None):
    pooled, logits, _ = _forward(_check_bag(tokens, model), model, nystrom=True, landmarks=landmarks)
    return pooled, logits


def attention_outputs(tokens, model: AggregatorModel, nystrom: bool = False,
                      landmarks: int | None = None) -> np.ndarray:
    """Concatenated per-head attention output for every row ((n+1) x D), before ``W_o``."""
    _, _, cache = _forward(_check_bag(tokens, model), model, nystrom, all_rows=True, landmarks=landmarks)
    return cache["o"]


def aggregate(tokens, model: AggregatorModel, modality: str = "cell", nystrom: bool = False) -> FeatureVector:
    fwd = nystrom_attention_forward if nystrom else attention_forward
    pooled, _ = fwd(tokens, model)
    return FeatureVector(modality, pooled)


# ----------------------------------------------------------------- backward

def _pinv_backward(a: np.ndarray, trace: list[np.ndarray], dz: np.ndarray) -> np.ndarray:
    """Gradient wrt ``a`` of the final Newton-Schulz iterate, replaying ``trace``."""
    eye = np.eye(a.shape[0])
    da = np.zeros_like(a)
    for z in reversed(trace[:-1]):
        pm = a @ z
        r1 = 7 * eye - pm
        r2 = 15 * eye - pm @ r1
        r3 = 13 * eye - pm @ r2
        dz_prev = 0.25 * dz @ r3.T
        dr3 = 0.25 * z.T @ dz
        dp = -dr3 @ r2.T
        dr2 = -pm.T @ dr3
        dp -= dr2 @ r1.T
        dr1 = -pm.T @ dr2
        dp -= dr1
        da += dp @ z.T
        dz = dz_prev + a.T @ dp
    # Z_0 = A^T / (||A||_1 ||A||_inf)
    absa = np.abs(a)
    col, row = absa.sum(axis=0), absa.sum(axis=1)
    j, i = int(np.argmax(col)), int(np.argmax(row))
    c1, cinf = col[j], row[i]
    kappa = 1.0 / (c1 * cinf)
    da += dz.T * kappa
    dkappa = float(np.sum(dz * a.T))
    sgn = np.sign(a)
    da[:, j] += dkappa * (-kappa / c1) * sgn[:, j]
    da[i, :] += dkappa * (-kappa / cinf) * sgn[i, :]
    return da


def _backward(cache, model: AggregatorModel, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    p = model.params
    x, h, q, k, v, o = cache["x"], cache["h"], cache["q"], cache["k"], cache["v"], cache["o"]
    scale = cache["scale"]
    dh = model.head_dim
    grads = {"head_W": np.outer(cache["pooled"], dlogits), "head_b": dlogits.copy()}
    dpooled = p["head_W"] @ dlogits
    grads["W_o"] = np.outer(o[0], dpooled)
    do0 = p["W_o"] @ dpooled  # only row 0 of O reaches the output
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for i, hc in enumerate(cache["heads"]):
        cols = slice(i * dh, (i + 1) * dh)
        qh, kh, vh = q[:, cols], k[:, cols], v[:, cols]
        do = do0[cols][None, :]
        if not cache["nystrom"]:
            a = hc["a"]
            dv[:, cols] += a.T @ do
            ds = _softmax_back(a, do @ vh.T) * scale
            dq[0:1, cols] += ds @ kh
            dk[:, cols] += ds.T @ qh[0:1]
            continue
        avg = cache["avg"]
        ql, kl, a1, a2, a3, b, c = (hc[n] for n in ("ql", "kl", "a1", "a2", "a3", "b", "c"))
        z = hc["trace"][-1]
        da1 = do @ c.T
        dc = a1.T @ do
        dz = dc @ b.T
        db = z.T @ dc
        da3 = db @ vh.T
        dv[:, cols] += a3.T @ db
        da2 = _pinv_backward(a2, hc["trace"], dz)
        ds1 = _softmax_back(a1, da1) * scale
        ds2 = _softmax_back(a2, da2) * scale
        ds3 = _softmax_back(a3, da3) * scale
        dq[0:1, cols] += ds1 @ kl
        dkl = ds1.T @ qh[0:1] + ds2.T @ ql
        dql = ds2 @ kl + ds3 @ kh
        dk[:, cols] += ds3.T @ ql
        dq[:, cols] += avg.T @ dql
        dk[:, cols] += avg.T @ dkl
    grads["W_q"] = h.T @ dq
    grads["W_k"] = h.T @ dk
    grads["W_v"] = h.T @ dv
    dh_ = dq @ p["W_q"].T + dk @ p["W_k"].T + dv @ p["W_v"].T
    dh_[0] += dpooled  # residual into the pooling row
    grads["pool_token"] = dh_[0]
    grads["W_in"] = x.T @ dh_[1:]
    return grads


def loss_and_grads(model: AggregatorModel, batch, nystrom: bool = False, with_grads: bool = True):
    """Mean cross-entropy over ``batch`` (list of ``(tokens, label)``) and its gradient."""
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    grads = {name: np.zeros_like(val) for name, val in model.params.items()} if with_grads else None
    nb = len(batch)
    for tokens, label in batch:
        _, logits, cache = _forward(_check_bag(tokens, model), model, nystrom)
        z = logits - logits.max()
        logp = z - np.log(np.exp(z).sum())
        total -= logp[label]
        if with_grads:
            dlogits = np.exp(logp)
            dlogits[label] -= 1.0
            for name, g in _backward(cache, model, dlogits / nb).items():
                grads[name] += g
    return total / nb, grads


# ----------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr0: float = 0.001
    momentum: float = 0.9
    lr_step: int = 7
    lr_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def train_aggregator(bags, config: TrainConfig = TrainConfig(), use_nystrom: bool = False,
                     K: int | None = None, D: int = DEFAULT_DIM, heads: int = DEFAULT_HEADS,
                     landmarks: int = DEFAULT_LANDMARKS, pinv_iters: int = DEFAULT_PINV_ITERS,
                     init_std: float = 0.02, fan_in: bool = True) -> AggregatorModel:
    """Mini-batch SGD with momentum on mean cross-entropy, step-decayed lr.

    ``model.history`` holds ``(None, None, initial loss)`` followed by
    ``(epoch, lr, mean batch loss)`` per epoch.
    """
    bags = [(np.asarray(t, dtype=np.float64), int(y)) for t, y in bags]
    if not bags:
        raise ValueError("no training bags")
    if any(t.ndim != 2 or len(t) == 0 for t, _ in bags):
        raise EmptyBagError()
    labels = [y for _, y in bags]
    K = max(labels) + 1 if K is None else K
    if K < 2:
        raise ValueError("need at least two classes")
    if min(labels) < 0 or max(labels) >= K:
        raise ValueError(f"labels must lie in 0..{K - 1}")
    model = AggregatorModel.init(bags[0][0].shape[1], K, D=D, heads=heads, seed=config.seed, std=init_std,
                                 fan_in=fan_in,
                                 landmarks=landmarks, pinv_iters=pinv_iters, landmark_seed=config.seed)
    init_loss, _ = loss_and_grads(model, bags, use_nystrom, with_grads=False)
    model.history.append((None, None, init_loss))
    velocity = {name: np.zeros_like(val) for name, val in model.params.items()}
    order_rng = SeededRng(config.seed).spawn(1)
    for epoch in range(config.epochs):
        lr = learning_rate(config.lr0, epoch, config.lr_step, config.lr_factor)
        order = order_rng.permutation(len(bags))
        losses = []
        for start in range(0, len(bags), config.batch_size):
            batch = [bags[i] for i in order[start:start + config.batch_size]]
            loss, grads = loss_and_grads(model, batch, use_nystrom)
            losses.append(loss)
            for name in PARAM_ORDER:
                velocity[name] = config.momentum * velocity[name] + grads[name]
                model.params[name] -= lr * velocity[name]
        if not all(np.all(np.isfinite(v)) for v in model.params.values()):
            raise FloatingPointError(f"non-finite parameters after epoch {epoch}")
        model.history.append((epoch, lr, float(np.mean(losses))))
    return model


def grad_check(model: AggregatorModel, batch, eps: float = 1e-5, nystrom: bool = False,
               n_coords: int = 200, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples at least ``n_coords`` coordinates, spread over every tensor.
    Relative error is ``|a - f| / max(|a|, |f|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not batch:
        raise ValueError("empty batch")
    _, grads = loss_and_grads(model, batch, nystrom)
    rng = SeededRng(seed)
    per_tensor = -(-n_coords // len(PARAM_ORDER))
    worst = 0.0
    for name in PARAM_ORDER:
        theta = model.params[name]
        flat = theta.reshape(-1)
        picks = rng.permutation(flat.size)[:per_tensor]
        if len(picks) < per_tensor:
            picks = np.concatenate([picks, rng.integers(0, flat.size, size=per_tensor - len(picks))])
        for idx in picks:
            old = flat[idx]
            flat[idx] = old + eps
            up, _ = loss_and_grads(model, batch, nystrom, with_grads=False)
            flat[idx] = old - eps
            down, _ = loss_and_grads(model, batch, nystrom, with_grads=False)
            flat[idx] = old
            fd = (up - down) / (2 * eps)
            an = grads[name].reshape(-1)[idx]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return worst


# ---------------------------------------------------------------- model file

_MAGIC = b"FECTAGG1"


def save_model(model: AggregatorModel, path) -> Path:
    """Little-endian: magic, (d, D, heads, K) as u32, then f64 tensors in ``PARAM_ORDER``."""
    path = Path(path)
    parts = [_MAGIC, struct.pack("<4I", model.d, model.D, model.heads, model.K)]
    parts += [np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in PARAM_ORDER]
    path.write_bytes(b"".join(parts))
    return path


def load_model(path, **hyper) -> AggregatorModel:
    data = Path(path).read_bytes()
    if data[:8] != _MAGIC:
        raise ValueError(f"{path}: not an aggregator model file")
    d, D, heads, K = struct.unpack_from("<4I", data, 8)
    probe = AggregatorModel.__new__(AggregatorModel)
    probe.d, probe.D, probe.K = d, D, K
    offset = 24
    params = {}
    for name, shape in AggregatorModel.shapes(probe).items():
        n = int(np.prod(shape))
        chunk = data[offset:offset + 8 * n]
        if len(chunk) != 8 * n:
            raise ValueError(f"{path}: truncated at tensor {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += 8 * n
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return AggregatorModel(d, D, heads, K, params, **hyper)
