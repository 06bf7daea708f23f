"""Nystrom attention error against the exact path as the landmark count grows."""
import argparse
from dataclasses import dataclass

import numpy as np

from fect.aggregator import AggregatorModel, attention_outputs


@dataclass(frozen=True)
class SweepSpec:
    n_tokens: int = 32
    d: int = 14
    seeds: int = 20
    pinv_iters: int = 6


def main(spec: SweepSpec) -> None:
    ms = [m for m in (1, 2, 4, 8, 16, 32, 64) if m <= spec.n_tokens]
    err = np.zeros(len(ms))
    for seed in range(spec.seeds):
        model = AggregatorModel.init(d=spec.d, K=4, seed=seed, landmark_seed=seed, pinv_iters=spec.pinv_iters)
        x = np.random.default_rng(seed).normal(size=(spec.n_tokens, spec.d))
        exact = attention_outputs(x, model)
        for i, m in enumerate(ms):
            err[i] += np.linalg.norm(attention_outputs(x, model, nystrom=True, landmarks=m) - exact)
    for m, e in zip(ms, err / spec.seeds):
        print(f"m={m:3d}  mean Frobenius error {e:.3e}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=32)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--pinv-iters", type=int, default=6)
    a = ap.parse_args()
    main(SweepSpec(n_tokens=a.n, seeds=a.seeds, pinv_iters=a.pinv_iters))
