"""One-vs-one SVM against multinomial logistic regression on the cached features.

Needs the caches of a finished run (see run_synthetic.py):

    python3 scripts/compare_classifiers.py --run runs/seed0
"""
import argparse
from dataclasses import dataclass
from pathlib import Path

from fect import pipeline as pl
from fect.config import load_config
from fect.evaluation import ABLATION_SUBSETS, compute_metrics, confusion_matrix
from fect.fusion import FusionConfig, fit_normalizer, fuse
from fect.svm import predict, train_logistic_regression, train_multiclass


@dataclass(frozen=True)
class CompareSpec:
    run: Path
    split: str = "test"
    svm_c: float = 1.0
    lr_epochs: int = 500


def main(spec: CompareSpec) -> None:
    cfg = load_config(data_dir=str(spec.run / "data"), cache_dir=str(spec.run / "cache"))
    splits = pl.load_splits(cfg)
    K = pl.class_count(splits)
    (tr, ytr), (te, yte) = pl.load_split_features(cfg, "train", splits), pl.load_split_features(cfg, spec.split, splits)
    norm = fit_normalizer(tr)
    print(f"{'subset':12s} {'svm w_f1':>9s} {'logreg w_f1':>11s}")
    for name, weights in ABLATION_SUBSETS:
        fc = FusionConfig(*weights, norm)
        Xtr = fuse(tr["cell"], tr["tissue"], tr["edge"], fc)
        Xte = fuse(te["cell"], te["tissue"], te["edge"], fc)
        svm_pred, _ = predict(train_multiclass(Xtr, ytr, C=spec.svm_c, K=K), Xte)
        lr_pred = train_logistic_regression(Xtr, ytr, K=K, epochs=spec.lr_epochs).predict(Xte)
        f_svm = compute_metrics(confusion_matrix(yte, svm_pred, K)).weighted_f1
        f_lr = compute_metrics(confusion_matrix(yte, lr_pred, K)).weighted_f1
        print(f"{name:12s} {f_svm:9.3f} {f_lr:11.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--run", type=Path, default=Path("runs/seed0"))
    ap.add_argument("--split", default="test", choices=pl.SPLITS)
    ap.add_argument("--svm-c", type=float, default=1.0)
    args = ap.parse_args()
    main(CompareSpec(args.run, args.split, args.svm_c))
