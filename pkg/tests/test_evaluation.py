import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fect.evaluation import ABLATION_SUBSETS, compute_metrics, confusion_matrix, run_ablation, write_ablation_csv
from fect.fusion import fit_normalizer
from oracles import metrics_from_definition


def test_confusion_hand_case():
    cm = confusion_matrix([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    assert confusion_matrix([], [], 3).counts.sum() == 0


def test_confusion_rejects():
    with pytest.raises(ValueError):
        confusion_matrix([0, 2], [0, 1], 2)
    with pytest.raises(ValueError):
        confusion_matrix([0], [0, 1], 2)


def test_weighted_f1_hand_case():
    m = compute_metrics(np.array([[1, 1], [0, 2]]))
    assert np.allclose(m.per_class_f1, [2 / 3, 0.8])
    assert m.weighted_f1 == pytest.approx(11 / 15, abs=1e-15)


def test_metrics_errors_and_degenerate():
    with pytest.raises(ValueError, match="no samples"):
        compute_metrics(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        compute_metrics(np.ones((1, 1)))
    m = compute_metrics(np.array([[3, 0], [2, 0]]))
    assert m.per_class_f1[1] == 0.0


@given(st.integers(2, 6).flatmap(lambda k: arrays(np.int64, (k, k), elements=st.integers(0, 40))))
def test_metrics_match_definition(cm):
    if cm.sum() == 0:
        cm[0, 0] = 1
    got = compute_metrics(cm)
    ref = metrics_from_definition(cm)
    assert np.allclose(got.per_class_f1, ref["per_class_f1"], atol=1e-12, rtol=0)
    for key in ("weighted_f1", "macro_f1", "accuracy", "balanced_accuracy"):
        assert abs(getattr(got, key) - ref[key]) <= 1e-12
        assert 0.0 <= getattr(got, key) <= 1.0


@given(st.integers(2, 5), st.integers(1, 20), st.integers(0, 10**6))
def test_balanced_equals_plain_for_equal_supports(k, per_class, seed):
    r = np.random.default_rng(seed)
    cm = np.stack([r.multinomial(per_class, np.ones(k) / k) for _ in range(k)])
    m = compute_metrics(cm)
    assert abs(m.balanced_accuracy - m.accuracy) <= 1e-12


def test_diagonal_is_perfect():
    m = compute_metrics(np.diag([3, 1, 7]))
    assert m.weighted_f1 == m.macro_f1 == m.accuracy == m.balanced_accuracy == 1.0


def _blob_split(seed, n_per):
    r = np.random.default_rng(seed)
    y = np.repeat(np.arange(3), n_per)
    feats = {
        "cell": r.normal(size=(len(y), 4)) + y[:, None] * 3.0,
        "tissue": r.normal(size=(len(y), 3)),
        "edge": r.normal(size=(len(y), 2)) + (y == 2)[:, None] * 4.0,
    }
    return feats, y


def test_ablation_rows_and_csv(tmp_path):
    train, test = _blob_split(0, 15), _blob_split(1, 10)
    rows = run_ablation(train, test, fit_normalizer(train[0]), {"C": 1.0}, K=3)
    assert [r.subset for r in rows] == [name for name, _ in ABLATION_SUBSETS]
    assert len(rows) == 7
    by = {r.subset: r.metrics.weighted_f1 for r in rows}
    assert by["fusion"] >= by["tissue"]
    text = write_ablation_csv(rows, tmp_path / "a.csv").read_text().splitlines()
    assert text[0] == "subset,acc,balanced_acc,macro_f1,weighted_f1" and len(text) == 8
    assert all(len(v.split(".")[1]) == 6 for v in text[1].split(",")[1:])
    again = run_ablation(train, test, fit_normalizer(train[0]), {"C": 1.0}, K=3)
    assert [r.predictions.tolist() for r in again] == [r.predictions.tolist() for r in rows]


def test_ablation_missing_modality():
    feats, y = _blob_split(0, 5)
    del feats["edge"]
    with pytest.raises(KeyError, match="edge"):
        run_ablation((feats, y), (feats, y), None)
