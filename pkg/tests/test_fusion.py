import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fect.fusion import (FusionConfig, GridSpec, Normalizer, default_grid, fit_normalizer, fuse,
                         grid_search_weights, write_heatmap_csv)
from fect.numkit import ShapeError


def feats(seed, n=12):
    r = np.random.default_rng(seed)
    return {"cell": r.normal(3, 2, (n, 4)), "tissue": r.normal(-1, 5, (n, 3)), "edge": r.normal(0, 1, (n, 2))}


def test_normalizer_zscores_training_data():
    f = feats(0)
    norm = fit_normalizer(f)
    for m, x in f.items():
        z = norm.apply(m, x)
        assert np.allclose(z.mean(axis=0), 0, atol=1e-12)
        assert np.allclose(z.std(axis=0), 1, atol=1e-12)


def test_constant_column_floor():
    norm = fit_normalizer({"cell": np.ones((3, 2))})
    assert np.all(norm.std["cell"] == 1e-8)
    assert not norm.apply("cell", np.ones((1, 2))).any()


def test_normalizer_json_roundtrip():
    norm = fit_normalizer(feats(1))
    back = Normalizer.from_json(json.loads(json.dumps(norm.to_json())))
    x = feats(2)["tissue"]
    assert np.array_equal(back.apply("tissue", x), norm.apply("tissue", x))


def test_normalizer_errors():
    with pytest.raises(ValueError):
        fit_normalizer({"cell": np.ones((1, 3))})
    with pytest.raises(ShapeError):
        fit_normalizer(feats(0)).apply("cell", np.ones((2, 5)))


@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_fuse_layout_and_weights(a, b, g):
    f = feats(3)
    norm = fit_normalizer(f)
    x = fuse(f["cell"], f["tissue"], f["edge"], FusionConfig(a, b, g, norm))
    assert x.shape == (12, 9)
    assert np.allclose(x[:, :4], a * norm.apply("cell", f["cell"]))
    assert np.allclose(x[:, 4:7], b * norm.apply("tissue", f["tissue"]))
    assert np.allclose(x[:, 7:], g * norm.apply("edge", f["edge"]))


def test_fuse_single_vector_and_errors():
    f = feats(4)
    cfg = FusionConfig(1, 1, 1, fit_normalizer(f))
    assert fuse(f["cell"][0], f["tissue"][0], f["edge"][0], cfg).shape == (9,)
    with pytest.raises(ValueError):
        FusionConfig(-1, 1, 1)
    with pytest.raises(ValueError):
        fuse(f["cell"], f["tissue"], f["edge"], FusionConfig(1, 1, 1))
    with pytest.raises(ShapeError):
        fuse(f["cell"], f["tissue"][:3], f["edge"], cfg)


def test_grid_order_and_size():
    g = GridSpec((0, 1), (0, 0.5), (0.25, 1))
    assert list(g.points())[:3] == [(0, 0, 0.25), (0, 0.5, 0.25), (1, 0, 0.25)]
    assert len(g) == 8 and len(default_grid()) == 605


def _labelled(seed, n_per=8):
    y = np.repeat([0, 1, 2], n_per)
    f = feats(seed, len(y))
    f["tissue"][:, 0] += 4 * y
    return f, y


def test_grid_search_picks_informative_block(tmp_path):
    train, val = _labelled(5), _labelled(6)
    grid = GridSpec((0.0, 1.0), (0.0, 1.0), (0.0,))
    best, rows = grid_search_weights(train, val, grid, fit_normalizer(train[0]), K=3)
    assert len(rows) == 4
    assert best.beta == 1.0
    top = max(r[4] for r in rows)
    assert (best.alpha, best.beta, best.gamma) == min((r[0], r[1], r[2]) for r in rows if r[4] == top
                                                     and r[3] == max(q[3] for q in rows if q[4] == top))
    lines = write_heatmap_csv(rows, tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "alpha,beta,gamma,acc,weighted_f1" and len(lines) == 5


def test_grid_search_parallel_matches_serial():
    train, val = _labelled(7), _labelled(8)
    grid = GridSpec((0.0, 0.5), (1.0,), (0.0, 1.0))
    norm = fit_normalizer(train[0])
    assert grid_search_weights(train, val, grid, norm, K=3)[1] == grid_search_weights(
        train, val, grid, norm, K=3, jobs=2)[1]
