import hashlib
import json

import numpy as np
import pytest
from scipy import ndimage

from fect.imaging import connected_components, read_image, read_mask
from fect.numkit import SeededRng
from fect.synthgen import (ClassSpec, SyntheticRecipe, default_recipe, generate_dataset, load_manifest,
                           load_recipe, read_centroids, recipe_to_json, render_sample, split_dataset)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_manifest_layout(small_dataset):
    assert len(small_dataset) == 16
    assert np.bincount(small_dataset.labels).tolist() == [4, 4, 4, 4]
    entry = small_dataset.entries[0]
    img = read_image(small_dataset.resolve(entry.image_path))
    assert img.shape == (256, 256) and img.dtype == np.uint8
    reloaded = load_manifest(small_dataset.root / "manifest.json")
    assert reloaded.ids == small_dataset.ids


def test_centroids_inside_foreground(small_dataset):
    for e in small_dataset:
        mask = read_mask(small_dataset.resolve(e.mask_path))
        cents = read_centroids(small_dataset.resolve(e.centroids_path))
        assert len(cents) > 0
        assert mask[cents[:, 0], cents[:, 1]].all()


def test_region_counts_follow_recipe(small_dataset):
    expected = {0: 3, 1: 2, 2: 1, 3: 1}
    for e in small_dataset:
        _, count = connected_components(read_mask(small_dataset.resolve(e.mask_path)))
        assert count == expected[e.label]


def test_same_seed_byte_identical(tmp_path):
    recipe = default_recipe(samples_per_class=1, image_size=160, seed=5)
    generate_dataset(recipe, tmp_path / "a")
    generate_dataset(recipe, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    generate_dataset(default_recipe(samples_per_class=1, image_size=160, seed=6), tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_ring_darkens_outside_border():
    spec_ring = ClassSpec("r", 0.0, 1.0, True, 1)
    spec_plain = ClassSpec("p", 0.0, 1.0, False, 1)
    means = []
    for spec in (spec_ring, spec_plain):
        img, mask, _ = render_sample(spec, 256, SeededRng(3))
        mask = mask.astype(bool)
        shell = ndimage.binary_dilation(mask, iterations=8) & ~mask
        means.append(img[shell].mean())
    assert means[0] < means[1] - 5


def test_recipe_json_roundtrip(tmp_path):
    recipe = default_recipe(samples_per_class=(3, 4, 5, 6), seed=2)
    p = tmp_path / "r.json"
    p.write_text(recipe_to_json(recipe))
    assert load_recipe(p) == recipe


@pytest.mark.parametrize("text", ["{not json", "[]", '{"classes": [], "colour": 1}',
                                  '{"classes": [{"name": "x"}]}'])
def test_recipe_rejects(tmp_path, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(ValueError):
        load_recipe(p)


def test_recipe_validation():
    with pytest.raises(ValueError):
        SyntheticRecipe((), image_size=256)
    with pytest.raises(ValueError):
        ClassSpec("x", -1.0, 1.0, False, 1)


def test_duplicate_manifest_ids_rejected(tmp_path):
    row = {"id": "a", "image_path": "i", "mask_path": "m", "centroids_path": "c", "label": 0}
    (tmp_path / "m.json").write_text(json.dumps([row, row]))
    with pytest.raises(ValueError, match="duplicate"):
        load_manifest(tmp_path / "m.json")


def test_split_default_sizes_and_disjoint(tmp_path):
    # labels only; no rendering needed to check the split arithmetic
    from fect.synthgen import Manifest, ManifestEntry
    entries = [ManifestEntry(f"c{k}_{i}", "", "", "", k) for k, n in enumerate((88, 88, 87, 87)) for i in range(n)]
    parts = split_dataset(Manifest(entries), 4 / 7, 1 / 7, seed=0)
    assert [len(p) for p in parts] == [200, 50, 100]
    ids = [set(p.ids) for p in parts]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    for p in parts:
        assert len(set(p.labels.tolist())) == 4
    again = split_dataset(Manifest(entries), 4 / 7, 1 / 7, seed=0)
    assert [p.ids for p in again] == [p.ids for p in parts]


def test_split_needs_three_per_class():
    from fect.synthgen import Manifest, ManifestEntry
    entries = [ManifestEntry(str(i), "", "", "", i % 2) for i in range(4)]
    with pytest.raises(ValueError, match="at least 3"):
        split_dataset(Manifest(entries), 0.5, 0.25, 0)
