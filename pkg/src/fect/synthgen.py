"""Deterministic synthetic tissue-region generator.

Each sample is a grayscale image with dark Gaussian-profile nuclei inside
one or more epithelial regions, the binary region mask, the nucleus centroid
list and a class label. Classes differ in nucleus density, boundary
roughness, region count and an optional ring of dark elongated cells hugging
the outside of each region.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .imaging import write_image
from .numkit import SeededRng

__all__ = [
    "ClassSpec",
    "SyntheticRecipe",
    "ManifestEntry",
    "default_recipe",
    "load_recipe",
    "render_sample",
    "generate_dataset",
    "split_dataset",
    "Manifest",
    "load_manifest",
    "write_manifest",
    "read_centroids",
]

STROMA_LEVEL = 215.0
EPITHELIUM_LEVEL = 185.0
PIXEL_NOISE = 5.0


@dataclass(frozen=True)
class ClassSpec:
    name: str
    cell_density: float  # cells per 1000 px^2 of foreground
    boundary_roughness: float  # rms radial noise, px
    border_ring: bool
    region_count: int

    def __post_init__(self):
        if self.cell_density < 0:
            raise ValueError(f"{self.name}: cell_density must be >= 0")
        if self.boundary_roughness < 0:
            raise ValueError(f"{self.name}: boundary_roughness must be >= 0")
        if self.region_count < 1:
            raise ValueError(f"{self.name}: region_count must be >= 1")


@dataclass(frozen=True)
class SyntheticRecipe:
    classes: tuple[ClassSpec, ...]
    image_size: int = 512
    samples_per_class: int | tuple[int, ...] = 88
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 128:
            raise ValueError("image_size must be >= 128")
        if not self.classes:
            raise ValueError("recipe needs at least one class")
        counts = self.counts()
        if len(counts) != len(self.classes) or any(c < 0 for c in counts):
            raise ValueError("samples_per_class must be a count or one count per class")

    def counts(self) -> tuple[int, ...]:
        if isinstance(self.samples_per_class, int):
            return (self.samples_per_class,) * len(self.classes)
        return tuple(int(c) for c in self.samples_per_class)


def default_recipe(samples_per_class=88, image_size: int = 512, seed: int = 0) -> SyntheticRecipe:
    classes = (
        ClassSpec("normal-like", cell_density=1.5, boundary_roughness=1.0, border_ring=False, region_count=3),
        ClassSpec("benign-like", cell_density=3.0, boundary_roughness=3.0, border_ring=False, region_count=2),
        ClassSpec("in-situ-like", cell_density=4.5, boundary_roughness=1.0, border_ring=True, region_count=1),
        ClassSpec("invasive-like", cell_density=4.5, boundary_roughness=8.0, border_ring=False, region_count=1),
    )
    if not isinstance(samples_per_class, int):
        samples_per_class = tuple(samples_per_class)
    return SyntheticRecipe(classes, image_size=image_size, samples_per_class=samples_per_class, seed=seed)


def load_recipe(path) -> SyntheticRecipe:
    """Parse a JSON recipe; raises ``ValueError`` with the offending field."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"recipe {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "classes" not in raw:
        raise ValueError(f"recipe {path}: expected an object with a 'classes' list")
    allowed = {"classes", "image_size", "samples_per_class", "seed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"recipe {path}: unknown keys {sorted(unknown)}")
    classes = []
    for i, spec in enumerate(raw["classes"]):
        try:
            classes.append(ClassSpec(
                name=str(spec.get("name", f"class-{i}")),
                cell_density=float(spec["cell_density"]),
                boundary_roughness=float(spec["boundary_roughness"]),
                border_ring=bool(spec["border_ring"]),
                region_count=int(spec["region_count"]),
            ))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"recipe {path}: class {i} missing or malformed field {exc}") from exc
    spc = raw.get("samples_per_class", 88)
    if isinstance(spc, list):
        spc = tuple(int(c) for c in spc)
    return SyntheticRecipe(tuple(classes), image_size=int(raw.get("image_size", 512)),
                           samples_per_class=spc, seed=int(raw.get("seed", 0)))


def recipe_to_json(recipe: SyntheticRecipe) -> str:
    d = asdict(recipe)
    d["classes"] = [asdict(c) for c in recipe.classes]
    if isinstance(recipe.samples_per_class, tuple):
        d["samples_per_class"] = list(recipe.samples_per_class)
    return json.dumps(d, indent=2)


# ---------------------------------------------------------------- rendering

def _radial_profile(rng: SeededRng, radius: float, roughness: float):
    """Closure giving the boundary radius at polar angle theta."""
    ecc = rng.uniform(0.0, 0.25)
    phase = rng.uniform(0.0, 2 * math.pi)
    harmonics = np.arange(3, 17)
    amps = rng.normal(size=len(harmonics)) / np.sqrt(harmonics)
    phases = rng.uniform(0.0, 2 * math.pi, size=len(harmonics))
    # unit rms of the harmonic sum
    amps = amps / math.sqrt(0.5 * float(np.sum(amps ** 2)))

    def profile(theta):
        theta = np.asarray(theta, dtype=np.float64)
        noise = np.cos(np.multiply.outer(theta, harmonics) + phases) @ amps
        return radius * (1.0 + ecc * np.cos(2 * (theta - phase))) + roughness * noise

    return profile, radius * (1.25 + ecc) + 3.5 * roughness


def _place_regions(rng: SeededRng, size: int, count: int, roughness: float):
    lo, hi = {1: (0.16, 0.26), 2: (0.11, 0.17)}.get(count, (0.08, 0.13))
    for shrink in np.linspace(1.0, 0.5, 6):
        regions = []
        for _ in range(200):
            if len(regions) == count:
                break
            r = rng.uniform(lo, hi) * size * shrink
            profile, reach = _radial_profile(rng, r, roughness)
            margin = reach + 12
            if 2 * margin >= size:
                continue
            cy, cx = rng.uniform(margin, size - margin, size=2)
            if all(math.hypot(cy - oy, cx - ox) > reach + oreach + 16 for oy, ox, _, oreach in regions):
                regions.append((cy, cx, profile, reach))
        if len(regions) == count:
            return regions
    raise RuntimeError("could not place non-overlapping regions; image_size too small")


def _stamp(img: np.ndarray, cy: float, cx: float, a: float, b: float, angle: float, depth: float):
    """Subtract an elliptical Gaussian blob (semi-axes a, b) in place."""
    h, w = img.shape
    reach = int(math.ceil(2.5 * max(a, b)))
    r0, r1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
    c0, c1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1]
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(angle), math.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    img[r0:r1, c0:c1] -= depth * np.exp(-((u / a) ** 2 + (v / b) ** 2))


def render_sample(spec: ClassSpec, size: int, rng: SeededRng):
    """Render one sample; returns ``(image uint8, mask uint8, centroids int array)``."""
    regions = _place_regions(rng, size, spec.region_count, spec.boundary_roughness)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    for cy, cx, profile, reach in regions:
        r0, r1 = max(int(cy - reach) - 2, 0), min(int(cy + reach) + 3, size)
        c0, c1 = max(int(cx - reach) - 2, 0), min(int(cx + reach) + 3, size)
        dy, dx = yy[r0:r1, c0:c1] - cy, xx[r0:r1, c0:c1] - cx
        inside = np.hypot(dy, dx) < profile(np.arctan2(dy, dx))
        mask[r0:r1, c0:c1] |= inside

    img = np.where(mask, EPITHELIUM_LEVEL, STROMA_LEVEL)
    # low-frequency stain texture
    fy, fx, ph = rng.uniform(0.005, 0.03, size=2).tolist() + [rng.uniform(0, 2 * math.pi)]
    img = img + 6.0 * np.sin(fy * yy + fx * xx + ph)

    fg = np.flatnonzero(mask)
    area = fg.size
    lam = spec.cell_density * area / 1000.0
    n_cells = max(0, int(round(lam + math.sqrt(lam) * rng.normal()))) if lam > 0 else 0
    n_cells = min(n_cells, area)
    if n_cells:
        picks = fg[rng.permutation(area)[:n_cells]]
        centroids = np.stack(np.unravel_index(np.sort(picks), mask.shape), axis=1)
    else:
        centroids = np.zeros((0, 2), dtype=np.int64)
    params = rng.uniform(size=(len(centroids), 4))
    for (r, c), (pa, pb, pang, pdep) in zip(centroids, params):
        _stamp(img, r, c, 2.5 + 2.0 * pa, 2.5 + 2.0 * pb, pang * math.pi, 70 + 40 * pdep)

    if spec.border_ring:
        for cy, cx, profile, _ in regions:
            mean_r = float(np.mean(profile(np.linspace(0, 2 * math.pi, 64, endpoint=False))))
            n_ring = max(8, int(2 * math.pi * mean_r / 9.0))
            thetas = np.linspace(0, 2 * math.pi, n_ring, endpoint=False) + rng.uniform(0, 0.1)
            radii = profile(thetas) + 5.0
            jitter = rng.uniform(-0.8, 0.8, size=n_ring)
            for th, rad, jt in zip(thetas, radii, jitter):
                _stamp(img, cy + (rad + jt) * math.sin(th), cx + (rad + jt) * math.cos(th),
                       4.5, 2.0, th + math.pi / 2, 120.0)

    img = img + PIXEL_NOISE * rng.normal(size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, mask.astype(np.uint8), centroids.astype(np.int64)


# ---------------------------------------------------------------- manifests

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    centroids_path: str
    label: int


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices) -> "Manifest":
        return Manifest([self.entries[i] for i in indices], self.root)


def write_manifest(manifest: Manifest, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([asdict(e) for e in manifest.entries], indent=1) + "\n")
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"manifest {path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, list):
        raise ValueError(f"manifest {path}: expected a JSON array")
    entries = []
    for i, item in enumerate(raw):
        try:
            entries.append(ManifestEntry(str(item["id"]), item["image_path"], item["mask_path"],
                                         item["centroids_path"], int(item["label"])))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"manifest {path}: entry {i} missing field {exc}") from exc
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError(f"manifest {path}: duplicate sample ids")
    return Manifest(entries, path.parent)


def read_centroids(path) -> np.ndarray:
    text = Path(path).read_text().split()
    if not text:
        return np.zeros((0, 2), dtype=np.int64)
    return np.array([[int(v) for v in line.split(",")] for line in text], dtype=np.int64)


def generate_dataset(recipe: SyntheticRecipe, output_dir) -> Manifest:
    """Render every sample of ``recipe`` under ``output_dir``.

    Layout: ``images/<id>.pgm``, ``masks/<id>.pgm``, ``centroids/<id>.csv``
    and ``manifest.json`` with paths relative to ``output_dir``.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = SeededRng(recipe.seed)
    entries = []
    counts = recipe.counts()
    if sum(counts):
        for sub in ("images", "masks", "centroids"):
            (out / sub).mkdir(exist_ok=True)
    for label, (spec, count) in enumerate(zip(recipe.classes, counts)):
        for i in range(count):
            sid = f"c{label}_{i:04d}"
            rng = root.spawn(label * 1_000_003 + i)
            image, mask, centroids = render_sample(spec, recipe.image_size, rng)
            write_image(out / "images" / f"{sid}.pgm", image)
            write_image(out / "masks" / f"{sid}.pgm", mask * 255)
            (out / "centroids" / f"{sid}.csv").write_text(
                "".join(f"{r},{c}\n" for r, c in centroids))
            entries.append(ManifestEntry(sid, f"images/{sid}.pgm", f"masks/{sid}.pgm",
                                         f"centroids/{sid}.csv", label))
    manifest = Manifest(entries, out)
    write_manifest(manifest, out / "manifest.json")
    return manifest


def split_dataset(manifest: Manifest, train_frac: float, val_frac: float, seed: int):
    """Stratified, disjoint train/val/test split.

    Per class of size ``n``: ``round(n * val_frac)`` validation and
    ``n - round(n * train_frac) - n_val`` test samples, with at least one
    of each. Order inside each split follows the original manifest.
    """
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ValueError("fractions must lie in (0, 1) and sum below 1")
    rng = SeededRng(seed)
    labels = manifest.labels
    parts = ([], [], [])
    for label in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == label)
        n = len(idx)
        if n < 3:
            raise ValueError(f"class {label} has {n} samples; need at least 3 to split three ways")
        n_train = min(max(int(round(n * train_frac)), 1), n - 2)
        n_val = min(max(int(round(n * val_frac)), 1), n - n_train - 1)
        shuffled = idx[rng.spawn(label).permutation(n)]
        parts[0].extend(shuffled[:n_train])
        parts[1].extend(shuffled[n_train:n_train + n_val])
        parts[2].extend(shuffled[n_train + n_val:])
    return tuple(manifest.subset(sorted(int(i) for i in p)) for p in parts)
