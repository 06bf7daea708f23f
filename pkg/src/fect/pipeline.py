"""Per-image feature extraction and the file-level pipeline stages.

Every CLI subcommand is a thin wrapper over one function here; the
functions validate their inputs before writing anything.
"""
from __future__ import annotations

import csv
import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import aggregator as agg
from .config import PipelineConfig
from .descriptors import (TISSUE_DIM, PatchEmbedder, cell_tokens, extract_tissue_descriptor,
                          read_feature_cache, write_feature_cache)
from .evaluation import compute_metrics, confusion_matrix, run_ablation, write_ablation_csv
from .fusion import FusionConfig, GridSpec, Normalizer, fit_normalizer, fuse, grid_search_weights, write_heatmap_csv
from .graph import STATS_DIM, assemble_edge_feature, build_knn_graph, graph_summary_stats
from .imaging import (connected_components, crop_patch, read_image, read_mask, sample_contour_uniform,
                      to_gray, trace_contour)
from .numkit import pca_project
from .svm import load_ensemble, predict, save_ensemble, train_multiclass
from .synthgen import Manifest, default_recipe, generate_dataset, load_manifest, read_centroids, split_dataset, \
    write_manifest

log = logging.getLogger("fect")

SPLITS = ("train", "val", "test")
AGG_MODALITIES = ("cell", "edge")


class PipelineError(RuntimeError):
    """Data-level failure; the CLI maps it to exit code 2."""


# ------------------------------------------------------------------- paths

def split_manifest_path(cfg: PipelineConfig, split: str) -> Path:
    return Path(cfg.data_dir) / f"manifest_{split}.json"


def cache_path(cfg: PipelineConfig, split: str, modality: str) -> Path:
    return Path(cfg.cache_dir) / f"manifest_{split}.{modality}.feat"


def aggregator_path(cfg: PipelineConfig, modality: str) -> Path:
    return Path(cfg.model_dir) / f"aggregator_{modality}.bin"


def svm_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.model_dir) / "svm.bin"


def fusion_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.model_dir) / "fusion.json"


def load_splits(cfg: PipelineConfig, needed=SPLITS) -> dict[str, Manifest]:
    """Load split manifests and refuse any sample id shared by two splits."""
    out = {}
    for split in SPLITS:
        p = split_manifest_path(cfg, split)
        if not p.exists():
            if split in needed:
                raise PipelineError(f"split manifest {p} not found; run `fect generate` first")
            continue
        out[split] = load_manifest(p)
    seen: dict[str, str] = {}
    for split, man in out.items():
        for sid in man.ids:
            if sid in seen:
                raise PipelineError(f"split leakage: sample {sid!r} is in both {seen[sid]} and {split}")
            seen[sid] = split
    return out


def class_count(splits: dict[str, Manifest]) -> int:
    return int(max(int(m.labels.max()) for m in splits.values() if len(m))) + 1


# ------------------------------------------------------------ per-image work

@dataclass(frozen=True)
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    centroids: np.ndarray
    label: int


def load_sample(manifest: Manifest, entry) -> Sample:
    image = read_image(manifest.resolve(entry.image_path))
    mask = read_mask(manifest.resolve(entry.mask_path))
    if mask.shape != image.shape[:2]:
        raise PipelineError(f"{entry.id}: mask {mask.shape} does not match image {image.shape[:2]}")
    cents = read_centroids(manifest.resolve(entry.centroids_path))
    if len(cents) and (cents.min() < 0 or np.any(cents.max(axis=0) >= np.array(mask.shape))):
        raise PipelineError(f"{entry.id}: centroid outside the image")
    return Sample(entry.id, image, mask, cents, entry.label)


def sample_seed(cfg: PipelineConfig, sid: str) -> int:
    return (zlib.crc32(sid.encode()) ^ (cfg.seed * 0x9E3779B1)) & 0xFFFFFFFF


def cell_bag(sample: Sample, cfg: PipelineConfig) -> np.ndarray:
    return cell_tokens(sample.image, sample.centroids, cfg.cell_window, cfg.max_cells, sample_seed(cfg, sample.id))


def edge_points(mask: np.ndarray, cfg: PipelineConfig) -> list[tuple[int, int]]:
    """Components -> outer contours -> equal-arc sample points, in label order."""
    labels, count = connected_components(mask, cfg.connectivity)
    points = []
    for k in range(1, count + 1):
        contour = trace_contour(labels == k, k)
        points.extend(sample_contour_uniform(contour, cfg.contour_spacing, cfg.min_points, cfg.max_points))
    return points


def edge_bag(sample: Sample, cfg: PipelineConfig, embedder: PatchEmbedder):
    """``(points n x 2, tokens n x d_edge)`` from 64 x 64 patches on the contours."""
    pts = edge_points(sample.mask, cfg)
    if not pts:
        return np.zeros((0, 2), dtype=np.int64), np.zeros((0, embedder.dim))
    gray = to_gray(sample.image)
    patches = np.stack([crop_patch(gray, p, cfg.patch_size) for p in pts])
    return np.array(pts, dtype=np.int64), embedder.embed_many(patches)


def make_embedder(cfg: PipelineConfig) -> PatchEmbedder:
    return PatchEmbedder(seed=cfg.seed, dim=cfg.edge_dim, patch=cfg.patch_size)


def _bags_for(manifest: Manifest, modality: str, cfg: PipelineConfig):
    embedder = make_embedder(cfg) if modality == "edge" else None
    for entry in manifest:
        s = load_sample(manifest, entry)
        if modality == "cell":
            yield s, cell_bag(s, cfg)
        else:
            yield s, edge_bag(s, cfg, embedder)


def modality_dim(modality: str, cfg: PipelineConfig) -> int:
    return {"cell": cfg.agg_dim, "tissue": TISSUE_DIM, "edge": cfg.agg_dim + STATS_DIM}[modality]


def _extract_one(args):
    manifest, entry, modality, cfg, model = args
    s = load_sample(manifest, entry)
    if modality == "tissue":
        fv = extract_tissue_descriptor(s.image, s.mask, cfg.connectivity)
        return fv.values, fv.degenerate
    if modality == "cell":
        tokens = cell_bag(s, cfg)
        if len(tokens) == 0:
            return np.zeros(cfg.agg_dim), True
        return agg.aggregate(tokens, model, "cell").values, False
    pts, tokens = edge_bag(s, cfg, make_embedder(cfg))
    if len(tokens) == 0:
        return np.zeros(cfg.agg_dim + STATS_DIM), True
    pooled = agg.aggregate(tokens, model, "edge", nystrom=True).values
    stats = graph_summary_stats(build_knn_graph(pts, tokens, cfg.knn_k))
    return assemble_edge_feature(pooled, stats).values, False


def extract_features(manifest: Manifest, modality: str, cfg: PipelineConfig, model=None) -> np.ndarray:
    """One feature row per manifest entry; degenerate samples become zero rows."""
    if modality in AGG_MODALITIES and model is None:
        raise PipelineError(f"no {modality} aggregator given")
    jobs = [(manifest, e, modality, cfg, model) for e in manifest]
    if cfg.jobs > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(cfg.jobs) as pool:
            results = list(pool.map(_extract_one, jobs, chunksize=4))
    else:
        results = [_extract_one(j) for j in jobs]
    for entry, (_, degenerate) in zip(manifest, results):
        if degenerate:
            log.warning("%s: degenerate %s input, writing zero features", entry.id, modality)
    dim = modality_dim(modality, cfg)
    if not results:
        return np.zeros((0, dim))
    return np.stack([r[0] for r in results])


# ------------------------------------------------------------------ stages

def stage_generate(cfg: PipelineConfig, recipe=None, out_dir=None) -> Path:
    """Render the dataset and write the full and per-split manifests."""
    recipe = recipe or default_recipe(samples_per_class=(88, 88, 87, 87), seed=cfg.seed)
    out = Path(out_dir or cfg.data_dir)
    manifest = generate_dataset(recipe, out)
    if len(manifest):
        parts = split_dataset(manifest, cfg.train_frac, cfg.val_frac, cfg.seed)
        for split, part in zip(SPLITS, parts):
            write_manifest(part, out / f"manifest_{split}.json")
    log.info("generated %d samples in %s", len(manifest), out)
    return out / "manifest.json"


def stage_train_aggregator(cfg: PipelineConfig, modality: str) -> Path:
    if modality not in AGG_MODALITIES:
        raise PipelineError(f"no aggregator for modality {modality!r} (choose cell or edge)")
    splits = load_splits(cfg)
    K = class_count(splits)
    bags = []
    for s, bag in _bags_for(splits["train"], modality, cfg):
        tokens = bag if modality == "cell" else bag[1]
        if len(tokens):
            bags.append((tokens, s.label))
    if not bags:
        raise PipelineError("training split has no nonempty bags")
    tc = agg.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr0=cfg.lr0, momentum=cfg.momentum,
                         lr_step=cfg.lr_step, seed=cfg.seed)
    model = agg.train_aggregator(bags, tc, use_nystrom=(modality == "edge"), K=K, D=cfg.agg_dim,
                                 heads=cfg.agg_heads, landmarks=cfg.landmarks, pinv_iters=cfg.pinv_iters)
    Path(cfg.model_dir).mkdir(parents=True, exist_ok=True)
    path = agg.save_model(model, aggregator_path(cfg, modality))
    with open(path.with_name(f"aggregator_{modality}_loss.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss"])
        for epoch, lr, loss in model.history:
            w.writerow(["init" if epoch is None else epoch, "" if lr is None else repr(lr), f"{loss:.10f}"])
    log.info("%s aggregator: loss %.4f -> %.4f", modality, model.history[0][2], model.history[-1][2])
    return path


def load_aggregator(cfg: PipelineConfig, modality: str):
    p = aggregator_path(cfg, modality)
    if not p.exists():
        raise PipelineError(f"aggregator model {p} not found; run `fect train-aggregator --modality {modality}`")
    return agg.load_model(p, landmarks=cfg.landmarks, pinv_iters=cfg.pinv_iters, landmark_seed=cfg.seed)


def stage_extract(cfg: PipelineConfig, modality: str, splits=SPLITS) -> list[Path]:
    manifests = load_splits(cfg, needed=splits)
    model = load_aggregator(cfg, modality) if modality in AGG_MODALITIES else None
    # compute everything first so a failing image leaves no partial caches
    computed = {split: extract_features(manifests[split], modality, cfg, model) for split in splits}
    Path(cfg.cache_dir).mkdir(parents=True, exist_ok=True)
    out = []
    for split, feats in computed.items():
        out.append(write_feature_cache(cache_path(cfg, split, modality), modality, feats))
        log.info("%s/%s: %s features -> %s", split, modality, feats.shape, out[-1])
    return out


def load_split_features(cfg: PipelineConfig, split: str, manifests: dict[str, Manifest]):
    feats = {}
    for modality in ("cell", "tissue", "edge"):
        p = cache_path(cfg, split, modality)
        if not p.exists():
            raise PipelineError(f"missing {modality} feature cache {p}; run `fect extract --modality {modality}`")
        mod, x = read_feature_cache(p)
        if mod != modality or len(x) != len(manifests[split]):
            raise PipelineError(f"{p}: cache does not match manifest {split} ({len(x)} rows)")
        feats[modality] = x
    return feats, manifests[split].labels


def _svm_params(cfg: PipelineConfig) -> dict:
    return {"C": cfg.svm_c, "tol": cfg.svm_tol, "max_iter": cfg.svm_max_iter}


def stage_train_svm(cfg: PipelineConfig, weights=None) -> Path:
    manifests = load_splits(cfg)
    K = class_count(manifests)
    feats, y = load_split_features(cfg, "train", manifests)
    normalizer = fit_normalizer(feats)
    a, b, g = weights or (cfg.alpha, cfg.beta, cfg.gamma)
    fusion = FusionConfig(a, b, g, normalizer)
    X = fuse(feats["cell"], feats["tissue"], feats["edge"], fusion)
    ens = train_multiclass(X, y, K=K, **_svm_params(cfg))
    worst = max(m.kkt for m in ens.models.values())
    log.info("svm: %d pairwise models, worst KKT violation %.2e", len(ens.models), worst)
    Path(cfg.model_dir).mkdir(parents=True, exist_ok=True)
    fusion_path(cfg).write_text(json.dumps({"alpha": a, "beta": b, "gamma": g, "K": K,
                                            "normalizer": normalizer.to_json()}, indent=1))
    return save_ensemble(ens, svm_path(cfg))


def load_classifier(cfg: PipelineConfig):
    if not svm_path(cfg).exists() or not fusion_path(cfg).exists():
        raise PipelineError(f"no trained SVM in {cfg.model_dir}; run `fect train-svm`")
    doc = json.loads(fusion_path(cfg).read_text())
    fusion = FusionConfig(doc["alpha"], doc["beta"], doc["gamma"], Normalizer.from_json(doc["normalizer"]))
    ens = load_ensemble(svm_path(cfg))
    ens.fusion = fusion
    return ens, fusion


def stage_evaluate(cfg: PipelineConfig, split: str | None = None):
    split = split or cfg.eval_split
    manifests = load_splits(cfg)
    ens, fusion = load_classifier(cfg)
    feats, y = load_split_features(cfg, split, manifests)
    pred, _ = predict(ens, fuse(feats["cell"], feats["tissue"], feats["edge"], fusion))
    metrics = compute_metrics(confusion_matrix(y, pred, ens.K))
    report = cfg.report_path
    report.mkdir(parents=True, exist_ok=True)
    with open(report / f"predictions_{split}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true_label", "pred_label"])
        for sid, t, p in zip(manifests[split].ids, y, pred):
            w.writerow([sid, int(t), int(p)])
    with open(report / f"metrics_{split}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["acc", "balanced_acc", "macro_f1", "weighted_f1"] + [f"f1_class{k}" for k in range(ens.K)])
        w.writerow([f"{v:.6f}" for v in (metrics.accuracy, metrics.balanced_accuracy, metrics.macro_f1,
                                         metrics.weighted_f1, *metrics.per_class_f1)])
    log.info("%s: acc %.4f balanced %.4f weighted F1 %.4f", split, metrics.accuracy,
             metrics.balanced_accuracy, metrics.weighted_f1)
    return metrics, pred


def stage_ablate(cfg: PipelineConfig, split: str | None = None):
    split = split or cfg.eval_split
    manifests = load_splits(cfg)
    train = load_split_features(cfg, "train", manifests)
    test = load_split_features(cfg, split, manifests)
    normalizer = fit_normalizer(train[0])
    rows = run_ablation(train, test, normalizer, _svm_params(cfg), K=class_count(manifests))
    cfg.report_path.mkdir(parents=True, exist_ok=True)
    write_ablation_csv(rows, cfg.report_path / "ablation.csv")
    return rows


def stage_gridsearch(cfg: PipelineConfig, grid: GridSpec | None = None):
    manifests = load_splits(cfg)
    train = load_split_features(cfg, "train", manifests)
    val = load_split_features(cfg, "val", manifests)
    normalizer = fit_normalizer(train[0])
    if grid is None:
        steps = tuple(round(0.1 * i, 1) for i in range(11))
        grid = GridSpec(steps, steps, cfg.gammas)
    best, rows = grid_search_weights(train, val, grid, normalizer, _svm_params(cfg),
                                     K=class_count(manifests), jobs=cfg.jobs)
    report = cfg.report_path
    report.mkdir(parents=True, exist_ok=True)
    write_heatmap_csv(rows, report / "heatmap.csv")
    (report / "best_weights.json").write_text(json.dumps(
        {"alpha": best.alpha, "beta": best.beta, "gamma": best.gamma}, indent=1) + "\n")
    return best, rows


def stage_project(cfg: PipelineConfig, modality: str = "fused", split: str | None = None, out=None) -> Path:
    """2-D PCA of one modality's features (or the fused vector) as plot-ready CSV."""
    split = split or cfg.eval_split
    manifests = load_splits(cfg)
    feats, y = load_split_features(cfg, split, manifests)
    if len(y) < 2:
        raise PipelineError("projection needs at least two samples")
    pred = np.full(len(y), -1)
    if svm_path(cfg).exists():
        ens, fusion = load_classifier(cfg)
        pred, _ = predict(ens, fuse(feats["cell"], feats["tissue"], feats["edge"], fusion))
    if modality == "fused":
        fusion = load_classifier(cfg)[1] if svm_path(cfg).exists() else \
            FusionConfig(1, 1, 1, fit_normalizer(load_split_features(cfg, "train", manifests)[0]))
        X = fuse(feats["cell"], feats["tissue"], feats["edge"], fusion)
    elif modality in feats:
        X = feats[modality]
    else:
        raise PipelineError(f"unknown modality {modality!r}")
    xy = pca_project(X, 2)
    out = Path(out) if out else cfg.report_path / f"projection_{split}_{modality}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "x", "y", "true_label", "pred_label"])
        for sid, (px, py), t, p in zip(manifests[split].ids, xy, y, pred):
            w.writerow([sid, f"{px:.6f}", f"{py:.6f}", int(t), int(p)])
    return out


def run_all(cfg: PipelineConfig, recipe=None, gridsearch: bool = False):
    """generate -> train aggregators -> extract x3 -> train SVM -> evaluate -> ablate."""
    stage_generate(cfg, recipe)
    for modality in AGG_MODALITIES:
        stage_train_aggregator(cfg, modality)
    for modality in ("cell", "tissue", "edge"):
        stage_extract(cfg, modality)
    stage_train_svm(cfg)
    metrics, _ = stage_evaluate(cfg)
    rows = stage_ablate(cfg)
    if gridsearch:
        stage_gridsearch(cfg)
    return metrics, rows
