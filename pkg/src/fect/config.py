"""Pipeline configuration: defaults, ``key=value`` file parsing, overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

__all__ = ["PipelineConfig", "ConfigError", "load_config", "apply_overrides"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # paths
    data_dir: str = "data"
    cache_dir: str = "cache"
    model_dir: str = "models"
    report_dir: str = "reports"
    seed: int = 0
    jobs: int = 1
    # splits (4/7 and 1/7 give 200/50/100 on the 88/88/87/87 default set)
    train_frac: float = 4 / 7
    val_frac: float = 1 / 7
    eval_split: str = "test"
    # imaging / descriptors
    connectivity: int = 8
    cell_window: int = 32
    max_cells: int = 256
    contour_spacing: float = 16.0
    min_points: int = 8
    max_points: int = 64
    patch_size: int = 64
    edge_dim: int = 32
    knn_k: int = 5
    # aggregator
    agg_dim: int = 64
    agg_heads: int = 4
    landmarks: int = 16
    pinv_iters: int = 6
    epochs: int = 30
    batch_size: int = 16
    lr0: float = 0.001
    momentum: float = 0.9
    lr_step: int = 7
    # svm / fusion
    svm_c: float = 1.0
    svm_tol: float = 1e-3
    svm_max_iter: int = 10_000
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    gamma_grid: str = "0,0.25,0.5,0.75,1"

    def __post_init__(self):
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError("eval_split must be train, val or test")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.patch_size != 64:
            raise ConfigError("patch_size is fixed at 64 by the patch embedder")

    @property
    def report_path(self) -> Path:
        return Path(os.environ.get("FECT_REPORT_DIR") or self.report_dir)

    @property
    def gammas(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.gamma_grid.split(",") if v.strip())

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def dump(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))


def _coerce(name: str, raw: str, typ):
    try:
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def load_config(path=None, **overrides) -> PipelineConfig:
    """Defaults, then ``key=value`` lines from ``path``, then ``overrides``.

    Blank lines and ``#`` comments are ignored; unknown keys are rejected.
    """
    types = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw, types[key])
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = val
    return PipelineConfig(**values)


def apply_overrides(cfg: PipelineConfig, raw: dict[str, str]) -> PipelineConfig:
    """Apply textual ``key -> value`` overrides with the same coercion as files."""
    types = {f.name: f.type for f in fields(PipelineConfig)}
    for key in raw:
        if key not in types:
            raise ConfigError(f"unknown key {key!r}")
    return cfg.replace(**{k: _coerce(k, v, types[k]) for k, v in raw.items()})
