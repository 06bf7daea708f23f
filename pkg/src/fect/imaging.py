"""Image/mask ingestion and mask geometry.

Covers NetPBM P5/P6 decoding, connected components, Moore-neighbour outer
contour tracing, equal-arc-length contour sampling and zero-padded patch
cropping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

__all__ = [
    "NetpbmError",
    "Contour",
    "parse_netpbm",
    "serialize_netpbm",
    "read_image",
    "read_mask",
    "write_image",
    "to_gray",
    "connected_components",
    "trace_contour",
    "contour_curvature_variance",
    "sample_contour_uniform",
    "crop_patch",
    "boundary_pixels",
]

DEFAULT_CONNECTIVITY = 8
DEFAULT_SPACING = 16.0
DEFAULT_MIN_POINTS = 8
DEFAULT_MAX_POINTS = 64
_SQRT2 = math.sqrt(2.0)


class NetpbmError(ValueError):
    pass


_WS = b" \t\r\n"


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last token.
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos] in _WS:
            pos += 1
        if pos < n and data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
            continue
        if pos >= n:
            raise NetpbmError(f"truncated header at offset {pos}")
        start = pos
        while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
            pos += 1
        tokens.append(data[start:pos])
    if pos >= n or data[pos] not in _WS:
        raise NetpbmError(f"missing whitespace after header at offset {pos}")
    return tokens, pos


def parse_netpbm(data: bytes) -> np.ndarray:
    """Decode binary P5 (H x W) or P6 (H x W x 3) into a uint8 array."""
    if len(data) < 2:
        raise NetpbmError("truncated magic at offset 0")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r} at offset 0")
    tokens, pos = _header_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise NetpbmError(f"non-integer header field before offset {pos}") from exc
    if width <= 0 or height <= 0:
        raise NetpbmError(f"bad dimensions {width}x{height} before offset {pos}")
    if not 0 < maxval <= 255:
        raise NetpbmError(f"maxval {maxval} out of range (1..255) before offset {pos}")
    channels = 3 if magic == b"P6" else 1
    start = pos + 1
    need = width * height * channels
    payload = data[start:start + need]
    if len(payload) < need:
        raise NetpbmError(
            f"truncated payload at offset {start + len(payload)}: need {need} bytes, have {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return pixels.reshape(shape).copy()


def serialize_netpbm(pixels: np.ndarray, maxval: int = 255) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"cannot encode array of shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > maxval:
        raise NetpbmError("pixel values exceed maxval")
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    return header + arr.astype(np.uint8).tobytes()


def read_image(path) -> np.ndarray:
    return parse_netpbm(Path(path).read_bytes())


def read_mask(path) -> np.ndarray:
    """Read a P5 mask; any nonzero gray value is foreground."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise NetpbmError(f"mask must be P5, got magic {data[:2]!r} at offset 0")
    return (parse_netpbm(data) > 0).astype(np.uint8)


def write_image(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(serialize_netpbm(pixels))


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def connected_components(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY) -> tuple[np.ndarray, int]:
    """Label foreground regions 1..count; background stays 0."""
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    structure = ndimage.generate_binary_structure(2, 1 if connectivity == 4 else 2)
    labels, count = ndimage.label(np.asarray(mask) > 0, structure=structure)
    return labels.astype(np.int32), int(count)


@dataclass(frozen=True)
class Contour:
    component_id: int
    points: tuple[tuple[int, int], ...]
    perimeter: float

    def __len__(self) -> int:
        return len(self.points)

    def as_array(self) -> np.ndarray:
        return np.array(self.points, dtype=np.int64).reshape(-1, 2)


# clockwise in (row, col) with rows pointing down, starting west
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_DIR_INDEX = {d: i for i, d in enumerate(_MOORE)}


def _closed_length(points) -> float:
    if len(points) < 2:
        return 0.0
    total = 0.0
    for (r0, c0), (r1, c1) in zip(points, points[1:] + points[:1]):
        total += _SQRT2 if (r0 != r1 and c0 != c1) else 1.0
    return total


def trace_contour(component: np.ndarray, component_id: int = 1) -> Contour:
    """Outer boundary of a single-component mask by Moore-neighbour tracing.

    Clockwise, starting at the top-most then left-most foreground pixel.
    Tracing stops when the walk is about to repeat its first step.
    """
    comp = np.asarray(component) > 0
    if comp.ndim != 2 or not comp.any():
        raise ValueError("cannot trace an empty component")
    grid = np.pad(comp, 1)
    rows, cols = np.nonzero(grid)
    r0 = rows.min()
    start = (int(r0), int(cols[rows == r0].min()))
    backtrack_dir = 0  # west of the start pixel is background

    def step(p, bdir):
        for k in range(8):
            idx = (bdir + k) % 8
            dr, dc = _MOORE[idx]
            q = (p[0] + dr, p[1] + dc)
            if grid[q]:
                prev = _MOORE[(idx - 1) % 8]
                # new backtrack: the last background cell, seen from q
                b = (p[0] + prev[0] - q[0], p[1] + prev[1] - q[1])
                return q, _DIR_INDEX[b]
        return None, None

    nxt, bdir = step(start, backtrack_dir)
    if nxt is None:
        pts = [start]
    else:
        pts = [start, nxt]
        second = nxt
        p = nxt
        while True:
            q, bdir = step(p, bdir)
            if p == start and q == second:
                pts.pop()
                break
            pts.append(q)
            p = q
    points = tuple((r - 1, c - 1) for r, c in pts)
    return Contour(component_id, points, _closed_length(list(points)))


def boundary_pixels(component: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour (image border counts)."""
    comp = np.pad(np.asarray(component) > 0, 1)
    interior = comp[1:-1, 1:-1] & comp[:-2, 1:-1] & comp[2:, 1:-1] & comp[1:-1, :-2] & comp[1:-1, 2:]
    return (comp[1:-1, 1:-1] & ~interior)


def contour_curvature_variance(contour: Contour, stride: int = 3) -> float:
    """Variance of the turning angle between chords ``stride`` points apart."""
    pts = contour.as_array().astype(np.float64)
    n = len(pts)
    if n < 3 * stride:
        return 0.0
    a = np.roll(pts, stride, axis=0)
    c = np.roll(pts, -stride, axis=0)
    v1 = pts - a
    v2 = c - pts
    ang = np.arctan2(v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0], (v1 * v2).sum(axis=1))
    return float(np.var(ang))


def sample_contour_uniform(contour: Contour, spacing: float = DEFAULT_SPACING,
                           min_points: int = DEFAULT_MIN_POINTS,
                           max_points: int = DEFAULT_MAX_POINTS) -> list[tuple[int, int]]:
    """Contour points at equal arc-length intervals.

    Count is ``clamp(floor(perimeter / spacing), min_points, max_points)``,
    never more than the number of contour points. Targets sit at
    ``(k + 1/2) * perimeter / count`` and snap to the nearest contour point.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = list(contour.points)
    if not pts:
        return []
    perim = contour.perimeter
    count = int(min(max(math.floor(perim / spacing), min_points), max_points))
    count = min(count, len(pts))
    if perim == 0 or count == 1 and len(pts) == 1:
        return [pts[0]] * min(count, 1)
    arr = np.array(pts, dtype=np.float64)
    steps = np.hypot(*(np.roll(arr, -1, axis=0) - arr).T)
    cum = np.concatenate([[0.0], np.cumsum(steps)])  # cum[len] == perimeter, same point as cum[0]
    targets = (np.arange(count) + 0.5) * perim / count
    idx = np.searchsorted(cum, targets)
    lo = np.clip(idx - 1, 0, len(cum) - 1)
    hi = np.clip(idx, 0, len(cum) - 1)
    pick = np.where(targets - cum[lo] <= cum[hi] - targets, lo, hi) % len(pts)
    return [pts[i] for i in pick]


def crop_patch(image: np.ndarray, center: tuple[int, int], size: int) -> np.ndarray:
    """``size x size`` window with top-left ``center - size // 2``; zero padded."""
    if size < 1:
        raise ValueError("patch size must be >= 1")
    img = np.asarray(image)
    h, w = img.shape[:2]
    top = int(center[0]) - size // 2
    left = int(center[1]) - size // 2
    out = np.zeros((size, size) + img.shape[2:], dtype=img.dtype)
    r0, r1 = max(top, 0), min(top + size, h)
    c0, c1 = max(left, 0), min(left + size, w)
    if r0 < r1 and c0 < c1:
        out[r0 - top:r1 - top, c0 - left:c1 - left] = img[r0:r1, c0:c1]
    return out
