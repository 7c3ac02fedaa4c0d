"""Pure math of the grid keypoint representation.

Coordinates are normalized to [0, 1]^2 with (0, 0) at the top-left corner.
The grid cell at (row i, col j) has its center at ((j + 0.5) / W, (i + 0.5) / H).
Continuous keypoints are float arrays [K, 2] ordered (x, y); grid keypoints are
integer arrays [K, 2] ordered (col, row) so that the two layouts line up
component-wise.

Everything in this module is a pure function of its inputs and safe to call
from concurrent workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Finite H x W keypoint grid with K keypoint channels."""

    height: int
    width: int
    num_keypoints: int

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        if self.num_keypoints < 1:
            raise ValueError("num_keypoints must be >= 1")

    @property
    def num_cells(self) -> int:
        return self.height * self.width

    def cell_centers_x(self) -> np.ndarray:
        """Normalized x coordinate of each column center, shape (W,)."""
        return (np.arange(self.width, dtype=np.float64) + 0.5) / self.width

    def cell_centers_y(self) -> np.ndarray:
        """Normalized y coordinate of each row center, shape (H,)."""
        return (np.arange(self.height, dtype=np.float64) + 0.5) / self.height

    def centers_from_grid(self, kps: np.ndarray) -> np.ndarray:
        """Normalized (x, y) cell centers for integer (col, row) keypoints."""
        kps = np.asarray(kps)
        out = np.empty(kps.shape, dtype=np.float64)
        out[..., 0] = (kps[..., 0] + 0.5) / self.width
        out[..., 1] = (kps[..., 1] + 0.5) / self.height
        return out


def _check_heatmaps(heatmaps: np.ndarray, grid: GridSpec | None) -> np.ndarray:
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    if heatmaps.ndim != 3:
        raise ValueError(f"expected [K, H, W] heatmaps, got shape {heatmaps.shape}")
    if grid is not None:
        k, h, w = heatmaps.shape
        if (k, h, w) != (grid.num_keypoints, grid.height, grid.width):
            raise ValueError(
                f"heatmap shape {heatmaps.shape} does not match grid "
                f"({grid.num_keypoints}, {grid.height}, {grid.width})"
            )
    if not np.all(np.isfinite(heatmaps)):
        raise ValueError("heatmaps contain non-finite entries")
    if np.any(heatmaps < 0):
        raise ValueError("heatmaps contain negative entries")
    return heatmaps


def spatial_expectation(heatmaps: np.ndarray, grid: GridSpec | None = None) -> np.ndarray:
    """Per-channel expectation of cell-center coordinates under the heatmap.

    Returns continuous keypoints [K, 2] as (x, y) in [0, 1]^2. Channels that
    sum to zero are degenerate and rejected.
    """
    heatmaps = _check_heatmaps(heatmaps, grid)
    k, h, w = heatmaps.shape
    mass = heatmaps.sum(axis=(1, 2))
    if np.any(mass <= 0):
        bad = int(np.argmax(mass <= 0))
        raise ValueError(f"heatmap channel {bad} has zero total mass")
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    ex = (heatmaps.sum(axis=1) * xs).sum(axis=1) / mass
    ey = (heatmaps.sum(axis=2) * ys).sum(axis=1) / mass
    return np.stack([ex, ey], axis=1)


def snap_to_grid(coords: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Push continuous keypoints to their nearest grid cell centers.

    Returns (integer (col, row) indices [K, 2], snapped normalized coords
    [K, 2]). Exact midpoints between centers break toward the smaller
    (row, col) index, which makes the operation deterministic.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValueError(f"expected [K, 2] coordinates, got shape {coords.shape}")
    if np.any(coords < 0.0) or np.any(coords > 1.0) or not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must lie in [0, 1]^2")
    # ceil(u) - 1 maps the half-open band ((j)/W, (j+1)/W] to column j, which
    # is the nearest-center assignment with ties resolved to the lower index.
    col = np.clip(np.ceil(coords[:, 0] * grid.width) - 1, 0, grid.width - 1).astype(np.int64)
    row = np.clip(np.ceil(coords[:, 1] * grid.height) - 1, 0, grid.height - 1).astype(np.int64)
    kps = np.stack([col, row], axis=1)
    return kps, grid.centers_from_grid(kps)


def _check_grid_keypoints(kps: np.ndarray, grid: GridSpec) -> np.ndarray:
    kps = np.asarray(kps)
    if kps.ndim != 2 or kps.shape[1] != 2:
        raise ValueError(f"expected [K, 2] grid keypoints, got shape {kps.shape}")
    if not np.issubdtype(kps.dtype, np.integer):
        raise ValueError("grid keypoints must be integers")
    if (
        np.any(kps[:, 0] < 0)
        or np.any(kps[:, 0] >= grid.width)
        or np.any(kps[:, 1] < 0)
        or np.any(kps[:, 1] >= grid.height)
    ):
        raise ValueError("grid keypoints out of range")
    return kps


def render_gaussian_maps(kps: np.ndarray, grid: GridSpec, sigma: float) -> np.ndarray:
    """Render one Gaussian blob per keypoint, peak value 1 at the keypoint cell.

    ``sigma`` is the blob standard deviation in grid cells. Returns
    [K, H, W] float64 maps (unnormalized: the peak is always exactly 1).
    """
    kps = _check_grid_keypoints(kps, grid)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rows = np.arange(grid.height, dtype=np.float64)[None, :, None]
    cols = np.arange(grid.width, dtype=np.float64)[None, None, :]
    r = kps[:, 1].astype(np.float64)[:, None, None]
    c = kps[:, 0].astype(np.float64)[:, None, None]
    d2 = (rows - r) ** 2 + (cols - c) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def to_binary_maps(kps: np.ndarray, grid: GridSpec) -> np.ndarray:
    """One-hot [K, H, W] uint8 maps, channel k set at (row_k, col_k)."""
    kps = _check_grid_keypoints(kps, grid)
    maps = np.zeros((len(kps), grid.height, grid.width), dtype=np.uint8)
    maps[np.arange(len(kps)), kps[:, 1], kps[:, 0]] = 1
    return maps


def from_binary_maps(maps: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_binary_maps`: per-channel location of the 1 entry."""
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise ValueError(f"expected [K, H, W] binary maps, got shape {maps.shape}")
    k, h, w = maps.shape
    flat = maps.reshape(k, h * w)
    if not np.all(flat.sum(axis=1) == 1) or not np.all((flat == 0) | (flat == 1)):
        raise ValueError("each binary map channel must contain exactly one 1")
    idx = flat.argmax(axis=1)
    return np.stack([idx % w, idx // w], axis=1).astype(np.int64)


def from_probability_maps(probs: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Argmax decode of per-keypoint categorical location maps.

    Ties break to the smallest (row, col) index (row-major argmax). Returns
    (integer (col, row) keypoints [K, 2], one-hot binary maps [K, H, W]).
    """
    probs = _check_heatmaps(probs, grid)
    k, h, w = probs.shape
    sums = probs.reshape(k, -1).sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise ValueError("probability map channels must each sum to 1")
    idx = probs.reshape(k, -1).argmax(axis=1)
    kps = np.stack([idx % w, idx // w], axis=1).astype(np.int64)
    return kps, to_binary_maps(kps, GridSpec(h, w, k))


def condensation_statistic(heatmaps: np.ndarray, worst_only: bool = False) -> float:
    """Negative peak-to-mean contrast of sigmoid heatmaps.

    Sum mode returns -sum_k(max(H^k) - mean(H^k)); worst-only mode returns
    -min_k of the same gap. Constant channels contribute a gap of exactly 0,
    so a uniform stack scores 0 (the most ambiguous configuration).
    """
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    if heatmaps.ndim != 3:
        raise ValueError(f"expected [K, H, W] heatmaps, got shape {heatmaps.shape}")
    flat = heatmaps.reshape(heatmaps.shape[0], -1)
    gaps = flat.max(axis=1) - flat.mean(axis=1)
    gaps[flat.max(axis=1) == flat.min(axis=1)] = 0.0
    if worst_only:
        return float(-gaps.min())
    return float(-gaps.sum())
