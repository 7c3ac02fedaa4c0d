"""Frame and track metrics: SSIM, PSNR, best-of-N selection, grid errors.

SSIM follows the Wang et al. formulation: 11x11 Gaussian window with sigma
1.5, K1 = 0.01, K2 = 0.03, population covariance, scores averaged over the
valid (fully-windowed) region and over channels. PSNR uses peak 1.0.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class PerFrameScores:
    ssim: np.ndarray
    psnr: np.ndarray
    ssim_seed: int | None = None
    psnr_seed: int | None = None


def _window1d(dtype=np.float64) -> np.ndarray:
    half = (SSIM_WIN - 1) / 2
    x = np.arange(SSIM_WIN, dtype=dtype) - half
    w = np.exp(-(x * x) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return w / w.sum()


def _filt_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with the normalized window."""
    tmp = sliding_window_view(img, SSIM_WIN, axis=0) @ w
    return sliding_window_view(tmp, SSIM_WIN, axis=1) @ w


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    w = _window1d()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu1 = _filt_valid(a, w)
    mu2 = _filt_valid(b, w)
    s11 = _filt_valid(a * a, w) - mu1 * mu1
    s22 = _filt_valid(b * b, w) - mu2 * mu2
    s12 = _filt_valid(a * b, w) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float((num / den).mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two frames in [0, 1], shape [C, H, W] or [H, W]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"expected [C, H, W] frames, got {a.shape}")
    if min(a.shape[-2:]) < SSIM_WIN:
        raise ValueError(f"frames must be at least {SSIM_WIN} pixels per side")
    return float(np.mean([_ssim_single(a[c], b[c]) for c in range(a.shape[0])]))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for peak 1.0; +inf for identical frames."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def per_frame_scores(pred: np.ndarray, truth: np.ndarray) -> PerFrameScores:
    """SSIM/PSNR curves over aligned [T, C, H, W] sequences."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    s = np.array([ssim(p, t) for p, t in zip(pred, truth)])
    p = np.array([psnr(p_, t) for p_, t in zip(pred, truth)])
    return PerFrameScores(s, p)


def best_of_n(rollout_fn, ground_truth: np.ndarray, n: int, seeds=None) -> PerFrameScores:
    """Draw n seeded rollouts and keep the per-metric best sample.

    ``rollout_fn(seed)`` must return predicted frames aligned with
    ``ground_truth``. Selection is by the sequence mean of each metric
    independently, so the winning sample may differ between SSIM and PSNR.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = list(range(n)) if seeds is None else list(seeds)[:n]
    if len(seeds) != n:
        raise ValueError(f"need {n} seeds, got {len(seeds)}")
    best = {"ssim": (-np.inf, None, None), "psnr": (-np.inf, None, None)}
    for seed in seeds:
        scores = per_frame_scores(np.asarray(rollout_fn(seed)), ground_truth)
        for name, curve in (("ssim", scores.ssim), ("psnr", scores.psnr)):
            mean = float(np.mean(curve))
            if mean > best[name][0]:
                best[name] = (mean, curve, seed)
    return PerFrameScores(
        ssim=best["ssim"][1], psnr=best["psnr"][1],
        ssim_seed=best["ssim"][2], psnr_seed=best["psnr"][2],
    )


def coordinate_error(predicted: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-step mean Euclidean distance in grid cells.

    Accepts [T, K, 2] tracks or batched [N, T, K, 2]; averages over keypoints
    (and sequences). Units are whatever the inputs use, conventionally cells.
    """
    p = np.asarray(predicted, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"track shape mismatch: {p.shape} vs {r.shape}")
    d = np.linalg.norm(p - r, axis=-1)  # [..., T, K]
    d = d.mean(axis=-1)
    if d.ndim == 2:
        d = d.mean(axis=0)
    return d


def degeneration_rate(recon_score: float, pred_score: float) -> float:
    """Relative drop of prediction quality vs the reconstruction upper bound."""
    if recon_score == 0:
        return float("nan")
    return (recon_score - pred_score) / recon_score


# ---------------------------------------------------------------------------
# CSV reporting
# ---------------------------------------------------------------------------

PER_FRAME_COLUMNS = ["sequence_id", "t", "ssim", "psnr", "coord_err", "sample_seed"]


def write_per_frame_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=PER_FRAME_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in PER_FRAME_COLUMNS})


def mean_ci95(values) -> tuple[float, float]:
    """Mean and 95% confidence half-width (Student t over sequences)."""
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), 0.0
    sem = v.std(ddof=1) / np.sqrt(v.size)
    half = float(stats.t.ppf(0.975, v.size - 1) * sem)
    return float(v.mean()), half


def write_summary_csv(path, metric_values: dict) -> None:
    """``metric_values`` maps metric name -> per-sequence values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "mean", "ci95"])
        for name, values in metric_values.items():
            mean, half = mean_ci95(values)
            writer.writerow([name, f"{mean:.6f}", f"{half:.6f}"])
