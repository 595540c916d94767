"""Image-quality, detection and interpretability metrics."""

from __future__ import annotations

import decimal
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc
from scipy.stats import rankdata
from skimage.metrics import structural_similarity

from .distributions import GammaPosterior

PSNR_CAP = 100.0
SSIM_WINDOW = 11


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(x, y, data_range: float = 1.0) -> float:
    x, y = _np(x), _np(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def ssim(x, y, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03).

    Inputs are h x w, or c x h x w (the per-channel SSIM is averaged).  The
    score is the mean over fully-covered window positions.
    """
    x, y = _np(x), _np(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    if x.ndim != 3:
        raise ValueError(f"expected h x w or c x h x w, got {x.shape}")
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape[-2:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    crop = (SSIM_WINDOW - 1) // 2
    scores = []
    for a, b in zip(x, y):
        _, full = structural_similarity(
            a, b, data_range=data_range, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, K1=0.01, K2=0.03, full=True,
        )
        scores.append(full[crop:-crop, crop:-crop].mean())
    return float(np.mean(scores))


def _binary_labels(labels) -> np.ndarray:
    labels = _np(labels).ravel()
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be binary (0/1)")
    return labels.astype(bool)


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    s = _np(scores).ravel()
    y = _binary_labels(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in size")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined when only one class is present")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Area under the precision-recall step curve: sum_k (R_k - R_{k-1}) P_k.

    Thresholds are the distinct score values, so tied scores enter together.
    """
    s = _np(scores).ravel()
    y = _binary_labels(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in size")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # keep the last index of every run of tied scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = tp[last]
    predicted = last + 1
    gain = np.diff(np.r_[0, tp])
    # integer terms summed at 40 digits, then rounded once: the result is the
    # double nearest the exact rational value
    with decimal.localcontext() as ctx:
        ctx.prec = 40
        total = sum(decimal.Decimal(int(g * t)) / int(p) for g, t, p in zip(gain, tp, predicted) if g)
        return float(total / n_pos)


def rank_indicator(gamma_post: GammaPosterior, threshold: float, confidence: float = 0.95) -> int:
    """Number of components with ``P(1/gamma_i > threshold) > confidence``.

    ``P(1/gamma < ... )`` is evaluated as ``P(gamma < 1/threshold)``, the
    regularized lower incomplete gamma function at the posterior shape/rate.
    Leading axes (batch, channel) are allowed; the count is then per item.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    shape = _np(gamma_post.shape)
    rate = _np(gamma_post.rate)
    prob = gammainc(shape, rate / threshold)
    counts = (prob > confidence).sum(axis=-1)
    return int(counts) if np.ndim(counts) == 0 else counts.astype(int)


def component_probabilities(gamma_post: GammaPosterior, threshold: float) -> np.ndarray:
    return gammainc(_np(gamma_post.shape), _np(gamma_post.rate) / threshold)


def estimate_rank_svd(image, energy_tol: float = 1e-3):
    """Count singular values above ``energy_tol * sigma_1``; per channel for 3-D input."""
    arr = _np(image)
    if arr.ndim == 3:
        return [estimate_rank_svd(c, energy_tol) for c in arr]
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {arr.shape}")
    sv = np.linalg.svd(arr, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > energy_tol * sv[0]))


@dataclass(frozen=True)
class OodSignature:
    l_rank: float
    l_sparse: float

    def __post_init__(self):
        if not (math.isfinite(self.l_rank) and math.isfinite(self.l_sparse)):
            raise ValueError("signature values must be finite")


def ood_signature(result) -> OodSignature:
    return OodSignature(float(result.losses.rank), float(result.losses.sparse))


def pooled_std(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = len(a), len(b)
    return math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))


def separation(a, b) -> float:
    """|mean(a) - mean(b)| in units of the pooled standard deviation."""
    return abs(float(np.mean(a) - np.mean(b))) / pooled_std(a, b)
