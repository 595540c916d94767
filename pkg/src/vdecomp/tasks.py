"""Synthetic task data and task outputs (denoised image, anomaly map).

Anomaly synthesis is a stand-in: random rectangles, ellipses or smooth blobs
are pasted with random intensity onto a normal image.  It is not the
self-supervised scheme used for the published results.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from torch import Tensor


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def smooth_field(h: int, w: int, rng: np.random.Generator, cutoff: int = 3) -> np.ndarray:
    """Random band-limited field in [-1, 1] (sum of a few low-frequency cosines)."""
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.zeros((h, w))
    for _ in range(6):
        fy, fx = rng.integers(0, cutoff + 1, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += rng.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    m = np.abs(out).max()
    return out / m if m > 0 else out


def clean_images(n: int, size: int = 32, channels: int = 1, seed=0) -> np.ndarray:
    """Clean synthetic images in [0, 1], shape (n, channels, size, size).

    Each image is a separable (low-rank) smooth background plus a few
    constant-intensity rectangles and ellipses that supply edges and detail.
    """
    rng = _rng(seed)
    out = np.empty((n, channels, size, size))
    t = np.linspace(0, 1, size)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    for i in range(n):
        base = np.zeros((size, size))
        for _ in range(rng.integers(1, 4)):
            u = np.cos(2 * np.pi * rng.uniform(0, 1.5) * t + rng.uniform(0, 2 * np.pi))
            v = np.cos(2 * np.pi * rng.uniform(0, 1.5) * t + rng.uniform(0, 2 * np.pi))
            base += rng.uniform(0.1, 0.3) * np.outer(u, v)
        shapes = np.zeros((size, size))
        for _ in range(rng.integers(1, 5)):
            cy, cx = rng.uniform(0, size, size=2)
            ry, rx = rng.uniform(2, size / 3, size=2)
            if rng.random() < 0.5:
                region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            else:
                region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
            shapes[region] = rng.uniform(-0.4, 0.4)
        img = 0.5 + base + shapes
        for c in range(channels):
            tint = 1.0 if channels == 1 else rng.uniform(0.8, 1.2)
            out[i, c] = np.clip(0.5 + tint * (img - 0.5), 0.0, 1.0)
    return out


def add_awgn(image, sigma: float, seed=0):
    """``image + sigma * N(0, 1)``; not clipped.  Accepts numpy arrays or tensors."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = _rng(seed)
    arr = image.detach().cpu().numpy() if isinstance(image, Tensor) else np.asarray(image, dtype=float)
    noisy = arr + sigma * rng.standard_normal(arr.shape) if sigma > 0 else arr.copy()
    if isinstance(image, Tensor):
        return torch.as_tensor(noisy, dtype=image.dtype)
    return noisy


def salt_and_pepper(image: np.ndarray, fraction: float, seed=0) -> np.ndarray:
    rng = _rng(seed)
    out = np.array(image, dtype=float, copy=True)
    hit = rng.random(out.shape) < fraction
    out[hit] = rng.integers(0, 2, size=int(hit.sum())).astype(float)
    return out


class AnomalyShape(str, enum.Enum):
    RECTANGLE = "rectangle"
    ELLIPSE = "ellipse"
    BLOB = "perlin-blob"


@dataclass(frozen=True)
class AnomalySpec:
    count_range: tuple[int, int] = (1, 3)
    shape: AnomalyShape | str | None = None  # None: pick at random per patch
    intensity_range: tuple[float, float] = (0.25, 0.6)
    size_range: tuple[float, float] = (0.1, 0.3)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad count_range {self.count_range}")
        lo, hi = self.intensity_range
        if hi < lo:
            raise ValueError(f"bad intensity_range {self.intensity_range}")
        lo, hi = self.size_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"size_range must lie within (0, 1], got {self.size_range}")
        if self.shape is not None:
            AnomalyShape(self.shape)


def _patch_mask(shape: AnomalyShape, h: int, w: int, size: tuple[float, float], rng) -> np.ndarray:
    ry = max(1.0, rng.uniform(*size) * h / 2)
    rx = max(1.0, rng.uniform(*size) * w / 2)
    cy, cx = rng.uniform(ry, h - ry), rng.uniform(rx, w - rx)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    if shape is AnomalyShape.RECTANGLE:
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if shape is AnomalyShape.ELLIPSE:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    # thresholded smooth noise inside an ellipse envelope
    envelope = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(1.0, min(ry, rx) / 2))
    return envelope & (noise > np.quantile(noise[envelope], 0.4))


def synthesize_anomaly(U_N: np.ndarray, spec: AnomalySpec):
    """Paste anomalies onto ``U_N`` (c x h x w or h x w).

    Returns ``(Y, U_A, mask)`` with ``U_A = Y - U_N`` exactly and ``mask`` the
    per-pixel support of the pasted patches (shape h x w).
    """
    U_N = np.asarray(U_N, dtype=float)
    h, w = U_N.shape[-2:]
    rng = _rng(spec.seed)
    mask = np.zeros((h, w), dtype=bool)
    Y = U_N.copy()
    count = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    for _ in range(count):
        shape = AnomalyShape(spec.shape) if spec.shape is not None else rng.choice(list(AnomalyShape))
        region = _patch_mask(shape, h, w, spec.size_range, rng)
        level = rng.uniform(*spec.intensity_range) * rng.choice([-1.0, 1.0])
        # push away from the background so the patch is never invisible
        Y[..., region] = np.clip(U_N[..., region] + level, 0.0, 1.0)
    U_A = Y - U_N
    Y = U_N + U_A
    mask = np.any(U_A != 0, axis=0) if U_A.ndim == 3 else U_A != 0
    return Y, U_A, mask


def denoise_output(result) -> Tensor:
    return (result.L_hat + result.S_hat).clamp(0.0, 1.0)


class ScoreMode(str, enum.Enum):
    MEAN = "mean"  # |mu_S|
    STD_WEIGHTED = "std-weighted"  # |mu_S| / sigma_S
    OMEGA = "omega"  # 1 / mu_Omega


def anomaly_map(result, sigma: float = 4.0, mode: ScoreMode | str = ScoreMode.MEAN) -> np.ndarray:
    """Min-max normalized, Gaussian-blurred anomaly score per pixel, in [0, 1].

    Multi-channel scores are averaged over channels.  The default score uses
    only ``|mu_S|``.
    """
    mode = ScoreMode(mode)
    mu = result.phiS.mean.detach().cpu().numpy()
    if mode is ScoreMode.MEAN:
        raw = np.abs(mu)
    elif mode is ScoreMode.STD_WEIGHTED:
        raw = np.abs(mu) / result.phiS.std.detach().cpu().numpy()
    else:
        omega = (result.leaf.omega.alpha / result.leaf.omega.beta).detach().cpu().numpy()
        raw = 1.0 / omega
    if raw.ndim == 3:
        raw = raw.mean(0)
    blurred = ndimage.gaussian_filter(raw, sigma=sigma, mode="reflect") if sigma > 0 else raw
    lo, hi = blurred.min(), blurred.max()
    if hi - lo <= 0 or not math.isfinite(hi - lo):
        return np.zeros_like(blurred)
    return (blurred - lo) / (hi - lo)


@dataclass
class TaskDataset:
    """Paired observations and targets.

    ``U`` is the clean image (DEN) or the normal image ``U_N`` (UAD);
    ``U_A`` and ``mask`` are set for UAD only.  Arrays are (n, c, h, w),
    masks (n, h, w).
    """

    Y: np.ndarray
    U: np.ndarray | None
    U_A: np.ndarray | None = None
    mask: np.ndarray | None = None
    sigma: np.ndarray | None = None

    def __len__(self):
        return len(self.Y)


def make_denoising_set(n: int, size: int = 32, sigma_range=(0.0, 0.3), channels: int = 1, seed=0) -> TaskDataset:
    rng = _rng(seed)
    U = clean_images(n, size, channels, seed=rng)
    sigmas = rng.uniform(*sigma_range, size=n) if np.ndim(sigma_range) else np.full(n, float(sigma_range))
    Y = np.stack([add_awgn(U[i], float(sigmas[i]), seed=rng) for i in range(n)])
    return TaskDataset(Y, U, sigma=sigmas)


def make_anomaly_set(n: int, size: int = 32, channels: int = 1, spec: AnomalySpec | None = None, seed=0) -> TaskDataset:
    rng = _rng(seed)
    spec = spec or AnomalySpec()
    U_N = clean_images(n, size, channels, seed=rng)
    Ys, UAs, masks = [], [], []
    for i in range(n):
        s = AnomalySpec(spec.count_range, spec.shape, spec.intensity_range, spec.size_range, int(rng.integers(2**31)))
        Y, U_A, mask = synthesize_anomaly(U_N[i], s)
        Ys.append(Y)
        UAs.append(U_A)
        masks.append(mask)
    return TaskDataset(np.stack(Ys), U_N, np.stack(UAs), np.stack(masks))


_DATASET_ARRAYS = ("Y", "U", "U_A", "mask", "sigma")


def save_dataset(dataset: TaskDataset, directory, meta: dict | None = None):
    """One ``.npy`` per array plus ``manifest.json``; byte-reproducible."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    present = []
    for name in _DATASET_ARRAYS:
        arr = getattr(dataset, name)
        if arr is not None:
            np.save(directory / f"{name}.npy", np.ascontiguousarray(arr), allow_pickle=False)
            present.append(name)
    manifest = {"arrays": present, "n": len(dataset), "shape": list(dataset.Y.shape[1:]), **(meta or {})}
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return directory


def load_dataset(directory) -> TaskDataset:
    directory = Path(directory)
    if not (directory / "Y.npy").is_file():
        raise FileNotFoundError(f"{directory} has no Y.npy; create it with the synth command")
    arrays = {name: np.load(directory / f"{name}.npy", allow_pickle=False) for name in _DATASET_ARRAYS if (directory / f"{name}.npy").is_file()}
    if "U" not in arrays:
        arrays["U"] = None
    return TaskDataset(**arrays)
