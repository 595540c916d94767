"""Image files <-> float arrays in [0, 1] (shape c x h x w).

PNG (8/16-bit) goes through Pillow.  Binary PGM/PPM (P5/P6, maxval up to
65535) is read and written here directly so 16-bit output is exact and
byte-reproducible.  Arrays outside [0, 1] (signed components) are written
16-bit after an affine map; the map is recorded in a sidecar ``.json``.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

PNM_SUFFIXES = {".pgm", ".ppm", ".pnm"}
_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def _to_chw(arr: np.ndarray) -> np.ndarray:
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)


def _read_pnm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    pos, tokens = 0, []
    while len(tokens) < 4:
        m = _TOKEN.match(data, pos)
        if not m:
            raise ValueError(f"{path}: truncated PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or not 0 < maxval < 65536:
        raise ValueError(f"{path}: unsupported PNM variant {magic!r} / maxval {maxval}")
    pos += 1  # single whitespace byte before the raster
    channels = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * channels
    raster = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    if raster.size != count:
        raise ValueError(f"{path}: truncated raster")
    img = raster.reshape(h, w, channels).astype(np.float64) / maxval
    return np.moveaxis(img, -1, 0)


def _write_pnm(path: Path, chw_uint: np.ndarray, maxval: int) -> None:
    c, h, w = chw_uint.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    magic = b"P5" if c == 1 else b"P6"
    dtype = ">u2" if maxval > 255 else "u1"
    raster = np.ascontiguousarray(np.moveaxis(chw_uint, 0, -1)).astype(dtype).tobytes()
    path.write_bytes(magic + b"\n%d %d\n%d\n" % (w, h, maxval) + raster)


def read_image(path: str | Path) -> np.ndarray:
    """Load an image as float64 c x h x w in [0, 1].  ``.npy`` files load as-is."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".npy":
        arr = np.load(path)
        return arr[None] if arr.ndim == 2 else arr
    if suffix in PNM_SUFFIXES:
        img = _read_pnm(path)
    else:
        with Image.open(path) as im:
            if im.mode in ("I;16", "I;16B", "I"):
                img = _to_chw(np.asarray(im, dtype=np.float64) / 65535.0)
            elif im.mode in ("L", "RGB"):
                img = _to_chw(np.asarray(im, dtype=np.float64) / 255.0)
            else:
                img = _to_chw(np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0)
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        img = meta["min"] + img * (meta["max"] - meta["min"])
    return img


def write_image(path: str | Path, img: np.ndarray, bits: int = 16, signed: bool | None = None) -> Path:
    """Write c x h x w (or h x w) ``img``; values are clipped to [0, 1] unless signed.

    ``signed=None`` decides automatically: any value outside [0, 1] switches to
    the affine map with a sidecar.  PNG supports 8/16-bit grayscale and 8-bit
    RGB; PGM/PPM support 8/16-bit in both.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = np.asarray(img, dtype=np.float64)
    img = img[None] if img.ndim == 2 else img
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    sidecar = path.with_suffix(path.suffix + ".json")
    if signed is None:
        signed = bool(img.size) and (img.min() < 0 or img.max() > 1)
    if signed:
        bits = 16
        lo, hi = float(img.min()), float(img.max())
        span = hi - lo if hi > lo else 1.0
        unit = (img - lo) / span
        sidecar.write_text(json.dumps({"min": lo, "max": lo + span, "bits": 16}, sort_keys=True) + "\n")
    else:
        unit = np.clip(img, 0.0, 1.0)
        if sidecar.exists():
            sidecar.unlink()
    maxval = (1 << bits) - 1
    quant = np.rint(unit * maxval).astype(np.uint32)
    suffix = path.suffix.lower()
    if suffix in PNM_SUFFIXES:
        _write_pnm(path, quant, maxval)
    elif suffix == ".png":
        c = quant.shape[0]
        if c == 1:
            mode_arr = quant[0].astype(np.uint16 if bits == 16 else np.uint8)
            Image.fromarray(mode_arr).save(path, format="PNG")
        elif c == 3 and bits == 8:
            Image.fromarray(np.moveaxis(quant, 0, -1).astype(np.uint8), mode="RGB").save(path, format="PNG")
        else:
            raise ValueError("16-bit colour output needs PPM")
    else:
        raise ValueError(f"unsupported image format {suffix!r}")
    return path


def component_path(directory: Path, stem: str, channels: int) -> Path:
    """PGM for one channel, PPM for three."""
    return directory / f"{stem}.{'pgm' if channels == 1 else 'ppm'}"
