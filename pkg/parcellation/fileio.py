"""PTNSR tensor files, binary PGM/PPM rasters and colormapped previews."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
from matplotlib import colormaps

PTNSR_MAGIC = b"PTNSR1"

PathLike = Union[str, Path]


class FileFormatError(ValueError):
    pass


def write_ptnsr(path: PathLike, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PTNSR_MAGIC)
        fh.write(np.asarray([array.ndim], dtype="<u4").tobytes())
        fh.write(np.asarray(array.shape, dtype="<u8").tobytes())
        fh.write(array.tobytes())


def read_ptnsr(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(PTNSR_MAGIC):
        raise FileFormatError(f"{path}: missing PTNSR1 header")
    offset = len(PTNSR_MAGIC)
    ndim = int(np.frombuffer(raw, dtype="<u4", count=1, offset=offset)[0])
    offset += 4
    shape = tuple(int(d) for d in np.frombuffer(raw, dtype="<u8", count=ndim, offset=offset))
    offset += 8 * ndim
    count = int(np.prod(shape)) if shape else 1
    if len(raw) - offset != 4 * count:
        raise FileFormatError(f"{path}: payload has {len(raw) - offset} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.reshape(shape).astype(np.float32)


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FileFormatError(f"PGM needs a 2-d array, got shape {image.shape}")
    if image.dtype != np.uint8:
        if image.min() < 0 or image.max() > 255:
            raise FileFormatError("PGM values must be in [0, 255]")
        image = image.astype(np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise FileFormatError(f"PPM needs an (H, W, 3) array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _read_netpbm(path: PathLike, magic: bytes, channels: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise FileFormatError(f"{path}: expected {magic.decode()} header, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FileFormatError(f"{path}: only 8-bit rasters are supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_pgm(path: PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1)


def read_ppm(path: PathLike) -> np.ndarray:
    return _read_netpbm(path, b"P6", 3)


def write_json(path: PathLike, payload: Dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path: PathLike) -> Dict[str, Any]:
    return json.loads(Path(path).read_text())


def label_palette(count: int, cmap: str = "tab20") -> np.ndarray:
    """RGB colors for label ids 0..count-1 from a qualitative colormap, cycling past its size."""
    colors = colormaps[cmap]
    return _to_uint8(colors(np.arange(count) % colors.N))


def _to_uint8(rgba: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(rgba)[..., :3] * 255).astype(np.uint8)


def colorize_labels(labels: np.ndarray, count: int, ignore_label: int = 255) -> np.ndarray:
    palette = label_palette(count)
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    valid = labels != ignore_label
    rgb[valid] = palette[np.clip(labels[valid], 0, count - 1)]
    return rgb


def heatmap(values: np.ndarray, lo: float = None, hi: float = None, cmap: str = "viridis") -> np.ndarray:
    """Values mapped through a matplotlib colormap over [lo, hi]; NaN renders black."""
    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    lo = np.nanmin(values) if lo is None else lo
    hi = np.nanmax(values) if hi is None else hi
    scale = (hi - lo) or 1.0
    t = np.clip((np.where(finite, values, lo) - lo) / scale, 0, 1)
    rgb = _to_uint8(colormaps[cmap](t))
    rgb[~finite] = 0
    return rgb


def overlay(image: np.ndarray, labels: np.ndarray, count: int, alpha: float = 0.45) -> np.ndarray:
    """Blend a label map (any integer upscale of the image grid) over a grayscale image."""
    h, w = image.shape
    fy, fx = h // labels.shape[0], w // labels.shape[1]
    full = np.repeat(np.repeat(labels, max(fy, 1), axis=0), max(fx, 1), axis=1)
    full = np.pad(full, ((0, max(h - full.shape[0], 0)), (0, max(w - full.shape[1], 0))), mode="edge")[:h, :w]
    gray = np.repeat(np.asarray(image, dtype=np.float64)[..., None], 3, axis=2)
    colors = colorize_labels(full, count).astype(np.float64)
    return np.clip((1 - alpha) * gray + alpha * colors, 0, 255).astype(np.uint8)
