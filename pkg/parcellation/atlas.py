"""Probabilistic atlas: landmark affine registration, resampling and dropout noise."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from parcellation.fileio import read_json, read_ptnsr, write_json, write_ptnsr
from parcellation.tensor import Tensor

logger = logging.getLogger(__name__)


class AtlasError(ValueError):
    pass


@dataclass(frozen=True)
class AffineTransform2D:
    """2x3 matrix acting on (y, x, 1); maps atlas coordinates to section coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise AtlasError(f"affine matrix must be 2x3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) <= 1e-9:
            raise AtlasError("affine transform is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform2D":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    def apply(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverse(self) -> "AffineTransform2D":
        linear = np.linalg.inv(self.matrix[:, :2])
        return AffineTransform2D(np.hstack([linear, (-linear @ self.matrix[:, 2])[:, None]]))

    def to_list(self) -> List[List[float]]:
        return self.matrix.tolist()


def estimate_affine(pairs: Sequence[Tuple[Sequence[float], Sequence[float]]]) -> Tuple[AffineTransform2D, float]:
    """Least-squares affine fit of (atlas point, section point) pairs; returns (transform, RMS)."""
    if len(pairs) < 3:
        raise AtlasError(f"affine fit needs at least 3 landmark pairs, got {len(pairs)}")
    src = np.array([p[0] for p in pairs], dtype=np.float64)
    dst = np.array([p[1] for p in pairs], dtype=np.float64)
    design = np.hstack([src, np.ones((len(src), 1))])
    if np.linalg.matrix_rank(design, tol=1e-9 * max(1.0, np.abs(src).max())) < 3:
        raise AtlasError("landmarks are collinear; affine transform is not determined")
    solution, *_ = np.linalg.lstsq(design, dst, rcond=None)
    transform = AffineTransform2D(solution.T)
    residual = transform.apply(src) - dst
    rms = float(np.sqrt((residual ** 2).sum(axis=1).mean()))
    return transform, rms


@dataclass
class ProbabilisticAtlas:
    maps: np.ndarray  # (areas, H, W) on the atlas grid
    area_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float32)
        if self.maps.ndim != 3:
            raise AtlasError(f"atlas maps must be (areas, H, W), got {self.maps.shape}")
        if self.maps.size and (self.maps.min() < 0 or self.maps.max() > 1):
            raise AtlasError("atlas probabilities must lie in [0, 1]")
        if self.area_names and len(self.area_names) != self.maps.shape[0]:
            raise AtlasError(f"{len(self.area_names)} area names for {self.maps.shape[0]} maps")

    @property
    def channels(self) -> int:
        return self.maps.shape[0]

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        write_ptnsr(path, self.maps)
        write_json(path.with_suffix(".json"), {"area_names": self.area_names})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ProbabilisticAtlas":
        path = Path(path)
        meta = path.with_suffix(".json")
        names = read_json(meta)["area_names"] if meta.exists() else []
        return cls(read_ptnsr(path), names)


def resample_atlas(
    atlas: Union[ProbabilisticAtlas, np.ndarray],
    transform: AffineTransform2D,
    out_shape: Tuple[int, int],
    out_scale: float = 1.0,
) -> np.ndarray:
    """Bilinear pull-back of the atlas maps onto a section grid.

    Output pixel (y, x) sits at section coordinate (y, x) * ``out_scale`` and
    samples the atlas at the inverse transform of that point; samples outside
    the atlas read 0.
    """
    maps = atlas.maps if isinstance(atlas, ProbabilisticAtlas) else np.asarray(atlas, dtype=np.float32)
    h, w = out_shape
    yy, xx = np.indices((h, w), dtype=np.float64)
    points = np.stack([yy.ravel(), xx.ravel()], axis=1) * out_scale
    source = transform.inverse().apply(points).T.reshape(2, h, w)
    out = np.stack([
        ndimage.map_coordinates(channel.astype(np.float64), source, order=1, mode="grid-constant", cval=0.0)
        for channel in maps
    ]) if len(maps) else np.zeros((0, h, w))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def atlas_dropout(atlas, p: float, rng: np.random.Generator):
    """Zero every scalar independently with probability ``p``; survivors keep their value."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    is_tensor = isinstance(atlas, Tensor)
    data = atlas.data if is_tensor else np.asarray(atlas)
    if p == 0.0:
        out = data.copy()
    else:
        out = np.where(rng.random(data.shape) < p, 0, data).astype(data.dtype)
    return Tensor(out) if is_tensor else out
