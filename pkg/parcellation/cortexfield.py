"""Laplace field across the cortical ribbon and patch orientation correction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from parcellation.fileio import heatmap, write_ppm, write_ptnsr

logger = logging.getLogger(__name__)

# segmask values
BG = 0
GM = 1
WM = 2

UP = math.pi / 2


class OrientationUndefined(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(f"Laplace solver did not converge in {iterations} iterations (residual {residual:.3g})")
        self.iterations = iterations
        self.residual = residual


@dataclass
class ScalarField:
    values: np.ndarray  # NaN outside the domain
    domain: np.ndarray
    clamped: np.ndarray
    iterations: int = 0
    residual: float = 0.0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


@dataclass
class VectorField:
    dy: np.ndarray
    dx: np.ndarray
    domain: np.ndarray

    def angles(self) -> np.ndarray:
        return np.arctan2(-self.dy, self.dx)


def validate_segmask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"segmask must be 2-d, got shape {mask.shape}")
    bad = ~np.isin(mask, (BG, GM, WM))
    if bad.any():
        raise ValueError(f"segmask holds values outside {{bg={BG}, gm={GM}, wm={WM}}}: {np.unique(mask[bad])[:5]}")
    return mask.astype(np.uint8)


def _neighbour_index(shape: Tuple[int, int]) -> np.ndarray:
    """(4, H*W) flat indices of the 4-neighbours; off-image neighbours map to the pixel itself."""
    h, w = shape
    flat = np.arange(h * w).reshape(h, w)
    padded = np.pad(flat, 1, mode="edge")
    return np.stack([
        padded[:-2, 1:-1].ravel(),
        padded[2:, 1:-1].ravel(),
        padded[1:-1, :-2].ravel(),
        padded[1:-1, 2:].ravel(),
    ])


def _touches(mask: np.ndarray, value: int) -> np.ndarray:
    hit = mask == value
    padded = np.pad(hit, 1, mode="edge")
    return padded[:-2, 1:-1] | padded[2:, 1:-1] | padded[1:-1, :-2] | padded[1:-1, 2:]


def solve_laplace(
    mask: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = 20000,
    omega: float = 1.9,
    method: str = "sor",
    outer_value: float = 0.0,
    inner_value: float = 1.0,
) -> ScalarField:
    """Relax the Laplace equation on the gm pixels of ``mask``.

    gm pixels touching bg are held at ``outer_value``, those touching wm at
    ``inner_value`` (both: their mean). The image border is zero-flux.
    ``method`` is red-black "sor" or plain "jacobi".
    """
    mask = validate_segmask(mask)
    if method not in ("sor", "jacobi"):
        raise ValueError(f"unknown Laplace method {method!r}")
    if method == "sor" and not 0 < omega < 2:
        raise ValueError(f"SOR relaxation factor must be in (0, 2), got {omega}")
    domain = mask == GM
    if not domain.any():
        raise ValueError("Laplace domain is empty: segmask has no gm pixels")

    near_bg = domain & _touches(mask, BG)
    near_wm = domain & _touches(mask, WM)
    clamped = near_bg | near_wm
    u = np.full(mask.shape, 0.5 * (outer_value + inner_value), dtype=np.float64)
    u[near_bg] = outer_value
    u[near_wm] = inner_value
    u[near_bg & near_wm] = 0.5 * (outer_value + inner_value)

    components, count = ndimage.label(domain)
    anchored = np.unique(components[clamped])
    floating = np.setdiff1d(np.arange(1, count + 1), anchored)
    if len(floating):
        logger.warning("Skipping %d gm component(s) without a bg or wm boundary", len(floating))
        domain = domain & ~np.isin(components, floating)

    interior = domain & ~clamped
    nbrs = _neighbour_index(mask.shape)
    flat_u = u.ravel()
    if method == "sor":
        yy, xx = np.indices(mask.shape)
        parity = ((yy + xx) % 2).ravel()
        sweeps = [np.flatnonzero(interior.ravel() & (parity == p)) for p in (0, 1)]
        factor = omega
    else:
        sweeps = [np.flatnonzero(interior.ravel())]
        factor = 1.0

    iterations = 0
    converged = not interior.any()
    while not converged and iterations < max_iter:
        iterations += 1
        largest = 0.0
        for idx in sweeps:
            target = flat_u[nbrs[:, idx]].sum(axis=0) / 4.0
            delta = factor * (target - flat_u[idx])
            flat_u[idx] += delta
            largest = max(largest, float(np.abs(delta).max(initial=0.0)))
        converged = largest < tol

    idx = np.flatnonzero(interior.ravel())
    residual = float(np.abs(4 * flat_u[idx] - flat_u[nbrs[:, idx]].sum(axis=0)).max(initial=0.0))
    if not converged:
        raise ConvergenceError(iterations, residual)
    logger.debug("Laplace %s converged after %d iterations (residual %.2e)", method, iterations, residual)
    values = np.where(domain, u, np.nan)
    return ScalarField(values=values, domain=domain, clamped=clamped & domain, iterations=iterations, residual=residual)


def _axis_gradient(values: np.ndarray, domain: np.ndarray, axis: int) -> np.ndarray:
    v = np.where(domain, values, 0.0)
    fwd_ok = np.zeros_like(domain)
    bwd_ok = np.zeros_like(domain)
    fwd = np.zeros_like(v)
    bwd = np.zeros_like(v)
    lead = [slice(None)] * 2
    trail = [slice(None)] * 2
    lead[axis] = slice(1, None)
    trail[axis] = slice(None, -1)
    lead, trail = tuple(lead), tuple(trail)
    fwd[trail] = v[lead] - v[trail]
    fwd_ok[trail] = domain[lead] & domain[trail]
    bwd[lead] = v[lead] - v[trail]
    bwd_ok[lead] = domain[lead] & domain[trail]
    both = fwd_ok & bwd_ok
    out = np.where(fwd_ok, fwd, 0.0)
    out = np.where(bwd_ok & ~fwd_ok, bwd, out)
    out = np.where(both, 0.5 * (fwd + bwd), out)
    return np.where(domain, out, 0.0)


def gradient(field: ScalarField) -> VectorField:
    """Central differences inside the domain, one-sided at its edges."""
    return VectorField(
        dy=_axis_gradient(field.values, field.domain, 0),
        dx=_axis_gradient(field.values, field.domain, 1),
        domain=field.domain,
    )


def dominant_orientation(vf: VectorField, region: Optional[Tuple[int, int, int, int]] = None) -> float:
    """Circular mean of unit gradients as an angle in (-pi, pi]; "up" is pi/2.

    ``region`` is (y0, y1, x0, x1), clipped to the field.
    """
    dy, dx, domain = vf.dy, vf.dx, vf.domain
    if region is not None:
        y0, y1, x0, x1 = region
        h, w = domain.shape
        window = (slice(max(y0, 0), min(y1, h)), slice(max(x0, 0), min(x1, w)))
        dy, dx, domain = dy[window], dx[window], domain[window]
    norm = np.hypot(dy, dx)
    valid = domain & (norm > 1e-12)
    if not valid.any():
        raise OrientationUndefined("no gm pixel with a nonzero gradient in the region")
    sy = float((-dy[valid] / norm[valid]).sum())
    sx = float((dx[valid] / norm[valid]).sum())
    if math.hypot(sy, sx) < 1e-9:
        raise OrientationUndefined("gradient directions cancel out in the region")
    angle = math.atan2(sy, sx)
    return math.pi if angle <= -math.pi else angle


def angle_to_up(angle: float) -> float:
    """Counterclockwise rotation that maps direction ``angle`` onto up."""
    return UP - angle


def enlarged_size(size: int) -> int:
    return int(math.ceil(size * math.sqrt(2)))


def rotate_patch(patch: np.ndarray, angle: float, order: int = 1, center: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Rotate content counterclockwise (as displayed) by ``angle`` radians.

    Works on (H, W) or (C, H, W); ``order`` 1 is bilinear (images), 0 is
    nearest (labels and atlas maps). Quarter turns about the centre are exact.
    """
    patch = np.asarray(patch)
    h, w = patch.shape[-2:]
    quarter = angle / UP
    k = int(round(quarter))
    if center is None and abs(quarter - k) < 1e-12 and (h == w or k % 2 == 0):
        return np.ascontiguousarray(np.rot90(patch, k=k % 4, axes=(-2, -1)))

    cy, cx = center if center is not None else ((h - 1) / 2.0, (w - 1) / 2.0)
    yy, xx = np.indices((h, w), dtype=np.float64)
    oy, ox = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    src = np.stack([cy + s * ox + c * oy, cx + c * ox - s * oy])
    if patch.ndim == 2:
        return ndimage.map_coordinates(patch, src, order=order, mode="nearest").astype(patch.dtype)
    return np.stack([
        ndimage.map_coordinates(channel, src, order=order, mode="nearest") for channel in patch
    ]).astype(patch.dtype)


def export_field(field: ScalarField, path) -> None:
    write_ptnsr(path, np.nan_to_num(field.values, nan=-1.0))


def field_ppm(field: ScalarField, path) -> None:
    write_ppm(path, heatmap(field.values, 0.0, 1.0))


def orientation_ppm(vf: VectorField, path, step: int = 16) -> None:
    """Gradient angle on a cyclic colormap with a tick every ``step`` pixels."""
    angles = np.where(vf.domain, vf.angles(), np.nan)
    rgb = heatmap(angles, -math.pi, math.pi, cmap="twilight")
    h, w = vf.domain.shape
    norm = np.hypot(vf.dy, vf.dx)
    for y in range(step // 2, h, step):
        for x in range(step // 2, w, step):
            if not vf.domain[y, x] or norm[y, x] < 1e-12:
                continue
            uy, ux = vf.dy[y, x] / norm[y, x], vf.dx[y, x] / norm[y, x]
            for t in range(step // 2):
                py, px = int(round(y + uy * t)), int(round(x + ux * t))
                if 0 <= py < h and 0 <= px < w:
                    rgb[py, px] = 255
    write_ppm(path, rgb)
