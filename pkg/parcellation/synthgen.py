"""Procedural synthetic histology: wavy cortical ribbons with laminar dot textures.

Every section is a closed ribbon of gray matter with white matter inside and
background outside, cut angularly into area parcels. Each area paints its
laminae with its own dot density and dot size, so areas differ only by
laminar texture; two areas ("texture twins") share a profile and can only be
told apart by where they are, which is what the atlas prior supplies.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from django.conf import settings
from scipy import ndimage

from parcellation.atlas import AffineTransform2D, resample_atlas
from parcellation.cortexfield import BG, GM, WM
from parcellation.pipeline import Dataset, Section, class_names_for, split_sections
from parcellation.tensor import IGNORE_LABEL, make_rng

logger = logging.getLogger(__name__)

LAMINAE = 6
ATLAS_SCALE = 4
DOT_SIZES = (1.0, 1.6, 2.4)
AUTO_TWINS = "auto"

TwinPair = Union[str, Tuple[int, int], None]


class GeneratorError(ValueError):
    pass


def child_seed(seed: int, *keys: int) -> int:
    """Stable per-item seed derived from a parent seed."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass(frozen=True)
class BrainStyle:
    name: str
    seed: int
    radius: float = 0.68  # outer radius as a fraction of half the section side
    wave_amplitude: float = 0.06
    wave_frequency: int = 5
    thickness: float = 0.16
    phase: float = 0.0
    z_drift: float = 0.03  # radians of wave phase per z step
    area_offset: float = 0.0
    density: float = 0.012  # expected dot centres per gm pixel
    intensity: float = 1.0
    stain: float = 90.0
    noise: float = 6.0

    def __post_init__(self):
        if self.density <= 0:
            raise GeneratorError(f"style {self.name}: dot density must be positive")
        if not 0 < self.thickness < self.radius * (1 - self.wave_amplitude):
            raise GeneratorError(f"style {self.name}: ribbon thickness must fit inside the outer radius")
        if self.radius * (1 + self.wave_amplitude) >= 0.95:
            raise GeneratorError(f"style {self.name}: ribbon leaves the section")


@dataclass(frozen=True)
class AreaProfile:
    area_id: int
    thickness: Tuple[float, ...]
    density: Tuple[float, ...]
    dot_size: Tuple[float, ...]

    def __post_init__(self):
        if len(self.thickness) != LAMINAE or len(self.density) != LAMINAE or len(self.dot_size) != LAMINAE:
            raise GeneratorError(f"area {self.area_id}: profiles need {LAMINAE} laminae")
        if min(self.thickness) <= 0 or abs(sum(self.thickness) - 1.0) > 1e-6:
            raise GeneratorError(f"area {self.area_id}: lamina thicknesses must be positive and sum to 1")
        if min(self.density) <= 0:
            raise GeneratorError(f"area {self.area_id}: lamina densities must be positive")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 768
    n_areas: int = 6
    hidden_area_fraction: float = 0.3
    atlas_sigma: float = 3.0  # in atlas pixels (1/4 section scale)
    landmark_noise: float = 0.5
    landmarks: int = 8
    twin_pair: TwinPair = AUTO_TWINS
    area_weights: Optional[Tuple[float, ...]] = None
    min_thickness: int = 16
    min_parcel: int = 32
    patch_size: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "twin_pair", resolve_twin_pair(self.twin_pair, self.n_areas))

    @classmethod
    def from_settings(cls, **overrides) -> "SynthConfig":
        defaults = settings.PARCELLATION["synthgen"]
        values = {
            "size": defaults["size"],
            "n_areas": defaults["areas"],
            "hidden_area_fraction": defaults["hidden_area_fraction"],
            "atlas_sigma": defaults["atlas_sigma"],
            "landmark_noise": defaults["landmark_noise"],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def weights(self) -> np.ndarray:
        if self.area_weights is not None:
            w = np.asarray(self.area_weights, dtype=np.float64)
            if w.shape != (self.n_areas,) or np.any(w <= 0):
                raise GeneratorError(f"area_weights must be {self.n_areas} positive values")
        else:
            w = np.linspace(1.5, 0.7, self.n_areas)
        return w / w.sum()


def resolve_twin_pair(twin_pair: TwinPair, n_areas: int) -> Optional[Tuple[int, int]]:
    """The "auto" pair is (1, 4) from 5 areas up, (1, n - 1) for 3 or 4 areas and none for 2."""
    if twin_pair != AUTO_TWINS:
        return tuple(twin_pair) if twin_pair is not None else None
    if n_areas >= 5:
        return (1, 4)
    if n_areas >= 3:
        return (1, n_areas - 1)
    return None


def default_profiles(n_areas: int, seed: int = 0, twin_pair: TwinPair = AUTO_TWINS) -> List[AreaProfile]:
    if n_areas < 2:
        raise GeneratorError("need at least 2 areas")
    twin_pair = resolve_twin_pair(twin_pair, n_areas)
    rng = make_rng(child_seed(seed, 101))
    profiles = []
    for area in range(n_areas):
        thickness = rng.uniform(0.5, 1.5, LAMINAE)
        thickness /= thickness.sum()
        density = rng.uniform(0.25, 2.2, LAMINAE)
        sizes = rng.choice(DOT_SIZES, LAMINAE)
        profiles.append(AreaProfile(area, tuple(thickness), tuple(density), tuple(float(s) for s in sizes)))
    if twin_pair is not None:
        a, b = twin_pair
        if not (0 <= a < n_areas and 0 <= b < n_areas) or a == b:
            raise GeneratorError(f"texture twin pair {twin_pair} is not a pair of distinct areas")
        profiles[b] = replace(profiles[a], area_id=b)
    return profiles


def default_styles(count: int, seed: int = 0) -> List[BrainStyle]:
    rng = make_rng(child_seed(seed, 202))
    styles = []
    for i in range(count):
        styles.append(BrainStyle(
            name=f"brain{i + 1}",
            seed=child_seed(seed, 202, i),
            radius=float(rng.uniform(0.62, 0.72)),
            wave_amplitude=float(rng.uniform(0.03, 0.08)),
            wave_frequency=int(rng.integers(3, 7)),
            thickness=float(rng.uniform(0.14, 0.19)),
            phase=float(rng.uniform(0, 2 * math.pi)),
            area_offset=float(rng.uniform(-0.15, 0.15)),
            density=float(rng.uniform(0.010, 0.015)),
            intensity=float(rng.uniform(0.88, 1.08)),
            stain=float(rng.uniform(75.0, 105.0)),
            noise=float(rng.uniform(4.0, 8.0)),
        ))
    return styles


@dataclass
class Geometry:
    segmask: np.ndarray
    depth: np.ndarray  # 0 at the outer surface, 1 at the white matter
    angle: np.ndarray  # polar angle in [0, 2pi)
    thickness_px: float
    mid_radius_px: float


def ribbon_geometry(style: BrainStyle, size: int, z: int = 0) -> Geometry:
    half = size / 2.0
    c = (size - 1) / 2.0
    yy, xx = np.indices((size, size), dtype=np.float64)
    r = np.hypot(yy - c, xx - c)
    angle = np.mod(np.arctan2(-(yy - c), xx - c), 2 * math.pi)
    wave = 1.0 + style.wave_amplitude * np.sin(style.wave_frequency * angle + style.phase + style.z_drift * z)
    r_out = style.radius * half * wave
    thickness = style.thickness * half
    depth = (r_out - r) / thickness
    segmask = np.full((size, size), BG, dtype=np.uint8)
    segmask[depth >= 0] = GM
    segmask[depth > 1] = WM
    return Geometry(segmask, depth, angle, thickness, (style.radius - style.thickness / 2) * half)


def assign_areas(geometry: Geometry, weights: np.ndarray, offset: float) -> np.ndarray:
    """Area id per gm pixel (-1 elsewhere), cut at angle quantiles so pixel shares follow ``weights``."""
    gm = geometry.segmask == GM
    rel = np.mod(geometry.angle[gm] - offset, 2 * math.pi)
    bounds = np.quantile(rel, np.cumsum(weights)[:-1])
    areas = np.full(geometry.segmask.shape, -1, dtype=np.int64)
    areas[gm] = np.searchsorted(bounds, rel, side="right")
    return areas


def area_prior(full_labels: np.ndarray, n_areas: int, sigma: float) -> np.ndarray:
    """Blurred per-area indicators on the 1/4 grid: the unjittered atlas."""
    h, w = full_labels.shape
    blocks = full_labels[: h // ATLAS_SCALE * ATLAS_SCALE, : w // ATLAS_SCALE * ATLAS_SCALE]
    blocks = blocks.reshape(h // ATLAS_SCALE, ATLAS_SCALE, w // ATLAS_SCALE, ATLAS_SCALE)
    maps = np.stack([
        ndimage.gaussian_filter((blocks == area).mean(axis=(1, 3)), sigma) for area in range(n_areas)
    ])
    return np.clip(maps, 0.0, 1.0).astype(np.float32)


def _jitter(rng: np.random.Generator, quarter: int) -> AffineTransform2D:
    """Atlas grid -> section pixels: 4x scale with a small random similarity."""
    theta = rng.uniform(-0.05, 0.05)
    scale = rng.uniform(0.97, 1.03)
    shift = rng.uniform(-8.0, 8.0, 2)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    linear = ATLAS_SCALE * scale * rot
    centre = np.full(2, (quarter - 1) / 2.0)
    offset = ATLAS_SCALE * centre - linear @ centre + shift
    return AffineTransform2D(np.hstack([linear, offset[:, None]]))


def _render(
    geometry: Geometry,
    areas: np.ndarray,
    profiles: Sequence[AreaProfile],
    style: BrainStyle,
    rng: np.random.Generator,
) -> np.ndarray:
    shape = geometry.segmask.shape
    gm = areas >= 0
    density = np.zeros(shape)
    sizes = np.zeros(shape)
    for profile in profiles:
        where = areas == profile.area_id
        if not where.any():
            continue
        bounds = np.cumsum(profile.thickness)[:-1]
        lamina = np.searchsorted(bounds, np.clip(geometry.depth[where], 0.0, 1.0), side="right")
        density[where] = style.density * np.asarray(profile.density)[lamina]
        sizes[where] = np.asarray(profile.dot_size)[lamina]
    wm = geometry.segmask == WM
    density[wm] = style.density * 0.12
    sizes[wm] = DOT_SIZES[0]

    counts = rng.poisson(density).astype(np.float64)
    darkness = np.zeros(shape)
    for size in DOT_SIZES:
        layer = np.where(sizes == size, counts, 0.0)
        if layer.any():
            darkness += ndimage.gaussian_filter(layer, size) * (2 * math.pi * size * size)
    base = np.full(shape, 236.0)
    base[gm] = 208.0
    base[wm] = 196.0
    image = style.intensity * (base - style.stain * np.clip(darkness, 0.0, 1.5))
    image += rng.normal(0.0, style.noise, shape)
    return np.clip(np.round(image), 0, 255).astype(np.uint8)


def generate_section(
    style: BrainStyle,
    profiles: Sequence[AreaProfile],
    seed: int,
    size: int = 768,
    z: int = 0,
    config: Optional[SynthConfig] = None,
) -> Section:
    config = config or SynthConfig(size=size, n_areas=len(profiles))
    n_areas = len(profiles)
    if n_areas < 2:
        raise GeneratorError("need at least 2 areas")
    if size % 64:
        raise GeneratorError(f"section size {size} must be a multiple of 64")
    if config.patch_size and size < 4 * config.patch_size:
        raise GeneratorError(f"section size {size} is below 4x the patch size {config.patch_size}")
    rng = make_rng(seed)
    geometry = ribbon_geometry(style, size, z)
    weights = config.weights() if config.n_areas == n_areas else np.full(n_areas, 1.0 / n_areas)
    if geometry.thickness_px < config.min_thickness:
        raise GeneratorError(
            f"ribbon is {geometry.thickness_px:.1f} px thick, below the minimum {config.min_thickness}"
        )
    narrowest = weights.min() * 2 * math.pi * geometry.mid_radius_px
    if narrowest < config.min_parcel:
        raise GeneratorError(f"narrowest parcel spans {narrowest:.1f} px, below the minimum {config.min_parcel}")

    areas = assign_areas(geometry, weights, style.area_offset + 0.01 * z)
    image = _render(geometry, areas, profiles, style, rng)

    full = np.full((size, size), n_areas + 2, dtype=np.uint8)  # bg class
    full[geometry.segmask == WM] = n_areas + 1
    full[areas >= 0] = areas[areas >= 0]

    hidden_count = int(round(config.hidden_area_fraction * n_areas))
    hidden = sorted(int(a) for a in rng.choice(n_areas, size=min(hidden_count, n_areas - 1), replace=False))
    labels = np.full((size, size), IGNORE_LABEL, dtype=np.uint8)
    visible = (areas >= 0) & ~np.isin(areas, hidden)
    labels[visible] = areas[visible]

    quarter = size // ATLAS_SCALE
    prior = area_prior(full, n_areas, config.atlas_sigma)
    jitter = _jitter(rng, quarter)
    # atlas space holds prior(J(a) / 4)
    to_prior = AffineTransform2D(jitter.matrix / ATLAS_SCALE)
    atlas_space = resample_atlas(prior, to_prior.inverse(), (quarter, quarter))
    points = rng.uniform(0.1 * quarter, 0.9 * quarter, (config.landmarks, 2))
    targets = jitter.apply(points) + rng.normal(0.0, config.landmark_noise, points.shape)
    landmarks = [[list(map(float, a)), list(map(float, s))] for a, s in zip(points, targets)]

    section = Section(
        name=f"{style.name}_z{z:02d}",
        image=image,
        labels=labels,
        segmask=geometry.segmask,
        full_labels=full,
        atlas_source=atlas_space,
        landmarks=landmarks,
        brain=style.name,
        z=z,
        n_areas=n_areas,
        meta={
            "seed": int(seed),
            "style": asdict(style),
            "hidden_areas": hidden,
            "true_transform": jitter.to_list(),
            "atlas_scale": ATLAS_SCALE,
        },
    )
    section.register_atlas()
    logger.debug("Generated section %s (%d hidden areas)", section.name, len(hidden))
    return section


def generate_dataset(
    n_sections: int,
    n_styles: int,
    seed: int,
    config: Optional[SynthConfig] = None,
    profiles: Optional[Sequence[AreaProfile]] = None,
) -> Dataset:
    if n_sections < 6:
        raise GeneratorError(f"a dataset needs at least 6 sections, got {n_sections}")
    if not 1 <= n_styles <= n_sections:
        raise GeneratorError(f"style count must be in [1, {n_sections}], got {n_styles}")
    config = config or SynthConfig()
    profiles = list(profiles) if profiles is not None else default_profiles(config.n_areas, seed, config.twin_pair)
    styles = default_styles(n_styles, seed)

    sections = []
    for index in range(n_sections):
        style = styles[index % n_styles]
        z = index // n_styles
        sections.append(generate_section(style, profiles, child_seed(seed, style.seed, z), config.size, z, config))
    sections.sort(key=lambda s: (s.brain, s.z))
    train, val, test = split_sections([s.name for s in sections], seed)
    manifest = {
        "seed": seed,
        "n_sections": n_sections,
        "n_styles": n_styles,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "styles": [asdict(s) for s in styles],
        "profiles": [asdict(p) for p in profiles],
        "sections": [{"name": s.name, "brain": s.brain, "z": s.z, "seed": s.meta["seed"]} for s in sections],
    }
    logger.info("Generated %d sections over %d styles (seed %d)", n_sections, n_styles, seed)
    return Dataset(
        sections=sections,
        class_names=class_names_for(config.n_areas),
        splits={"train": train, "val": val, "test": test},
        manifest=manifest,
    )
