"""Sections, datasets and the training/evaluation workflows."""
from __future__ import annotations

import logging
import math
import queue
import threading
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings

from parcellation.atlas import atlas_dropout, estimate_affine, resample_atlas
from parcellation.cortexfield import (
    BG,
    GM,
    WM,
    OrientationUndefined,
    VectorField,
    angle_to_up,
    dominant_orientation,
    gradient,
    rotate_patch,
    solve_laplace,
)
from parcellation.fileio import read_json, read_pgm, read_ptnsr, write_json, write_pgm, write_ptnsr
from parcellation.metrics import EvalReport, evaluate_labels
from parcellation.netbuilder import (
    INPUT_BLOCK_STRIDE,
    OUTPUT_STRIDE,
    Model,
    TileSpec,
    build_base_net,
    normalize_image,
    predict_section,
    preset_config,
)
from parcellation.tensor import IGNORE_LABEL, cross_entropy, make_rng, sgd_step

logger = logging.getLogger(__name__)

ORIENTATIONS = ("laplace", "random", "none")
TISSUE_CLASSES = ("bg", "gm", "wm")  # indices equal the segmask values
CORTEX_CLASSES = ("cortex", "background")


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, lr: float, loss: float):
        super().__init__(f"loss became {loss} at iteration {iteration} (lr {lr})")
        self.iteration = iteration
        self.lr = lr
        self.loss = loss


def class_names_for(n_areas: int) -> List[str]:
    return [f"area{i + 1:02d}" for i in range(n_areas)] + ["gm", "wm", "bg"]


@dataclass
class Section:
    name: str
    image: np.ndarray
    labels: np.ndarray  # area ids where annotated, IGNORE_LABEL elsewhere
    n_areas: int
    brain: str = ""
    z: int = 0
    segmask: Optional[np.ndarray] = None
    full_labels: Optional[np.ndarray] = None
    atlas_source: Optional[np.ndarray] = None  # atlas space
    landmarks: List = field(default_factory=list)
    atlas: Optional[np.ndarray] = None  # section space, 1/4 scale
    atlas_rms: Optional[float] = None
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(f"section {self.name}: image {self.image.shape} and labels {self.labels.shape} differ")
        for name in ("segmask", "full_labels"):
            raster = getattr(self, name)
            if raster is not None and raster.shape != self.image.shape:
                raise ValueError(f"section {self.name}: {name} does not cover the section grid")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape

    @property
    def num_classes(self) -> int:
        return self.n_areas + 3

    def register_atlas(self) -> None:
        """Fit the landmark affine and pull the atlas onto the 1/4 section grid."""
        if self.atlas_source is None:
            return
        h, w = self.shape
        out_shape = (h // INPUT_BLOCK_STRIDE, w // INPUT_BLOCK_STRIDE)
        if self.landmarks:
            transform, rms = estimate_affine(self.landmarks)
            self.atlas = resample_atlas(self.atlas_source, transform, out_shape, out_scale=INPUT_BLOCK_STRIDE)
            self.atlas_rms = rms
        elif self.atlas_source.shape[1:] == out_shape:
            self.atlas = self.atlas_source.astype(np.float32)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_pgm(directory / "image.pgm", self.image)
        write_pgm(directory / "labels.pgm", self.labels)
        if self.full_labels is not None:
            write_pgm(directory / "full_labels.pgm", self.full_labels)
        if self.segmask is not None:
            write_pgm(directory / "segmask.pgm", self.segmask)
        if self.atlas_source is not None:
            write_ptnsr(directory / "atlas.ptnsr", self.atlas_source)
        write_json(directory / "meta.json", {
            "name": self.name,
            "brain": self.brain,
            "z": self.z,
            "n_areas": self.n_areas,
            "landmarks": self.landmarks,
            **self.meta,
        })

    @classmethod
    def load(cls, directory) -> "Section":
        directory = Path(directory)
        if not (directory / "meta.json").exists():
            raise FileNotFoundError(f"no section metadata in {directory}")
        meta = read_json(directory / "meta.json")

        def optional(name: str, reader):
            path = directory / name
            return reader(path) if path.exists() else None

        section = cls(
            name=meta.pop("name"),
            image=read_pgm(directory / "image.pgm"),
            labels=read_pgm(directory / "labels.pgm"),
            n_areas=meta.pop("n_areas"),
            brain=meta.pop("brain", ""),
            z=meta.pop("z", 0),
            segmask=optional("segmask.pgm", read_pgm),
            full_labels=optional("full_labels.pgm", read_pgm),
            atlas_source=optional("atlas.ptnsr", read_ptnsr),
            landmarks=meta.pop("landmarks", []),
            meta=meta,
        )
        section.register_atlas()
        return section


def split_sections(
    names: Sequence[str],
    seed: int,
    train_fraction: float = 2 / 3,
    val_fraction: float = 0.0,
) -> Tuple[List[str], List[str], List[str]]:
    if not 0 < train_fraction <= 1 or not 0 <= val_fraction < 1 or train_fraction + val_fraction > 1:
        raise ValueError("split fractions must lie in [0, 1] and sum to at most 1")
    order = [names[i] for i in make_rng(seed).permutation(len(names))]
    n_train = int(round(train_fraction * len(names)))
    n_val = int(round(val_fraction * len(names)))
    train = sorted(order[:n_train])
    val = sorted(order[n_train:n_train + n_val])
    test = sorted(order[n_train + n_val:])
    return train, val, test


@dataclass
class Dataset:
    sections: List[Section]
    class_names: List[str]
    splits: Dict[str, List[str]] = field(default_factory=dict)
    manifest: Dict = field(default_factory=dict)

    def __post_init__(self):
        names = {s.name for s in self.sections}
        seen = set()
        for split, members in self.splits.items():
            unknown = set(members) - names
            if unknown:
                raise ValueError(f"split {split} names unknown sections {sorted(unknown)[:3]}")
            if seen & set(members):
                raise ValueError("dataset splits overlap")
            seen |= set(members)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def n_areas(self) -> int:
        return self.num_classes - 3

    @property
    def styles(self) -> List[str]:
        return sorted({s.brain for s in self.sections})

    def section(self, name: str) -> Section:
        for section in self.sections:
            if section.name == name:
                return section
        raise KeyError(name)

    def split(self, name: Optional[str]) -> List[Section]:
        if name in (None, "all"):
            return list(self.sections)
        if name not in self.splits:
            raise ValueError(f"unknown split {name!r}; choose from {sorted(self.splits)} or 'all'")
        return [self.section(n) for n in self.splits[name]]

    def with_splits(self, **splits: List[str]) -> "Dataset":
        return Dataset(self.sections, self.class_names, splits, self.manifest)

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for section in self.sections:
            section.save(root / "sections" / section.name)
        write_json(root / "manifest.json", {
            **self.manifest,
            "class_names": self.class_names,
            "splits": self.splits,
        })
        return root

    @classmethod
    def load(cls, root) -> "Dataset":
        root = Path(root)
        if not (root / "manifest.json").exists():
            raise FileNotFoundError(f"no dataset manifest in {root}")
        manifest = read_json(root / "manifest.json")
        class_names = manifest.pop("class_names")
        splits = manifest.pop("splits", {})
        sections = [Section.load(path) for path in sorted((root / "sections").iterdir()) if path.is_dir()]
        return cls(sections, class_names, splits, manifest)


def hold_out_style(dataset: Dataset, style: str) -> Dataset:
    """Train on every other brain style, test on ``style``."""
    if style not in dataset.styles:
        raise ValueError(f"unknown style {style!r}; dataset has {dataset.styles}")
    train = sorted(s.name for s in dataset.sections if s.brain != style)
    test = sorted(s.name for s in dataset.sections if s.brain == style)
    return dataset.with_splits(train=train, val=[], test=test)


TRAIN_PRESETS = {
    "full-scale": {"patch_size": 1984,  # 2000 rounded down to the tile alignment
              "batch_size": 20, "learning_rate": 0.05, "iterations": 5000,
              "phase1_iterations": 2500},
    "desk": {"patch_size": 192, "batch_size": 8, "learning_rate": 0.05, "iterations": 3000, "phase1_iterations": 1500},
    "tiny": {"patch_size": 64, "batch_size": 2, "learning_rate": 0.05, "iterations": 6, "phase1_iterations": 3,
             "log_every": 1},
}


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 192
    batch_size: int = 20
    learning_rate: float = 0.05
    iterations: int = 3000
    phase1_iterations: Optional[int] = None  # None: half of iterations
    foreground_fraction: float = 0.85
    atlas_dropout: float = 0.2
    orientation: str = "laplace"
    prefetch: int = 0
    log_every: int = 50
    seed: int = 0
    class_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        for name in ("foreground_fraction", "atlas_dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patch_size <= 0 or self.patch_size % 64:
            raise ValueError(f"patch_size must be a positive multiple of 64, got {self.patch_size}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size must be >= 1 and iterations >= 0")
        if self.phase1_iterations is not None and not 0 <= self.phase1_iterations <= self.iterations:
            raise ValueError("phase1_iterations must lie in [0, iterations]")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {self.orientation!r}")
        if self.prefetch < 0 or self.log_every < 1:
            raise ValueError("prefetch must be >= 0 and log_every >= 1")

    @property
    def phase1(self) -> int:
        return self.iterations // 2 if self.phase1_iterations is None else self.phase1_iterations

    @classmethod
    def from_settings(cls, **overrides) -> "TrainConfig":
        values = dict(settings.PARCELLATION["train"])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in TRAIN_PRESETS:
            raise ValueError(f"unknown training preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
        values = {**TRAIN_PRESETS[name], **{k: v for k, v in overrides.items() if v is not None}}
        return cls.from_settings(**values)

    @classmethod
    def from_json(cls, path, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        payload = read_json(path)
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        if "class_weights" in payload and payload["class_weights"] is not None:
            payload["class_weights"] = tuple(payload["class_weights"])
        return replace(base or cls.from_settings(), **payload)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["phase1_iterations"] = self.phase1
        if self.class_weights is not None:
            data["class_weights"] = list(self.class_weights)
        return data


def extend_labels(section: Section, segmask: Optional[np.ndarray] = None) -> np.ndarray:
    """Annotated pixels keep their area id; the rest become gm, wm or bg from the segmask."""
    segmask = section.segmask if segmask is None else segmask
    if segmask is None or segmask.shape != section.shape:
        raise ValueError(f"section {section.name}: segmask must cover the section grid")
    n = section.n_areas
    out = np.full(section.shape, n + 2, dtype=np.uint8)
    out[segmask == GM] = n
    out[segmask == WM] = n + 1
    annotated = section.labels != IGNORE_LABEL
    out[annotated] = section.labels[annotated]
    return out


def downsample_labels(labels: np.ndarray, factor: int = OUTPUT_STRIDE) -> np.ndarray:
    """Majority vote per factor x factor cell; ties go to the smallest class id.

    Ignored pixels do not vote; fully ignored cells stay ignored.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    hh, ww = -(-h // factor), -(-w // factor)
    padded = np.full((hh * factor, ww * factor), IGNORE_LABEL, dtype=labels.dtype)
    padded[:h, :w] = labels
    cells = padded.reshape(hh, factor, ww, factor).transpose(0, 2, 1, 3).reshape(hh, ww, -1)
    classes = np.unique(labels[labels != IGNORE_LABEL])
    out = np.full((hh, ww), IGNORE_LABEL, dtype=np.uint8)
    if classes.size == 0:
        return out
    votes = np.stack([(cells == c).sum(axis=-1) for c in classes], axis=-1)
    winner = classes[votes.argmax(axis=-1)]
    has_votes = votes.max(axis=-1) > 0
    out[has_votes] = winner[has_votes]
    return out


def upsample_labels(labels: np.ndarray, shape: Tuple[int, int], factor: int = OUTPUT_STRIDE) -> np.ndarray:
    full = np.repeat(np.repeat(labels, factor, axis=0), factor, axis=1)
    return full[: shape[0], : shape[1]]


@dataclass(frozen=True)
class LabelScheme:
    """How a section's groundtruth is phrased for one model."""

    name: str
    class_names: Tuple[str, ...]
    build: Callable[[Section], np.ndarray]
    class_weights: Optional[Tuple[float, ...]] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def area_scheme(class_names: Sequence[str]) -> LabelScheme:
    return LabelScheme("areas", tuple(class_names), extend_labels)


def full_truth_scheme(class_names: Sequence[str]) -> LabelScheme:
    def build(section: Section) -> np.ndarray:
        if section.full_labels is None:
            raise ValueError(f"section {section.name} has no full labels")
        return section.full_labels

    return LabelScheme("full", tuple(class_names), build)


def cortex_scheme(background_weight: float = 0.5) -> LabelScheme:
    def build(section: Section) -> np.ndarray:
        return np.where(section.labels != IGNORE_LABEL, 0, 1).astype(np.uint8)

    return LabelScheme("cortex", CORTEX_CLASSES, build, (1.0, background_weight))


def tissue_scheme() -> LabelScheme:
    def build(section: Section) -> np.ndarray:
        if section.segmask is None:
            raise ValueError(f"section {section.name} has no gm/wm/bg segmentation")
        return section.segmask.astype(np.uint8)

    return LabelScheme("tissue", TISSUE_CLASSES, build)


def crop_window(array: np.ndarray, y0: int, x0: int, size: int, fill) -> np.ndarray:
    """size x size window at (y0, x0) over the last two axes, filled outside the array."""
    h, w = array.shape[-2:]
    out = np.full(array.shape[:-2] + (size, size), fill, dtype=array.dtype)
    sy0, sx0 = max(y0, 0), max(x0, 0)
    sy1, sx1 = min(y0 + size, h), min(x0 + size, w)
    if sy1 > sy0 and sx1 > sx0:
        out[..., sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = array[..., sy0:sy1, sx0:sx1]
    return out


def rotation_margin(patch_size: int) -> int:
    """Side of the crop drawn before rotating: covers size*sqrt(2), padded to a multiple of 16."""
    extra = math.ceil(patch_size * math.sqrt(2)) - patch_size
    return patch_size + 16 * math.ceil(extra / 16)


class FieldCache:
    """Lazily solved orientation fields, one per section."""

    def __init__(self, laplace: Optional[dict] = None):
        self.laplace = laplace or settings.PARCELLATION["laplace"]
        self._fields: Dict[str, Optional[VectorField]] = {}
        self._lock = threading.Lock()

    def solve(self, section: Section) -> Optional[VectorField]:
        if section.segmask is None or not (section.segmask == GM).any():
            return None
        scalar = solve_laplace(
            section.segmask,
            tol=self.laplace["tol"],
            max_iter=self.laplace["max_iter"],
            omega=self.laplace["omega"],
        )
        return gradient(scalar)

    def get(self, section: Section) -> Optional[VectorField]:
        with self._lock:
            if section.name in self._fields:
                return self._fields[section.name]
        vf = self.solve(section)
        with self._lock:
            self._fields[section.name] = vf
        return vf


def local_rotation(vf: Optional[VectorField], cy: int, cx: int, size: int) -> float:
    """Rotation that turns the local field direction up; 0 where it is undefined."""
    if vf is None:
        return 0.0
    half = size // 2
    try:
        theta = dominant_orientation(vf, (cy - half, cy + half, cx - half, cx + half))
    except OrientationUndefined:
        return 0.0
    return angle_to_up(theta)


@dataclass
class Patch:
    section: str
    image: np.ndarray  # normalised, P x P
    target: np.ndarray  # P/8 x P/8
    atlas: Optional[np.ndarray]  # areas x P/4 x P/4
    center: Tuple[int, int]
    rotation: float
    foreground: bool


# extra context around the aligned window so a pivot off its centre stays covered
ALIGN_SLACK = 16


def _oriented_crop(
    section: Section,
    normalized: np.ndarray,
    labels: Optional[np.ndarray],
    cy: int,
    cx: int,
    size: int,
    rotation: float,
    with_atlas: bool,
):
    """Window of side ``rotation_margin(size) + 32`` whose centre offset is 8-aligned,
    rotated about the sampled pixel (cy, cx)."""
    big = rotation_margin(size) + 2 * ALIGN_SLACK
    y0 = (cy - big // 2) // 8 * 8
    x0 = (cx - big // 2) // 8 * 8
    py, px = cy - y0, cx - x0
    image = crop_window(normalized, y0, x0, big, 0.0)
    label_crop = None if labels is None else crop_window(labels, y0, x0, big, IGNORE_LABEL)
    atlas = None
    if with_atlas and section.atlas is not None:
        q = INPUT_BLOCK_STRIDE
        atlas = crop_window(section.atlas, y0 // q, x0 // q, big // q, 0.0)
    if rotation:
        image = rotate_patch(image, rotation, order=1, center=(py, px))
        if label_crop is not None:
            label_crop = rotate_patch(label_crop, rotation, order=0, center=(py, px))
        if atlas is not None:
            q = INPUT_BLOCK_STRIDE
            pivot = ((py + 0.5) / q - 0.5, (px + 0.5) / q - 0.5)
            atlas = rotate_patch(atlas, rotation, order=0, center=pivot)
    return (y0, x0, big), image, label_crop, atlas


def _center(array: np.ndarray, big: int, size: int, scale: int = 1) -> np.ndarray:
    off = (big - size) // 2 // scale
    n = size // scale
    return array[..., off:off + n, off:off + n]


class PatchSampler:
    """Draws training patches from a list of sections with one generator."""

    def __init__(
        self,
        sections: Sequence[Section],
        config: TrainConfig,
        scheme: LabelScheme,
        rng: np.random.Generator,
        fields: Optional[FieldCache] = None,
        with_atlas: bool = False,
    ):
        if not sections:
            raise ValueError("no training sections to sample from")
        for section in sections:
            if config.patch_size > min(section.shape):
                raise ValueError(
                    f"patch size {config.patch_size} exceeds section {section.name} {section.shape}"
                )
        self.sections = list(sections)
        self.config = config
        self.scheme = scheme
        self.rng = rng
        self.fields = fields if fields is not None else (FieldCache() if config.orientation == "laplace" else None)
        self.with_atlas = with_atlas
        self._targets: Dict[str, np.ndarray] = {}
        self._pools: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self._images: Dict[str, np.ndarray] = {}

    def _target(self, section: Section) -> np.ndarray:
        if section.name not in self._targets:
            self._targets[section.name] = self.scheme.build(section)
        return self._targets[section.name]

    def _image(self, section: Section) -> np.ndarray:
        if section.name not in self._images:
            self._images[section.name] = normalize_image(section.image)
        return self._images[section.name]

    def _pool(self, section: Section) -> Tuple[np.ndarray, np.ndarray]:
        if section.name not in self._pools:
            annotated = (section.labels != IGNORE_LABEL).ravel()
            self._pools[section.name] = (np.flatnonzero(annotated), np.flatnonzero(~annotated))
        return self._pools[section.name]

    def sample(self) -> Patch:
        rng = self.rng
        foreground = bool(rng.random() < self.config.foreground_fraction)
        candidates = [s for s in self.sections if len(self._pool(s)[0 if foreground else 1])]
        if not candidates:
            foreground = not foreground
            candidates = self.sections
        weights = np.array([len(self._pool(s)[0 if foreground else 1]) for s in candidates], dtype=np.float64)
        section = candidates[int(rng.choice(len(candidates), p=weights / weights.sum()))]
        pool = self._pool(section)[0 if foreground else 1]
        flat = int(pool[int(rng.integers(len(pool)))])
        cy, cx = divmod(flat, section.shape[1])

        size = self.config.patch_size
        if self.config.orientation == "laplace":
            rotation = local_rotation(self.fields.get(section), cy, cx, size)
        elif self.config.orientation == "random":
            rotation = float(rng.uniform(0.0, 2 * math.pi))
        else:
            rotation = 0.0
        (_, _, big), image, labels, atlas = _oriented_crop(
            section, self._image(section), self._target(section), cy, cx, size, rotation, self.with_atlas
        )
        return Patch(
            section=section.name,
            image=_center(image, big, size),
            target=downsample_labels(_center(labels, big, size)),
            atlas=None if atlas is None else _center(atlas, big, size, INPUT_BLOCK_STRIDE),
            center=(cy, cx),
            rotation=rotation,
            foreground=foreground,
        )

    def batch(self) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        patches = [self.sample() for _ in range(self.config.batch_size)]
        images = np.stack([p.image for p in patches])[:, None].astype(np.float32)
        targets = np.stack([p.target for p in patches])
        atlas = None
        if self.with_atlas:
            atlas = np.stack([p.atlas for p in patches]).astype(np.float32)
        return images, targets, atlas


def sample_patch(dataset, rng: np.random.Generator, config: TrainConfig,
                 scheme: Optional[LabelScheme] = None, with_atlas: bool = False) -> Patch:
    """One patch from the train split of ``dataset`` (or from a list of sections)."""
    sections = dataset.split("train") if isinstance(dataset, Dataset) else list(dataset)
    if not sections:
        raise ValueError("train split is empty")
    scheme = scheme or area_scheme(class_names_for(sections[0].n_areas))
    return PatchSampler(sections, config, scheme, rng, with_atlas=with_atlas).sample()


class PatchProducer(threading.Thread):
    """Background thread filling a bounded queue with batches, in draw order."""

    def __init__(self, sampler: PatchSampler, count: int, depth: int):
        super().__init__(name="patch-producer", daemon=True)
        self.sampler = sampler
        self.count = count
        self.batches: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        self._halt = threading.Event()

    def run(self) -> None:
        for _ in range(self.count):
            if self._halt.is_set():
                return
            try:
                item = self.sampler.batch()
            except Exception as exc:  # handed to the consumer
                item = exc
            while not self._halt.is_set():
                try:
                    self.batches.put(item, timeout=0.5)
                    break
                except queue.Full:
                    continue
            if isinstance(item, Exception):
                return

    def get(self):
        item = self.batches.get()
        if isinstance(item, Exception):
            raise item
        return item

    def stop(self) -> None:
        self._halt.set()


@dataclass
class TrainResult:
    model: Model
    curves: List[dict]
    config: TrainConfig
    scheme: str = "areas"

    def _window(self) -> int:
        return max(1, min(10, len(self.curves) // 5))

    @property
    def initial_loss(self) -> float:
        if not self.curves:
            return float("nan")
        return float(np.mean([c["loss"] for c in self.curves[: self._window()]]))

    @property
    def final_loss(self) -> float:
        if not self.curves:
            return float("nan")
        return float(np.mean([c["loss"] for c in self.curves[-self._window():]]))


def write_curves(curves: Sequence[dict], path) -> None:
    lines = ["iteration,phase,loss"] + [f"{c['iteration']},{c['phase']},{c['loss']:.8f}" for c in curves]
    Path(path).write_text("\n".join(lines) + "\n")


def train(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    scheme: Optional[LabelScheme] = None,
    split: str = "train",
    sections: Optional[Sequence[Section]] = None,
) -> TrainResult:
    """SGD on sampled patches; atlas-aware models train image-only first, then with the atlas."""
    scheme = scheme or area_scheme(dataset.class_names)
    if model.config.num_classes != scheme.num_classes:
        raise ValueError(
            f"model predicts {model.config.num_classes} classes but the labels have {scheme.num_classes}"
        )
    sections = list(sections) if sections is not None else dataset.split(split)
    atlas_aware = model.config.has_atlas
    if atlas_aware and any(s.atlas is None for s in sections):
        raise ValueError("atlas-aware training needs registered atlases on every section")
    weights = config.class_weights or scheme.class_weights or (1.0,) * scheme.num_classes
    if len(weights) != scheme.num_classes:
        raise ValueError(f"{len(weights)} class weights for {scheme.num_classes} classes")

    rng = make_rng(config.seed)
    dropout_rng = make_rng(config.seed + 1)
    sampler = PatchSampler(sections, config, scheme, rng, with_atlas=atlas_aware)
    producer = None
    if config.prefetch:
        producer = PatchProducer(sampler, config.iterations, config.prefetch)
        producer.start()

    phase1 = config.phase1 if atlas_aware else 0
    atlas_params = model.atlas_parameters()
    frozen_buffers = [(layer, layer.running_mean.copy(), layer.running_var.copy())
                      for layer in atlas_params if layer.kind == "batchnorm"]
    model.mode = "train"
    curves: List[dict] = []
    logger.info(
        "Training %s on %d sections: %d iterations (%d image-only), lr %s",
        model.config.name, len(sections), config.iterations, phase1, config.learning_rate,
    )
    try:
        for iteration in range(1, config.iterations + 1):
            images, targets, atlas = producer.get() if producer else sampler.batch()
            phase = 1 if iteration <= phase1 else 2
            if atlas_aware:
                atlas = np.zeros_like(atlas) if phase == 1 else atlas_dropout(atlas, config.atlas_dropout, dropout_rng)
            logits = model.forward(images, atlas, mode="train")
            loss = cross_entropy(logits, targets, weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(iteration, config.learning_rate, value)
            loss.backward()
            trainable = model.image_parameters() if phase == 1 else model.parameters()
            sgd_step(trainable, config.learning_rate)
            if phase == 1:
                for layer in atlas_params:
                    for _, tensor in layer.learnable():
                        tensor.grad = None
                for layer, mean, var in frozen_buffers:
                    layer.running_mean[...] = mean
                    layer.running_var[...] = var
            curves.append({"iteration": iteration, "phase": phase, "loss": value})
            if iteration % config.log_every == 0 or iteration == config.iterations:
                logger.info(
                    "iteration %d phase %d loss %.4f", iteration, phase, value,
                    extra={"iteration": iteration, "phase": phase, "loss": value, "lr": config.learning_rate},
                )
    finally:
        if producer:
            producer.stop()
    model.mode = "eval"
    return TrainResult(model=model, curves=curves, config=config, scheme=scheme.name)


@dataclass
class TwoStepResult:
    cortex_model: Model
    tissue_model: Model
    curves: Dict[str, List[dict]]


def train_gmwm_two_step(
    dataset: Dataset,
    config: TrainConfig,
    subset_size: int = 20,
    background_weight: float = 0.5,
    preset: str = "desk",
    derive_subset_labels: bool = True,
    tile: Optional[TileSpec] = None,
) -> TwoStepResult:
    """Cortex-vs-background model from area delineations, then a 3-class gm/wm/bg model on a subset.

    By default the subset labels are step-1 cortex predictions with wm taken
    from the reference mask; ``derive_subset_labels=False`` trains step 2 on
    the reference masks directly.
    """
    config = replace(config, orientation="none", class_weights=None)
    sections = dataset.split("train")
    cortex = cortex_scheme(background_weight)
    cortex_model = build_base_net(preset_config(preset, 2), seed=config.seed, class_names=cortex.class_names)
    step1 = train(cortex_model, dataset, config, scheme=cortex, sections=sections)

    subset = sections[:subset_size]
    if not subset:
        raise ValueError("the three-class subset is empty")
    if derive_subset_labels:
        tile = tile or TileSpec(**settings.PARCELLATION["tiling"])
        subset = [_derive_tissue(step1.model, section, tile) for section in subset]
    tissue = tissue_scheme()
    tissue_model = build_base_net(preset_config(preset, 3), seed=config.seed + 1, class_names=tissue.class_names)
    step2 = train(tissue_model, dataset, config, scheme=tissue, sections=subset)
    logger.info("Two-step gm/wm training done: step 1 loss %.4f, step 2 loss %.4f", step1.final_loss, step2.final_loss)
    return TwoStepResult(step1.model, step2.model, {"cortex": step1.curves, "tissue": step2.curves})


def _derive_tissue(cortex_model: Model, section: Section, tile: TileSpec) -> Section:
    """Step-2 labels from step-1 cortex predictions, with wm inserted from the reference mask."""
    if section.segmask is None:
        raise ValueError(f"section {section.name} has no reference mask to take wm from")
    predicted = upsample_labels(predict_section(cortex_model, section, tile), section.shape)
    mask = np.where(predicted == 0, GM, BG).astype(np.uint8)
    mask[section.segmask == WM] = WM
    return replace(section, segmask=mask)


class SectionPredictor:
    """Stride-8 label maps for whole sections, optionally orientation-corrected per tile."""

    def __init__(self, model: Model, orientation: str = "none", patch_size: int = 192,
                 fields: Optional[FieldCache] = None):
        if orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}")
        self.model = model
        self.orientation = orientation
        self.patch_size = patch_size
        self.fields = fields or (FieldCache() if orientation == "laplace" else None)

    def predict_section(self, section: Section, tile: TileSpec) -> np.ndarray:
        if self.orientation != "laplace":
            return predict_section(self.model, section, tile)
        return self._predict_oriented(section, tile)

    def _predict_oriented(self, section: Section, tile: TileSpec) -> np.ndarray:
        s = OUTPUT_STRIDE
        size = self.patch_size
        core = min(tile.core, size // 2 // 16 * 16)
        if core % 16:
            raise ValueError(f"oriented tiles need a core that is a multiple of 16, got {core}")
        vf = self.fields.get(section)
        h, w = section.shape
        out = np.full((-(-h // s), -(-w // s)), IGNORE_LABEL, dtype=np.uint8)
        normalized = normalize_image(section.image)
        for y in range(0, h, core):
            for x in range(0, w, core):
                cy, cx = y + core // 2, x + core // 2
                rotation = local_rotation(vf, cy, cx, size)
                big = rotation_margin(size)
                y0, x0 = cy - big // 2, cx - big // 2
                image = crop_window(normalized, y0, x0, big, 0.0)
                atlas = None
                if self.model.config.has_atlas:
                    q = INPUT_BLOCK_STRIDE
                    atlas = crop_window(section.atlas, y0 // q, x0 // q, big // q, 0.0)
                    atlas = _center(rotate_patch(atlas, rotation, order=0), big, size, q)[None]
                image = _center(rotate_patch(image, rotation, order=1), big, size)
                labels = self.model.predict(image[None, None], atlas)[0]
                canvas = np.full((big // s, big // s), IGNORE_LABEL, dtype=np.uint8)
                off = (big - size) // 2 // s
                canvas[off:off + size // s, off:off + size // s] = labels
                canvas = rotate_patch(canvas, -rotation, order=0)
                c0 = (big // 2 - core // 2) // s
                ye, xe = min(y + core, h), min(x + core, w)
                block = canvas[c0:c0 + -(-(ye - y) // s), c0:c0 + -(-(xe - x) // s)]
                out[y // s:y // s + block.shape[0], x // s:x // s + block.shape[1]] = block
        return out


def _as_predictor(model):
    return SectionPredictor(model) if isinstance(model, Model) else model


def section_truth(section: Section, scheme: LabelScheme) -> np.ndarray:
    return downsample_labels(scheme.build(section))


def evaluate_sections(
    model,
    sections: Sequence[Section],
    tile: TileSpec,
    scheme: LabelScheme,
) -> List[EvalReport]:
    if not sections:
        raise ValueError("evaluation split is empty")
    predictor = _as_predictor(model)
    reports = []
    for section in sections:
        pred = predictor.predict_section(section, tile)
        gt = section_truth(section, scheme)
        report = evaluate_labels(pred, gt, scheme.num_classes, class_names=scheme.class_names)
        logger.info("Section %s: mean Dice %.4f, eps %.3f", section.name, report.mean_dice, report.epsilon)
        reports.append(report)
    return reports


def evaluate(
    model,
    dataset: Dataset,
    split: str = "test",
    tile: Optional[TileSpec] = None,
    scheme: Optional[LabelScheme] = None,
) -> EvalReport:
    """Tiled prediction per section; confusion matrices and eps_tau summed over sections.

    ``model`` is a Model or anything with ``predict_section(section, tile)``.
    """
    tile = tile or TileSpec(**settings.PARCELLATION["tiling"])
    scheme = scheme or area_scheme(dataset.class_names)
    return EvalReport.combine(evaluate_sections(model, dataset.split(split), tile, scheme))


def apply_segmentation(model, section: Section, tile: Optional[TileSpec] = None) -> np.ndarray:
    """Predicted gm/wm/bg mask at section resolution from a 3-class tissue model."""
    tile = tile or TileSpec(**settings.PARCELLATION["tiling"])
    predictor = _as_predictor(model)
    labels = predictor.predict_section(section, tile)
    return upsample_labels(labels, section.shape).astype(np.uint8)


def label_histogram(dataset: Dataset, split: Optional[str] = None, scheme: Optional[LabelScheme] = None) -> np.ndarray:
    """Per-class pixel frequencies over a split."""
    scheme = scheme or area_scheme(dataset.class_names)
    counts = np.zeros(scheme.num_classes, dtype=np.int64)
    for section in dataset.split(split):
        labels = scheme.build(section)
        labels = labels[labels != IGNORE_LABEL]
        counts += np.bincount(labels.ravel(), minlength=scheme.num_classes)[: scheme.num_classes]
    total = counts.sum()
    return counts / total if total else counts.astype(np.float64)


def z_consistency(predictions: Sequence[np.ndarray], cortex: Sequence[np.ndarray]) -> dict:
    """Pairwise label agreement on pixels that are cortex in both sections of each pair."""
    if len(predictions) != len(cortex) or len(predictions) < 2:
        raise ValueError("need at least two predictions, each with a cortex mask")
    pairs = []
    for i in range(len(predictions)):
        for j in range(i + 1, len(predictions)):
            both = np.asarray(cortex[i], dtype=bool) & np.asarray(cortex[j], dtype=bool)
            if not both.any():
                raise ValueError(f"sections {i} and {j} share no cortex pixels")
            agree = float((predictions[i][both] == predictions[j][both]).mean())
            pairs.append({"a": i, "b": j, "agreement": agree, "pixels": int(both.sum())})
    values = [p["agreement"] for p in pairs]
    return {"pairs": pairs, "min": min(values), "mean": float(np.mean(values))}
