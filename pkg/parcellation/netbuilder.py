"""Block-level network configs, model construction and tiled inference.

The base net is an encoder/decoder with a stride-4 input block, four pooled
contracting blocks, a bottom block, three upsampling blocks with skip
concatenation and an output block, giving an output stride of 8. The
atlas-aware net adds a second contracting path for the per-area atlas maps;
its terminal activations join the bottom and its per-scale activations are
appended to the joint expansive path.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from parcellation import __version__
from parcellation.fileio import read_json, read_ptnsr, write_json, write_ptnsr
from parcellation.tensor import (
    DEFAULT_DTYPE,
    LayerParams,
    ShapeError,
    Tensor,
    batchnorm,
    concat_channels,
    conv2d,
    count_parameters,
    make_rng,
    maxpool2,
    receptive_field,
    relu,
    upsample2,
)

logger = logging.getLogger(__name__)

REFERENCE_RECEPTIVE_FIELD = 1481
REFERENCE_PARAMETER_COUNT = 1479728
OUTPUT_STRIDE = 8
INPUT_BLOCK_STRIDE = 4

ROLES = ("input", "contracting", "bottom", "expansive", "output", "atlas-input")


class ArchitectureError(ValueError):
    pass


class TileError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    channels: int
    norm: bool = True  # batchnorm + ReLU after the conv


@dataclass(frozen=True)
class BlockSpec:
    name: str
    role: str
    convs: Tuple[ConvSpec, ...]
    pool: bool = False
    upsample: bool = False
    skips: Tuple[str, ...] = ()

    @property
    def stride(self) -> int:
        return math.prod(conv.stride for conv in self.convs)


@dataclass(frozen=True)
class LayerPlan:
    name: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int


@dataclass(frozen=True)
class ArchitectureConfig:
    blocks: Tuple[BlockSpec, ...]
    num_classes: int
    atlas_blocks: Tuple[BlockSpec, ...] = ()
    atlas_channels: int = 0
    in_channels: int = 1
    name: str = "custom"

    @property
    def has_atlas(self) -> bool:
        return bool(self.atlas_blocks)

    def layer_sequence(self) -> Iterator[Tuple[str, int, int]]:
        """(kind, kernel, stride) along the image path, for receptive-field math."""
        for block in self.blocks:
            if block.upsample:
                yield ("upsample", 2, 2)
            for conv in block.convs:
                yield ("conv", conv.kernel, conv.stride)
            if block.pool:
                yield ("pool", 2, 2)

    def layer_plan(self) -> List[LayerPlan]:
        plan: List[LayerPlan] = []
        channels: Dict[str, int] = {}
        atlas_out = 0
        if self.has_atlas:
            c = self.atlas_channels
            for block in self.atlas_blocks:
                c = self._plan_block(block, c, channels, plan)
            atlas_out = c
        c = self.in_channels
        joined = False
        for block in self.blocks:
            if block.upsample and self.has_atlas and not joined:
                c += atlas_out
                joined = True
            c = self._plan_block(block, c, channels, plan)
        return plan

    @staticmethod
    def _plan_block(block: BlockSpec, c: int, channels: Dict[str, int], plan: List[LayerPlan]) -> int:
        if block.upsample:
            width = block.convs[0].channels
            plan.append(LayerPlan(f"{block.name}.up", "transposed-conv", c, width, 2))
            missing = [s for s in block.skips if s not in channels]
            if missing:
                raise ArchitectureError(f"block {block.name}: unknown skip source(s) {missing}")
            c = width + sum(channels[s] for s in block.skips)
        for i, conv in enumerate(block.convs):
            plan.append(LayerPlan(f"{block.name}.conv{i}", "conv", c, conv.channels, conv.kernel))
            if conv.norm:
                plan.append(LayerPlan(f"{block.name}.bn{i}", "batchnorm", conv.channels, conv.channels, 0))
            c = conv.channels
        channels[block.name] = c
        return c

    def parameter_shapes(self) -> Iterator[Tuple[int, ...]]:
        for layer in self.layer_plan():
            if layer.kind == "conv":
                yield (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
                yield (layer.out_channels,)
            elif layer.kind == "transposed-conv":
                yield (layer.in_channels, layer.out_channels, 2, 2)
                yield (layer.out_channels,)
            else:
                yield (layer.out_channels,)
                yield (layer.out_channels,)

    @property
    def alignment(self) -> int:
        """Input sides must be multiples of this (deepest downsampling factor)."""
        scale = best = 1
        for kind, _, stride in self.layer_sequence():
            if kind == "upsample":
                scale //= 2
            else:
                scale *= stride
            best = max(best, scale)
        return best

    def validate(self) -> None:
        if not self.blocks:
            raise ArchitectureError("config has no blocks")
        for block in self.blocks + self.atlas_blocks:
            if block.role not in ROLES:
                raise ArchitectureError(f"block {block.name}: unknown role {block.role!r}")
            if not block.convs:
                raise ArchitectureError(f"block {block.name}: needs at least one conv")
            for conv in block.convs:
                if conv.kernel % 2 == 0:
                    raise ArchitectureError(f"block {block.name}: kernel {conv.kernel} must be odd for same padding")
            if block.role == "contracting" and (not block.pool or block.upsample):
                raise ArchitectureError(f"contracting block {block.name} must end in one 2x2 pool")
            if block.role == "expansive" and not block.upsample:
                raise ArchitectureError(f"expansive block {block.name} must start with one upsample")

        first = self.blocks[0]
        if first.role != "input" or first.pool or first.stride != INPUT_BLOCK_STRIDE:
            raise ArchitectureError(f"input block must have net stride {INPUT_BLOCK_STRIDE} and no pooling")
        last = self.blocks[-1]
        if last.role != "output" or last.convs[-1].norm or last.convs[-1].channels != self.num_classes:
            raise ArchitectureError(
                f"output block must end in a plain classifier conv with {self.num_classes} channels"
            )

        scales: Dict[str, int] = {}
        atlas_scale = None
        if self.has_atlas:
            if self.atlas_channels <= 0:
                raise ArchitectureError("atlas path needs a positive atlas channel count")
            head = self.atlas_blocks[0]
            if head.role != "atlas-input" or head.pool or head.stride != 1:
                raise ArchitectureError("atlas input block must be stride-1 convs without pooling")
            atlas_scale = INPUT_BLOCK_STRIDE
            for block in self.atlas_blocks:
                atlas_scale *= block.stride
                scales[block.name] = atlas_scale
                if block.pool:
                    atlas_scale *= 2
        elif self.atlas_channels:
            raise ArchitectureError("atlas channel count given without an atlas path")

        scale = 1
        joined = False
        for block in self.blocks:
            if block.upsample:
                if self.has_atlas and not joined:
                    if atlas_scale != scale:
                        raise ArchitectureError(
                            f"atlas path ends at scale {atlas_scale} but the bottom is at scale {scale}"
                        )
                    joined = True
                if scale % 2:
                    raise ArchitectureError(f"block {block.name}: cannot upsample from scale {scale}")
                scale //= 2
                for source in block.skips:
                    if source not in scales:
                        raise ArchitectureError(f"block {block.name}: unknown skip source {source!r}")
                    if scales[source] != scale:
                        raise ArchitectureError(
                            f"block {block.name}: skip {source} is at scale {scales[source]}, expected {scale}"
                        )
            scale *= block.stride
            scales[block.name] = scale
            if block.pool:
                scale *= 2
        if self.has_atlas and not joined:
            raise ArchitectureError("atlas path never joins the expansive path")

        _, stride = receptive_field(self)
        if stride != OUTPUT_STRIDE:
            raise ArchitectureError(f"output stride is {stride}, expected {OUTPUT_STRIDE}")
        self.layer_plan()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ArchitectureConfig":
        def blocks(items) -> Tuple[BlockSpec, ...]:
            return tuple(
                BlockSpec(
                    name=item["name"],
                    role=item["role"],
                    convs=tuple(ConvSpec(**conv) for conv in item["convs"]),
                    pool=item.get("pool", False),
                    upsample=item.get("upsample", False),
                    skips=tuple(item.get("skips", ())),
                )
                for item in items
            )

        return cls(
            blocks=blocks(payload["blocks"]),
            num_classes=payload["num_classes"],
            atlas_blocks=blocks(payload.get("atlas_blocks", ())),
            atlas_channels=payload.get("atlas_channels", 0),
            in_channels=payload.get("in_channels", 1),
            name=payload.get("name", "custom"),
        )


CANONICAL_WIDTHS = {
    "input": 16,
    "contracting": (32, 64, 128, 256),
    "bottom": 512,
    "expansive": (256, 128, 64),
    "output": 64,
    "atlas-input": 16,
}

DESK_WIDTHS = {
    "input": 8,
    "contracting": (8, 16, 32, 64),
    "bottom": 64,
    "expansive": (64, 32, 16),
    "output": 16,
    "atlas-input": 8,
}

TINY_WIDTHS = {
    "input": 4,
    "contracting": (4, 4, 8, 8),
    "bottom": 8,
    "expansive": (8, 4, 4),
    "output": 4,
    "atlas-input": 4,
}


def canonical_config(
    num_classes: int,
    atlas_channels: int = 0,
    widths: Optional[dict] = None,
    convs_per_block: int = 3,
    kernel: int = 3,
    input_kernel: int = 5,
    name: str = "canonical",
) -> ArchitectureConfig:
    """Ten-block topology; ``atlas_channels`` > 0 adds the atlas path."""
    widths = widths or CANONICAL_WIDTHS

    def convs(width: int, count: int = convs_per_block) -> Tuple[ConvSpec, ...]:
        return tuple(ConvSpec(kernel, 1, width) for _ in range(count))

    stem = widths["input"]
    blocks = [
        BlockSpec("b1", "input", (ConvSpec(input_kernel, 2, stem), ConvSpec(input_kernel, 2, stem))),
    ]
    for i, width in enumerate(widths["contracting"], start=2):
        blocks.append(BlockSpec(f"b{i}", "contracting", convs(width), pool=True))
    blocks.append(BlockSpec("b6", "bottom", convs(widths["bottom"])))

    atlas_blocks: Tuple[BlockSpec, ...] = ()
    if atlas_channels:
        atlas = [BlockSpec("a1", "atlas-input", (ConvSpec(input_kernel, 1, widths["atlas-input"]),))]
        for i, width in enumerate(widths["contracting"], start=2):
            atlas.append(BlockSpec(f"a{i}", "contracting", convs(width), pool=True))
        atlas_blocks = tuple(atlas)

    for i, width in enumerate(widths["expansive"]):
        source = 5 - i
        skips = (f"b{source}", f"a{source}") if atlas_channels else (f"b{source}",)
        blocks.append(BlockSpec(f"b{7 + i}", "expansive", convs(width), upsample=True, skips=skips))
    blocks.append(
        BlockSpec(
            "b10",
            "output",
            (ConvSpec(kernel, 1, widths["output"]), ConvSpec(1, 1, num_classes, norm=False)),
        )
    )
    return ArchitectureConfig(
        blocks=tuple(blocks),
        num_classes=num_classes,
        atlas_blocks=atlas_blocks,
        atlas_channels=atlas_channels,
        name=name,
    )


PRESETS = {
    "canonical": {"widths": CANONICAL_WIDTHS},
    "desk": {"widths": DESK_WIDTHS},
    "tiny": {"widths": TINY_WIDTHS, "convs_per_block": 1},
}


def preset_config(preset: str, num_classes: int, atlas_channels: int = 0) -> ArchitectureConfig:
    if preset not in PRESETS:
        raise ArchitectureError(f"unknown architecture preset {preset!r}; choose from {sorted(PRESETS)}")
    return canonical_config(num_classes, atlas_channels=atlas_channels, name=preset, **PRESETS[preset])


def normalize_image(image: np.ndarray) -> np.ndarray:
    """uint8 grayscale -> float32 network input centred on zero."""
    return (np.asarray(image, dtype=np.float32) / 255.0 - 0.5).astype(np.float32)


class Model:
    def __init__(
        self,
        config: ArchitectureConfig,
        params: Dict[str, LayerParams],
        mode: str = "train",
        class_names: Sequence[str] = (),
        seed: Optional[int] = None,
    ):
        self.config = config
        self.params = params
        self.mode = mode
        self.class_names = list(class_names)
        self.seed = seed
        self.receptive_field, self.output_stride = receptive_field(config)

    @classmethod
    def build(cls, config: ArchitectureConfig, seed: int = 0, class_names: Sequence[str] = ()) -> "Model":
        config.validate()
        rng = make_rng(seed)
        params: Dict[str, LayerParams] = {}
        for layer in config.layer_plan():
            if layer.kind == "conv":
                params[layer.name] = LayerParams.conv(layer.in_channels, layer.out_channels, layer.kernel, rng)
            elif layer.kind == "transposed-conv":
                params[layer.name] = LayerParams.transposed(layer.in_channels, layer.out_channels, rng)
            else:
                params[layer.name] = LayerParams.batchnorm(layer.out_channels)
        model = cls(config, params, class_names=class_names, seed=seed)
        logger.debug(
            "Built %s model: rf=%d stride=%d params=%d",
            config.name, model.receptive_field, model.output_stride, model.parameter_count,
        )
        return model

    @property
    def parameter_count(self) -> int:
        return sum(t.data.size for layer in self.params.values() for _, t in layer.learnable())

    @property
    def dtype(self):
        return next(iter(self.params.values())).learnable()[0][1].dtype

    @property
    def alignment(self) -> int:
        return self.config.alignment

    def parameters(self) -> List[LayerParams]:
        return list(self.params.values())

    def atlas_parameters(self) -> List[LayerParams]:
        prefixes = tuple(f"{block.name}." for block in self.config.atlas_blocks)
        return [layer for name, layer in self.params.items() if name.startswith(prefixes)]

    def image_parameters(self) -> List[LayerParams]:
        atlas = {id(layer) for layer in self.atlas_parameters()}
        return [layer for layer in self.params.values() if id(layer) not in atlas]

    def zero_grad(self) -> None:
        for layer in self.params.values():
            for _, tensor in layer.learnable():
                tensor.grad = None

    def astype(self, dtype) -> "Model":
        params = {name: layer.astype(dtype) for name, layer in self.params.items()}
        return Model(self.config, params, self.mode, self.class_names, self.seed)

    def named_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, layer in self.params.items():
            for attr, tensor in layer.learnable():
                arrays[f"{name}.{attr}"] = tensor.data
            for attr, buf in layer.buffers():
                arrays[f"{name}.{attr}"] = buf
        return arrays

    def _check_inputs(self, x: Tensor, atlas: Optional[Tensor]) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"image input must be (N, {self.config.in_channels}, H, W), got {x.shape}")
        h, w = x.shape[2:]
        align = self.alignment
        if h % align or w % align:
            raise ShapeError(f"input {h}x{w} is not divisible by {align}")
        if not self.config.has_atlas:
            return
        if atlas is None:
            raise ShapeError("atlas-aware model needs an atlas patch")
        expected = (x.shape[0], self.config.atlas_channels, h // INPUT_BLOCK_STRIDE, w // INPUT_BLOCK_STRIDE)
        if atlas.shape != expected:
            raise ShapeError(f"atlas channel/shape mismatch: expected {expected}, got {atlas.shape}")

    def forward(self, image, atlas=None, mode: Optional[str] = None) -> Tensor:
        mode = mode or self.mode
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        a = None
        if atlas is not None:
            a = atlas if isinstance(atlas, Tensor) else Tensor(np.asarray(atlas, dtype=self.dtype))
        self._check_inputs(x, a)

        skips: Dict[str, Tensor] = {}
        atlas_out = None
        if self.config.has_atlas:
            for block in self.config.atlas_blocks:
                a = self._run_block(block, a, skips, mode)
            atlas_out = a
        for block in self.config.blocks:
            if block.upsample and atlas_out is not None:
                x = concat_channels(x, atlas_out)
                atlas_out = None
            x = self._run_block(block, x, skips, mode)
        return x

    def _run_block(self, block: BlockSpec, x: Tensor, skips: Dict[str, Tensor], mode: str) -> Tensor:
        if block.upsample:
            x = upsample2(x, self.params[f"{block.name}.up"])
            for source in block.skips:
                x = concat_channels(x, skips[source])
        for i, conv in enumerate(block.convs):
            x = conv2d(x, self.params[f"{block.name}.conv{i}"], stride=conv.stride, padding=(conv.kernel - 1) // 2)
            if conv.norm:
                x = relu(batchnorm(x, self.params[f"{block.name}.bn{i}"], mode))
        skips[block.name] = x
        if block.pool:
            x = maxpool2(x)
        return x

    def predict(self, image: np.ndarray, atlas: Optional[np.ndarray] = None) -> np.ndarray:
        """Argmax labels (N, h, w) from an eval-mode pass."""
        scores = self.forward(image, atlas, mode="eval").data
        return scores.argmax(axis=1).astype(np.uint8)

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "class_names": self.class_names,
            "receptive_field": self.receptive_field,
            "output_stride": self.output_stride,
            "parameter_count": self.parameter_count,
            "seed": self.seed,
            "reference_receptive_field": REFERENCE_RECEPTIVE_FIELD,
            "reference_parameter_count": REFERENCE_PARAMETER_COUNT,
            "version": __version__,
            "numpy_version": np.__version__,
        }


def build_base_net(config: ArchitectureConfig, seed: int = 0, class_names: Sequence[str] = ()) -> Model:
    if config.has_atlas:
        raise ArchitectureError("base net config must not have an atlas path")
    return Model.build(config, seed=seed, class_names=class_names)


def build_atlas_aware_net(config: ArchitectureConfig, seed: int = 0, class_names: Sequence[str] = ()) -> Model:
    if not config.has_atlas:
        raise ArchitectureError("atlas-aware config needs an atlas path")
    return Model.build(config, seed=seed, class_names=class_names)


def architecture_manifest(config: ArchitectureConfig) -> dict:
    rf, stride = receptive_field(config)
    return {
        "name": config.name,
        "receptive_field": rf,
        "output_stride": stride,
        "parameter_count": count_parameters(config),
        "reference_receptive_field": REFERENCE_RECEPTIVE_FIELD,
        "reference_parameter_count": REFERENCE_PARAMETER_COUNT,
    }


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    for name, array in model.named_arrays().items():
        write_ptnsr(path / "params" / f"{name}.ptnsr", array)
    manifest = model.manifest()
    manifest.update(extra or {})
    write_json(path / "manifest.json", manifest)
    return path


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {path}")
    manifest = read_json(path / "manifest.json")
    config = ArchitectureConfig.from_dict(manifest["config"])
    model = Model.build(config, seed=manifest.get("seed") or 0, class_names=manifest.get("class_names", ()))
    for name, layer in model.params.items():
        for attr, tensor in layer.learnable():
            tensor.data = read_ptnsr(path / "params" / f"{name}.{attr}.ptnsr").astype(DEFAULT_DTYPE)
        for attr, _ in layer.buffers():
            setattr(layer, attr, read_ptnsr(path / "params" / f"{name}.{attr}.ptnsr").astype(DEFAULT_DTYPE))
    model.mode = "eval"
    return model


@dataclass(frozen=True)
class TileSpec:
    core: int = 64
    overlap: int = 640

    @property
    def size(self) -> int:
        return self.core + 2 * self.overlap


def _tile_spans(length: int, tile: TileSpec) -> List[Tuple[int, int, int, int]]:
    """(core_start, core_end, tile_start, tile_end) along one axis."""
    if length <= tile.size:
        return [(0, length, 0, length)]
    spans = []
    for start in range(0, length, tile.core):
        end = min(start + tile.core, length)
        origin = min(max(start - tile.overlap, 0), length - tile.size)
        spans.append((start, end, origin, origin + tile.size))
    return spans


def predict_section(model: Model, section, tile: TileSpec = TileSpec()) -> np.ndarray:
    """Label image at stride 8 for a whole section, stitched from tiles.

    ``section`` needs ``image`` (uint8, H x W) and, for atlas-aware models,
    ``atlas`` (areas, H/4, W/4).
    """
    align = model.alignment
    if tile.core % align or tile.overlap % align:
        raise TileError(f"tile core and overlap must be multiples of {align}")
    if tile.core <= 0:
        raise TileError("tile core must be positive")
    if tile.overlap < (model.receptive_field - 1) // 2:
        raise TileError(
            f"overlap {tile.overlap} is below half the receptive field ({(model.receptive_field - 1) // 2})"
        )
    if tile.size < model.receptive_field:
        logger.warning("Tile size %d is smaller than the receptive field %d", tile.size, model.receptive_field)

    image = normalize_image(section.image)
    h, w = image.shape
    hp, wp = -(-h // align) * align, -(-w // align) * align
    padded = np.zeros((hp, wp), dtype=np.float32)
    padded[:h, :w] = image
    atlas = None
    if model.config.has_atlas:
        atlas_src = np.asarray(section.atlas, dtype=np.float32)
        atlas = np.zeros((atlas_src.shape[0], hp // INPUT_BLOCK_STRIDE, wp // INPUT_BLOCK_STRIDE), dtype=np.float32)
        ah, aw = min(atlas_src.shape[1], atlas.shape[1]), min(atlas_src.shape[2], atlas.shape[2])
        atlas[:, :ah, :aw] = atlas_src[:, :ah, :aw]

    s = model.output_stride
    q = INPUT_BLOCK_STRIDE
    out = np.zeros((hp // s, wp // s), dtype=np.uint8)
    for ys, ye, y0, y1 in _tile_spans(hp, tile):
        for xs, xe, x0, x1 in _tile_spans(wp, tile):
            patch = padded[None, None, y0:y1, x0:x1]
            atlas_patch = None if atlas is None else atlas[None, :, y0 // q:y1 // q, x0 // q:x1 // q]
            labels = model.predict(patch, atlas_patch)[0]
            out[ys // s:ye // s, xs // s:xe // s] = labels[(ys - y0) // s:(ye - y0) // s, (xs - x0) // s:(xe - x0) // s]
    return out[: -(-h // s), : -(-w // s)]
