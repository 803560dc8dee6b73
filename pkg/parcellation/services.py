"""Orchestration behind the ``parcel`` command: artifacts on disk plus ORM records."""
import logging
import operator
import statistics
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy
from django.conf import settings

from parcellation import __version__
from parcellation.cortexfield import GM, field_ppm, gradient, export_field, orientation_ppm, solve_laplace
from parcellation.fileio import colorize_labels, overlay, read_json, read_pgm, write_json, write_pgm, write_ppm
from parcellation.metrics import EvalReport
from parcellation.models import EvaluationRecord, SyntheticDataset, TrainingRun
from parcellation.netbuilder import (
    Model,
    TileSpec,
    architecture_manifest,
    build_atlas_aware_net,
    build_base_net,
    load_checkpoint,
    preset_config,
    save_checkpoint,
)
from parcellation.pipeline import (
    Dataset,
    SectionPredictor,
    TrainConfig,
    TrainResult,
    apply_segmentation,
    area_scheme,
    cortex_scheme,
    downsample_labels,
    evaluate,
    full_truth_scheme,
    hold_out_style,
    label_histogram,
    tissue_scheme,
    train,
    train_gmwm_two_step,
    upsample_labels,
    write_curves,
    z_consistency,
)
from parcellation.synthgen import SynthConfig, generate_dataset

logger = logging.getLogger(__name__)

ARCHITECTURES = ("base", "atlas-aware")
EXPERIMENTS = ("ablation", "transfer", "orientation", "z-consistency", "two-step")

# (median key, comparison, threshold) per experiment
ACCEPTANCE = {
    "ablation": (("dice_gain", ">=", 0.05), ("twin_gain", ">=", 0.10), ("epsilon_drop", ">", 0.0)),
    "transfer": (("epsilon_ratio", "<=", 2.0), ("frequent_dice_held_out", ">=", 0.6)),
    "orientation": (("dice_gain", ">=", 0.0),),
    "z-consistency": (("min", ">=", 0.8),),
    "two-step": (("bg_dice", ">=", 0.9), ("gm_dice", ">=", 0.8), ("wm_dice", ">=", 0.8)),
}
_COMPARE = {">=": operator.ge, ">": operator.gt, "<=": operator.le}


def _versions() -> Dict[str, str]:
    return {"parcellation": __version__, "numpy": np.__version__, "scipy": scipy.__version__}


def default_tile() -> TileSpec:
    return TileSpec(**settings.PARCELLATION["tiling"])


def generate(
    path,
    sections: int,
    styles: int,
    seed: int,
    size: Optional[int] = None,
    areas: Optional[int] = None,
) -> Dataset:
    config = SynthConfig.from_settings(size=size, n_areas=areas)
    dataset = generate_dataset(sections, styles, seed, config)
    dataset.manifest["versions"] = _versions()
    dataset.save(path)
    SyntheticDataset.objects.update_or_create(
        path=str(Path(path).resolve()),
        defaults={
            "seed": seed,
            "section_count": sections,
            "style_count": styles,
            "manifest": dataset.manifest,
        },
    )
    return dataset


def build_model(architecture: str, preset: str, dataset: Dataset, seed: int) -> Model:
    if architecture == "base":
        return build_base_net(preset_config(preset, dataset.num_classes), seed=seed, class_names=dataset.class_names)
    if architecture == "atlas-aware":
        config = preset_config(preset, dataset.num_classes, atlas_channels=dataset.n_areas)
        return build_atlas_aware_net(config, seed=seed, class_names=dataset.class_names)
    raise ValueError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")


def _save_trained(result: TrainResult, path, extra: Dict[str, Any]) -> Path:
    config = result.config
    path = save_checkpoint(result.model, path, {
        "train_config": config.to_dict(),
        "orientation": config.orientation,
        "patch_size": config.patch_size,
        "scheme": result.scheme,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "versions": _versions(),
        **extra,
    })
    write_curves(result.curves, path / "curves.csv")
    return path


def train_model(
    dataset_path,
    checkpoint_path,
    architecture: str,
    preset: str,
    config: TrainConfig,
) -> TrainingRun:
    dataset = Dataset.load(dataset_path)
    model = build_model(architecture, preset, dataset, config.seed)
    run, _ = TrainingRun.objects.update_or_create(
        checkpoint_path=str(Path(checkpoint_path).resolve()),
        defaults={
            "architecture": architecture,
            "preset": preset,
            "dataset_path": str(Path(dataset_path).resolve()),
            "seed": config.seed,
            "config": config.to_dict(),
            "receptive_field": model.receptive_field,
            "parameter_count": model.parameter_count,
            "status": TrainingRun.STATUS_RUNNING,
            "message": "",
        },
    )
    try:
        result = train(model, dataset, config)
    except Exception as exc:
        run.status = TrainingRun.STATUS_FAILED
        run.message = str(exc)
        run.save(update_fields=["status", "message", "updated_at"])
        raise
    _save_trained(result, checkpoint_path, {
        "architecture": architecture,
        "preset": preset,
        "dataset": str(dataset_path),
    })
    run.initial_loss = result.initial_loss
    run.final_loss = result.final_loss
    run.status = TrainingRun.STATUS_DONE
    run.save()
    return run


def train_gmwm(
    dataset_path,
    out_dir,
    preset: str,
    config: TrainConfig,
    subset: int,
    background_weight: float,
    derive_subset_labels: bool = True,
) -> Dict[str, Path]:
    dataset = Dataset.load(dataset_path)
    result = train_gmwm_two_step(
        dataset,
        config,
        subset_size=subset,
        background_weight=background_weight,
        preset=preset,
        derive_subset_labels=derive_subset_labels,
        tile=default_tile(),
    )
    out_dir = Path(out_dir)
    config = replace(config, orientation="none")
    paths = {}
    for name, model, scheme in (
        ("cortex", result.cortex_model, "cortex"),
        ("tissue", result.tissue_model, "tissue"),
    ):
        step = TrainResult(model=model, curves=result.curves[name], config=config, scheme=scheme)
        paths[name] = _save_trained(step, out_dir / name, {
            "architecture": "base",
            "preset": preset,
            "dataset": str(dataset_path),
            "background_weight": background_weight,
            "subset_sections": subset,
        })
        TrainingRun.objects.update_or_create(
            checkpoint_path=str(paths[name].resolve()),
            defaults={
                "architecture": f"gmwm-{name}",
                "preset": preset,
                "dataset_path": str(Path(dataset_path).resolve()),
                "seed": config.seed,
                "config": config.to_dict(),
                "receptive_field": model.receptive_field,
                "parameter_count": model.parameter_count,
                "initial_loss": step.initial_loss,
                "final_loss": step.final_loss,
                "status": TrainingRun.STATUS_DONE,
            },
        )
    return paths


def load_predictor(checkpoint) -> Tuple[SectionPredictor, Dict[str, Any]]:
    model = load_checkpoint(checkpoint)
    manifest = read_json(Path(checkpoint) / "manifest.json")
    predictor = SectionPredictor(
        model,
        orientation=manifest.get("orientation", "none"),
        patch_size=manifest.get("patch_size", settings.PARCELLATION["train"]["patch_size"]),
    )
    return predictor, manifest


class PredictionDirectory:
    """Reads back the stride-8 label maps written by ``predict``."""

    def __init__(self, directory):
        self.directory = Path(directory)
        if not (self.directory / "manifest.json").exists():
            raise FileNotFoundError(f"no prediction manifest in {self.directory}")
        self.manifest = read_json(self.directory / "manifest.json")

    def predict_section(self, section, tile=None) -> np.ndarray:
        path = self.directory / section.name / "labels.pgm"
        if not path.exists():
            raise FileNotFoundError(f"no prediction for section {section.name} in {self.directory}")
        return read_pgm(path)


def scheme_for(name: str, dataset: Dataset, truth: str = "annotated"):
    if name == "tissue":
        return tissue_scheme()
    if name == "cortex":
        return cortex_scheme()
    if truth == "full":
        return full_truth_scheme(dataset.class_names)
    return area_scheme(dataset.class_names)


def predict(checkpoint, dataset_path, split: str, out_dir, tile: Optional[TileSpec] = None) -> List[Path]:
    tile = tile or default_tile()
    predictor, manifest = load_predictor(checkpoint)
    dataset = Dataset.load(dataset_path)
    classes = len(predictor.model.class_names) or predictor.model.config.num_classes
    out_dir = Path(out_dir)
    written = []
    for section in dataset.split(split):
        labels = predictor.predict_section(section, tile)
        target = out_dir / section.name
        target.mkdir(parents=True, exist_ok=True)
        write_pgm(target / "labels.pgm", labels)
        write_ppm(target / "overlay.ppm", overlay(section.image, upsample_labels(labels, section.shape), classes))
        written.append(target)
        logger.info("Predicted %s", section.name)
    write_json(out_dir / "manifest.json", {
        "checkpoint": str(checkpoint),
        "dataset": str(dataset_path),
        "split": split,
        "scheme": manifest.get("scheme", "areas"),
        "tile": {"core": tile.core, "overlap": tile.overlap},
        "sections": [p.name for p in written],
        "seed": manifest.get("seed"),
        "versions": _versions(),
    })
    return written


def evaluate_checkpoint(
    source,
    dataset_path,
    split: str,
    out_dir,
    tile: Optional[TileSpec] = None,
    truth: str = "annotated",
) -> Tuple[EvaluationRecord, EvalReport]:
    """Evaluate a checkpoint directory, or a directory written by ``predict``."""
    tile = tile or default_tile()
    source = Path(source)
    dataset = Dataset.load(dataset_path)
    if (source / "params").is_dir():
        predictor, manifest = load_predictor(source)
    else:
        predictor = PredictionDirectory(source)
        manifest = predictor.manifest
    scheme = scheme_for(manifest.get("scheme", "areas"), dataset, truth)
    report = evaluate(predictor, dataset, split=split, tile=tile, scheme=scheme)
    report.save(out_dir)
    checkpoint = str(source.resolve()) if (source / "params").is_dir() else str(manifest.get("checkpoint", source))
    run = TrainingRun.objects.filter(checkpoint_path=str(Path(checkpoint).resolve())).first()
    payload = report.to_json()
    record = EvaluationRecord.objects.create(
        run=run,
        checkpoint_path=checkpoint,
        split=split,
        mean_dice=payload["mean_dice"],
        epsilon=payload["epsilon"],
        epsilon_tau=report.epsilon_tau,
        evaluated_pixels=report.evaluated,
        misclassified=report.misclassified,
        per_class_dice=payload["per_class_dice"],
        confusion=payload["confusion"],
    )
    return record, report


def segment(checkpoint, dataset_path, split: str, out_dir, tile: Optional[TileSpec] = None) -> List[Path]:
    tile = tile or default_tile()
    predictor, manifest = load_predictor(checkpoint)
    if manifest.get("scheme") != "tissue":
        raise ValueError("segment needs a gm/wm/bg tissue checkpoint")
    dataset = Dataset.load(dataset_path)
    out_dir = Path(out_dir)
    written = []
    for section in dataset.split(split):
        mask = apply_segmentation(predictor, section, tile)
        target = out_dir / section.name
        target.mkdir(parents=True, exist_ok=True)
        write_pgm(target / "segmask.pgm", mask)
        write_ppm(target / "segmask.ppm", colorize_labels(mask, 3))
        written.append(target)
    write_json(out_dir / "manifest.json", {
        "checkpoint": str(checkpoint),
        "dataset": str(dataset_path),
        "split": split,
        "sections": [p.name for p in written],
        "versions": _versions(),
    })
    return written


def laplace(dataset_path, out_dir, names: Sequence[str] = (), split: str = "all") -> List[Dict[str, Any]]:
    dataset = Dataset.load(dataset_path)
    sections = [dataset.section(n) for n in names] if names else dataset.split(split)
    solver = settings.PARCELLATION["laplace"]
    out_dir = Path(out_dir)
    results = []
    for section in sections:
        if section.segmask is None:
            raise ValueError(f"section {section.name} has no gm/wm/bg segmentation")
        field = solve_laplace(section.segmask, tol=solver["tol"], max_iter=solver["max_iter"], omega=solver["omega"])
        target = out_dir / section.name
        target.mkdir(parents=True, exist_ok=True)
        export_field(field, target / "field.ptnsr")
        field_ppm(field, target / "field.ppm")
        orientation_ppm(gradient(field), target / "orientation.ppm")
        results.append({"section": section.name, "iterations": field.iterations, "residual": field.residual})
        logger.info("Laplace field for %s: %d iterations", section.name, field.iterations)
    write_json(out_dir / "manifest.json", {"dataset": str(dataset_path), "fields": results, "solver": solver})
    return results


def inspect(architecture: str, preset: str, classes: int = 16, atlas_channels: int = 13) -> Dict[str, Any]:
    if architecture == "base":
        config = preset_config(preset, classes)
    elif architecture == "atlas-aware":
        config = preset_config(preset, classes, atlas_channels=atlas_channels)
    else:
        raise ValueError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")
    config.validate()
    return {"architecture": architecture, "classes": classes, **architecture_manifest(config)}


def _median(values: List[float]) -> float:
    finite = [v for v in values if v is not None and np.isfinite(v)]
    return float(statistics.median(finite)) if finite else float("nan")


def _train_and_score(dataset: Dataset, architecture: str, preset: str, config: TrainConfig,
                     eval_split: str = "test") -> Tuple[EvalReport, SectionPredictor]:
    model = build_model(architecture, preset, dataset, config.seed)
    train(model, dataset, config)
    predictor = SectionPredictor(model, orientation=config.orientation, patch_size=config.patch_size)
    report = evaluate(predictor, dataset, split=eval_split, tile=default_tile(),
                      scheme=full_truth_scheme(dataset.class_names))
    return report, predictor


def _ablation(dataset: Dataset, preset: str, config: TrainConfig) -> Dict[str, Any]:
    twins = dataset.manifest.get("config", {}).get("twin_pair") or []
    row = {}
    for architecture in ARCHITECTURES:
        report, _ = _train_and_score(dataset, architecture, preset, config)
        row[architecture] = {
            "mean_dice": report.mean_dice,
            "twin_dice": report.class_dice(twins) if twins else None,
            "epsilon": report.epsilon,
        }
    row["dice_gain"] = row["atlas-aware"]["mean_dice"] - row["base"]["mean_dice"]
    row["epsilon_drop"] = row["base"]["epsilon"] - row["atlas-aware"]["epsilon"]
    if twins:
        row["twin_gain"] = row["atlas-aware"]["twin_dice"] - row["base"]["twin_dice"]
    return row


def _transfer(dataset: Dataset, preset: str, config: TrainConfig, architecture: str) -> Dict[str, Any]:
    held = dataset.styles[config.seed % len(dataset.styles)]
    frequent = [int(c) for c in np.argsort(-label_histogram(dataset, "train")[: dataset.n_areas])[:2]]
    all_styles, _ = _train_and_score(dataset, architecture, preset, config)
    held_out, _ = _train_and_score(hold_out_style(dataset, held), architecture, preset, config)
    return {
        "held_out_style": held,
        "epsilon_all": all_styles.epsilon,
        "epsilon_held_out": held_out.epsilon,
        "epsilon_ratio": held_out.epsilon / all_styles.epsilon if all_styles.epsilon else float("inf"),
        "frequent_areas": frequent,
        "frequent_dice_held_out": held_out.class_dice(frequent),
    }


def _orientation(dataset: Dataset, preset: str, config: TrainConfig, architecture: str) -> Dict[str, Any]:
    row = {}
    for orientation in ("laplace", "random"):
        report, _ = _train_and_score(dataset, architecture, preset, replace(config, orientation=orientation))
        row[orientation] = {"mean_dice": report.mean_dice, "epsilon": report.epsilon}
    row["dice_gain"] = row["laplace"]["mean_dice"] - row["random"]["mean_dice"]
    return row


def _z_consistency(dataset: Dataset, preset: str, config: TrainConfig, architecture: str) -> Dict[str, Any]:
    _, predictor = _train_and_score(dataset, architecture, preset, config)
    by_style: Dict[str, list] = {}
    for section in dataset.sections:
        by_style.setdefault(section.brain, []).append(section)
    runs = [sorted(s, key=lambda x: x.z)[:3] for s in by_style.values() if len(s) >= 3]
    if not runs:
        raise ValueError("z-consistency needs a style with at least 3 consecutive sections")
    sections = runs[0]
    predictions = [predictor.predict_section(s, default_tile()) for s in sections]
    cortex = [downsample_labels((s.segmask == GM).astype(np.uint8)) == 1 for s in sections]
    result = z_consistency(predictions, cortex)
    result["sections"] = [s.name for s in sections]
    return result


def _two_step(dataset: Dataset, preset: str, config: TrainConfig) -> Dict[str, Any]:
    gmwm = settings.PARCELLATION["gmwm"]
    result = train_gmwm_two_step(
        dataset,
        config,
        subset_size=gmwm["subset_sections"],
        background_weight=gmwm["background_weight"],
        preset=preset,
        tile=default_tile(),
    )
    report = evaluate(result.tissue_model, dataset, split="test", tile=default_tile(), scheme=tissue_scheme())
    dice = report.per_class_dice
    return {"bg_dice": dice[0], "gm_dice": dice[1], "wm_dice": dice[2], "mean_dice": report.mean_dice}


def check_acceptance(kind: str, median: Dict[str, float]) -> Dict[str, Any]:
    """Each threshold of ``kind`` against the median over seeds; missing or NaN values fail."""
    criteria = {}
    for key, comparison, threshold in ACCEPTANCE[kind]:
        value = median.get(key)
        passed = value is not None and bool(np.isfinite(value)) and _COMPARE[comparison](value, threshold)
        criteria[key] = {"value": value, "rule": f"{comparison} {threshold}", "passed": bool(passed)}
    return criteria


def run_experiment(
    kind: str,
    dataset_path,
    out_dir,
    seeds: Sequence[int],
    preset: str,
    config: TrainConfig,
    architecture: str = "atlas-aware",
) -> Dict[str, Any]:
    if kind not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {kind!r}; choose from {EXPERIMENTS}")
    dataset = Dataset.load(dataset_path)
    rows = []
    for seed in seeds:
        seeded = replace(config, seed=seed)
        logger.info("Experiment %s, seed %d", kind, seed)
        if kind == "ablation":
            row = _ablation(dataset, preset, seeded)
        elif kind == "transfer":
            row = _transfer(dataset, preset, seeded, architecture)
        elif kind == "orientation":
            row = _orientation(dataset, preset, seeded, "base")
        elif kind == "two-step":
            row = _two_step(dataset, preset, seeded)
        else:
            row = _z_consistency(dataset, preset, seeded, architecture)
        rows.append({"seed": seed, **row})

    numeric = {
        key for row in rows for key, value in row.items()
        if key != "seed" and isinstance(value, (int, float)) and not isinstance(value, bool)
    }
    numeric.update(key for key, _, _ in ACCEPTANCE[kind])
    median = {key: _median([row.get(key) for row in rows]) for key in sorted(numeric)}
    criteria = check_acceptance(kind, median)
    summary = {
        "kind": kind,
        "dataset": str(dataset_path),
        "preset": preset,
        "train_config": config.to_dict(),
        "seeds": list(seeds),
        "runs": rows,
        "median": median,
        "criteria": criteria,
        "passed": all(c["passed"] for c in criteria.values()),
        "versions": _versions(),
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / f"{kind}.json", summary)
    return summary
