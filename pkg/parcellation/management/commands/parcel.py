import json
import sys
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from parcellation import services
from parcellation.logs import run_log
from parcellation.netbuilder import PRESETS, TileSpec
from parcellation.pipeline import ORIENTATIONS, TRAIN_PRESETS, TrainConfig


def _add_tile_arguments(parser):
    tiling = settings.PARCELLATION["tiling"]
    parser.add_argument("--core", type=int, default=tiling["core"], help="Tile core in pixels (multiple of 64).")
    parser.add_argument(
        "--overlap", type=int, default=tiling["overlap"], help="Tile overlap in pixels (multiple of 64)."
    )


def _add_train_arguments(parser):
    parser.add_argument("--dataset", required=True, help="Dataset directory written by 'generate'.")
    parser.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="Architecture preset.")
    parser.add_argument(
        "--schedule", choices=sorted(TRAIN_PRESETS), default="desk", help="Training schedule preset."
    )
    parser.add_argument("--config", default=None, help="Run-config JSON overlaid on the schedule.")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--iterations", type=int, default=None)
    parser.add_argument("--phase1", type=int, default=None, help="Image-only iterations (atlas-aware nets).")
    parser.add_argument("--patch-size", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--orientation", choices=ORIENTATIONS, default=None)
    parser.add_argument("--prefetch", type=int, default=None, help="Patch queue depth; 0 samples inline.")


def _train_config(options) -> TrainConfig:
    phase1 = options["phase1"]
    if phase1 is None and options["iterations"] is not None:
        phase1 = options["iterations"] // 2
    config = TrainConfig.preset(
        options["schedule"],
        seed=options["seed"],
        iterations=options["iterations"],
        phase1_iterations=phase1,
        patch_size=options["patch_size"],
        batch_size=options["batch_size"],
        learning_rate=options["lr"],
        orientation=options["orientation"],
        prefetch=options["prefetch"],
    )
    if options["config"]:
        config = TrainConfig.from_json(options["config"], base=config)
    return config


def _tile(options) -> TileSpec:
    return TileSpec(core=options["core"], overlap=options["overlap"])


class Command(BaseCommand):
    help = "Synthetic data, training, prediction and evaluation for cortical area parcellation."

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        # argument errors become CommandError(returncode=1)
        parser.called_from_command_line = False
        return parser

    def run_from_argv(self, argv):
        try:
            super().run_from_argv(argv)
        except CommandError as exc:
            self.stderr.write(f"{exc.__class__.__name__}: {exc}")
            sys.exit(exc.returncode)

    def add_arguments(self, parser):
        actions = parser.add_subparsers(dest="action", required=True)

        generate = actions.add_parser("generate", help="Write a synthetic dataset.")
        generate.add_argument("--out", required=True)
        generate.add_argument("--sections", type=int, default=12)
        generate.add_argument("--styles", type=int, default=4)
        generate.add_argument("--seed", type=int, default=0)
        generate.add_argument("--size", type=int, default=None, help="Section side in pixels.")
        generate.add_argument("--areas", type=int, default=None, help="Number of cortical areas.")

        train = actions.add_parser("train", help="Train a base or atlas-aware network.")
        _add_train_arguments(train)
        train.add_argument("--out", required=True, help="Checkpoint directory.")
        train.add_argument("--arch", choices=services.ARCHITECTURES, default="atlas-aware")

        gmwm = actions.add_parser("train-gmwm", help="Two-step gm/wm/bg segmentation training.")
        _add_train_arguments(gmwm)
        gmwm.add_argument("--out", required=True, help="Directory for the cortex/ and tissue/ checkpoints.")
        gmwm.add_argument("--subset", type=int, default=settings.PARCELLATION["gmwm"]["subset_sections"])
        gmwm.add_argument(
            "--background-weight", type=float, default=settings.PARCELLATION["gmwm"]["background_weight"]
        )
        gmwm.add_argument(
            "--reference-subset-labels",
            dest="derive_subset_labels",
            action="store_false",
            help="Train step 2 on the reference gm/wm/bg masks instead of step-1 cortex predictions.",
        )

        predict = actions.add_parser("predict", help="Write stride-8 label maps and overlays.")
        predict.add_argument("--checkpoint", required=True)
        predict.add_argument("--dataset", required=True)
        predict.add_argument("--split", default="test")
        predict.add_argument("--out", required=True)
        _add_tile_arguments(predict)

        evaluate = actions.add_parser("evaluate", help="Dice, confusion and distance error.")
        source = evaluate.add_mutually_exclusive_group(required=True)
        source.add_argument("--checkpoint")
        source.add_argument("--predictions", help="Directory written by 'predict'.")
        evaluate.add_argument("--dataset", required=True)
        evaluate.add_argument("--split", default="test")
        evaluate.add_argument("--out", required=True)
        evaluate.add_argument(
            "--truth",
            choices=("annotated", "full"),
            default="annotated",
            help="Score against the delineated areas or the complete synthetic labels.",
        )
        _add_tile_arguments(evaluate)

        laplace = actions.add_parser("laplace", help="Solve and export the Laplacian depth field.")
        laplace.add_argument("--dataset", required=True)
        laplace.add_argument("--section", action="append", default=[], help="Section name (repeatable).")
        laplace.add_argument("--split", default="all")
        laplace.add_argument("--out", required=True)

        inspect = actions.add_parser("inspect", help="Print receptive field, stride and parameter count.")
        inspect.add_argument("--arch", choices=services.ARCHITECTURES, default="base")
        inspect.add_argument("--config", choices=sorted(PRESETS), default="canonical")
        inspect.add_argument("--classes", type=int, default=16)
        inspect.add_argument("--atlas-channels", type=int, default=13)

        segment = actions.add_parser("segment", help="Predict gm/wm/bg masks with a tissue checkpoint.")
        segment.add_argument("--checkpoint", required=True)
        segment.add_argument("--dataset", required=True)
        segment.add_argument("--split", default="test")
        segment.add_argument("--out", required=True)
        _add_tile_arguments(segment)

        experiment = actions.add_parser("experiment", help="Multi-seed synthetic experiments.")
        _add_train_arguments(experiment)
        experiment.add_argument("--kind", choices=services.EXPERIMENTS, required=True)
        experiment.add_argument("--out", required=True)
        experiment.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
        experiment.add_argument("--arch", choices=services.ARCHITECTURES, default="atlas-aware")

    def handle(self, *args, **options):
        action = options["action"]
        handler = getattr(self, f"handle_{action.replace('-', '_')}")
        try:
            handler(options)
        except CommandError:
            raise
        except (ValueError, FileNotFoundError, KeyError) as exc:
            raise CommandError(str(exc), returncode=1) from exc
        except RuntimeError as exc:
            raise CommandError(str(exc), returncode=2) from exc

    def handle_generate(self, options):
        dataset = services.generate(
            options["out"],
            sections=options["sections"],
            styles=options["styles"],
            seed=options["seed"],
            size=options["size"],
            areas=options["areas"],
        )
        self.stdout.write(
            self.style.SUCCESS(
                f"Saved {len(dataset.sections)} sections to {options['out']} "
                f"(train={len(dataset.splits['train'])}, test={len(dataset.splits['test'])})"
            )
        )

    def handle_train(self, options):
        config = _train_config(options)
        with run_log(options["out"]):
            run = services.train_model(options["dataset"], options["out"], options["arch"], options["preset"], config)
        self.stdout.write(
            self.style.SUCCESS(
                f"Saved {run.architecture} checkpoint to {options['out']} "
                f"(loss {run.initial_loss:.4f} -> {run.final_loss:.4f})"
            )
        )

    def handle_train_gmwm(self, options):
        config = _train_config(options)
        with run_log(options["out"]):
            paths = services.train_gmwm(
                options["dataset"],
                options["out"],
                options["preset"],
                config,
                subset=options["subset"],
                background_weight=options["background_weight"],
                derive_subset_labels=options["derive_subset_labels"],
            )
        self.stdout.write(self.style.SUCCESS(f"Saved cortex={paths['cortex']} tissue={paths['tissue']}"))

    def handle_predict(self, options):
        with run_log(options["out"]):
            written = services.predict(
                options["checkpoint"], options["dataset"], options["split"], options["out"], _tile(options)
            )
        self.stdout.write(self.style.SUCCESS(f"Predicted {len(written)} sections into {options['out']}"))

    def handle_evaluate(self, options):
        source = options["checkpoint"] or options["predictions"]
        with run_log(options["out"]):
            _, report = services.evaluate_checkpoint(
                source,
                options["dataset"],
                options["split"],
                options["out"],
                tile=_tile(options),
                truth=options["truth"],
            )
        summary = report.to_json()
        self.stdout.write(json.dumps({k: summary[k] for k in ("mean_dice", "epsilon", "sections")}))

    def handle_laplace(self, options):
        with run_log(options["out"]):
            results = services.laplace(
                options["dataset"], options["out"], names=options["section"], split=options["split"]
            )
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(results)} Laplace fields to {options['out']}"))

    def handle_inspect(self, options):
        manifest = services.inspect(
            options["arch"], options["config"], classes=options["classes"], atlas_channels=options["atlas_channels"]
        )
        self.stdout.write(json.dumps(manifest, indent=2))

    def handle_segment(self, options):
        with run_log(options["out"]):
            written = services.segment(
                options["checkpoint"], options["dataset"], options["split"], options["out"], _tile(options)
            )
        self.stdout.write(self.style.SUCCESS(f"Segmented {len(written)} sections into {options['out']}"))

    def handle_experiment(self, options):
        config = _train_config(options)
        with run_log(options["out"]):
            summary = services.run_experiment(
                options["kind"],
                options["dataset"],
                options["out"],
                seeds=options["seeds"],
                preset=options["preset"],
                config=config,
                architecture=options["arch"],
            )
        brief = {"kind": summary["kind"], "median": summary["median"], "passed": summary["passed"]}
        self.stdout.write(json.dumps(brief))
        self.stdout.write(self.style.SUCCESS(f"Saved {Path(options['out']) / (summary['kind'] + '.json')}"))
