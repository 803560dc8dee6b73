import hashlib
import io
import json
import shutil
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from parcellation import cli
from parcellation.fileio import read_json, read_pgm
from parcellation.models import EvaluationRecord, SyntheticDataset, TrainingRun
from parcellation.netbuilder import REFERENCE_PARAMETER_COUNT, REFERENCE_RECEPTIVE_FIELD, TileSpec, preset_config
from parcellation.pipeline import Dataset, area_scheme, evaluate
from parcellation.services import ACCEPTANCE, EXPERIMENTS, check_acceptance, load_predictor
from parcellation.tensor import count_parameters

TINY_TRAIN = ["--preset", "tiny", "--schedule", "tiny", "--orientation", "none"]
TILE = ["--core", "64", "--overlap", "640"]


def parcel(*args):
    out = io.StringIO()
    call_command("parcel", *[str(a) for a in args], stdout=out, stderr=io.StringIO())
    return out.getvalue()


def tree_digest(root):
    digest = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digest


class InspectCommandTests(TestCase):
    def test_canonical_manifest(self):
        manifest = json.loads(parcel("inspect", "--config", "canonical"))
        self.assertEqual(manifest["receptive_field"], 1169)
        self.assertEqual(manifest["output_stride"], 8)
        self.assertEqual(manifest["reference_receptive_field"], REFERENCE_RECEPTIVE_FIELD)
        self.assertEqual(manifest["reference_parameter_count"], REFERENCE_PARAMETER_COUNT)
        self.assertEqual(manifest["parameter_count"], count_parameters(preset_config("canonical", 16)))
        self.assertEqual(manifest["architecture"], "base")

    def test_atlas_aware_adds_parameters(self):
        base = json.loads(parcel("inspect", "--config", "desk"))
        atlas = json.loads(parcel("inspect", "--config", "desk", "--arch", "atlas-aware"))
        self.assertGreater(atlas["parameter_count"], base["parameter_count"])
        self.assertEqual(atlas["output_stride"], 8)

    def test_manage_entry_point(self):
        import manage

        out = io.StringIO()
        with redirect_stdout(out):
            manage.main(["manage.py", "parcel", "inspect", "--config", "tiny"])
        self.assertEqual(json.loads(out.getvalue())["output_stride"], 8)
        with redirect_stderr(io.StringIO()), self.assertRaises(SystemExit) as caught:
            manage.main(["manage.py", "parcel", "inspect", "--arch", "wide"])
        self.assertEqual(caught.exception.code, 1)


class ExitCodeTests(TestCase):
    def run_cli(self, *argv):
        with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()) as err:
            code = cli.run([str(a) for a in argv])
        return code, err.getvalue()

    def test_success(self):
        self.assertEqual(self.run_cli("inspect", "--config", "tiny")[0], 0)

    def test_bad_arguments(self):
        code, err = self.run_cli("inspect", "--arch", "wide")
        self.assertEqual(code, 1)
        self.assertIn("CommandError", err)
        self.assertEqual(self.run_cli("reticulate")[0], 1)

    def test_validation_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, err = self.run_cli("generate", "--out", Path(tmp) / "data", "--sections", 3)
        self.assertEqual(code, 1)
        self.assertIn("at least 6 sections", err)

    def test_missing_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _ = self.run_cli("train", "--dataset", Path(tmp) / "nothing", "--out", Path(tmp) / "ckpt",
                                   *TINY_TRAIN)
        self.assertEqual(code, 1)


class AcceptanceTests(SimpleTestCase):
    def test_every_experiment_has_thresholds(self):
        self.assertEqual(set(ACCEPTANCE), set(EXPERIMENTS))

    def test_ablation_thresholds(self):
        passing = {"dice_gain": 0.06, "twin_gain": 0.12, "epsilon_drop": 1.5}
        self.assertTrue(all(c["passed"] for c in check_acceptance("ablation", passing).values()))
        criteria = check_acceptance("ablation", {**passing, "twin_gain": 0.09, "epsilon_drop": 0.0})
        self.assertFalse(criteria["twin_gain"]["passed"])
        self.assertFalse(criteria["epsilon_drop"]["passed"])
        self.assertTrue(criteria["dice_gain"]["passed"])

    def test_boundaries_and_missing_values(self):
        self.assertTrue(check_acceptance("z-consistency", {"min": 0.8})["min"]["passed"])
        self.assertFalse(check_acceptance("z-consistency", {"min": 0.79})["min"]["passed"])
        transfer = check_acceptance("transfer", {"epsilon_ratio": 2.0, "frequent_dice_held_out": float("nan")})
        self.assertTrue(transfer["epsilon_ratio"]["passed"])
        self.assertFalse(transfer["frequent_dice_held_out"]["passed"])
        two_step = check_acceptance("two-step", {"bg_dice": 0.95, "gm_dice": 0.85})
        self.assertEqual([k for k, c in two_step.items() if not c["passed"]], ["wm_dice"])
        self.assertTrue(check_acceptance("orientation", {"dice_gain": 0.0})["dice_gain"]["passed"])


class GenerateCommandTests(TestCase):
    def test_generation_is_reproducible(self):
        with tempfile.TemporaryDirectory() as tmp:
            first, second = Path(tmp) / "a", Path(tmp) / "b"
            for out in (first, second):
                parcel("generate", "--out", out, "--sections", 6, "--styles", 2, "--size", 256)
            self.assertEqual(tree_digest(first), tree_digest(second))
            self.assertTrue((first / "sections" / "brain1_z00" / "image.pgm").exists())
            self.assertFalse((first / "run.log.jsonl").exists())
        self.assertEqual(SyntheticDataset.objects.count(), 2)
        row = SyntheticDataset.objects.get(path=str(first.resolve()))
        self.assertEqual((row.section_count, row.style_count, row.seed), (6, 2, 0))


class WorkflowTests(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tmp = Path(tempfile.mkdtemp())
        super().setUpClass()

    @classmethod
    def tearDownClass(cls):
        super().tearDownClass()
        shutil.rmtree(cls.tmp, ignore_errors=True)

    @classmethod
    def setUpTestData(cls):
        cls.dataset = cls.tmp / "data"
        cls.checkpoint = cls.tmp / "atlas"
        parcel("generate", "--out", cls.dataset, "--sections", 6, "--styles", 2, "--size", 256)
        parcel("train", "--dataset", cls.dataset, "--out", cls.checkpoint, "--arch", "atlas-aware", *TINY_TRAIN)

    def test_training_outputs(self):
        manifest = read_json(self.checkpoint / "manifest.json")
        self.assertEqual(manifest["scheme"], "areas")
        self.assertEqual(manifest["train_config"]["iterations"], 6)
        self.assertEqual(manifest["train_config"]["phase1_iterations"], 3)
        curves = (self.checkpoint / "curves.csv").read_text().splitlines()
        self.assertEqual(len(curves), 7)
        log_lines = (self.checkpoint / "run.log.jsonl").read_text().splitlines()
        self.assertTrue(any(json.loads(line).get("iteration") == 6 for line in log_lines))

        run = TrainingRun.objects.get(checkpoint_path=str(self.checkpoint.resolve()))
        self.assertEqual(run.status, TrainingRun.STATUS_DONE)
        self.assertEqual(run.architecture, "atlas-aware")
        self.assertIsNotNone(run.final_loss)

    def test_predict_then_evaluate_matches_in_process(self):
        predictions = self.tmp / "predictions"
        parcel("predict", "--checkpoint", self.checkpoint, "--dataset", self.dataset, "--out", predictions, *TILE)
        dataset = Dataset.load(self.dataset)
        for name in dataset.splits["test"]:
            self.assertEqual(read_pgm(predictions / name / "labels.pgm").shape, (32, 32))
            self.assertTrue((predictions / name / "overlay.ppm").exists())

        from_files = json.loads(parcel("evaluate", "--predictions", predictions, "--dataset", self.dataset,
                                       "--out", self.tmp / "eval-files", *TILE))
        from_checkpoint = json.loads(parcel("evaluate", "--checkpoint", self.checkpoint, "--dataset", self.dataset,
                                            "--out", self.tmp / "eval-ckpt", *TILE))
        predictor, _ = load_predictor(self.checkpoint)
        report = evaluate(predictor, dataset, "test", TileSpec(64, 640), area_scheme(dataset.class_names))

        self.assertEqual(from_files, from_checkpoint)
        self.assertEqual(from_files["sections"], len(dataset.splits["test"]))
        self.assertAlmostEqual(from_files["mean_dice"], report.mean_dice, places=5)
        self.assertAlmostEqual(from_files["epsilon"], report.epsilon, places=5)
        self.assertTrue((self.tmp / "eval-ckpt" / "report.xlsx").exists())

        records = EvaluationRecord.objects.all()
        self.assertEqual(records.count(), 2)
        run = TrainingRun.objects.get(checkpoint_path=str(self.checkpoint.resolve()))
        self.assertEqual({r.run_id for r in records}, {run.pk})

    def test_full_truth_scores_every_pixel(self):
        out = json.loads(parcel("evaluate", "--checkpoint", self.checkpoint, "--dataset", self.dataset,
                                "--out", self.tmp / "eval-full", "--truth", "full", *TILE))
        report = read_json(self.tmp / "eval-full" / "report.json")
        self.assertEqual(report["evaluated_pixels"], 32 * 32 * out["sections"])

    def test_failed_training_is_recorded(self):
        failed = self.tmp / "failed"
        with self.assertRaises(CommandError) as ctx:
            parcel("train", "--dataset", self.dataset, "--out", failed, "--arch", "base",
                   *TINY_TRAIN, "--patch-size", 512)
        self.assertEqual(ctx.exception.returncode, 1)
        run = TrainingRun.objects.get(checkpoint_path=str(failed.resolve()))
        self.assertEqual(run.status, TrainingRun.STATUS_FAILED)
        self.assertIn("patch size", run.message)

    def test_laplace_exports(self):
        out = self.tmp / "fields"
        parcel("laplace", "--dataset", self.dataset, "--section", "brain1_z00", "--out", out)
        for name in ("field.ptnsr", "field.ppm", "orientation.ppm"):
            self.assertTrue((out / "brain1_z00" / name).exists())
        manifest = read_json(out / "manifest.json")
        self.assertEqual([f["section"] for f in manifest["fields"]], ["brain1_z00"])
        self.assertTrue((out / "run.log.jsonl").exists())

    def test_two_step_segmentation(self):
        out = self.tmp / "gmwm"
        parcel("train-gmwm", "--dataset", self.dataset, "--out", out, "--subset", 2, *TINY_TRAIN)
        tissue = read_json(out / "tissue" / "manifest.json")
        self.assertEqual(tissue["class_names"], ["bg", "gm", "wm"])
        self.assertEqual(tissue["scheme"], "tissue")
        self.assertEqual(read_json(out / "cortex" / "manifest.json")["background_weight"], 0.5)
        self.assertEqual(
            set(TrainingRun.objects.filter(architecture__startswith="gmwm").values_list("architecture", flat=True)),
            {"gmwm-cortex", "gmwm-tissue"},
        )

        masks = self.tmp / "masks"
        parcel("segment", "--checkpoint", out / "tissue", "--dataset", self.dataset, "--out", masks, *TILE)
        name = Dataset.load(self.dataset).splits["test"][0]
        mask = read_pgm(masks / name / "segmask.pgm")
        self.assertEqual(mask.shape, (256, 256))
        self.assertTrue((mask < 3).all())

        with self.assertRaises(CommandError):
            parcel("segment", "--checkpoint", self.checkpoint, "--dataset", self.dataset,
                   "--out", self.tmp / "wrong", *TILE)

    def test_z_consistency_experiment(self):
        out = self.tmp / "experiment"
        printed = parcel("experiment", "--kind", "z-consistency", "--dataset", self.dataset, "--out", out,
                         "--seeds", 0, "--arch", "base", *TINY_TRAIN)
        summary = read_json(out / "z-consistency.json")
        self.assertEqual(summary["seeds"], [0])
        self.assertEqual(len(summary["runs"]), 1)
        self.assertEqual(len(summary["runs"][0]["sections"]), 3)
        self.assertTrue(0.0 <= summary["median"]["min"] <= summary["median"]["mean"] <= 1.0)
        self.assertIn('"kind": "z-consistency"', printed)
        self.assertEqual(summary["criteria"]["min"]["rule"], ">= 0.8")
        self.assertEqual(summary["passed"], summary["median"]["min"] >= 0.8)
