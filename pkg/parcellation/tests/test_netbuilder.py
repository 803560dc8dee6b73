import tempfile
from types import SimpleNamespace

import numpy as np
from django.test import SimpleTestCase

from parcellation.netbuilder import (
    REFERENCE_PARAMETER_COUNT,
    REFERENCE_RECEPTIVE_FIELD,
    TINY_WIDTHS,
    ArchitectureConfig,
    ArchitectureError,
    BlockSpec,
    ConvSpec,
    Model,
    TileError,
    TileSpec,
    architecture_manifest,
    build_atlas_aware_net,
    build_base_net,
    canonical_config,
    load_checkpoint,
    normalize_image,
    predict_section,
    preset_config,
    save_checkpoint,
)
from parcellation.tensor import ShapeError, count_parameters, cross_entropy, grad_check, make_rng


def micro_config(num_classes=4):
    """Pointwise convs only: receptive field 61, so 64-pixel overlaps suffice."""
    return canonical_config(num_classes, widths=TINY_WIDTHS, convs_per_block=1, kernel=1, input_kernel=1, name="micro")


def random_image(shape, seed=0):
    return make_rng(seed).integers(0, 256, size=shape).astype(np.uint8)


class ConfigTests(SimpleTestCase):
    def test_canonical_manifest(self):
        manifest = architecture_manifest(canonical_config(16))
        self.assertEqual(manifest["receptive_field"], 1169)
        self.assertEqual(manifest["output_stride"], 8)
        self.assertEqual(manifest["reference_receptive_field"], REFERENCE_RECEPTIVE_FIELD)
        self.assertEqual(manifest["reference_parameter_count"], REFERENCE_PARAMETER_COUNT)
        self.assertGreaterEqual(manifest["receptive_field"], 1000)
        self.assertLessEqual(manifest["receptive_field"], 2000)

    def test_presets_share_topology(self):
        for preset in ("canonical", "desk", "tiny"):
            for atlas in (0, 13):
                config = preset_config(preset, 16, atlas_channels=atlas)
                config.validate()
                self.assertEqual(architecture_manifest(config)["output_stride"], 8)
        self.assertEqual(architecture_manifest(micro_config())["receptive_field"], 61)

    def test_unknown_preset_raises(self):
        with self.assertRaises(ArchitectureError):
            preset_config("huge", 16)

    def test_input_block_must_have_stride_four(self):
        blocks = list(canonical_config(4).blocks)
        blocks[0] = BlockSpec("b1", "input", (ConvSpec(5, 2, 16),))
        with self.assertRaises(ArchitectureError):
            ArchitectureConfig(blocks=tuple(blocks), num_classes=4).validate()

    def test_classifier_must_be_plain_conv(self):
        blocks = list(canonical_config(4).blocks)
        blocks[-1] = BlockSpec("b10", "output", (ConvSpec(1, 1, 4),))
        with self.assertRaises(ArchitectureError):
            ArchitectureConfig(blocks=tuple(blocks), num_classes=4).validate()

    def test_contracting_block_must_pool(self):
        blocks = list(canonical_config(4).blocks)
        blocks[1] = BlockSpec("b2", "contracting", blocks[1].convs, pool=False)
        with self.assertRaises(ArchitectureError):
            ArchitectureConfig(blocks=tuple(blocks), num_classes=4).validate()

    def test_atlas_channels_without_path_raise(self):
        config = canonical_config(4)
        with self.assertRaises(ArchitectureError):
            ArchitectureConfig(blocks=config.blocks, num_classes=4, atlas_channels=3).validate()

    def test_base_builder_rejects_atlas_config(self):
        with self.assertRaises(ArchitectureError):
            build_base_net(preset_config("tiny", 4, atlas_channels=2))
        with self.assertRaises(ArchitectureError):
            build_atlas_aware_net(preset_config("tiny", 4))

    def test_dict_round_trip(self):
        config = preset_config("desk", 9, atlas_channels=6)
        self.assertEqual(ArchitectureConfig.from_dict(config.to_dict()), config)


class ForwardTests(SimpleTestCase):
    def test_desk_output_is_stride_eight(self):
        model = build_base_net(preset_config("desk", 16), seed=0)
        out = model.forward(np.zeros((1, 1, 256, 256), dtype=np.float32), mode="eval")
        self.assertEqual(out.shape, (1, 16, 32, 32))
        self.assertEqual(model.parameter_count, count_parameters(model.config))

    def test_atlas_aware_shapes(self):
        model = build_atlas_aware_net(preset_config("desk", 16, atlas_channels=13), seed=0)
        image = normalize_image(random_image((1, 1, 256, 256)))
        atlas = make_rng(1).random((1, 13, 64, 64)).astype(np.float32)
        self.assertEqual(model.forward(image, atlas, mode="eval").shape, (1, 16, 32, 32))
        zero = model.forward(image, np.zeros_like(atlas), mode="eval")
        self.assertTrue(np.isfinite(zero.data).all())

    def test_atlas_inputs_are_checked(self):
        model = build_atlas_aware_net(preset_config("tiny", 5, atlas_channels=3), seed=0)
        image = np.zeros((1, 1, 64, 64), dtype=np.float32)
        with self.assertRaises(ShapeError):
            model.forward(image)
        with self.assertRaises(ShapeError):
            model.forward(image, np.zeros((1, 2, 16, 16), dtype=np.float32))
        with self.assertRaises(ShapeError):
            model.forward(np.zeros((1, 1, 96, 96), dtype=np.float32), np.zeros((1, 3, 24, 24), dtype=np.float32))

    def test_gradient_reaches_atlas_path(self):
        model = build_atlas_aware_net(preset_config("tiny", 5, atlas_channels=3), seed=2)
        rng = make_rng(3)
        image = rng.normal(size=(2, 1, 64, 64)).astype(np.float32)
        atlas = rng.random((2, 3, 16, 16)).astype(np.float32)
        targets = rng.integers(0, 5, size=(2, 8, 8))
        cross_entropy(model.forward(image, atlas, mode="train"), targets, (1.0,) * 5).backward()
        norm = sum(float(np.abs(t.grad).sum()) for layer in model.atlas_parameters() for _, t in layer.learnable())
        self.assertGreater(norm, 0.0)

    def test_parameter_groups_partition(self):
        model = build_atlas_aware_net(preset_config("tiny", 5, atlas_channels=3))
        atlas = {id(layer) for layer in model.atlas_parameters()}
        image = {id(layer) for layer in model.image_parameters()}
        self.assertFalse(atlas & image)
        self.assertEqual(len(atlas) + len(image), len(model.parameters()))
        self.assertTrue(atlas)

    def test_outputs_are_finite_and_repeatable(self):
        model = build_base_net(preset_config("tiny", 4), seed=5)
        image = normalize_image(random_image((1, 1, 128, 128)))
        first = model.forward(image, mode="eval").data
        second = model.forward(image, mode="eval").data
        self.assertTrue(np.isfinite(first).all())
        np.testing.assert_array_equal(first, second)

    def test_duplicated_batch_gives_identical_items(self):
        model = build_base_net(preset_config("tiny", 4), seed=6)
        image = normalize_image(random_image((1, 1, 64, 64)))
        out = model.forward(np.concatenate([image, image]), mode="train").data
        np.testing.assert_allclose(out[0], out[1], rtol=1e-5, atol=1e-6)

    def test_same_seed_same_weights(self):
        a = Model.build(preset_config("tiny", 4), seed=9).named_arrays()
        b = Model.build(preset_config("tiny", 4), seed=9).named_arrays()
        self.assertEqual(a.keys(), b.keys())
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])


class CheckpointTests(SimpleTestCase):
    def test_save_and_load_reproduce_predictions(self):
        model = build_atlas_aware_net(preset_config("tiny", 5, atlas_channels=3), seed=4, class_names=list("abcde"))
        rng = make_rng(0)
        image = rng.normal(size=(2, 1, 64, 64)).astype(np.float32)
        atlas = rng.random((2, 3, 16, 16)).astype(np.float32)
        model.forward(image, atlas, mode="train")  # moves running statistics off their defaults
        with tempfile.TemporaryDirectory() as tmp:
            save_checkpoint(model, tmp, {"orientation": "none"})
            loaded = load_checkpoint(tmp)
        self.assertEqual(loaded.mode, "eval")
        self.assertEqual(loaded.class_names, list("abcde"))
        self.assertEqual(loaded.config, model.config)
        for name, array in model.named_arrays().items():
            np.testing.assert_array_equal(loaded.named_arrays()[name], array)
        np.testing.assert_array_equal(loaded.predict(image, atlas), model.predict(image, atlas))

    def test_missing_checkpoint_raises(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(FileNotFoundError):
                load_checkpoint(tmp)


class WholeNetworkGradCheckTests(SimpleTestCase):
    def check(self, model, atlas_channels, seed):
        model = model.astype(np.float64)
        rng = make_rng(seed)
        image = rng.normal(size=(2, 1, 64, 64))
        atlas = rng.random((2, atlas_channels, 16, 16)) if atlas_channels else None
        n = model.config.num_classes
        targets = rng.integers(0, n, size=(2, 8, 8))
        wrt = [t for layer in model.parameters() for _, t in layer.learnable()]

        def loss():
            return cross_entropy(model.forward(image, atlas, mode="train"), targets, (1.0,) * n)

        return grad_check(loss, wrt, tolerance=1e-2, samples=2, seed=seed)

    def test_base_net(self):
        for seed in range(2):
            result = self.check(build_base_net(preset_config("tiny", 4), seed=seed), 0, seed)
            self.assertTrue(result.passed, (seed, result))
            self.assertGreater(result.checked, 0)

    def test_atlas_aware_net(self):
        for seed in range(2):
            model = build_atlas_aware_net(preset_config("tiny", 4, atlas_channels=3), seed=seed)
            result = self.check(model, 3, seed)
            self.assertTrue(result.passed, (seed, result))


class TiledPredictionTests(SimpleTestCase):
    def test_single_tile_matches_forward(self):
        model = build_base_net(preset_config("tiny", 4), seed=1)
        section = SimpleNamespace(image=random_image((128, 128), seed=1), atlas=None)
        labels = predict_section(model, section)
        direct = model.predict(normalize_image(section.image)[None, None])[0]
        np.testing.assert_array_equal(labels, direct)

    def test_two_tiles_match_whole_image(self):
        model = build_base_net(micro_config(), seed=2)
        section = SimpleNamespace(image=random_image((256, 256), seed=2), atlas=None)
        tiled = predict_section(model, section, TileSpec(core=64, overlap=64))
        whole = model.predict(normalize_image(section.image)[None, None])[0]
        np.testing.assert_array_equal(tiled[:, 12:20], whole[:, 12:20])

    def test_atlas_aware_tiles(self):
        config = canonical_config(4, atlas_channels=2, widths=TINY_WIDTHS, convs_per_block=1, kernel=1,
                                  input_kernel=1, name="micro")
        model = build_atlas_aware_net(config, seed=3)
        rng = make_rng(3)
        section = SimpleNamespace(image=random_image((256, 192), seed=3), atlas=rng.random((2, 64, 48)))
        tiled = predict_section(model, section, TileSpec(core=64, overlap=64))
        whole = model.predict(
            normalize_image(section.image)[None, None], section.atlas[None].astype(np.float32)
        )[0]
        np.testing.assert_array_equal(tiled[12:20], whole[12:20])

    def test_output_is_ceiling_of_stride(self):
        model = build_base_net(micro_config(), seed=0)
        section = SimpleNamespace(image=random_image((100, 130)), atlas=None)
        self.assertEqual(predict_section(model, section, TileSpec(core=64, overlap=64)).shape, (13, 17))

    def test_tile_constraints(self):
        model = build_base_net(preset_config("tiny", 4))
        section = SimpleNamespace(image=random_image((64, 64)), atlas=None)
        with self.assertRaises(TileError):
            predict_section(model, section, TileSpec(core=32, overlap=640))
        with self.assertRaises(TileError):
            predict_section(model, section, TileSpec(core=64, overlap=64))
