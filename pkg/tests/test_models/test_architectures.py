from dataclasses import replace
import numpy as np
import pytest
from models import nnprims as nn
from models.architectures import (MIN_WIDTH_SCALE, Architecture, ArchitectureHyper, EncoderConfig, EncoderFamily,
                                  ModelConfig, WeightInit, build, load_model, load_warmstart, save_checkpoint)
from models.dataio import ExperimentKind
from models.nnprims import count_params, grad_check, init_random
from models.training import soft_dice_batch_loss
from utils.errors import CheckpointError, ConfigurationError, ShapeError
from utils.rng import RngStream

LUNG = ExperimentKind.LUNG_SEGMENTATION
PAIRS = [(a, f) for a in Architecture for f in EncoderFamily]


def _initialized(config, dtype=np.float32, seed=0):
    model, store = build(config, dtype=dtype)
    init_random(store, RngStream(seed))
    return model, store


def _conv_bn(cin, cout, k=3):
    return cin * cout * k * k + 2 * cout


def _side(architecture):
    return 8 if architecture is Architecture.PSPNET else 32


class TestModelConfig:
    """Test suite for architecture/encoder configuration rules"""

    def test_pspnet_depth_five_rejected(self):
        """Test PSPNet only accepts a depth-3 encoder"""
        config = ModelConfig(LUNG, Architecture.PSPNET, EncoderConfig(EncoderFamily.PLAIN_CONV_STACK, 5))
        with pytest.raises(ConfigurationError):
            build(config)

    def test_unet_depth_three_rejected(self):
        config = ModelConfig(LUNG, Architecture.UNET, EncoderConfig(EncoderFamily.RESIDUAL, 3))
        with pytest.raises(ConfigurationError):
            config.validate()

    def test_create_picks_depth(self):
        assert ModelConfig.create(LUNG, Architecture.PSPNET, EncoderFamily.RESIDUAL).encoder.depth == 3
        assert ModelConfig.create(LUNG, Architecture.FPN, EncoderFamily.RESIDUAL).encoder.depth == 5

    def test_dict_round_trip_keeps_hash(self):
        config = ModelConfig.create(ExperimentKind.LESION_SEGMENTATION_B, Architecture.LINKNET,
                                    EncoderFamily.DEPTHWISE_SEPARABLE, 0.25, WeightInit("random", 3))
        again = ModelConfig.from_dict(config.to_dict())
        assert again == config
        assert again.config_hash() == config.config_hash()

    def test_warmstart_needs_checkpoint(self):
        with pytest.raises(ConfigurationError):
            WeightInit("warmstart")

    def test_parse_names(self):
        assert Architecture.parse("PSPNet") is Architecture.PSPNET
        assert EncoderFamily.parse("densenet-like") is EncoderFamily.DENSELY_CONNECTED
        with pytest.raises(ConfigurationError):
            Architecture.parse("deeplab")


class TestDecoderHyper:
    """Test suite for the decoder batch norm flag and the FPN merge policy"""

    @staticmethod
    def _decoder_names(store):
        return {n for n in store.entries if n.startswith("decoder.")}

    @pytest.mark.parametrize("architecture", list(Architecture))
    def test_batchnorm_flag_changes_decoder(self, architecture):
        """Test flipping decoder_batchnorm swaps conv-bn-relu blocks for biased convs"""
        config = ModelConfig.create(LUNG, architecture, EncoderFamily.PLAIN_CONV_STACK, 0.125)
        with_bn = replace(config, hyper=replace(config.hyper, decoder_batchnorm=True))
        without_bn = replace(config, hyper=replace(config.hyper, decoder_batchnorm=False))
        _, bn_store = build(with_bn)
        _, plain_store = build(without_bn)
        assert any(".bn." in n for n in self._decoder_names(bn_store))
        assert not any(".bn." in n for n in self._decoder_names(plain_store))
        assert self._decoder_names(bn_store) != self._decoder_names(plain_store)
        assert count_params(bn_store) != count_params(plain_store)
        encoder = {n: v.value.shape for n, v in plain_store.entries.items() if n.startswith("encoder.")}
        assert encoder == {n: v.value.shape for n, v in bn_store.entries.items() if n.startswith("encoder.")}

    def test_default_flags(self):
        """Test only Unet and Linknet decoders carry batch norm by default"""
        flags = {a: ArchitectureHyper.for_architecture(a).decoder_batchnorm for a in Architecture}
        assert flags == {Architecture.UNET: True, Architecture.LINKNET: True,
                         Architecture.FPN: False, Architecture.PSPNET: False}
        _, store = build(ModelConfig.create(LUNG, Architecture.PSPNET, EncoderFamily.RESIDUAL, 0.125))
        assert not any(".bn." in n for n in self._decoder_names(store))
        assert any(".bn." in n for n in store.entries if n.startswith("encoder."))

    def test_pspnet_bottleneck_formula(self):
        """Test the PSPNet bottleneck is a biased 1x1 conv at the default flags"""
        config = ModelConfig.create(LUNG, Architecture.PSPNET, EncoderFamily.PLAIN_CONV_STACK, 0.125)
        _, store = build(config)
        channels, reduced, out = 32, 8, 64
        assert store["decoder.bottleneck.weight"].value.shape == (out, channels + 4 * reduced, 1, 1)
        assert store["decoder.bottleneck.bias"].value.shape == (out,)

    def test_fpn_cat_merge(self):
        """Test merge "cat" stacks the four branches and widens the head input"""
        config = ModelConfig.create(LUNG, Architecture.FPN, EncoderFamily.PLAIN_CONV_STACK, 0.125)
        _, added = build(config)
        catted_config = replace(config, hyper=replace(config.hyper, merge="cat"))
        model, catted = _initialized(catted_config)
        segmentation = 16
        assert added["head.weight"].value.shape == (1, segmentation, 3, 3)
        assert catted["head.weight"].value.shape == (1, 4 * segmentation, 3, 3)
        assert count_params(catted) > count_params(added)
        out = model(np.random.default_rng(5).normal(size=(1, 1, 32, 32)).astype(np.float32)).data
        assert out.shape == (1, 1, 32, 32)
        assert np.all((out >= 0.0) & (out <= 1.0))

    def test_unknown_merge_rejected(self):
        with pytest.raises(ConfigurationError):
            ArchitectureHyper(merge="max")
        with pytest.raises(ConfigurationError):
            ArchitectureHyper.from_dict({"merge": "mean"})

    def test_hyper_flag_in_hash(self):
        config = ModelConfig.create(LUNG, Architecture.UNET, EncoderFamily.RESIDUAL)
        flipped = replace(config, hyper=replace(config.hyper, decoder_batchnorm=False))
        assert flipped.config_hash() != config.config_hash()
        assert ModelConfig.from_dict(flipped.to_dict()) == flipped


class TestForward:
    """Test suite for output shapes, ranges and determinism"""

    def test_unet_output_shape_and_range(self):
        """Test a 1x1x64x64 input gives a 1x1x64x64 probability map"""
        model, _ = _initialized(ModelConfig.create(LUNG, Architecture.UNET, EncoderFamily.PLAIN_CONV_STACK))
        out = model(np.random.default_rng(0).normal(size=(1, 1, 64, 64)).astype(np.float32))
        assert out.shape == (1, 1, 64, 64)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    @pytest.mark.parametrize("architecture,family", PAIRS)
    def test_every_pair_maps_to_probabilities(self, architecture, family):
        model, _ = _initialized(ModelConfig.create(LUNG, architecture, family))
        x = np.random.default_rng(1).normal(size=(2, 1, 32, 32)).astype(np.float32)
        out = model(x).data
        assert out.shape == (2, 1, 32, 32)
        assert np.all((out >= 0.0) & (out <= 1.0))

    def test_indivisible_input_rejected(self, tiny_unet_config):
        with pytest.raises(ShapeError):
            build(tiny_unet_config, input_shape=(30, 32))
        model, _ = _initialized(tiny_unet_config)
        with pytest.raises(ShapeError):
            model(np.zeros((1, 1, 48, 40), dtype=np.float32))

    def test_multichannel_input_rejected(self, tiny_unet_config):
        model, _ = _initialized(tiny_unet_config)
        with pytest.raises(ShapeError):
            model(np.zeros((1, 3, 32, 32), dtype=np.float32))

    def test_fixed_seed_is_bit_identical(self):
        config = ModelConfig.create(LUNG, Architecture.FPN, EncoderFamily.RESIDUAL)
        x = np.random.default_rng(2).normal(size=(1, 1, 32, 32)).astype(np.float32)
        first = _initialized(config, seed=4)[0](x).data
        second = _initialized(config, seed=4)[0](x).data
        np.testing.assert_array_equal(first, second)

    def test_dropout_needs_generator_in_training(self):
        model, _ = _initialized(ModelConfig.create(LUNG, Architecture.PSPNET, EncoderFamily.PLAIN_CONV_STACK))
        with pytest.raises(ValueError):
            model(np.zeros((2, 1, 16, 16), dtype=np.float32), training=True)


class TestParameterCounts:
    """Test suite for count_params over whole architectures"""

    def test_tiny_unet_matches_layer_formulas(self):
        """Test the Unet count against closed-form per-layer sums at width 1/8"""
        model, store = build(ModelConfig.create(LUNG, Architecture.UNET, EncoderFamily.PLAIN_CONV_STACK, 0.125))
        encoder = [8, 16, 32, 64, 64]
        decoder = [32, 16, 8, 4, 2]
        expected = 0
        cin = 1
        for cout in encoder:
            expected += _conv_bn(cin, cout) + _conv_bn(cout, cout)
            cin = cout
        for cout, skip in zip(decoder, [64, 32, 16, 8, 0]):
            expected += _conv_bn(cin + skip, cout) + _conv_bn(cout, cout)
            cin = cout
        expected += 2 * 1 * 9 + 1
        assert count_params(store) == expected

    def test_full_width_architectures_differ(self):
        """Test the four architectures at width 1 have four distinct positive counts"""
        counts = set()
        for architecture in Architecture:
            _, store = build(ModelConfig.create(LUNG, architecture, EncoderFamily.PLAIN_CONV_STACK, 1.0))
            assert count_params(store) > 0
            counts.add(count_params(store))
        assert len(counts) == 4

    @pytest.mark.parametrize("architecture,family", PAIRS)
    def test_wider_is_larger(self, architecture, family):
        _, narrow = build(ModelConfig.create(LUNG, architecture, family, 0.125))
        _, wide = build(ModelConfig.create(LUNG, architecture, family, 0.25))
        assert count_params(wide) > count_params(narrow)


class TestGradients:
    """Test suite for whole-model finite-difference checks"""

    @pytest.mark.parametrize("architecture,family", PAIRS)
    def test_full_model_grad_check(self, architecture, family):
        """Test eval-mode Soft Dice gradients at the smallest width and input"""
        config = ModelConfig.create(LUNG, architecture, family, MIN_WIDTH_SCALE)
        model, store = _initialized(config, dtype=np.float64, seed=8)
        side = _side(architecture)
        gen = np.random.default_rng(3)
        x = gen.normal(size=(1, 1, side, side))
        target = (gen.random((1, 1, side, side)) < 0.4).astype(np.float64)

        def loss(s, pattern):
            return soft_dice_batch_loss(model(x, training=False, pattern=pattern), target)
        report = grad_check(nn.freeze_activations(loss), store, eps=1e-5, tol=1e-6, max_entries=2, seed=1)
        assert report.passed, (report.worst(), report.max_error)
        assert report.checked_entries > 0


class TestCheckpoints:
    """Test suite for checkpoint round trips and warm starts"""

    def test_round_trip_is_bit_identical(self, tmp_path, tiny_unet_config):
        _, store = _initialized(tiny_unet_config, seed=1)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, store, tiny_unet_config, epoch=3, val_loss=0.25)
        _, fresh = build(tiny_unet_config)
        report = load_warmstart(fresh, path, strict=True)
        assert not report.skipped and not report.mismatched
        for name, value in store.state().items():
            np.testing.assert_array_equal(fresh.state()[name], value)

    def test_encoder_only_into_other_architecture(self, tmp_path):
        """Test a non-strict encoder checkpoint fills encoder entries and skips the decoder"""
        unet = ModelConfig.create(LUNG, Architecture.UNET, EncoderFamily.RESIDUAL, 0.125)
        _, source = _initialized(unet, seed=2)
        path = tmp_path / "encoder.ckpt"
        save_checkpoint(path, source, unet, prefix="encoder.")
        _, target = build(ModelConfig.create(LUNG, Architecture.LINKNET, EncoderFamily.RESIDUAL, 0.125))
        report = load_warmstart(target, path, strict=False)
        encoder_names = {n for n in list(target.entries) + list(target.buffers) if n.startswith("encoder.")}
        assert set(report.loaded) == encoder_names
        assert report.skipped and all(not n.startswith("encoder.") for n in report.skipped)
        np.testing.assert_array_equal(target["encoder.stage1.conv1.conv.weight"].value,
                                      source["encoder.stage1.conv1.conv.weight"].value)

    def test_strict_shape_mismatch_names_parameter(self, tmp_path):
        narrow = ModelConfig.create(LUNG, Architecture.UNET, EncoderFamily.PLAIN_CONV_STACK, 0.125)
        _, store = _initialized(narrow)
        path = tmp_path / "narrow.ckpt"
        save_checkpoint(path, store, narrow)
        _, wide = build(ModelConfig.create(LUNG, Architecture.UNET, EncoderFamily.PLAIN_CONV_STACK, 0.25))
        with pytest.raises(CheckpointError) as excinfo:
            load_warmstart(wide, path, strict=True)
        assert "encoder.stage1.conv1.conv.weight" in str(excinfo.value)

    def test_load_model_predicts_like_original(self, tmp_path, tiny_unet_config):
        model, store = _initialized(tiny_unet_config, seed=6)
        path = tmp_path / "cell.ckpt"
        save_checkpoint(path, store, tiny_unet_config, epoch=2, val_loss=0.5)
        loaded, _, saved = load_model(path)
        images = np.random.default_rng(0).normal(size=(2, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(loaded.predict(images), model.predict(images))
        assert loaded.config == tiny_unet_config
        assert saved.epoch == 2 and saved.val_loss == pytest.approx(0.5)

    def test_missing_checkpoint(self, tmp_path, tiny_unet_config):
        _, store = build(tiny_unet_config)
        with pytest.raises(CheckpointError):
            load_warmstart(store, tmp_path / "absent.ckpt")
