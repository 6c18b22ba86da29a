import numpy as np
import pytest

from ocnet.model import (
    ArchConfig,
    CheckpointError,
    ClassifierBatch,
    LayerSpec,
    classification_loss,
    classify,
    decode,
    extract_features,
    init_model,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    stage_params,
    total_loss,
    training_loss_builder,
)
from ocnet.optim import AdamConfig, AdamState, adam_step
from ocnet.rng import DeterministicRng, PseudoNegConfig, sample_gaussian
from ocnet.tensor import Tape, Tensor, backward, gradient_check


def make_model(config=None, seed=0, precision="f32"):
    config = config or ArchConfig.tiny()
    return init_model(config, DeterministicRng(seed).substream(1), precision=precision)


def forward(params, images, pseudo=None):
    tape = Tape()
    pnodes = stage_params(tape, params)
    x = tape.leaf(Tensor(images, precision=params.precision))
    feats = extract_features(tape, pnodes, params.config, x)
    return tape, pnodes, x, feats


class TestArchConfig:
    def test_default_shapes(self):
        cfg = ArchConfig()
        assert cfg.extractor_flat_dim() == 64 * 4 * 4
        assert cfg.decoder_output_shape() == (3, 32, 32)

    def test_wide_preset(self):
        cfg = ArchConfig.wide_preset()
        assert cfg.feature_dim == 1024
        assert cfg.decoder_reshape == (1024, 1, 1)
        assert cfg.decoder_output_shape() == (3, 16, 16)

    def test_reshape_product_must_match(self):
        with pytest.raises(ValueError, match="feature_dim"):
            ArchConfig(feature_dim=128)  # default reshape holds 256

    def test_decoder_must_have_four_layers(self):
        with pytest.raises(ValueError, match="4 layers"):
            ArchConfig(decoder=ArchConfig().decoder[:3])

    def test_decoder_must_land_on_image(self):
        bad = (LayerSpec(32, 4, 2, 1),) * 3 + (LayerSpec(3, 4, 2, 1),)
        with pytest.raises(ValueError, match="decoder produces"):
            ArchConfig(image_size=64, decoder=bad)

    def test_roundtrip_through_lines(self):
        cfg = ArchConfig.tiny()
        kv = dict(line.split("=", 1) for line in cfg.to_lines())
        assert ArchConfig.from_mapping(kv) == cfg

    def test_parameter_count_formula(self):
        cfg = ArchConfig()
        # Hand count: convs, extractor fc, classifier, decoder (biases
        # only on the last deconv layer; the others feed instance norm).
        convs = (16 * 3 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64)
        fc = 1024 * 256 + 256
        clf = (256 * 256 + 256) + (256 * 1 + 1)
        dec = 64 * 32 * 16 + 32 * 16 * 16 + 16 * 8 * 16 + (8 * 3 * 16 + 3)
        assert cfg.parameter_count() == convs + fc + clf + dec

    def test_params_match_declared_shapes(self):
        params = make_model(ArchConfig())
        for name, shape in ArchConfig().param_shapes().items():
            assert params.tensors[name].shape == shape


class TestExtractFeatures:
    def test_output_shape(self):
        params = make_model(ArchConfig())
        _, _, _, feats = forward(params, np.zeros((4, 3, 32, 32), np.float32))
        assert feats.shape == (4, 256)

    def test_identical_rows_identical_features(self):
        params = make_model()
        rng = np.random.default_rng(0)
        one = rng.uniform(-1, 1, size=(1, 3, 4, 4)).astype(np.float32)
        batch = np.concatenate([one, one], axis=0)
        _, _, _, feats = forward(params, batch)
        assert np.array_equal(feats.data[0], feats.data[1])

    def test_shape_mismatch(self):
        params = make_model()
        with pytest.raises(ValueError, match="config wants"):
            forward(params, np.zeros((2, 3, 8, 8), np.float32))

    def test_frozen_conv_unchanged_after_steps(self):
        config = ArchConfig.tiny()
        config = ArchConfig(
            image_size=config.image_size,
            image_channels=config.image_channels,
            feature_dim=config.feature_dim,
            extractor=config.extractor,
            decoder_reshape=config.decoder_reshape,
            decoder=config.decoder,
            freeze_conv=True,
        )
        params = make_model(config)
        before = {
            n: params.tensors[n].data.copy()
            for n in params.tensors
            if n.startswith("extractor.conv")
        }
        state = AdamState(params.tensors, AdamConfig(lr=1e-2))
        rng = np.random.default_rng(1)
        frozen = params.frozen_names()
        for _ in range(10):
            grads = {
                n: rng.normal(size=t.shape).astype(np.float32)
                for n, t in params.tensors.items()
            }
            params.tensors = adam_step(state, params.tensors, grads, frozen)
        for n, b in before.items():
            assert np.array_equal(params.tensors[n].data, b)
        assert not np.array_equal(
            params.tensors["extractor.fc.w"].data, make_model(config).tensors["extractor.fc.w"].data
        )


class TestClassify:
    def test_batch_structure(self):
        params = make_model(ArchConfig())
        tape, pnodes, _, feats = forward(params, np.random.default_rng(0).uniform(-1, 1, (64, 3, 32, 32)).astype(np.float32))
        pseudo = sample_gaussian(DeterministicRng(1), 64, 256, PseudoNegConfig(dim=256))
        batch = classify(tape, pnodes, params.config, feats, pseudo)
        assert batch.inputs.shape == (128, 256)
        assert batch.labels.data[:64].tolist() == [1.0] * 64
        assert batch.labels.data[64:].tolist() == [0.0] * 64
        assert batch.probs.shape == (128,)

    def test_zero_classifier_gives_half(self):
        params = make_model(ArchConfig.tiny())
        for name in list(params.tensors):
            if name.startswith("classifier."):
                params.tensors[name] = Tensor(np.zeros(params.tensors[name].shape, np.float32))
        tape, pnodes, _, feats = forward(params, np.random.default_rng(2).uniform(-1, 1, (4, 3, 4, 4)).astype(np.float32))
        pseudo = sample_gaussian(DeterministicRng(3), 4, 8, PseudoNegConfig(dim=8))
        batch = classify(tape, pnodes, params.config, feats, pseudo)
        assert np.allclose(batch.probs.data, 0.5)

    def test_row_permutation_permutes_probs(self):
        params = make_model(ArchConfig.tiny())
        images = np.random.default_rng(4).uniform(-1, 1, (6, 3, 4, 4)).astype(np.float32)
        pseudo = sample_gaussian(DeterministicRng(5), 6, 8, PseudoNegConfig(dim=8))
        perm = np.array([3, 1, 5, 0, 2, 4])

        def probs_of(imgs):
            tape, pnodes, _, feats = forward(params, imgs)
            return classify(tape, pnodes, params.config, feats, pseudo).probs.data[:6]

        base = probs_of(images)
        shuffled = probs_of(images[perm])
        assert np.allclose(shuffled, base[perm], atol=1e-6)

    def test_pseudo_shape_mismatch(self):
        params = make_model(ArchConfig.tiny())
        tape, pnodes, _, feats = forward(params, np.zeros((2, 3, 4, 4), np.float32))
        with pytest.raises(ValueError, match="pseudo"):
            classify(tape, pnodes, params.config, feats, Tensor(np.zeros((3, 8), np.float32)))

    def test_label_invariant_enforced(self):
        with pytest.raises(ValueError, match="half ones"):
            ClassifierBatch(
                inputs=None,
                labels=Tensor(np.array([1.0, 1.0, 0.0])),
                probs=None,
            )


class TestDecode:
    def test_default_output_shape_and_range(self):
        params = make_model(ArchConfig())
        tape = Tape()
        pnodes = stage_params(tape, params)
        feats = tape.leaf(Tensor(np.random.default_rng(1).normal(size=(5, 256)).astype(np.float32)))
        out = decode(tape, pnodes, params.config, feats)
        assert out.shape == (5, 3, 32, 32)
        assert np.all(np.abs(out.data) < 1.0)

    def test_wide_preset_output(self):
        params = make_model(ArchConfig.wide_preset())
        tape = Tape()
        pnodes = stage_params(tape, params)
        feats = tape.leaf(Tensor(np.random.default_rng(2).normal(size=(3, 1024)).astype(np.float32)))
        out = decode(tape, pnodes, params.config, feats)
        assert out.shape == (3, 3, 16, 16)

    def test_feature_dim_checked(self):
        params = make_model(ArchConfig())
        tape = Tape()
        pnodes = stage_params(tape, params)
        with pytest.raises(ValueError, match="dim"):
            decode(tape, pnodes, params.config, tape.leaf(Tensor(np.zeros((2, 100), np.float32))))


def loss_of_probs(p_values, labels):
    tape = Tape()
    probs = tape.leaf(Tensor(np.asarray(p_values, dtype=np.float64)))
    batch = ClassifierBatch.__new__(ClassifierBatch)
    batch.inputs = None
    batch.labels = Tensor(np.asarray(labels, dtype=np.float64))
    batch.probs = probs
    return classification_loss(batch).value.item()


class TestLosses:
    def test_all_half_gives_exactly_one(self):
        n = 64
        value = loss_of_probs([0.5] * (2 * n), [1.0] * n + [0.0] * n)
        assert abs(value - 1.0) <= 1e-9

    def test_perfect_classification_near_zero(self):
        value = loss_of_probs([1 - 1e-7, 1e-7], [1.0, 0.0])
        assert value <= 1e-6

    def test_hand_value(self):
        value = loss_of_probs([0.8, 0.2], [1.0, 0.0])
        assert abs(value - 0.32192809488736235) <= 1e-12

    def test_decomposes_per_row(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, size=8)
        y = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=np.float64)
        total = loss_of_probs(p, y)
        rows = [
            -(yy * np.log2(pp) + (1 - yy) * np.log2(1 - pp)) for pp, yy in zip(p, y)
        ]
        assert abs(total - np.mean(rows)) <= 1e-12

    def test_reconstruction_zero_for_identical(self):
        tape = Tape()
        x = tape.leaf(Tensor(np.ones((2, 3, 4, 4), np.float64)))
        x_rec = tape.leaf(Tensor(np.ones((2, 3, 4, 4), np.float64)))
        assert reconstruction_loss(x, x_rec).value.item() == 0.0

    def test_reconstruction_counts_unit_differences(self):
        tape = Tape()
        x = tape.leaf(Tensor(np.ones((1, 3, 32, 32), np.float64)))
        x_rec = tape.leaf(Tensor(np.zeros((1, 3, 32, 32), np.float64)))
        assert reconstruction_loss(x, x_rec).value.item() == 3072.0

    def test_reconstruction_batch_mean(self):
        x_val = np.zeros((2, 1, 2, 2))
        r_val = np.zeros((2, 1, 2, 2))
        r_val[0, 0, 0, 0] = 3.0  # per-sample sums 3 and 5
        r_val[1, 0, 0, 0] = 5.0
        tape = Tape()
        lr = reconstruction_loss(tape.leaf(Tensor(x_val)), tape.leaf(Tensor(r_val)))
        assert lr.value.item() == 4.0

    def test_reconstruction_per_pixel_mean_mode(self):
        tape = Tape()
        x = tape.leaf(Tensor(np.ones((1, 3, 32, 32), np.float64)))
        x_rec = tape.leaf(Tensor(np.zeros((1, 3, 32, 32), np.float64)))
        assert reconstruction_loss(x, x_rec, per_pixel_mean=True).value.item() == 1.0

    def test_total_loss_values(self):
        tape = Tape()
        lc = tape.leaf(Tensor(np.array(1.0)))
        lr = tape.leaf(Tensor(np.array(2.0)))
        assert total_loss(lc, lr, 1.0).value.item() == 3.0
        assert total_loss(lc, lr, 0.0).value.item() == lc.value.item()
        lc2 = tape.leaf(Tensor(np.array(0.5)))
        lr2 = tape.leaf(Tensor(np.array(10.0)))
        assert abs(total_loss(lc2, lr2, 0.1).value.item() - 1.5) <= 1e-6

    def test_negative_lambda_rejected(self):
        tape = Tape()
        lc = tape.leaf(Tensor(np.array(1.0)))
        with pytest.raises(ValueError):
            total_loss(lc, lc, -0.5)

    def test_zero_lambda_zeroes_decoder_gradients(self):
        arch = ArchConfig.tiny()
        rng = np.random.default_rng(8)
        images = rng.uniform(-1, 1, size=(2, 3, 4, 4))
        pseudo = rng.normal(size=(2, 8)) * 0.01
        params, build, names = training_loss_builder(arch, images, pseudo, 0.0)
        tape = Tape()
        leaves = [tape.leaf(p) for p in params]
        backward(tape, build(tape, leaves))
        for name, leaf in zip(names, leaves):
            if name.startswith("decoder."):
                assert np.all(leaf.grad == 0.0), name
            if name.startswith("classifier."):
                assert np.any(leaf.grad != 0.0), name


class TestGradientFidelity:
    def test_tiny_model_total_loss(self):
        # 4x4x3 images, D=8, N=2, full objective, every parameter.
        arch = ArchConfig.tiny()
        rng = np.random.default_rng(5)
        images = rng.uniform(-1, 1, size=(2, 3, 4, 4))
        pseudo = rng.normal(size=(2, 8)) * 0.01
        params, build, _ = training_loss_builder(arch, images, pseudo, 1.0, seed=0)
        assert gradient_check(build, params, step=1e-5) <= 1e-5


class TestCheckpoints:
    def test_round_trip_bitwise(self, tmp_path):
        params = make_model(ArchConfig.tiny(), seed=3)
        path = str(tmp_path / "model.ockpt")
        save_checkpoint(path, params, meta={"target": "id_001", "mode": "full"})
        loaded, meta, adam = load_checkpoint(path)
        assert meta["target"] == "id_001"
        assert adam is None
        assert loaded.config == params.config
        for name, tensor in params.tensors.items():
            assert np.array_equal(loaded.tensors[name].data, tensor.data), name

    def test_adam_state_round_trip(self, tmp_path):
        params = make_model(ArchConfig.tiny(), seed=4)
        state = AdamState(params.tensors, AdamConfig(lr=3e-4))
        rng = np.random.default_rng(0)
        grads = {n: rng.normal(size=t.shape).astype(np.float32) for n, t in params.tensors.items()}
        params.tensors = adam_step(state, params.tensors, grads)
        path = str(tmp_path / "model.ockpt")
        save_checkpoint(path, params, adam=state)
        _, _, loaded_state = load_checkpoint(path)
        assert loaded_state.t == 1
        assert loaded_state.cfg.lr == 3e-4
        for name in state.m:
            assert np.array_equal(loaded_state.m[name], state.m[name])
            assert np.array_equal(loaded_state.v[name], state.v[name])

    def test_altered_config_names_first_mismatch(self, tmp_path):
        params = make_model(ArchConfig.tiny())
        path = str(tmp_path / "model.ockpt")
        save_checkpoint(path, params)
        other = ArchConfig()  # different everything
        with pytest.raises(CheckpointError, match="tensor '"):
            load_checkpoint(path, expect_config=other)

    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "junk.ockpt")
        with open(path, "wb") as f:
            f.write(b"JUNKJUNKJUNK")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_checkpoint_total_matches_parameter_count(self, tmp_path):
        config = ArchConfig()
        params = make_model(config)
        stored = sum(int(np.prod(t.shape)) for t in params.tensors.values())
        assert stored == config.parameter_count()
