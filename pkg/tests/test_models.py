import numpy as np
import pytest

from actmad import tensor as T
from actmad.models import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    accuracy,
    build_model,
    checkpoint_bytes,
    load_checkpoint,
    load_checkpoint_bytes,
    predict,
    regression_mse,
    save_checkpoint,
)
from actmad.tensor import ParamKind

from conftest import numeric_grad, rel_err


def small_cfg(**kw):
    base = dict(input_resolution=(8, 8), channels=[3, 4], blocks_per_stage=1, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def randomize_norms(model, rng):
    for blk in model.blocks:
        blk.running_mean[:] = rng.normal(0, 0.3, size=blk.running_mean.shape)
        blk.running_var[:] = rng.uniform(0.5, 2.0, size=blk.running_var.shape)
        blk.bn_scale.data[:] = rng.uniform(0.5, 1.5, size=blk.bn_scale.shape)
        blk.bn_shift.data[:] = rng.normal(0, 0.2, size=blk.bn_shift.shape)


class TestBuild:
    def test_default_tap_count_and_positions(self):
        cfg = ModelConfig()
        model = build_model(cfg)
        norms_per_block = 1
        assert len(model.tap_points) == cfg.blocks_per_stage * len(cfg.channels) * norms_per_block
        assert all(t.position == "post_norm_pre_activation" for t in model.tap_points)
        assert [t.expected_shape for t in model.tap_points] == [
            (16, 32, 32), (16, 32, 32), (32, 16, 16), (32, 16, 16), (64, 8, 8), (64, 8, 8)
        ]

    def test_same_seed_bit_identical(self):
        a = build_model(ModelConfig(seed=5))
        b = build_model(ModelConfig(seed=5))
        assert a.flat_parameters().tobytes() == b.flat_parameters().tobytes()
        assert build_model(ModelConfig(seed=6)).flat_parameters().tobytes() != a.flat_parameters().tobytes()

    def test_single_stage_tap_shape(self):
        model = build_model(ModelConfig(channels=[8], blocks_per_stage=1))
        assert [t.expected_shape for t in model.tap_points] == [(8, 32, 32)]
        _, taps = model.forward_with_taps(np.zeros((2, 1, 32, 32)))
        assert taps[0].shape == (2, 8, 32, 32)

    def test_norm_init_and_kinds(self):
        model = build_model(small_cfg())
        names = [p.name for p in model.parameters()]
        assert len(names) == len(set(names))
        for p in model.parameters():
            if p.kind is ParamKind.NORM_SCALE:
                np.testing.assert_array_equal(p.data, 1.0)
            if p.kind is ParamKind.NORM_SHIFT:
                np.testing.assert_array_equal(p.data, 0.0)

    def test_indivisible_resolution(self):
        with pytest.raises(ConfigError, match="divisible"):
            ModelConfig(input_resolution=(30, 30), channels=[4, 8, 16])

    @pytest.mark.parametrize("bad", [dict(channels=[]), dict(blocks_per_stage=0), dict(head="detect")])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**bad)


class TestForward:
    def test_live_shapes_match_expected(self, rng):
        model = build_model(ModelConfig(channels=[4, 8, 8]))
        out, taps = model.forward_with_taps(rng.uniform(size=(1, 1, 32, 32)))
        assert out.shape == (1, 4)
        for tap, point in zip(taps, model.tap_points):
            assert tap.shape == (1, *point.expected_shape)

    def test_regression_head_in_unit_box(self, rng):
        model = build_model(small_cfg(head="regress"))
        out = model(rng.uniform(size=(5, 1, 8, 8)))
        assert out.shape == (5, 4)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_resolution_mismatch(self, rng):
        model = build_model(small_cfg())
        with pytest.raises(T.ShapeError, match="expects input"):
            model(rng.uniform(size=(2, 1, 16, 16)))

    def test_duplicated_row_eval(self, rng):
        model = build_model(small_cfg())
        randomize_norms(model, rng)
        x = rng.uniform(size=(3, 1, 8, 8))
        out = model(np.concatenate([x, x[1:2]])).data
        np.testing.assert_array_equal(out[3], out[1])

    def test_eval_mode_is_pure_and_per_sample(self, rng):
        model = build_model(small_cfg())
        randomize_norms(model, rng)
        x = rng.uniform(size=(4, 1, 8, 8))
        before = [a.copy() for _, a in model.named_arrays()]
        full = model(x).data
        single = np.concatenate([model(x[i : i + 1]).data for i in range(4)])
        np.testing.assert_allclose(full, single, atol=1e-12)
        for (_, a), b in zip(model.named_arrays(), before):
            np.testing.assert_array_equal(a, b)

    def test_train_mode_permutation_equivariant(self, rng):
        x = rng.uniform(size=(5, 1, 8, 8))
        perm = rng.permutation(5)
        a = build_model(small_cfg()).train()
        b = build_model(small_cfg()).train()
        out_a = a(x).data
        out_b = b(x[perm]).data
        np.testing.assert_allclose(out_b, out_a[perm], atol=1e-12)

    @pytest.mark.parametrize("k", [0, 1])
    def test_tap_gradient_wrt_input(self, rng, k):
        model = build_model(small_cfg())
        randomize_norms(model, rng)
        x = T.Tensor(rng.uniform(size=(2, 1, 8, 8)), requires_grad=True)
        T.tsum(model.forward_with_taps(x)[1][k]).backward()
        analytic = x.grad.copy()
        flat = x.data.reshape(-1)
        with T.no_grad():
            for i in rng.choice(flat.size, 20, replace=False):
                num = numeric_grad(lambda: T.tsum(model.forward_with_taps(x)[1][k]).item(), flat, i)
                assert rel_err(analytic.reshape(-1)[i], num) < 1e-4


class TestMetrics:
    def test_overfit_two_points(self):
        model = build_model(small_cfg(n_classes=2))
        x = np.zeros((2, 1, 8, 8))
        x[1] = 1.0
        x[0, 0, :4] = 1.0
        y = np.array([0, 1])
        for _ in range(60):
            model.train()
            loss = T.softmax_cross_entropy(model(x), y)
            model.zero_grad()
            loss.backward()
            T.sgd_step(model.parameters(), 0.1)
        # two-sample batch statistics differ from the running ones; evaluate in train mode
        model.train()
        assert float(np.mean(model(x).data.argmax(axis=1) == y)) == 1.0

    def test_perfect_regression(self, rng):
        model = build_model(small_cfg(head="regress"))
        x = rng.uniform(size=(6, 1, 8, 8))
        assert regression_mse(model, x, predict(model, x)) == 0.0

    def test_constant_logit_accuracy_is_chance(self, rng):
        model = build_model(small_cfg(n_classes=4))
        model.head_w.data[:] = 0.0
        model.head_b.data[:] = [0.0, 1.0, 0.0, 0.0]
        labels = np.repeat(np.arange(4), 25)
        x = rng.uniform(size=(100, 1, 8, 8))
        expected = np.sum(labels == 1) / len(labels)
        assert accuracy(model, x, labels) == pytest.approx(expected) == pytest.approx(0.25)

    def test_empty_dataset(self):
        model = build_model(small_cfg())
        with pytest.raises(ValueError):
            accuracy(model, np.zeros((0, 1, 8, 8)), np.zeros(0))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        model = build_model(small_cfg(head="regress"))
        randomize_norms(model, rng)
        path = tmp_path / "m.ckpt"
        raw = save_checkpoint(model, path)
        again = load_checkpoint(path)
        assert checkpoint_bytes(again) == raw
        assert again.cfg == model.cfg
        for (na, a), (nb, b) in zip(model.named_arrays(), again.named_arrays()):
            assert na == nb and a.tobytes() == b.tobytes()

    def test_running_prefix_present(self):
        model = build_model(small_cfg())
        assert any(n.startswith("running.") for n, _ in model.named_arrays())

    def test_truncated(self):
        raw = checkpoint_bytes(build_model(small_cfg()))
        with pytest.raises(CheckpointError, match="unexpected end of file"):
            load_checkpoint_bytes(raw[:-5])

    def test_bad_magic(self):
        raw = checkpoint_bytes(build_model(small_cfg()))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint_bytes(b"XXXXXXXX" + raw[8:])
