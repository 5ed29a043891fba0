import numpy as np
import pytest

from actmad import tensor as T
from actmad.adapt import (
    AdaptConfig,
    AlignmentError,
    CapabilityError,
    adapt_step,
    adapt_stream,
    baseline_entropy,
    baseline_norm,
    baseline_source,
    cmd_loss,
    layer_alignment_loss,
    total_alignment_loss,
)
from actmad.data import StreamBatch, iter_labels_free, make_stream
from actmad.models import ConfigError, ModelConfig, build_model
from actmad.stats import LayerStats, StatsBundle, batch_mean_var, compute_training_stats
from actmad.tensor import AFFINE_KINDS

from conftest import numeric_grad, rel_err


def loop_l1(bm, bv, tm, tv):
    total = 0.0
    for a, b in zip(np.ravel(bm), np.ravel(tm)):
        total += abs(a - b)
    for a, b in zip(np.ravel(bv), np.ravel(tv)):
        total += abs(a - b)
    return total


def make_model(head="classify", seed=0, channels=(3, 4)):
    cfg = ModelConfig(input_resolution=(8, 8), channels=list(channels), blocks_per_stage=1, head=head, seed=seed)
    return build_model(cfg)


def clean_images(rng, n=64):
    return rng.uniform(0.2, 0.8, size=(n, 1, 8, 8))


@pytest.fixture
def setup(rng):
    model = make_model()
    train = clean_images(rng, 96)
    bundle = compute_training_stats(model, train, batch_size=32)
    return model, train, bundle


class TestLayerLoss:
    def test_perfect_alignment(self, rng):
        m, v = rng.normal(size=(2, 3, 3)), rng.uniform(size=(2, 3, 3))
        assert layer_alignment_loss(m, v, m, v).item() == 0.0

    def test_hand_sum(self):
        loss = layer_alignment_loss(np.array([1.0]), np.array([2.0]), np.array([0.0]), np.array([1.0]))
        assert loss.item() == 2.0

    def test_loop_oracle(self, rng):
        for _ in range(5):
            bm, bv, tm, tv = (rng.normal(size=(3, 4, 5)) for _ in range(4))
            assert abs(layer_alignment_loss(bm, bv, tm, tv).item() - loop_l1(bm, bv, tm, tv)) < 1e-12

    def test_shape_mismatch_names_layer(self, rng):
        with pytest.raises(T.ShapeError, match="stage1.block0"):
            layer_alignment_loss(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 1, 1)), np.zeros((2, 1, 1)),
                                 "stage1.block0")

    def test_train_stats_receive_no_gradient(self, rng):
        bm = T.Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        bv = T.Tensor(rng.uniform(size=(2, 2)), requires_grad=True)
        tm = rng.normal(size=(2, 2))
        layer_alignment_loss(bm, bv, tm, rng.uniform(size=(2, 2))).backward()
        np.testing.assert_array_equal(bm.grad, np.sign(bm.data - tm))


def fake_bundle(taps_like, rng):
    layers = [LayerStats(f"l{i}", t.shape[1:], rng.normal(size=t.shape[1:]), rng.uniform(size=t.shape[1:]), 10)
              for i, t in enumerate(taps_like)]
    return StatsBundle(1, (8, 8), layers)


class TestTotalLoss:
    def test_additivity_and_zero(self, rng):
        taps = [T.Tensor(rng.normal(size=(4, 2, 3, 3))), T.Tensor(rng.normal(size=(4, 3, 2, 2)))]
        exact = []
        for i, t in enumerate(taps):
            m, v = batch_mean_var(t)
            exact.append(LayerStats(f"l{i}", t.shape[1:], m.data, v.data, 4))
        loss, breakdown = total_alignment_loss(taps, StatsBundle(1, (8, 8), exact), AdaptConfig())
        assert loss.item() == 0.0 and all(v == 0.0 for v in breakdown.values())

    def test_sum_of_layers(self, rng):
        taps = [T.Tensor(rng.normal(size=(4, 2, 3, 3))), T.Tensor(rng.normal(size=(4, 3, 2, 2)))]
        bundle = fake_bundle(taps, rng)
        loss, breakdown = total_alignment_loss(taps, bundle, AdaptConfig())
        assert loss.item() == pytest.approx(sum(breakdown.values()), abs=1e-12)
        expected = [loop_l1(*(x.data for x in batch_mean_var(t)), l.mean, l.var) for t, l in zip(taps, bundle.layers)]
        assert list(breakdown.values()) == pytest.approx(expected, abs=1e-12)

    def test_last_layer_only_is_final_entry(self, rng):
        taps = [T.Tensor(rng.normal(size=(4, 2, 3, 3))), T.Tensor(rng.normal(size=(4, 3, 2, 2)))]
        bundle = fake_bundle(taps, rng)
        _, full = total_alignment_loss(taps, bundle, AdaptConfig())
        last, only = total_alignment_loss(taps, bundle, AdaptConfig(layer_mode="last_layer_only"))
        assert list(only) == ["l1"]
        assert last.item() == list(full.values())[-1]

    def test_channel_averaged(self, rng):
        taps = [T.Tensor(rng.normal(size=(5, 2, 3, 3)))]
        bundle = fake_bundle(taps, rng)
        loss, _ = total_alignment_loss(taps, bundle, AdaptConfig(stat_mode="channel_averaged"))
        a = taps[0].data
        bm = a.mean(axis=(0, 2, 3))
        bv = a.var(axis=(0, 2, 3))
        lm = bundle.layers[0].mean
        tm = lm.mean(axis=(1, 2))
        tv = (bundle.layers[0].var + (lm - tm[:, None, None]) ** 2).mean(axis=(1, 2))
        assert abs(loss.item() - loop_l1(bm, bv, tm, tv)) < 1e-12

    def test_tap_count_mismatch(self, rng):
        taps = [T.Tensor(rng.normal(size=(4, 2, 3, 3)))]
        with pytest.raises(T.ShapeError):
            total_alignment_loss(taps, fake_bundle(taps * 2, rng), AdaptConfig())

    def test_layer_weights(self, rng):
        taps = [T.Tensor(rng.normal(size=(4, 2, 3, 3))), T.Tensor(rng.normal(size=(4, 3, 2, 2)))]
        bundle = fake_bundle(taps, rng)
        _, bd = total_alignment_loss(taps, bundle, AdaptConfig())
        weighted, _ = total_alignment_loss(taps, bundle, AdaptConfig(layer_weights=[2.0, 0.5]))
        assert weighted.item() == pytest.approx(2.0 * bd["l0"] + 0.5 * bd["l1"], abs=1e-12)


class TestCmd:
    def test_order_two_equals_mean_var(self, rng):
        taps = [T.Tensor(rng.normal(size=(6, 2, 3, 3))), T.Tensor(rng.normal(size=(6, 3, 2, 2)))]
        bundle = fake_bundle(taps, rng)
        ref, _ = total_alignment_loss(taps, bundle, AdaptConfig())
        assert abs(cmd_loss(taps, bundle, 2).item() - ref.item()) < 1e-12

    def test_matched_distribution_is_zero(self, rng):
        a = rng.integers(-4, 4, size=(4, 1, 2, 2)) / 2.0
        centered = a - a.mean(axis=0)
        layer = LayerStats("x", (1, 2, 2), a.mean(axis=0), (centered**2).mean(axis=0), 4,
                           moments={3: (centered**3).mean(axis=0)})
        assert cmd_loss([T.Tensor(a)], StatsBundle(1, (2, 2), [layer]), 3).item() == 0.0

    def test_symmetric_batch_third_moment(self):
        a = np.array([-1.0, 1.0]).reshape(2, 1, 1, 1)
        layer = LayerStats("x", (1, 1, 1), np.zeros((1, 1, 1)), np.ones((1, 1, 1)), 2, moments={3: np.zeros((1, 1, 1))})
        assert cmd_loss([T.Tensor(a)], StatsBundle(1, (1, 1), [layer]), 3).item() == 0.0

    def test_missing_reference_moment(self, rng):
        taps = [T.Tensor(rng.normal(size=(4, 2, 3, 3)))]
        with pytest.raises(KeyError, match="order 3"):
            cmd_loss(taps, fake_bundle(taps, rng), 3)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            AdaptConfig(loss_mode="cmd", cmd_order=1)
        with pytest.raises(ConfigError):
            AdaptConfig(batch_size=1)


class TestGradientFlow:
    def test_loss_gradient_matches_finite_differences(self, rng):
        model = make_model(channels=(2, 3))
        for blk in model.blocks:
            blk.running_var[:] = rng.uniform(0.5, 1.5, size=blk.running_var.shape)
        bundle = compute_training_stats(model, clean_images(rng, 40), batch_size=40)
        shifted = np.clip(clean_images(rng, 8) * 0.6 + 0.3, 0, 1)
        cfg = AdaptConfig()

        def loss_value():
            _, taps = model.forward_with_taps(shifted)
            return total_alignment_loss(taps, bundle, cfg)[0]

        model.zero_grad()
        loss_value().backward()
        worst = 0.0
        with T.no_grad():
            for p in model.parameters():
                if p.grad is None:
                    continue
                flat = p.data.reshape(-1)
                for i in rng.choice(flat.size, min(6, flat.size), replace=False):
                    num = numeric_grad(lambda: loss_value().item(), flat, i)
                    worst = max(worst, rel_err(p.grad.reshape(-1)[i], num))
        assert worst < 1e-4


class TestAdaptStep:
    def test_affine_only_freezes_weights(self, setup, rng):
        model, _, bundle = setup
        frozen = {p.name: p.data.tobytes() for p in model.parameters() if p.kind not in AFFINE_KINDS}
        adapt_step(model, clean_images(rng, 16) * 0.5, bundle, AdaptConfig(param_mode="affine_only", lr=1e-2))
        for p in model.parameters():
            if p.kind not in AFFINE_KINDS:
                assert p.data.tobytes() == frozen[p.name]

    def test_zero_loss_fixed_point(self, rng):
        model = make_model()
        batch = clean_images(rng, 16)
        bundle = compute_training_stats(model, batch, batch_size=16)
        before = model.flat_parameters().tobytes()
        rec = adapt_step(model, batch, bundle, AdaptConfig(lr=1.0))
        assert rec["loss"] == 0.0
        assert model.flat_parameters().tobytes() == before

    def test_descent_on_shifted_batch(self, setup, rng):
        model, _, bundle = setup
        batch = np.clip(clean_images(rng, 32) + 0.15, 0, 1)
        cfg = AdaptConfig(lr=1e-4, lr_scaling="fixed")
        with T.no_grad():
            before = total_alignment_loss(model.forward_with_taps(batch)[1], bundle, cfg)[0].item()
        adapt_step(model, batch, bundle, cfg)
        with T.no_grad():
            after = total_alignment_loss(model.forward_with_taps(batch)[1], bundle, cfg)[0].item()
        assert after < before

    def test_non_finite_names_layer(self, setup, rng):
        model, _, bundle = setup
        model.blocks[0].running_var[:] = np.inf
        model.blocks[0].bn_scale.data[:] = np.inf
        with pytest.raises(AlignmentError, match="stage0.block0"):
            with np.errstate(all="ignore"):
                adapt_step(model, clean_images(rng, 8), bundle, AdaptConfig())

    def test_single_image_rejected(self, setup, rng):
        model, _, bundle = setup
        with pytest.raises(ValueError):
            adapt_step(model, clean_images(rng, 1), bundle, AdaptConfig())


class TestAdaptStream:
    def stream(self, rng, n=70, bs=16):
        images = np.clip(clean_images(rng, n) * 0.7 + 0.25, 0, 1)
        return make_stream(images, rng.integers(0, 4, size=n), bs)

    def test_record_count_and_partial_batch(self, setup, rng):
        model, _, bundle = setup
        stream = self.stream(rng, n=65, bs=16)
        report = adapt_stream(model, stream, bundle, AdaptConfig(batch_size=16))
        assert len(report.records) == 65 // 16 + 1
        assert report.records[-1].n == 1 and not report.records[-1].updated
        assert all(r.updated for r in report.records[:-1])

    def test_deterministic(self, setup, rng):
        model, _, bundle = setup
        stream = self.stream(rng)
        a = adapt_stream(model.clone(), stream, bundle, AdaptConfig(batch_size=16, seed=3))
        b = adapt_stream(model.clone(), stream, bundle, AdaptConfig(batch_size=16, seed=3))
        assert a.to_jsonl() == b.to_jsonl()

    def test_labels_do_not_touch_parameters(self, setup, rng):
        model, _, bundle = setup
        stream = self.stream(rng)
        with_labels, without = model.clone(), model.clone()
        adapt_stream(with_labels, stream, bundle, AdaptConfig(batch_size=16))
        report = adapt_stream(without, list(iter_labels_free(stream)), bundle, AdaptConfig(batch_size=16))
        assert with_labels.flat_parameters().tobytes() == without.flat_parameters().tobytes()
        assert report.final_metric is None

    def test_drift_recorded(self, setup, rng):
        model, _, bundle = setup
        report = adapt_stream(model, self.stream(rng), bundle, AdaptConfig(batch_size=16))
        assert all(r.drift >= 0 for r in report.records)
        assert report.records[-1].drift > 0

    def test_linear_lr_scaling(self):
        cfg = AdaptConfig(lr=4e-3, batch_size=32, reference_batch_size=128)
        assert cfg.effective_lr == pytest.approx(1e-3)
        assert AdaptConfig(lr=4e-3, batch_size=32, lr_scaling="fixed").effective_lr == 4e-3

    def test_empty_stream(self, setup):
        model, _, bundle = setup
        with pytest.raises(ValueError, match="empty"):
            adapt_stream(model, [], bundle, AdaptConfig())

    def test_jsonl_schema(self, setup, rng):
        import json

        model, _, bundle = setup
        report = adapt_stream(model, self.stream(rng), bundle, AdaptConfig(batch_size=16))
        lines = [json.loads(x) for x in report.to_jsonl().splitlines()]
        assert len(lines) == len(report.records) + 1
        assert set(lines[0]) == {"batch", "n", "segment", "condition", "metric", "loss", "layer_losses", "drift", "updated"}
        assert lines[-1]["summary"] is True and lines[-1]["n_batches"] == len(report.records)


class TestBaselines:
    def test_source_leaves_parameters(self, setup, rng):
        model, _, _ = setup
        before = [a.tobytes() for _, a in model.named_arrays()]
        report = baseline_source(model, make_stream(clean_images(rng, 40), np.zeros(40, int), 16))
        assert [a.tobytes() for _, a in model.named_arrays()] == before
        assert len(report.records) == 3

    def test_norm_on_matching_batch(self, rng):
        model = make_model()
        batch = clean_images(rng, 32)
        # make the running statistics those of this very batch, layer by layer
        model.cfg.momentum = 1.0
        model.train()
        with T.no_grad():
            model(batch)
        model.eval()
        model.cfg.momentum = 0.1
        with T.no_grad():
            ref = model(batch).data
        report = baseline_norm(model, [StreamBatch(batch, None)])
        with T.no_grad():
            after = model(batch).data
        np.testing.assert_allclose(after, ref, atol=1e-10)
        assert len(report.records) == 1

    def test_entropy_refuses_regression(self, rng):
        with pytest.raises(CapabilityError):
            baseline_entropy(make_model(head="regress"), make_stream(clean_images(rng, 8), None, 4), lr=1e-3)

    def test_entropy_confident_model_barely_moves(self, rng):
        model = make_model()
        model.head_w.data[:] = 0.0
        model.head_b.data[:] = [60.0, 0.0, 0.0, 0.0]
        before = model.flat_parameters()
        report = baseline_entropy(model, make_stream(clean_images(rng, 32), np.zeros(32, int), 16), lr=1e-2)
        assert np.max(np.abs(model.flat_parameters() - before)) < 1e-12
        assert report.final_metric == 1.0

    def test_entropy_updates_only_affine(self, setup, rng):
        model, _, _ = setup
        frozen = {p.name: p.data.tobytes() for p in model.parameters() if p.kind not in AFFINE_KINDS}
        baseline_entropy(model, make_stream(clean_images(rng, 32), np.zeros(32, int), 16), lr=1e-1)
        for p in model.parameters():
            if p.kind not in AFFINE_KINDS:
                assert p.data.tobytes() == frozen[p.name]
