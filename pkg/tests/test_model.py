import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from caselab import dataset, layers, model
from caselab.errors import FileFormatError, NumericalError, ShapeMismatch


@pytest.fixture(scope="module")
def tiny_split():
    images = dataset.generate(seed=9, per_class=8)
    return dataset.split(images, (0.5, 0.25, 0.25), seed=9)


@pytest.fixture(scope="module")
def tiny_trained(tiny_split):
    bundle, history = model.train(tiny_split, epochs=2, learning_rate=0.05, seed=9)
    return bundle, history


class TestBuild:

    def test_architecture(self):
        bundle = model.build_model(seed=1)
        assert bundle.class_count == 8
        assert bundle.input_shape == (1, 32, 32)
        assert bundle.attribution_layer == 7
        assert bundle.layer_specs[7].kind == "relu"
        shapes = [w.shape for w in bundle.weights.values()]
        assert (16, 1, 3, 3) in shapes and (32, 16, 3, 3) in shapes
        assert (8, 32) in shapes

    def test_init_deterministic(self):
        a = model.build_model(seed=4)
        b = model.build_model(seed=4)
        for k in a.weights:
            assert_array_equal(a.weights[k], b.weights[k])

    def test_init_seed_sensitive(self):
        a = model.build_model(seed=4)
        b = model.build_model(seed=5)
        assert any(not np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)

    def test_biases_zero(self):
        bundle = model.build_model(seed=1)
        for k, w in bundle.weights.items():
            if k.endswith(".bias"):
                assert_array_equal(w, np.zeros_like(w))


class TestForward:

    def test_capture_shape(self):
        bundle = model.build_model(seed=1)
        x = np.random.default_rng(0).random((1, 32, 32))
        logits, act = model.forward_with_capture(bundle, x)
        assert logits.shape == (8,)
        assert act.shape == (32, 8, 8)
        assert np.all(act >= 0.0)  # captured after a relu

    def test_capture_consistent_with_plain_forward(self):
        bundle = model.build_model(seed=1)
        x = np.random.default_rng(1).random((1, 32, 32))
        logits, _ = model.forward_with_capture(bundle, x)
        assert_array_equal(logits, model.forward_logits(bundle, x))

    def test_predict_is_softmax_of_logits(self):
        bundle = model.build_model(seed=1)
        x = np.random.default_rng(2).random((1, 32, 32))
        probs = model.predict(bundle, x)
        assert_allclose(probs, layers.softmax(model.forward_logits(bundle, x)), rtol=1e-15)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_head_forward_resumes_from_activation(self):
        bundle = model.build_model(seed=1)
        x = np.random.default_rng(3).random((1, 32, 32))
        logits, act = model.forward_with_capture(bundle, x)
        assert_array_equal(model.head_forward(bundle, act), logits)

    def test_batch_logits_matches_single(self):
        bundle = model.build_model(seed=1)
        xs = np.random.default_rng(4).random((5, 1, 32, 32))
        got = model.batch_logits(bundle, xs)
        want = np.stack([model.forward_logits(bundle, x) for x in xs])
        assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_batch_logits_empty(self):
        bundle = model.build_model(seed=1)
        got = model.batch_logits(bundle, np.zeros((0, 1, 32, 32)))
        assert got.shape == (0, 8)

    def test_wrong_input_shape(self):
        bundle = model.build_model(seed=1)
        with pytest.raises(ShapeMismatch):
            model.forward_logits(bundle, np.zeros((1, 16, 16)))


class TestGradient:

    def test_matches_finite_differences(self):
        # gradient of one logit wrt the captured activation; the head above
        # the capture point is gap + dense, so central differences are clean
        bundle = model.build_model(seed=2)
        x = np.random.default_rng(5).random((1, 32, 32))
        _, act = model.forward_with_capture(bundle, x)
        g = model.grad_wrt_activation(bundle, x, class_u=3)
        assert g.shape == (32, 8, 8)
        h = 1e-6
        rng = np.random.default_rng(6)
        for _ in range(40):
            n = int(rng.integers(32)); i = int(rng.integers(8)); j = int(rng.integers(8))
            ap = act.copy(); ap[n, i, j] += h
            am = act.copy(); am[n, i, j] -= h
            fd = (model.head_forward(bundle, ap)[3] - model.head_forward(bundle, am)[3]) / (2 * h)
            scale = max(abs(fd), abs(g[n, i, j]), 1e-8)
            assert abs(fd - g[n, i, j]) / scale <= 1e-5

    def test_class_selects_row(self):
        bundle = model.build_model(seed=2)
        x = np.random.default_rng(7).random((1, 32, 32))
        g0 = model.grad_wrt_activation(bundle, x, class_u=0)
        g1 = model.grad_wrt_activation(bundle, x, class_u=1)
        assert not np.array_equal(g0, g1)

    def test_bad_class_rejected(self):
        bundle = model.build_model(seed=2)
        x = np.zeros((1, 32, 32))
        with pytest.raises(ValueError):
            model.grad_wrt_activation(bundle, x, class_u=8)


class TestTrain:

    def test_zero_epochs_keeps_init(self, tiny_split):
        bundle, history = model.train(tiny_split, epochs=0, learning_rate=0.05, seed=9)
        init = model.build_model(seed=9)
        assert history == []
        for k in init.weights:
            assert_array_equal(bundle.weights[k], init.weights[k])

    def test_deterministic(self, tiny_split, tiny_trained):
        again, again_hist = model.train(tiny_split, epochs=2, learning_rate=0.05, seed=9)
        bundle, history = tiny_trained
        for k in bundle.weights:
            assert_array_equal(bundle.weights[k], again.weights[k])
        assert [h.loss for h in history] == [h.loss for h in again_hist]

    def test_history_shape(self, tiny_trained):
        _, history = tiny_trained
        assert [h.epoch for h in history] == [1, 2]
        for h in history:
            assert np.isfinite(h.loss)
            assert 0.0 <= h.train_acc <= 1.0
            assert 0.0 <= h.val_acc <= 1.0

    def test_loss_decreases(self, tiny_split):
        _, history = model.train(tiny_split, epochs=4, learning_rate=0.05, seed=9)
        assert history[-1].loss < history[0].loss

    def test_divergence_reported_as_numerical_error(self, tiny_split):
        # an absurd step size overflows within the first epoch; the failure
        # must come back typed, not as a low-level finiteness crash
        with pytest.raises(NumericalError, match="diverged at epoch 1"):
            model.train(tiny_split, epochs=2, learning_rate=1e200, seed=9)

    def test_confusion_matrix(self, tiny_trained, tiny_split):
        bundle, _ = tiny_trained
        conf = model.confusion_matrix(bundle, tiny_split.validation)
        assert conf.shape == (8, 8)
        assert conf.dtype == np.int64
        assert conf.sum() == len(tiny_split.validation)
        labels = [im.label for im in tiny_split.validation]
        for c in range(8):
            assert conf[c].sum() == labels.count(c)


class TestWeightsFile:

    def test_round_trip_bit_exact(self, tiny_trained, tmp_path):
        bundle, _ = tiny_trained
        path = tmp_path / "w.bin"
        model.save_weights(bundle, path)
        back = model.load_weights(path)
        assert set(back.weights) == set(bundle.weights)
        for k in bundle.weights:
            assert bundle.weights[k].tobytes() == back.weights[k].tobytes()
        x = np.random.default_rng(8).random((1, 32, 32))
        assert_array_equal(model.forward_logits(bundle, x),
                           model.forward_logits(back, x))

    def test_save_deterministic(self, tiny_trained, tmp_path):
        bundle, _ = tiny_trained
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        model.save_weights(bundle, p1)
        model.save_weights(bundle, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_magic(self, tiny_trained, tmp_path):
        bundle, _ = tiny_trained
        path = tmp_path / "w.bin"
        model.save_weights(bundle, path)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(FileFormatError) as exc:
            model.load_weights(path)
        assert "offset 0" in str(exc.value)

    def test_truncation_reports_offset(self, tiny_trained, tmp_path):
        bundle, _ = tiny_trained
        path = tmp_path / "w.bin"
        model.save_weights(bundle, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FileFormatError) as exc:
            model.load_weights(path)
        assert "offset" in str(exc.value)

    def test_trailing_bytes_rejected(self, tiny_trained, tmp_path):
        bundle, _ = tiny_trained
        path = tmp_path / "w.bin"
        model.save_weights(bundle, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FileFormatError):
            model.load_weights(path)
