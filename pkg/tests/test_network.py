import math

import numpy as np
import pytest

from fairtune import network
from fairtune.data import DataSet, SplitSpec, SyntheticSpec, generate_synthetic, split_standardize
from fairtune.errors import CheckpointError, NumericError, ShapeError
from fairtune.metrics import balanced_accuracy
from fairtune.network import (
    DenseStack,
    FlatWeights,
    Network,
    TrainConfig,
    bce_from_logits,
    get_flat,
    get_layer_flat,
    load_checkpoint,
    save_checkpoint,
    set_flat,
    set_layer_flat,
    sigmoid,
    train,
)


def numeric_gradient(net, X, y, mode, h=1e-6):
    flat = get_flat(net)
    out = np.zeros_like(flat.values)
    for i in range(flat.values.size):
        vals = []
        for delta in (h, -h):
            v = flat.values.copy()
            v[i] += delta
            candidate = set_flat(net, v)
            rep, _ = candidate._hidden_forward(X, mode)
            z = (rep @ candidate.weights[-1]["W"] + candidate.weights[-1]["b"]).ravel()
            vals.append(bce_from_logits(z, y))
        out[i] = (vals[0] - vals[1]) / (2 * h)
    return out


class TestForward:
    def test_all_zero_weights_give_half(self):
        net = Network(3, (4, 4), dropout_rate=0.0, seed=0)
        zeroed = set_flat(net, np.zeros(get_flat(net).values.size))
        X = np.random.default_rng(0).normal(size=(5, 3))
        assert np.allclose(zeroed.forward(X), 0.5)

    def test_eval_deterministic_and_pure(self):
        net = Network(3, (4,), dropout_rate=0.5, seed=1)
        X = np.random.default_rng(1).normal(size=(7, 3))
        before = get_flat(net).values.copy()
        buffers = [(b["mean"].copy(), b["var"].copy()) for b in net.bn]
        out1 = net.forward(X)
        out2 = net.forward(X)
        assert np.array_equal(out1, out2)
        assert np.array_equal(get_flat(net).values, before)
        for (m0, v0), b in zip(buffers, net.bn):
            assert np.array_equal(m0, b["mean"])
            assert np.array_equal(v0, b["var"])

    def test_train_mode_updates_only_running_stats(self):
        net = Network(3, (4,), dropout_rate=0.0, seed=1)
        X = np.random.default_rng(1).normal(size=(16, 3))
        params_before = get_flat(net).values.copy()
        mean_before = net.bn[0]["mean"].copy()
        net.forward(X, mode="train")
        assert np.array_equal(get_flat(net).values, params_before)
        assert not np.array_equal(net.bn[0]["mean"], mean_before)

    def test_scalar_hand_computation(self):
        # one input, one hidden unit, eval mode: hand-roll the whole pipeline
        net = Network(1, (1,), dropout_rate=0.0, seed=3)
        w1 = float(net.weights[0]["W"][0, 0])
        b1 = float(net.weights[0]["b"][0])
        gamma = 1.7
        beta = -0.3
        rmean = 0.4
        rvar = 2.0
        net.bn[0]["gamma"][0] = gamma
        net.bn[0]["beta"][0] = beta
        net.bn[0]["mean"][0] = rmean
        net.bn[0]["var"][0] = rvar
        w2 = float(net.weights[-1]["W"][0, 0])
        b2 = float(net.weights[-1]["b"][0])
        x = 0.83
        z = w1 * x + b1
        xhat = (z - rmean) / math.sqrt(rvar + net.bn_eps)
        h = max(gamma * xhat + beta, 0.0)
        expected = 1.0 / (1.0 + math.exp(-(w2 * h + b2)))
        got = float(net.forward(np.array([[x]]))[0])
        assert got == pytest.approx(expected, rel=1e-12)

    def test_dimension_mismatch(self):
        net = Network(3, (4,))
        with pytest.raises(ShapeError):
            net.forward(np.zeros((2, 5)))

    def test_outputs_in_open_interval(self):
        net = Network(4, (8, 8), dropout_rate=0.0, seed=5)
        X = np.random.default_rng(5).normal(size=(50, 4))
        p = net.forward(X)
        assert np.all((p > 0) & (p < 1))


class TestPenultimate:
    def test_compose_final_layer_reproduces_forward(self):
        for seed in range(3):
            net = Network(5, (6, 4), dropout_rate=0.2, seed=seed)
            X = np.random.default_rng(seed).normal(size=(9, 5))
            rep = net.penultimate(X)
            assert np.array_equal(net.forward_from_penultimate(rep), net.forward(X))

    def test_width_is_last_hidden(self):
        net = Network(5, (32, 32), seed=0)
        X = np.zeros((3, 5))
        assert net.penultimate(X).shape == (3, 32)

    def test_no_hidden_layers_identity(self):
        net = Network(4, (), seed=0)
        X = np.random.default_rng(0).normal(size=(6, 4))
        assert np.array_equal(net.penultimate(X), X)

    def test_hand_computation_single_hidden(self):
        net = Network(2, (1,), dropout_rate=0.0, seed=7)
        X = np.array([[0.3, -1.2]])
        z = float(X @ net.weights[0]["W"] + net.weights[0]["b"])
        xhat = (z - net.bn[0]["mean"][0]) / math.sqrt(net.bn[0]["var"][0] + net.bn_eps)
        expected = max(net.bn[0]["gamma"][0] * xhat + net.bn[0]["beta"][0], 0.0)
        assert net.penultimate(X)[0, 0] == pytest.approx(expected, rel=1e-12)


class TestGradients:
    @pytest.mark.parametrize("mode", ["eval", "train"])
    def test_finite_difference_agreement(self, mode):
        rng = np.random.default_rng(11)
        net = Network(4, (5, 3), dropout_rate=0.0, seed=2)
        X = rng.normal(size=(12, 4))
        y = rng.integers(0, 2, 12).astype(float)
        _, grads, _ = net.bce_gradients(X, y, mode=mode)
        analytic = np.concatenate([g.ravel() for g in net.grad_arrays(grads)])
        numeric = numeric_gradient(net, X, y, mode)
        scale = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-6)
        assert np.max(np.abs(analytic - numeric) / scale) < 1e-4

    def test_loss_weight_one_is_identity(self):
        rng = np.random.default_rng(12)
        net = Network(3, (4,), dropout_rate=0.0, seed=1)
        X = rng.normal(size=(8, 3))
        y = rng.integers(0, 2, 8).astype(float)
        l1, g1, _ = net.bce_gradients(X, y, loss_weight=1.0)
        l2, g2, _ = net.bce_gradients(X, y)
        assert l1 == l2
        for a, b in zip(net.grad_arrays(g1), net.grad_arrays(g2)):
            assert np.array_equal(a, b)

    def test_loss_weight_scales_gradients(self):
        rng = np.random.default_rng(13)
        net = Network(3, (4,), dropout_rate=0.0, seed=1)
        X = rng.normal(size=(8, 3))
        y = rng.integers(0, 2, 8).astype(float)
        _, g1, _ = net.bce_gradients(X, y)
        _, g3, _ = net.bce_gradients(X, y, loss_weight=3.0)
        for a, b in zip(net.grad_arrays(g1), net.grad_arrays(g3)):
            assert np.allclose(3.0 * a, b)

    def test_zero_gradient_at_stationary_point(self):
        # logistic unit, zero weight: symmetric +-x inputs with label 1
        # cancel the weight gradient exactly
        net = Network(1, (), seed=0)
        net.weights[0]["W"][:] = 0.0
        net.weights[0]["b"][:] = 0.0
        X = np.array([[1.0], [-1.0]])
        y = np.array([1.0, 1.0])
        _, grads, _ = net.bce_gradients(X, y)
        assert grads["W"][0][0, 0] == 0.0

    def test_input_gradient_flows(self):
        rng = np.random.default_rng(14)
        net = Network(3, (4,), dropout_rate=0.0, seed=1)
        X = rng.normal(size=(6, 3))
        y = rng.integers(0, 2, 6).astype(float)
        _, _, dX = net.bce_gradients(X, y)
        assert dX.shape == X.shape
        h = 1e-6
        Xp = X.copy()
        Xp[2, 1] += h
        Xm = X.copy()
        Xm[2, 1] -= h
        lp = net.bce_gradients(Xp, y)[0]
        lm = net.bce_gradients(Xm, y)[0]
        assert dX[2, 1] == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-9)

    def test_nonfinite_loss_raises(self):
        net = Network(2, (), seed=0)
        net.weights[0]["W"][:] = np.inf
        with pytest.raises(NumericError):
            net.bce_gradients(np.ones((2, 2)), np.array([0.0, 1.0]))

    def test_empty_batch_rejected(self):
        net = Network(2, (), seed=0)
        with pytest.raises(ValueError):
            net.bce_gradients(np.zeros((0, 2)), np.zeros(0))


class TestTrain:
    def test_separable_data_learns(self, tiny_splits):
        tr, va, _ = tiny_splits
        net = train(tr, va, (16,), TrainConfig(max_epochs=20, patience=3, seed=0))
        preds = (net.forward(va.features) > 0.5).astype(int)
        assert balanced_accuracy(va.labels, preds) > 0.6

    def test_linearly_separable_high_accuracy(self):
        rng = np.random.default_rng(0)
        n = 2000
        X = rng.normal(size=(n, 3))
        y = (X[:, 0] + X[:, 1] > 0).astype(int)
        a = rng.integers(0, 2, n)
        ds = DataSet(X, y, a, ("x0", "x1", "x2"))
        tr, va, _ = split_standardize(ds, SplitSpec(seed=2))
        net = train(tr, va, (8,), TrainConfig(max_epochs=120, patience=20, seed=1))
        preds = (net.forward(va.features) > 0.5).astype(int)
        assert balanced_accuracy(va.labels, preds) > 0.95

    def test_same_seed_identical_weights(self, tiny_splits):
        tr, va, _ = tiny_splits
        cfg = TrainConfig(max_epochs=6, patience=2, seed=9)
        n1 = train(tr, va, (8,), cfg)
        n2 = train(tr, va, (8,), cfg)
        assert np.array_equal(get_flat(n1).values, get_flat(n2).values)
        for b1, b2 in zip(n1.bn, n2.bn):
            assert np.array_equal(b1["mean"], b2["mean"])

    def test_patience_zero_stops_at_first_non_improvement(self, tiny_splits):
        tr, va, _ = tiny_splits
        cfg = TrainConfig(max_epochs=50, patience=0, seed=3)
        net = train(tr, va, (8,), cfg)
        hist = net.val_history
        # every epoch but the last strictly improved on the running best
        best = np.inf
        for loss in hist[:-1]:
            assert loss < best
            best = min(best, loss)
        if len(hist) < cfg.max_epochs:
            assert hist[-1] >= best

    def test_patience_must_not_exceed_epochs(self):
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=5, patience=6)

    def test_divergence_reports_epoch(self, tiny_splits, monkeypatch):
        from fairtune.errors import NumericError, TrainingError

        def explode(*args, **kwargs):
            raise NumericError("boom")

        monkeypatch.setattr(Network, "bce_gradients", explode)
        tr, va, _ = tiny_splits
        with pytest.raises(TrainingError, match="epoch 1"):
            train(tr, va, (4,), TrainConfig(max_epochs=3, patience=1, seed=0))


class TestFlatWeights:
    def test_roundtrip_exact(self):
        net = Network(4, (5, 3), seed=6)
        flat = get_flat(net)
        rebuilt = set_flat(net, flat.values)
        for l1, l2 in zip(net.weights, rebuilt.weights):
            assert np.array_equal(l1["W"], l2["W"])
            assert np.array_equal(l1["b"], l2["b"])
        for b1, b2 in zip(net.bn, rebuilt.bn):
            for key in ("gamma", "beta", "mean", "var"):
                assert np.array_equal(b1[key], b2[key])

    def test_layer_slices_contiguous(self):
        net = Network(4, (5, 3), seed=6)
        flat = get_flat(net)
        stops = []
        for layer in range(net.n_layers):
            sl = flat.layer_slice(layer)
            stops.append((sl.start, sl.stop))
        assert stops[0][0] == 0
        for (s0, e0), (s1, e1) in zip(stops[:-1], stops[1:]):
            assert e0 == s1
        assert stops[-1][1] == flat.values.size

    def test_layer_roundtrip(self):
        net = Network(4, (5, 3), seed=6)
        vals = get_layer_flat(net, 1)
        rebuilt = set_layer_flat(net, 1, vals)
        assert np.array_equal(get_flat(rebuilt).values, get_flat(net).values)

    def test_zeroing_one_layer_changes_only_that_layer(self):
        net = Network(4, (5, 3), seed=6)
        zeroed = set_layer_flat(net, 0, np.zeros_like(get_layer_flat(net, 0)))
        assert np.array_equal(zeroed.weights[1]["W"], net.weights[1]["W"])
        assert np.array_equal(zeroed.weights[2]["W"], net.weights[2]["W"])
        assert np.all(zeroed.weights[0]["W"] == 0)

    def test_perturb_restore_bit_exact(self):
        net = Network(4, (5, 3), seed=6)
        X = np.random.default_rng(0).normal(size=(6, 4))
        base_out = net.forward(X)
        orig = get_layer_flat(net, 1)
        perturbed = set_layer_flat(net, 1, orig * 1.3)
        assert not np.array_equal(perturbed.forward(X), base_out)
        restored = set_layer_flat(perturbed, 1, orig)
        assert np.array_equal(restored.forward(X), base_out)

    def test_length_mismatch(self):
        net = Network(4, (5,), seed=6)
        with pytest.raises(ShapeError):
            set_layer_flat(net, 0, np.zeros(3))
        with pytest.raises(ShapeError):
            set_flat(net, np.zeros(3))
        with pytest.raises(ShapeError):
            get_layer_flat(net, 5)


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path, tiny_net):
        path = tmp_path / "model.npz"
        save_checkpoint(tiny_net, path)
        back = load_checkpoint(path)
        assert np.array_equal(get_flat(back).values, get_flat(tiny_net).values)
        for b1, b2 in zip(back.bn, tiny_net.bn):
            assert np.array_equal(b1["mean"], b2["mean"])
            assert np.array_equal(b1["var"], b2["var"])
        X = np.random.default_rng(0).normal(size=(5, tiny_net.input_dim))
        assert np.array_equal(back.forward(X), tiny_net.forward(X))

    def test_version_mismatch(self, tmp_path, tiny_net, monkeypatch):
        path = tmp_path / "model.npz"
        monkeypatch.setattr(network, "CHECKPOINT_VERSION", 99)
        save_checkpoint(tiny_net, path)
        monkeypatch.setattr(network, "CHECKPOINT_VERSION", 1)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "bad.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestDenseStack:
    def test_gradient_check(self):
        rng = np.random.default_rng(20)
        stack = DenseStack(6, (5,), 1, seed=3)
        X = rng.normal(size=(4, 6))
        out, caches = stack.forward(X)
        dout = np.ones_like(out)
        grads, dX = stack.backward(dout, caches)
        params = stack.parameter_arrays()
        h = 1e-6
        for p, g in zip(params, grads):
            idx = tuple(0 for _ in p.shape)
            p[idx] += h
            up = stack.forward(X)[0].sum()
            p[idx] -= 2 * h
            down = stack.forward(X)[0].sum()
            p[idx] += h
            assert g[idx] == pytest.approx((up - down) / (2 * h), rel=1e-6, abs=1e-9)

    def test_input_gradient(self):
        rng = np.random.default_rng(21)
        stack = DenseStack(3, (4,), 1, seed=5)
        X = rng.normal(size=(2, 3))
        out, caches = stack.forward(X)
        _, dX = stack.backward(np.ones_like(out), caches)
        h = 1e-6
        Xp = X.copy(); Xp[0, 1] += h
        Xm = X.copy(); Xm[0, 1] -= h
        num = (stack.forward(Xp)[0].sum() - stack.forward(Xm)[0].sum()) / (2 * h)
        assert dX[0, 1] == pytest.approx(num, rel=1e-6, abs=1e-9)
