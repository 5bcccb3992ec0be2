import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from bnexpand import tensor as T
from bnexpand.data import LabeledDataset
from bnexpand.ewc import (DEFAULT_LAMBDA_GRID, EwcConfig, FisherDiagonal, ParameterSnapshot,
                          combined_loss, compute_fisher_diagonal, ewc_penalty, mean_abs_drift,
                          snapshot_parameters)
from bnexpand.nn import INFER, TRAIN, BatchNorm, Linear, Network, ReLU, mlp_bn
from bnexpand.training import AdamState, adam_step

from conftest import blobs


def oracle_fisher(net, x, y):
    """Per-sample squared gradients of -log softmax for Linear-BN-ReLU-Linear, by hand."""
    W1, b1 = (net.layers[0].weight.data.astype(np.float64), net.layers[0].bias.data.astype(np.float64))
    bn = net.layers[1]
    g, be = bn.gamma.data.astype(np.float64), bn.beta.data.astype(np.float64)
    m, v = bn.running_mean.astype(np.float64), bn.running_var.astype(np.float64)
    W2, b2 = net.layers[3].weight.data.astype(np.float64), net.layers[3].bias.data.astype(np.float64)
    acc = {k: 0.0 for k in ("0.weight", "0.bias", "1.gamma", "1.beta", "3.weight", "3.bias")}
    inv = 1.0 / np.sqrt(v + bn.eps)
    for xi, yi in zip(x.astype(np.float32).astype(np.float64), y):
        h = xi @ W1 + b1
        xhat = (h - m) * inv
        z = g * xhat + be
        a = np.maximum(z, 0)
        logits = a @ W2 + b2
        p = np.exp(logits - logits.max())
        p /= p.sum()
        dl = p.copy()
        dl[yi] -= 1
        da = W2 @ dl
        dz = da * (z > 0)
        dh = dz * g * inv
        grads = {"3.weight": np.outer(a, dl), "3.bias": dl, "1.gamma": dz * xhat, "1.beta": dz,
                 "0.weight": np.outer(xi, dh), "0.bias": dh}
        for k in acc:
            acc[k] = acc[k] + grads[k] ** 2
    return {k: val / len(y) for k, val in acc.items()}


def small_net(seed=0):
    net = Network([Linear(5, 7, seed=seed), BatchNorm(7), ReLU(), Linear(7, 3, seed=seed + 1)])
    rng = np.random.default_rng(seed)
    for _ in range(3):  # non-trivial running statistics
        net.forward(rng.uniform(size=(16, 5)), TRAIN)
    net.layers[1].gamma.data = rng.uniform(0.5, 1.5, size=7).astype(np.float32)
    return net


class TestFisher:
    @pytest.mark.parametrize("n,seed", [(16, 0), (64, 1), (33, 2)])
    def test_matches_loop_oracle(self, n, seed):
        rng = np.random.default_rng(seed)
        net = small_net(seed)
        ds = LabeledDataset(rng.uniform(size=(n, 5)), rng.integers(0, 3, size=n), 3)
        fisher = compute_fisher_diagonal(net, ds, n, seed=seed)
        oracle = oracle_fisher(net, ds.images, ds.labels)
        assert set(fisher.values) == set(oracle)
        for k in oracle:
            assert np.abs(fisher.values[k] - oracle[k]).max() < 1e-6, k

    def test_logistic_hand_value(self):
        # logits [0, theta * x] give p(y=1) = sigmoid(theta * x)
        lin = Linear(1, 2)
        lin.weight.data = np.zeros((1, 2), dtype=np.float32)
        net = Network([lin])
        net.set_trainable(["0.bias"], False)
        ds = LabeledDataset(np.ones((1, 1)), np.array([1]), 2)
        f = compute_fisher_diagonal(net, ds, 1).values["0.weight"]
        assert f[0, 1] == pytest.approx(0.25, abs=1e-7)
        assert f.shape == (1, 2)

    def test_saturated_classifier(self):
        lin = Linear(2, 2)
        lin.weight.data = np.array([[40.0, -40.0], [-40.0, 40.0]], dtype=np.float32)
        ds = LabeledDataset(np.array([[1.0, 0.0], [0.0, 1.0]] * 4), np.array([0, 1] * 4), 2)
        f = compute_fisher_diagonal(Network([lin]), ds, 8)
        assert all(v.max() < 1e-12 for v in f.values.values())

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 12))
    def test_nonnegative(self, seed, n):
        rng = np.random.default_rng(seed)
        net = mlp_bn(3, [4], 2, seed=seed)
        ds = LabeledDataset(rng.uniform(size=(12, 3)), rng.integers(0, 2, size=12), 2)
        f = compute_fisher_diagonal(net, ds, n, seed=seed)
        assert all((v >= 0).all() for v in f.values.values())
        assert f.sample_count == n

    def test_deterministic_and_stats_untouched(self):
        net = small_net()
        ds = blobs(10, k=3, dim=5)
        before = net.state_dict()
        a = compute_fisher_diagonal(net, ds, 12, seed=3)
        b = compute_fisher_diagonal(net, ds, 12, seed=3)
        assert all(a.values[k].tobytes() == b.values[k].tobytes() for k in a.values)
        after = net.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_excludes_frozen_and_buffers(self):
        net = small_net()
        net.set_trainable(["0.weight"], False)
        f = compute_fisher_diagonal(net, blobs(5, k=3, dim=5), 4)
        assert "0.weight" not in f.values
        assert not any("running" in k for k in f.values)

    @pytest.mark.parametrize("n", [0, 31])
    def test_bad_sample_count(self, n):
        with pytest.raises(ValueError):
            compute_fisher_diagonal(small_net(), blobs(10, k=3, dim=5), n)

    def test_no_trainable(self):
        net = small_net()
        net.set_trainable(value=False)
        with pytest.raises(ValueError):
            compute_fisher_diagonal(net, blobs(10, k=3, dim=5), 4)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            FisherDiagonal({"a": np.array([-1.0])}, 1)


def scalar_net(theta):
    lin = Linear(1, 1)
    lin.weight.data = np.array([[theta]], dtype=np.float32)
    net = Network([lin])
    net.set_trainable(["0.bias"], False)
    return net


class TestPenalty:
    def _setup(self):
        lin = Linear(2, 1)
        net = Network([lin])
        net.set_trainable(["0.bias"], False)
        snap = ParameterSnapshot({"0.weight": np.zeros((2, 1))})
        fisher = FisherDiagonal({"0.weight": np.array([[1.0], [2.0]])}, 1)
        lin.weight.data = np.ones((2, 1), dtype=np.float32)
        return net, snap, fisher

    def test_hand_value(self):
        net, snap, fisher = self._setup()
        assert ewc_penalty(net, snap, fisher, EwcConfig(2.0)).item() == pytest.approx(3.0)

    def test_gradient_is_lambda_f_delta(self):
        net, snap, fisher = self._setup()
        T.backward(ewc_penalty(net, snap, fisher, EwcConfig(2.0)))
        np.testing.assert_allclose(net.layers[0].weight.grad, [[2.0], [4.0]])

    def test_zero_lambda_and_fresh_snapshot(self):
        net, snap, fisher = self._setup()
        assert ewc_penalty(net, snap, fisher, EwcConfig(0.0)).item() == 0.0
        fresh = snapshot_parameters(net)
        assert ewc_penalty(net, fresh, fisher, EwcConfig(5.0)).item() == 0.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_exactly_quadratic(self, seed, lam):
        rng = np.random.default_rng(seed)
        net = mlp_bn(3, [4], 2, seed=seed)
        snap = snapshot_parameters(net)
        fisher = FisherDiagonal({k: rng.uniform(size=v.shape) for k, v in snap.params.items()}, 1)
        delta = {k: rng.normal(size=v.shape) * 0.1 for k, v in snap.params.items()}
        with T.precision(np.float64):
            values = []
            for c in (1, 2):
                for k, p in net.trainable_parameters().items():
                    p.data = snap.params[k].astype(np.float64) + c * delta[k]
                values.append(ewc_penalty(net, snap, fisher, EwcConfig(lam)).item())
        assert values[1] == pytest.approx(4 * values[0], rel=1e-5)

    def test_lambda_scaling(self, rng):
        net = mlp_bn(3, [4], 2)
        snap = snapshot_parameters(net)
        fisher = FisherDiagonal({k: rng.uniform(size=v.shape) for k, v in snap.params.items()}, 1)
        for p in net.trainable_parameters().values():
            p.data = (p.data + rng.normal(size=p.shape)).astype(np.float32)
        out = {}
        for lam in (0.5, 4.0):
            net.zero_grad()
            pen = ewc_penalty(net, snap, fisher, EwcConfig(lam))
            T.backward(pen)
            out[lam] = (pen.item(), {k: p.grad.copy() for k, p in net.trainable_parameters().items()})
        assert out[4.0][0] == pytest.approx(8 * out[0.5][0], rel=1e-6)
        for k, g in out[0.5][1].items():
            np.testing.assert_allclose(out[4.0][1][k], 8 * g, rtol=1e-6)

    def test_shape_mismatch(self):
        net, _, fisher = self._setup()
        with pytest.raises(ValueError):
            ewc_penalty(net, ParameterSnapshot({"0.weight": np.zeros((1, 2))}), fisher, EwcConfig(1))

    def test_missing_entries_contribute_zero(self):
        net, snap, fisher = self._setup()
        net.set_trainable(["0.bias"], True)
        assert ewc_penalty(net, snap, fisher, EwcConfig(2.0)).item() == pytest.approx(3.0)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            EwcConfig(-1.0)


class TestCombinedLoss:
    def _parts(self, net, x, y, snap, fisher, lam):
        task = T.softmax_cross_entropy(net.forward(x, TRAIN), y)
        return task, ewc_penalty(net, snap, fisher, EwcConfig(lam))

    def test_zero_penalty_same_gradient(self, rng):
        net = mlp_bn(3, [4], 2)
        x, y = rng.normal(size=(6, 3)), rng.integers(0, 2, size=6)
        snap = snapshot_parameters(net)
        fisher = FisherDiagonal({k: np.ones(v.shape) for k, v in snap.params.items()}, 1)
        T.backward(T.softmax_cross_entropy(net.forward(x, TRAIN), y))
        plain = {k: p.grad.copy() for k, p in net.named_parameters().items()}
        net.zero_grad()
        T.backward(combined_loss(*self._parts(net, x, y, snap, fisher, 0.0)))
        for k, p in net.named_parameters().items():
            assert p.grad.tobytes() == plain[k].tobytes()

    def test_large_lambda_direction(self, rng):
        net = mlp_bn(3, [4], 2)
        snap = snapshot_parameters(net)
        fisher = FisherDiagonal({k: rng.uniform(0.5, 2, size=v.shape) for k, v in snap.params.items()}, 1)
        for p in net.trainable_parameters().values():
            p.data = (p.data + rng.normal(size=p.shape)).astype(np.float32)
        x, y = rng.normal(size=(6, 3)), rng.integers(0, 2, size=6)
        T.backward(combined_loss(*self._parts(net, x, y, snap, fisher, 1e6)))
        for k, p in net.trainable_parameters().items():
            direction = fisher.values[k] * (p.data - snap.params[k])
            cos = np.sum(p.grad * direction) / (np.linalg.norm(p.grad) * np.linalg.norm(direction))
            assert cos > 0.9999, k

    def test_finite_differences(self, rng):
        with T.precision(np.float64):
            net = mlp_bn(3, [4], 2, seed=4)
            snap = snapshot_parameters(net)
            fisher = FisherDiagonal({k: rng.uniform(size=v.shape) for k, v in snap.params.items()}, 1)
            for p in net.trainable_parameters().values():
                p.data = p.data.astype(np.float64) + rng.normal(size=p.shape) * 0.3
            x, y = rng.normal(size=(6, 3)), rng.integers(0, 2, size=6)
            build = lambda: combined_loss(*self._parts(net, x, y, snap, fisher, 3.0))
            T.backward(build())
            for k, p in net.trainable_parameters().items():
                num = T.numeric_grad(lambda: build().item(), p.data, step=1e-6)
                assert T.relative_error(p.grad, num) < 1e-3, k


class TestSnapshot:
    def test_training_does_not_mutate(self, rng):
        net = mlp_bn(3, [4], 2)
        snap = snapshot_parameters(net, "origin")
        before = {k: v.tobytes() for k, v in snap.params.items()}
        state = AdamState(lr=0.1)
        for _ in range(10):
            net.zero_grad()
            T.backward(T.softmax_cross_entropy(net.forward(rng.normal(size=(8, 3)), TRAIN),
                                               rng.integers(0, 2, size=8)))
            params = net.trainable_parameters()
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
        assert {k: v.tobytes() for k, v in snap.params.items()} == before
        assert mean_abs_drift(net, snap) > 0

    def test_read_only(self):
        snap = snapshot_parameters(mlp_bn(3, [4], 2))
        with pytest.raises(ValueError):
            snap.params["0.weight"][0, 0] = 1.0
        with pytest.raises(TypeError):
            snap.params["new"] = np.zeros(1)

    def test_restore_round_trip(self):
        net = mlp_bn(3, [4], 2, seed=1)
        snap = snapshot_parameters(net)
        other = mlp_bn(3, [4], 2, seed=2)
        other.load_state_dict({**other.state_dict(), **snap.params})
        again = snapshot_parameters(other)
        assert {k: v.tobytes() for k, v in again.params.items()} == \
               {k: v.tobytes() for k, v in snap.params.items()}

    def test_name_set_is_trainable_set(self):
        net = mlp_bn(3, [4], 2)
        net.set_trainable(["0.weight"], False)
        assert set(snapshot_parameters(net).params) == set(net.trainable_parameters())


def test_lambda_grid_pulls_argmin_to_anchor():
    # task loss (theta - 2)^2 / 2, anchor 0, Fisher 1: argmin 2 / (1 + lambda)
    snap = ParameterSnapshot({"0.weight": np.zeros((1, 1))})
    fisher = FisherDiagonal({"0.weight": np.ones((1, 1))}, 1)

    def objective(theta, lam):
        with T.precision(np.float64):
            net = scalar_net(theta)
            w = net.layers[0].weight
            w.data = np.array([[theta]])
            task = T.scale(T.tensor_sum(T.mul(T.sub(w, T.Tensor(2.0)), T.sub(w, T.Tensor(2.0)))), 0.5)
            return combined_loss(task, ewc_penalty(net, snap, fisher, EwcConfig(lam))).item()

    dist = []
    for lam in DEFAULT_LAMBDA_GRID:
        res = minimize_scalar(lambda t: objective(t, lam), bounds=(-1, 3), method="bounded",
                              options={"xatol": 1e-9})
        assert res.x == pytest.approx(2 / (1 + lam), abs=1e-6)
        dist.append(abs(res.x))
    assert all(b < a for a, b in zip(dist, dist[1:]))
    assert dist[-1] < 1e-4


def test_default_grid():
    assert DEFAULT_LAMBDA_GRID == (0.0, 0.005, 0.05, 0.5, 1.0, 10.0, 1e3, 1e5)
