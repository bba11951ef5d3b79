import math

import numpy as np
import pytest

import molrl.nnkit as nn
from conftest import max_grad_error


def fd_gradient(loss_fn, param: nn.Tensor, h: float = 1e-6) -> np.ndarray:
    flat = param.data.ravel()
    grad = np.zeros_like(flat)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = loss_fn()
        flat[k] = orig - h
        down = loss_fn()
        flat[k] = orig
        grad[k] = (up - down) / (2 * h)
    return grad.reshape(param.data.shape)


class TestForwardOps:
    def test_gaussian_log_pdf_standard_normal_mode(self):
        lp = nn.gaussian_log_pdf(0.0, nn.tensor(0.0), nn.tensor(0.0))
        assert lp.item() == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_log_softmax_uniform(self):
        for n in (2, 5, 9):
            out = nn.log_softmax(nn.tensor(np.full(n, 3.7)))
            np.testing.assert_allclose(out.data, -math.log(n), atol=1e-12)

    def test_matmul_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 4))
        out = nn.matmul(nn.tensor(np.eye(4)), nn.tensor(x))
        np.testing.assert_allclose(out.data, x)

    def test_matmul_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            nn.matmul(nn.tensor(np.ones((2, 3))), nn.tensor(np.ones((2, 3))))

    def test_softplus_sigmoid_tanh_values(self):
        x = nn.tensor([-3.0, 0.0, 2.0])
        np.testing.assert_allclose(nn.softplus(x).data, np.logaddexp(0, x.data))
        np.testing.assert_allclose(nn.sigmoid(x).data, 1 / (1 + np.exp(-x.data)))
        np.testing.assert_allclose(nn.tanh(x).data, np.tanh(x.data))

    def test_scatter_gather_roundtrip(self):
        rows = nn.tensor(np.arange(12.0).reshape(4, 3))
        picked = nn.gather_rows(rows, [2, 0, 2])
        np.testing.assert_allclose(picked.data, rows.data[[2, 0, 2]])
        summed = nn.scatter_add(picked, [0, 1, 0], 2)
        np.testing.assert_allclose(summed.data[0], rows.data[2] * 2)
        np.testing.assert_allclose(summed.data[1], rows.data[0])

    def test_clip_and_minimum(self):
        a = nn.tensor([0.5, 1.5, 2.5])
        np.testing.assert_allclose(nn.clip(a, 0.8, 1.2).data, [0.8, 1.2, 1.2])
        b = nn.tensor([1.0, 1.0, 1.0])
        np.testing.assert_allclose(nn.minimum(a, b).data, [0.5, 1.0, 1.0])

    def test_radial_basis_and_cutoff(self):
        feats = nn.radial_basis(np.array([0.0, 2.5, 5.0]), 8, 5.0)
        assert feats.shape == (3, 8)
        cut = nn.cosine_cutoff(np.array([0.0, 2.5, 5.0, 7.0]), 5.0)
        np.testing.assert_allclose(cut, [1.0, 0.5, 0.0, 0.0], atol=1e-12)


class TestBackward:
    def test_square_derivative(self):
        x = nn.Tensor(3.0, requires_grad=True)
        y = nn.mul(x, x)
        nn.backward(y)
        assert float(x.grad) == pytest.approx(6.0)

    def test_three_layer_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        store = nn.ParamStore(seed=5)
        w1 = store.param("w1", (4, 6))
        b1 = store.param("b1", (6,), init="zeros")
        w2 = store.param("w2", (6, 6))
        b2 = store.param("b2", (6,), init="zeros")
        w3 = store.param("w3", (6, 1))
        b3 = store.param("b3", (1,), init="zeros")
        x = nn.tensor(rng.normal(size=(7, 4)))
        target = rng.normal(size=(7, 1))

        def loss_fn():
            h = nn.tanh(nn.linear(x, w1, b1))
            h = nn.sigmoid(nn.linear(h, w2, b2))
            out = nn.linear(h, w3, b3)
            err = nn.sub(out, nn.tensor(target))
            return nn.tmean(nn.mul(err, err))

        loss = loss_fn()
        nn.backward(loss)
        for name, param in store.params.items():
            fd = fd_gradient(lambda: loss_fn().item(), param)
            assert max_grad_error(fd, param.grad) < 1e-5, name

    def test_zero_weight_network_passes_zero_gradient_to_inputs(self):
        w = nn.Tensor(np.zeros((3, 2)), requires_grad=True)
        x = nn.Tensor(np.ones((4, 3)), requires_grad=True)
        out = nn.tsum(nn.matmul(x, w))
        nn.backward(out)
        np.testing.assert_allclose(x.grad, 0.0)

    def test_double_backward_is_an_error(self):
        x = nn.Tensor(2.0, requires_grad=True)
        y = nn.mul(x, x)
        nn.backward(y)
        with pytest.raises(RuntimeError, match="twice"):
            nn.backward(y)

    def test_non_scalar_loss_rejected(self):
        x = nn.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            nn.backward(nn.mul(x, 2.0))

    def test_fan_in_accumulation(self):
        x = nn.Tensor(1.5, requires_grad=True)
        y = nn.add(nn.mul(x, x), nn.mul(x, 3.0))
        nn.backward(y)
        assert float(x.grad) == pytest.approx(2 * 1.5 + 3.0)

    def test_no_grad_suppresses_graph(self):
        x = nn.Tensor(1.0, requires_grad=True)
        with nn.no_grad():
            y = nn.mul(x, x)
        assert not y.requires_grad

    def test_gaussian_log_pdf_gradients(self):
        store = nn.ParamStore()
        mu = store.constant("mu", 0.3)
        lsg = store.constant("lsg", -0.4)

        def loss_fn():
            return nn.gaussian_log_pdf(1.1, mu, lsg).item()

        lp = nn.gaussian_log_pdf(1.1, mu, lsg)
        nn.backward(lp)
        assert max_grad_error(fd_gradient(loss_fn, mu), mu.grad) < 1e-6
        assert max_grad_error(fd_gradient(loss_fn, lsg), lsg.grad) < 1e-6


class TestOptimizer:
    def test_first_step_moves_by_learning_rate(self):
        store = nn.ParamStore()
        p = store.constant("p", [1.0])
        p.grad = np.array([1.0])
        nn.optimizer_step(store, lr=5e-5, grad_clip=0.5)
        # bias-corrected first step: lr * g / (|g| + eps) ~ lr, any clip scale
        assert 1.0 - float(p.data[0]) == pytest.approx(5e-5, rel=1e-3)

    def test_global_norm_clip_scales_update_directions(self):
        store = nn.ParamStore()
        p = store.constant("p", [0.0, 0.0])
        p.grad = np.array([1.2, 1.6])  # norm 2.0
        returned = nn.optimizer_step(store, lr=1.0, grad_clip=0.5)
        assert returned == pytest.approx(2.0)
        # after scaling by 0.25, moments see g = [0.3, 0.4]
        np.testing.assert_allclose(store.moment1["p"], [0.03, 0.04], atol=1e-12)

    def test_zero_gradients_leave_parameters_unchanged(self):
        store = nn.ParamStore()
        p = store.constant("p", [2.0, -1.0])
        p.grad = np.zeros(2)
        nn.optimizer_step(store, lr=0.1, grad_clip=0.5)
        np.testing.assert_allclose(p.data, [2.0, -1.0])

    def test_nan_gradient_names_the_parameter(self):
        store = nn.ParamStore()
        good = store.constant("good", [1.0])
        bad = store.constant("bad_param", [1.0])
        good.grad = np.array([0.1])
        bad.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="bad_param"):
            nn.optimizer_step(store, lr=0.1)

    def test_deterministic_updates(self):
        def run():
            store = nn.ParamStore(seed=3)
            w = store.param("w", (4, 4))
            x = nn.tensor(np.linspace(-1, 1, 16).reshape(4, 4))
            for _ in range(25):
                store.zero_grad()
                out = nn.tmean(nn.mul(nn.tanh(nn.matmul(x, w)), 1.0))
                nn.backward(out)
                nn.optimizer_step(store, lr=1e-3, grad_clip=0.5)
            return w.data.copy()

        a, b = run(), run()
        assert a.tobytes() == b.tobytes()


class TestCheckpointFormat:
    def build_store(self):
        store = nn.ParamStore(seed=9)
        store.param("layer.W", (3, 2))
        store.param("layer.b", (2,), init="zeros")
        return store

    def test_round_trip_bitwise(self, tmp_path):
        store = self.build_store()
        store.params["layer.W"].grad = np.ones((3, 2))
        nn.optimizer_step(store, lr=0.01)
        rng_state = {"stream": 42}
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, store, "hash123", rng_state, {"iteration": 7})

        other = self.build_store()
        rng_back, extra = nn.load_checkpoint(path, other, expected_hash="hash123")
        assert rng_back == {"stream": 42}
        assert extra == {"iteration": 7}
        assert other.step_count == store.step_count
        for name in store.params:
            assert other.params[name].data.tobytes() == store.params[name].data.tobytes()
            assert other.moment1[name].tobytes() == store.moment1[name].tobytes()
            assert other.moment2[name].tobytes() == store.moment2[name].tobytes()

    def test_hash_mismatch_refused(self, tmp_path):
        store = self.build_store()
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, store, "hash-a")
        with pytest.raises(nn.CheckpointError, match="hash"):
            nn.load_checkpoint(path, self.build_store(), expected_hash="hash-b")

    def test_corrupt_file_is_explicit_error(self, tmp_path):
        path = tmp_path / "garbage.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(nn.CheckpointError, match="magic"):
            nn.load_checkpoint(path, self.build_store())

    def test_truncated_payload_detected(self, tmp_path):
        store = self.build_store()
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, store, "h")
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(nn.CheckpointError, match="truncated"):
            nn.load_checkpoint(path, self.build_store())

    def test_config_hash_stable(self):
        a = nn.config_hash({"b": 1, "a": [1, 2]})
        b = nn.config_hash({"a": [1, 2], "b": 1})
        assert a == b
