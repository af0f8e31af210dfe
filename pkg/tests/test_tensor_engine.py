import json

import numpy as np
import pytest

from helpers import central_difference, graph_gradcheck, max_relative_error, random_graph
from opa3d import tensor_engine as ag
from opa3d.nn import (
    MLP,
    Adam,
    CheckpointError,
    Module,
    Parameter,
    checkpoint_meta,
    load_checkpoint,
    multistep_lr,
    save_checkpoint,
)
from opa3d.tensor_engine import Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestForward:
    def test_relu(self):
        np.testing.assert_array_equal(ag.relu(Tensor([-1.0, 2.0])).values, [0, 2])

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0])).values, [0.5, 0.5])

    def test_huber_zero(self):
        assert ag.huber(Tensor(0.0), 1.0).item() == 0.0

    def test_huber_branches(self):
        out = ag.huber(Tensor([0.5, 3.0]), 1.0).values
        np.testing.assert_allclose(out, [0.125, 2.5])

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_shape_error(self):
        with pytest.raises(ValueError, match="incompatible shapes"):
            ag.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_log_guard(self):
        out = ag.log(Tensor([0.0, 1.0])).values
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(np.log(1e-12))

    def test_cross_entropy_finite_on_probabilities(self):
        probs = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
        out = ag.cross_entropy(Tensor(probs), np.array([0, 0, 1])).values
        assert np.all(np.isfinite(out))

    def test_cross_entropy_large_logits(self):
        out = ag.cross_entropy(Tensor([[1000.0, -1000.0]]), np.array([1])).values
        assert out[0] == pytest.approx(2000.0)

    def test_bce_matches_formula(self):
        z, y = np.array([-2.0, 0.3, 4.0]), np.array([0.0, 1.0, 1.0])
        expected = -(y * np.log(1 / (1 + np.exp(-z))) + (1 - y) * np.log(1 - 1 / (1 + np.exp(-z))))
        np.testing.assert_allclose(ag.binary_cross_entropy_with_logits(Tensor(z), y).values, expected)

    def test_no_grad_records_nothing(self):
        w = leaf([1.0, 2.0])
        with ag.no_grad():
            out = ag.tsum(w * w)
        assert not out.requires_grad


class TestBackward:
    def test_sum(self):
        w = leaf([1.0, 2.0, 3.0])
        ag.backward(ag.tsum(w))
        np.testing.assert_array_equal(w.grad, [1, 1, 1])

    def test_mean_square(self):
        w = leaf([1.0, 2.0])
        ag.backward(ag.mean(w * w))
        np.testing.assert_allclose(w.grad, [1.0, 2.0])

    def test_accumulates(self):
        w = leaf([1.0, 2.0])
        ag.backward(ag.tsum(w))
        ag.backward(ag.tsum(w))
        np.testing.assert_array_equal(w.grad, [2, 2])

    def test_non_scalar(self):
        with pytest.raises(ValueError, match="scalar"):
            ag.backward(leaf([1.0, 2.0]) * 2.0)

    def test_distributes_over_add(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))

        def grads(parts):
            w = leaf(x)
            loss = Tensor(0.0)
            for p in parts:
                loss = loss + p(w)
            ag.backward(loss)
            return w.grad

        f = lambda w: ag.tsum(ag.tanh(w))
        g = lambda w: ag.mean(ag.exp(w) * w)
        np.testing.assert_allclose(grads([f, g]), grads([f]) + grads([g]), atol=1e-12)

    def test_shared_subgraph(self):
        w = leaf(3.0)
        h = w * w
        ag.backward(h + h * 2.0)
        assert w.grad == pytest.approx(18.0)

    def test_two_layer_net_finite_difference(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(5, 3))
        params = [rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 2)), rng.normal(size=2)]

        def f(ts):
            h = ag.tanh(ag.add(ag.matmul(x, ts[0]), ts[1]))
            return ag.mean(ag.cross_entropy(ag.add(ag.matmul(h, ts[2]), ts[3]), np.array([0, 1, 1, 0, 1])))

        ts = [leaf(p) for p in params]
        ag.backward(f(ts))
        numeric = central_difference(lambda: f([Tensor(p) for p in params]).item(), params)
        assert max_relative_error([t.grad for t in ts], numeric) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_random_graphs(self, seed):
        leaves, f, ops = random_graph(np.random.default_rng(seed))
        analytic, numeric = graph_gradcheck(leaves, f)
        assert max_relative_error(analytic, numeric) < 1e-4, ops

    def test_indexing_ops(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(5, 3))
        ids = np.array([0, 2, 2, 4, 1])

        def f(t):
            a = ag.segment_sum(t, ids, 5)
            b = ag.take_along_last(ag.log_softmax(t), np.array([0, 1, 2, 0, 1]))
            c = ag.where(x[:, :1] > 0, t, t * t)
            return ag.tsum(a * a) + ag.tsum(b) + ag.tsum(c[1:4]) + ag.tsum(ag.reshape(t, (15,))[::2])

        t = leaf(x)
        ag.backward(f(t))
        arr = x.copy()
        numeric = central_difference(lambda: f(Tensor(arr)).item(), [arr])
        assert max_relative_error([t.grad], numeric) < 1e-4

    def test_stop_gradient(self):
        w = leaf(2.0)
        ag.backward(w * ag.stop_gradient(w))
        assert w.grad == pytest.approx(2.0)


class Tiny(Module):
    def __init__(self, seed=0, sizes=(3, 4, 2)):
        super().__init__()
        self.mlp = MLP(self, "mlp", list(sizes), np.random.default_rng(seed))


class TestModule:
    def test_duplicate_name(self):
        m = Module()
        m.add_param("a", np.zeros(2))
        with pytest.raises(ValueError, match="duplicate"):
            m.add_param("a", np.zeros(2))

    def test_frozen(self):
        m = Tiny()
        x = np.ones((2, 3))
        with m.frozen():
            out = ag.tsum(m.mlp(x))
            assert not out.requires_grad
        assert all(p.requires_grad for p in m.parameters())

    def test_zero_last(self):
        m = Module()
        mlp = MLP(m, "z", [3, 5, 2], np.random.default_rng(0), zero_last=True)
        np.testing.assert_array_equal(mlp(np.ones((4, 3))).values, 0.0)


class TestAdam:
    def test_zero_gradient(self):
        m = Tiny()
        before = m.state_dict()
        m.zero_grad()
        Adam(m.parameters()).step()
        for k, v in m.state_dict().items():
            np.testing.assert_array_equal(v, before[k])

    def test_first_step(self):
        # bias-corrected first moment / sqrt(second) = g / |g| = 1
        q = Parameter("q", [0.5])
        q.grad = np.array([1.0])
        Adam([q], lr=0.001).step()
        assert q.values[0] == pytest.approx(0.5 - 0.001, abs=1e-9)
        np.testing.assert_array_equal(q.grad, 0.0)

    def test_hand_recurrence_two_steps(self):
        q = Parameter("q", [0.0])
        opt = Adam([q], lr=0.01)
        m = v = 0.0
        w = 0.0
        for t, g in enumerate([2.0, -1.0], start=1):
            q.grad = np.array([g])
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert q.values[0] == pytest.approx(w, abs=1e-15)

    def test_missing_grad(self):
        m = Tiny()
        m.clear_grad()
        with pytest.raises(ValueError, match="missing gradients"):
            Adam(m.parameters()).step()

    def test_deterministic(self):
        def run():
            m = Tiny(seed=4)
            opt = Adam(m.parameters(), lr=0.01)
            for _ in range(3):
                ag.backward(ag.mean(ag.tanh(m.mlp(np.ones((2, 3))))))
                opt.step()
            return m.state_dict()

        a, b = run(), run()
        for k in a:
            assert a[k].tobytes() == b[k].tobytes()


class TestSchedule:
    def test_multistep(self):
        kw = dict(base_lr=0.001, milestones=(400, 600, 800), factors=(0.1, 0.1, 0.1))
        assert multistep_lr(399, **kw) == 0.001
        assert multistep_lr(450, **kw) == pytest.approx(0.0001)
        assert multistep_lr(600, **kw) == pytest.approx(1e-5)
        assert multistep_lr(899, **kw) == pytest.approx(1e-6)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = Tiny(seed=2)
        save_checkpoint(m, tmp_path / "m.ckpt", {"kind": "tiny"})
        other = load_checkpoint(Tiny(seed=9), tmp_path / "m.ckpt")
        for k, v in m.state_dict().items():
            assert other.state_dict()[k].tobytes() == v.tobytes()
        assert checkpoint_meta(tmp_path / "m.ckpt") == {"kind": "tiny"}

    def test_format(self, tmp_path):
        save_checkpoint(Tiny(), tmp_path / "m.ckpt")
        doc = json.loads((tmp_path / "m.ckpt").read_text())
        assert doc["format"] == "opa-ckpt-v1"
        assert set(doc["params"][0]) == {"name", "shape", "values"}

    def test_missing_parameter(self, tmp_path):
        save_checkpoint(Tiny(sizes=(3, 4)), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="missing parameter"):
            load_checkpoint(Tiny(sizes=(3, 4, 2)), tmp_path / "m.ckpt")

    def test_shape_mismatch(self, tmp_path):
        save_checkpoint(Tiny(sizes=(3, 5, 2)), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(Tiny(), tmp_path / "m.ckpt")

    @pytest.mark.parametrize("text, field", [
        ("{", "JSON"),
        ('{"format": "x", "params": []}', "format"),
        ('{"format": "opa-ckpt-v1"}', "params"),
        ('{"format": "opa-ckpt-v1", "params": [{"name": "a", "shape": [2]}]}', "values"),
        ('{"format": "opa-ckpt-v1", "params": [{"name": "a", "shape": [3], "values": [1, 2]}]}', "values"),
    ])
    def test_corrupt_names_field(self, tmp_path, text, field):
        (tmp_path / "bad.ckpt").write_text(text)
        with pytest.raises(CheckpointError, match=field):
            load_checkpoint(Tiny(), tmp_path / "bad.ckpt")
