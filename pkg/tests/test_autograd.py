"""Reverse-mode autograd: forward values, gradients, tape semantics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udon import autograd as ag
from oracles import central_diff, log_softmax_mp, rel_err

SEEDS = range(20)


def _scalar(build):
    """Wrap ``build(*tensors) -> Tensor`` into a float function of arrays."""
    def f(*arrays):
        return build(*[ag.constant(a) for a in arrays]).item()
    return f


def _check(build, arrays, tol=1e-4):
    params = [ag.parameter(a.copy()) for a in arrays]
    grads = ag.backward(build(*params))
    analytic = [ag.grad_of(grads, p) for p in params]
    numeric = central_diff(_scalar(build), [a.copy() for a in arrays])
    for a, n in zip(analytic, numeric):
        assert rel_err(a, n) < tol


def _weighted(op):
    """Turn an op with matrix output into a generic scalar: sum(op(..) * R)."""
    def build(*ts):
        out = op(*ts)
        r = np.random.default_rng(out.shape).standard_normal(out.shape)
        return ag.sum_all(ag.multiply(out, ag.constant(r)))
    return build


# Every differentiable op, with an input sampler. Shapes stay <= 8x8.
def _ops():
    def logp(rng, shape):
        x = rng.standard_normal(shape)
        return x - np.log(np.exp(x).sum(axis=1, keepdims=True))

    idx = [2, 0, 2, 1, 3, 2]
    return {
        "add": (ag.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "add_row": (ag.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
        "subtract": (ag.subtract, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "multiply": (ag.multiply, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "scalar_scale": (lambda x: ag.scalar_scale(x, -2.5), lambda r: [r.standard_normal((3, 4))]),
        "transpose": (ag.transpose, lambda r: [r.standard_normal((3, 4))]),
        "matmul": (ag.matmul, lambda r: [r.standard_normal((5, 7)), r.standard_normal((7, 3))]),
        "relu": (ag.relu, lambda r: [r.standard_normal((4, 5))]),
        "gelu": (ag.gelu, lambda r: [2 * r.standard_normal((4, 5))]),
        "gather_rows": (lambda x: ag.gather_rows(x, idx), lambda r: [r.standard_normal((4, 3))]),
        "row_l2_normalize": (ag.row_l2_normalize, lambda r: [r.standard_normal((4, 8))]),
        "log_softmax_rows": (ag.log_softmax_rows, lambda r: [3 * r.standard_normal((3, 6))]),
        "layernorm_rows": (ag.layernorm_rows, lambda r: [r.standard_normal((3, 8))]),
        "kl_rows": (ag.kl_rows, lambda r: [logp(r, (3, 5)), logp(r, (3, 5))]),
        "frobenius_sq_diff": (ag.frobenius_sq_diff,
                              lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "sum_all": (ag.sum_all, lambda r: [r.standard_normal((3, 4))]),
        "mean_all": (ag.mean_all, lambda r: [r.standard_normal((3, 4))]),
    }


OPS = _ops()


class TestGradientChecks:
    """Central finite differences (h=1e-5) against backward() for every op."""

    @pytest.mark.parametrize("name", sorted(OPS))
    @pytest.mark.parametrize("seed", SEEDS)
    def test_op_gradient(self, name, seed):
        op, sample = OPS[name]
        arrays = sample(np.random.default_rng(seed))
        _check(_weighted(op), arrays)

    def test_matmul_tight(self):
        """Linear op: finite differences are exact up to rounding."""
        rng = np.random.default_rng(0)
        _check(_weighted(ag.matmul), [rng.standard_normal((5, 7)), rng.standard_normal((7, 3))],
               tol=1e-6)

    def test_normalize_tight(self):
        rng = np.random.default_rng(1)
        _check(_weighted(ag.row_l2_normalize), [rng.standard_normal((4, 8))], tol=1e-5)

    @pytest.mark.parametrize("seed", range(5))
    def test_composite(self, seed):
        """A small network mixing most ops, on random 3x4 inputs."""
        rng = np.random.default_rng(seed)

        def build(x, w, v):
            h = ag.gelu(ag.matmul(x, w))
            e = ag.row_l2_normalize(ag.layernorm_rows(h))
            gram = ag.matmul(e, ag.transpose(e))
            logits = ag.scalar_scale(ag.matmul(e, v), 3.0)
            lp = ag.log_softmax_rows(logits)
            target = ag.log_softmax_rows(ag.constant(np.arange(12.0).reshape(3, 4) / 4))
            kl = ag.kl_rows(lp, target)
            return ag.add(ag.frobenius_sq_diff(gram, ag.constant(np.eye(3))),
                          ag.add(ag.mean_all(kl), ag.sum_all(ag.relu(logits))))

        _check(build, [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)),
                       rng.standard_normal((5, 4))])


class TestForwardValues:
    def test_matmul_identity(self):
        m = np.array([[1.5, -2.0], [0.25, 7.0]])
        out = ag.matmul(ag.constant(np.eye(2)), ag.constant(m))
        np.testing.assert_array_equal(out.values, m)

    def test_matmul_hand(self):
        out = ag.matmul(ag.constant([[1, 2], [3, 4]]), ag.constant([[0], [1]]))
        np.testing.assert_array_equal(out.values, [[2], [4]])

    def test_matmul_shape_error_mentions_shapes(self):
        with pytest.raises(ag.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            ag.matmul(ag.constant(np.ones((2, 3))), ag.constant(np.ones((2, 3))))

    def test_normalize_345(self):
        out = ag.row_l2_normalize(ag.constant([[3.0, 4.0]]))
        np.testing.assert_allclose(out.values, [[0.6, 0.8]], rtol=0, atol=1e-15)

    def test_normalize_unit_row_unchanged(self):
        row = np.array([[0.6, 0.8, 0.0]])
        np.testing.assert_allclose(ag.row_l2_normalize(ag.constant(row)).values, row, atol=1e-15)

    def test_normalize_zero_row_guarded(self):
        """A zero row stays finite and passes no gradient."""
        x = ag.parameter(np.array([[0.0, 0.0], [3.0, 4.0]]))
        y = ag.row_l2_normalize(x)
        assert np.all(np.isfinite(y.values))
        grads = ag.backward(ag.sum_all(ag.multiply(y, ag.constant(np.ones((2, 2))))))
        np.testing.assert_array_equal(grads[x][0], [0.0, 0.0])

    def test_log_softmax_uniform(self):
        out = ag.log_softmax_rows(ag.constant([[0.0, 0.0]]))
        np.testing.assert_allclose(out.values, [[-math.log(2)] * 2], atol=1e-15)

    def test_log_softmax_no_overflow(self):
        out = ag.log_softmax_rows(ag.constant([[1000.0, 0.0]])).values
        assert np.all(np.isfinite(out))
        assert abs(out[0, 0]) < 1e-300 or out[0, 0] == 0.0
        assert out[0, 1] == pytest.approx(-1000.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_log_softmax_vs_high_precision(self, seed):
        row = np.random.default_rng(seed).normal(0, 5, size=9)
        out = ag.log_softmax_rows(ag.constant(row[None, :])).values[0]
        np.testing.assert_allclose(out, log_softmax_mp(row), rtol=0, atol=1e-12)

    def test_log_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(3).normal(0, 10, size=(6, 11))
        p = np.exp(ag.log_softmax_rows(ag.constant(x)).values)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_gelu_reference_points(self):
        """Tanh-form GELU at a few points, computed independently."""
        xs = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
        ref = [0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
               for x in xs]
        np.testing.assert_allclose(ag.gelu(ag.constant(xs[None, :])).values[0], ref, atol=1e-15)

    def test_layernorm_rows_standardized(self):
        x = np.random.default_rng(4).normal(3, 2, size=(5, 8))
        y = ag.layernorm_rows(ag.constant(x)).values
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)

    def test_frobenius_value(self):
        a = ag.constant([[1.0, 2.0], [3.0, 4.0]])
        b = ag.constant([[0.0, 2.0], [3.0, 6.0]])
        assert ag.frobenius_sq_diff(a, b).item() == 5.0

    def test_add_rejects_general_broadcast(self):
        with pytest.raises(ag.DimensionError):
            ag.add(ag.constant(np.ones((3, 4))), ag.constant(np.ones((3, 1))))

    def test_gather_rows_out_of_range(self):
        with pytest.raises(ag.ContractError):
            ag.gather_rows(ag.constant(np.ones((3, 2))), [0, 3])

    def test_kl_rows_zero_for_equal(self):
        lp = ag.log_softmax_rows(ag.constant(np.random.default_rng(5).normal(size=(4, 6))))
        np.testing.assert_allclose(ag.kl_rows(lp, lp).values, 0.0, atol=0)


class TestStopGradient:
    def test_ancestor_gets_zero(self):
        x = ag.parameter(np.array([[1.0, -2.0, 3.0]]))
        y = ag.parameter(np.array([[0.5, 4.0, -1.0]]))
        grads = ag.backward(ag.sum_all(ag.multiply(ag.stop_gradient(x), y)))
        np.testing.assert_array_equal(ag.grad_of(grads, x), 0.0)
        np.testing.assert_array_equal(grads[y], x.values)

    def test_detached_has_no_node(self):
        x = ag.parameter(np.ones((2, 2)))
        z = ag.stop_gradient(ag.scalar_scale(x, 3.0))
        assert z.node is None and not z.requires_grad
        np.testing.assert_array_equal(z.values, 3.0 * np.ones((2, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_paths_only_through_barrier_are_zero(self, seed):
        """x feeds the loss twice, once behind a barrier; only the open path counts."""
        rng = np.random.default_rng(seed)
        xv, wv = rng.standard_normal((3, 4)), rng.standard_normal((4, 4))
        x, w = ag.parameter(xv), ag.parameter(wv)
        blocked = ag.matmul(ag.stop_gradient(ag.gelu(x)), w)
        grads_both = ag.backward(ag.sum_all(ag.add(blocked, ag.matmul(x, w))))
        x2, w2 = ag.parameter(xv), ag.parameter(wv)
        grads_open = ag.backward(ag.sum_all(ag.matmul(x2, w2)))
        np.testing.assert_array_equal(grads_both[x], grads_open[x2])


class TestBackwardContract:
    def test_sum_gives_ones(self):
        x = ag.parameter(np.random.default_rng(0).normal(size=(3, 5)))
        np.testing.assert_array_equal(ag.backward(ag.sum_all(x))[x], np.ones((3, 5)))

    def test_frobenius_self_zero_grad(self):
        a = ag.parameter(np.random.default_rng(1).normal(size=(3, 3)))
        np.testing.assert_array_equal(ag.backward(ag.frobenius_sq_diff(a, a))[a], 0.0)

    def test_non_scalar_rejected(self):
        with pytest.raises(ag.ContractError):
            ag.backward(ag.scalar_scale(ag.parameter(np.ones((2, 2))), 2.0))

    def test_loss_without_trainable_inputs_rejected(self):
        with pytest.raises(ag.ContractError):
            ag.backward(ag.sum_all(ag.constant(np.ones((2, 2)))))

    def test_grad_shape_matches(self):
        x = ag.parameter(np.ones((4, 3)))
        w = ag.parameter(np.ones((3, 2)))
        grads = ag.backward(ag.mean_all(ag.matmul(x, w)))
        assert x.grad.shape == (4, 3) and w.grad.shape == (3, 2)
        assert grads[x] is x.grad

    def test_accumulation_matches_doubled_graph(self):
        """x + x accumulates the same gradient as 2 * x."""
        xv = np.random.default_rng(2).normal(size=(3, 4))
        x1, x2 = ag.parameter(xv), ag.parameter(xv)
        g1 = ag.backward(ag.sum_all(ag.gelu(ag.add(x1, x1))))[x1]
        g2 = ag.backward(ag.sum_all(ag.gelu(ag.scalar_scale(x2, 2.0))))[x2]
        np.testing.assert_allclose(g1, g2, rtol=0, atol=1e-15)

    def test_gather_repeated_rows_accumulate(self):
        x = ag.parameter(np.zeros((3, 2)))
        g = ag.backward(ag.sum_all(ag.gather_rows(x, [1, 1, 1, 0])))[x]
        np.testing.assert_array_equal(g, [[1, 1], [3, 3], [0, 0]])

    def test_tape_order_is_creation_order(self):
        x = ag.parameter(np.ones((2, 2)))
        a = ag.gelu(x)
        b = ag.relu(a)
        c = ag.sum_all(ag.add(a, b))
        ops = [n.op for n in ag.Tape.from_root(c).nodes]
        assert ops == ["gelu", "relu", "add", "sum_all"]

    def test_replay_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = ag.parameter(rng.standard_normal((4, 6)))
            w = ag.parameter(rng.standard_normal((6, 3)))
            loss = ag.mean_all(ag.log_softmax_rows(ag.matmul(ag.row_l2_normalize(x), w)))
            g = ag.backward(loss)
            return loss.item(), g[x].tobytes(), g[w].tobytes()
        assert run() == run()

    def test_repeated_backward_identical(self):
        x = ag.parameter(np.random.default_rng(3).normal(size=(2, 3)))
        loss = ag.sum_all(ag.multiply(x, x))
        g1 = ag.backward(loss)[x].copy()
        g2 = ag.backward(loss)[x]
        np.testing.assert_array_equal(g1, g2)
