import numpy as np
import pytest

from fgfl import autodiff as ad


def naive_matmul(a, b):
    """Triple-loop reference, independent of numpy's matmul path."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestForwardOps:
    def test_segment_softmax_equal_scores_uniform(self):
        out = ad.segment_softmax(ad.constant([0.5, 0.5]), [0, 0], 1)
        np.testing.assert_array_equal(out.value, [0.5, 0.5])

    def test_relu(self):
        out = ad.relu(ad.constant([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.value, [0.0, 0.0, 2.0])

    def test_matmul_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = ad.matmul(ad.constant(a), ad.constant(b))
        # BLAS may reassociate the k-sum; agreement is exact up to 2 ulp
        np.testing.assert_allclose(out.value, naive_matmul(a, b), rtol=5e-16, atol=0.0)

    def test_shape_mismatch_names_operation(self):
        with pytest.raises(ad.AutodiffError, match="matmul"):
            ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
        with pytest.raises(ad.AutodiffError, match="dot"):
            ad.dot(ad.constant([1.0]), ad.constant([1.0, 2.0]))

    def test_non_finite_result_is_an_error(self):
        big = ad.constant(np.full(3, 1e308))
        with pytest.raises(ad.AutodiffError, match="non-finite"):
            ad.add(big, big)

    def test_segment_softmax_sums_to_one(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(scale=5.0, size=40)
        seg = rng.integers(0, 7, size=40)
        seg[:7] = np.arange(7)  # every segment occupied
        out = ad.segment_softmax(ad.constant(scores), seg, 7).value
        assert (out >= 0).all()
        sums = np.zeros(7)
        np.add.at(sums, seg, out)
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_dropout_eval_is_identity(self):
        x = ad.constant([1.0, -2.0, 3.0])
        assert ad.dropout(x, 0.5, training=False) is x

    def test_dropout_train_inverted_scaling(self):
        rng = np.random.default_rng(0)
        x = ad.constant(np.ones(10000))
        out = ad.dropout(x, 0.25, training=True, rng=rng).value
        kept = out[out > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert abs(out.mean() - 1.0) < 0.05


class TestBackward:
    def test_sum_of_squares_gradient(self):
        p = ad.leaf([1.0, 2.0])
        loss = ad.dot(p, p)
        grads = ad.backward(loss)
        np.testing.assert_array_equal(grads[p], [2.0, 4.0])

    def test_constant_loss_gives_zero_gradient(self):
        p = ad.leaf([1.0, 2.0, 3.0])
        loss = ad.dot(ad.constant([1.0]), ad.constant([5.0]))
        grads = ad.backward(loss, wrt=[p])
        np.testing.assert_array_equal(grads[p], np.zeros(3))

    def test_backward_requires_scalar(self):
        p = ad.leaf([1.0, 2.0])
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.backward(ad.add(p, p))

    def test_backward_twice_bitwise_identical(self):
        rng = np.random.default_rng(5)
        p = ad.leaf(rng.normal(size=(4, 3)))
        q = ad.leaf(rng.normal(size=(3, 2)))
        loss = ad.sq_error(ad.mean_axis0(ad.mean_axis0(ad.matmul(p, q))), 0.7)
        g1 = {k: v.copy() for k, v in ad.backward(loss).items()}
        g2 = ad.backward(loss)
        for node, grad in g1.items():
            assert np.array_equal(grad, g2[node])

    def test_gather_rows_accumulates_duplicates(self):
        p = ad.leaf([[1.0], [2.0]])
        picked = ad.gather_rows(p, [0, 0, 1])
        loss = ad.mean_axis0(ad.mean_axis0(picked))
        grads = ad.backward(loss)
        np.testing.assert_allclose(grads[p], [[2.0 / 3.0], [1.0 / 3.0]])


def quadratic(x):
    return ad.mul(x, x)


class TestGradCheck:
    def test_scalar_square(self):
        report = ad.grad_check(quadratic, 3.0, step=1e-5, tol=1e-6)
        assert report.passed
        np.testing.assert_allclose(report.analytic, 6.0)
        np.testing.assert_allclose(report.numeric, 6.0, atol=1e-6)

    def test_corrupted_rule_fails_with_located_coordinates(self):
        def broken(x):
            # correct forward, deliberately wrong vjp on coordinate 1
            out = np.asarray((x.value**2).sum())
            wrongness = np.array([1.0, 3.0, 1.0])

            def vjp(g):
                return g * 2.0 * x.value * wrongness

            return ad.Node(out, "broken_square", (x,), (vjp,))

        report = ad.grad_check(broken, [1.0, 1.0, 1.0], step=1e-5, tol=1e-4)
        assert not report.passed
        assert report.failing == [(1,)]

    def test_non_finite_f_raises(self):
        def exploding(x):
            return ad.mul(ad.mul(x, ad.constant(1e200)), ad.constant(1e200))

        with pytest.raises(ad.AutodiffError):
            ad.grad_check(exploding, 2.0)


def composite_builders(rng):
    """One differentiable scalar function exercising each primitive."""
    m = rng.normal(size=(4, 3))
    seg = np.array([0, 0, 1, 2, 2, 2])
    idx = np.array([0, 2, 1, 3, 0, 1])
    idx3 = np.array([0, 2, 1, 0, 2, 1])
    vec = rng.normal(size=3)
    target = rng.normal(size=3)
    return {
        "matmul": lambda x: ad.sq_error(
            ad.mean_axis0(ad.mean_axis0(ad.matmul(x, ad.constant(m.T)))), 0.3
        ),
        "add_broadcast": lambda x: ad.sq_error(ad.mean_axis0(ad.add(x, ad.constant(vec))), target),
        "mul": lambda x: ad.sq_error(ad.mean_axis0(ad.mul(x, x)), target),
        "concat": lambda x: ad.sq_error(
            ad.mean_axis0(ad.mean_axis0(ad.concat_last([x, ad.mul(x, x)]))), 0.2
        ),
        "leaky_relu": lambda x: ad.sq_error(ad.mean_axis0(ad.mean_axis0(ad.leaky_relu(x))), 0.0),
        "relu": lambda x: ad.sq_error(ad.mean_axis0(ad.mean_axis0(ad.relu(x))), 0.0),
        "segment_softmax": lambda x: ad.sq_error(
            ad.mean_axis0(ad.segment_softmax(ad.gather_rows(ad.mean_axis0(x), idx3), seg, 3)), 0.4
        ),
        "segment_sum": lambda x: ad.sq_error(
            ad.mean_axis0(ad.mean_axis0(ad.segment_sum(ad.gather_rows(x, idx), seg, 3))), 0.1
        ),
        "mean": lambda x: ad.sq_error(ad.mean_axis0(ad.mean_axis0(x)), 0.25),
        "sq_error": lambda x: ad.sq_error(ad.mean_axis0(x), target),
        "dot_reshape": lambda x: ad.dot(
            ad.reshape(ad.mean_axis0(x), (3,)), ad.constant(vec)
        ),
    }


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    point = rng.normal(size=(4, 3)) + 0.13  # keep pre-activations away from kinks
    for name, f in composite_builders(rng).items():
        report = ad.grad_check(f, point, step=1e-5, tol=1e-4)
        assert report.passed, f"{name} (seed {seed}): max rel err {report.max_rel_error}"
