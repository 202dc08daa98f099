"""Gradient and contract tests for the autodiff engine.

Every differentiable op is checked against central finite differences; the
DAG accumulation rule is additionally checked against an independent
forward-mode (dual-number) scalar oracle.
"""

import math

import numpy as np
import pytest

from mvmol import tensor as T

RNG = np.random.default_rng(1234)
FD_EPS = 1e-5
REL_TOL = 1e-4


def fd_grad(f, arrays, which, eps=FD_EPS):
    """Central-difference gradient of scalar f wrt arrays[which]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[which])
    flat = g.reshape(-1)
    target = base[which].reshape(-1)
    for i in range(target.size):
        orig = target[i]
        target[i] = orig + eps
        hi = f(base)
        target[i] = orig - eps
        lo = f(base)
        target[i] = orig
        flat[i] = (hi - lo) / (2 * eps)
    return g


def check_grads(build, arrays):
    """Compare backward grads of `build` against finite differences."""
    tensors = [T.parameter(a) for a in arrays]
    out = build(tensors)
    assert out.shape == (1, 1)
    T.backward(out)

    def f(arrs):
        consts = [T.constant(a) for a in arrs]
        return build(consts).item()

    for i, t in enumerate(tensors):
        fd = fd_grad(f, arrays, i)
        an = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        denom = np.maximum(1.0, np.maximum(np.abs(an), np.abs(fd)))
        rel = np.abs(an - fd) / denom
        assert rel.max() < REL_TOL, f"input {i}: max rel err {rel.max():.3e}"


def rand(shape, lo=-2.0, hi=2.0):
    return RNG.uniform(lo, hi, size=shape)


# -- per-op gradient checks ---------------------------------------------------

N_INSTANCES = 20


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_matmul(trial):
    a, b = rand((4, 3)), rand((3, 5))
    check_grads(lambda ts: T.sum_all(T.matmul(ts[0], ts[1])), [a, b])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_elementwise(trial):
    a, b = rand((3, 4)), rand((3, 4))
    check_grads(lambda ts: T.sum_all(T.mul(T.add(ts[0], ts[1]), T.sub(ts[0], ts[1]))), [a, b])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_div(trial):
    a = rand((3, 3))
    b = rand((3, 3))
    b += np.sign(b) * 0.5  # keep denominators away from zero
    check_grads(lambda ts: T.sum_all(T.div(ts[0], ts[1])), [a, b])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_unary_chain(trial):
    a = rand((4, 4))
    a[np.abs(a) < 0.05] = 0.1  # stay clear of the relu kink
    check_grads(lambda ts: T.sum_all(T.softplus(T.relu(ts[0]))), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_exp_scale(trial):
    a = rand((2, 5), -1.5, 1.5)
    check_grads(lambda ts: T.sum_all(T.exp(T.scale(ts[0], 0.7))), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_abs(trial):
    a = rand((3, 4))
    a[np.abs(a) < 0.05] = 0.2
    check_grads(lambda ts: T.sum_all(T.abs_(ts[0])), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_clamp(trial):
    a = rand((3, 4))
    a[np.abs(np.abs(a) - 1.0) < 0.05] = 0.0  # avoid the clamp boundary
    check_grads(lambda ts: T.sum_all(T.mul(T.clamp(ts[0], -1.0, 1.0), ts[0])), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_softmax_rows(trial):
    a = rand((4, 6))
    w = rand((4, 6))
    check_grads(lambda ts: T.sum_all(T.mul(T.softmax_rows(ts[0]), T.constant(w))), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_softmax_cols(trial):
    a = rand((5, 3))
    w = rand((5, 3))
    check_grads(lambda ts: T.sum_all(T.mul(T.softmax_cols(ts[0]), T.constant(w))), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_reductions(trial):
    a = rand((4, 5))
    check_grads(lambda ts: T.add(T.mean(ts[0]), T.frobenius_sq(ts[0])), [a])
    check_grads(lambda ts: T.sum_all(T.mul(T.sum_pool(ts[0]), T.sum_pool(ts[0]))), [a])
    check_grads(lambda ts: T.sum_all(T.mul(T.sum_rows(ts[0]), T.sum_rows(ts[0]))), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_l2_norm(trial):
    a = rand((3, 4))
    a += np.sign(a) * 0.1
    check_grads(lambda ts: T.l2_norm(ts[0]), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_concat_transpose_reshape(trial):
    a, b = rand((3, 4)), rand((2, 4))
    check_grads(
        lambda ts: T.frobenius_sq(T.transpose(T.concat([ts[0], ts[1]], axis=0))), [a, b]
    )
    c, d = rand((3, 2)), rand((3, 5))
    check_grads(
        lambda ts: T.frobenius_sq(T.reshape(T.concat([ts[0], ts[1]], axis=1), (7, 3))),
        [c, d],
    )


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_gather_segment(trial):
    a = rand((5, 3))
    idx = RNG.integers(0, 5, size=11)
    seg = np.sort(RNG.integers(0, 4, size=11))

    def build(ts):
        gathered = T.gather_rows(ts[0], idx)
        pooled = T.segment_sum(gathered, seg, 4)
        return T.frobenius_sq(pooled)

    check_grads(build, [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_mul_colvec(trial):
    a, v = rand((4, 3)), rand((4, 1))
    check_grads(lambda ts: T.frobenius_sq(T.mul_colvec(ts[0], ts[1])), [a, v])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_scalar_tensor_and_rowvec(trial):
    a, s, b = rand((4, 3)), rand((1, 1)), rand((1, 3))
    check_grads(
        lambda ts: T.frobenius_sq(T.add_rowvec(T.mul_scalar_tensor(ts[0], ts[1]), ts[2])),
        [a, s, b],
    )


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_cosine_matrix(trial):
    a = rand((4, 3))
    a += np.sign(a) * 0.2  # keep rows bounded away from zero norm
    w = rand((4, 4))
    check_grads(lambda ts: T.sum_all(T.mul(T.cosine_matrix(ts[0]), T.constant(w))), [a])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_cosine_rows(trial):
    a, b = rand((5, 3)), rand((5, 3))
    a += np.sign(a) * 0.2
    b += np.sign(b) * 0.2
    check_grads(lambda ts: T.sum_all(T.cosine_rows(ts[0], ts[1])), [a, b])


@pytest.mark.parametrize("trial", range(N_INSTANCES))
def test_grad_gaussian_kl(trial):
    mu1, lv1, mu2, lv2 = rand((1, 4)), rand((1, 4)), rand((1, 4)), rand((1, 4))
    check_grads(lambda ts: T.gaussian_kl(ts[0], ts[1], ts[2], ts[3]), [mu1, lv1, mu2, lv2])


# -- value contracts ----------------------------------------------------------


def test_matmul_identity():
    m = rand((3, 3))
    out = T.matmul(T.constant(np.eye(3)), T.constant(m))
    np.testing.assert_allclose(out.data, m)


def test_matmul_hand():
    out = T.matmul(T.constant([[1.0, 2.0], [3.0, 4.0]]), T.constant([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeMismatch):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))


def test_softmax_constant_row_uniform():
    out = T.softmax_rows(T.constant(np.full((2, 5), 3.7)))
    np.testing.assert_allclose(out.data, np.full((2, 5), 0.2))


def test_softmax_closed_form():
    out = T.softmax_rows(T.constant([[0.0, math.log(3.0)]]))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rejects_nonfinite():
    with pytest.raises(T.NonFiniteInput):
        T.softmax_rows(T.constant([[1.0, np.inf]]))


def test_gaussian_kl_identical_is_zero():
    mu, lv = T.constant(rand((1, 6))), T.constant(rand((1, 6)))
    assert abs(T.gaussian_kl(mu, lv, mu, lv).item()) < 1e-15


def test_gaussian_kl_unit_shift():
    z = T.constant(np.zeros((1, 1)))
    one = T.constant(np.ones((1, 1)))
    assert abs(T.gaussian_kl(z, z, one, z).item() - 0.5) < 1e-15


def test_gaussian_kl_monte_carlo():
    # Independent oracle: E_p[log p - log q] over 10^6 samples.
    rng = np.random.default_rng(7)
    mu1, lv1 = np.array([0.3, -0.5]), np.array([0.2, -0.4])
    mu2, lv2 = np.array([-0.1, 0.4]), np.array([-0.3, 0.5])
    x = mu1 + np.exp(lv1 / 2) * rng.standard_normal((1_000_000, 2))

    def logpdf(x, mu, lv):
        return (-0.5 * ((x - mu) ** 2 / np.exp(lv) + lv + math.log(2 * math.pi))).sum(axis=1)

    mc = (logpdf(x, mu1, lv1) - logpdf(x, mu2, lv2)).mean()
    closed = T.gaussian_kl(
        T.constant(mu1), T.constant(lv1), T.constant(mu2), T.constant(lv2)
    ).item()
    assert abs(mc - closed) < 1e-2


def test_ops_do_not_mutate_inputs():
    a = rand((3, 3))
    b = rand((3, 3))
    snap_a, snap_b = a.copy(), b.copy()
    ta, tb = T.constant(a), T.constant(b)
    T.matmul(ta, tb)
    T.add(ta, tb)
    T.softmax_rows(ta)
    T.cosine_matrix(ta)
    np.testing.assert_array_equal(ta.data, snap_a)
    np.testing.assert_array_equal(tb.data, snap_b)


def test_rowsum_shapes():
    assert T.sum_pool(T.constant(np.ones((4, 3)))).shape == (1, 3)
    assert T.sum_rows(T.constant(np.ones((4, 3)))).shape == (4, 1)


# -- DAG accumulation vs forward-mode oracle ----------------------------------


class Dual:
    """Forward-mode scalar: value plus derivative wrt one chosen leaf."""

    def __init__(self, v, d=0.0):
        self.v, self.d = v, d

    def __add__(self, o):
        return Dual(self.v + o.v, self.d + o.d)

    def __sub__(self, o):
        return Dual(self.v - o.v, self.d - o.d)

    def __mul__(self, o):
        return Dual(self.v * o.v, self.d * o.v + self.v * o.d)

    def softplus(self):
        s = 1.0 / (1.0 + math.exp(-self.v))
        return Dual(math.log1p(math.exp(-abs(self.v))) + max(self.v, 0.0), self.d * s)


def test_dag_accumulation_matches_dual_numbers():
    # Random expression DAGs (<= 20 nodes) with shared subexpressions.
    rng = np.random.default_rng(42)
    binops = {
        "add": (T.add, lambda x, y: x + y),
        "sub": (T.sub, lambda x, y: x - y),
        "mul": (T.mul, lambda x, y: x * y),
    }
    for _ in range(25):
        n_leaves = rng.integers(2, 5)
        leaf_vals = rng.uniform(-1.5, 1.5, size=n_leaves)
        ops = []
        for _ in range(rng.integers(5, 17)):
            kind = rng.choice(list(binops) + ["softplus"])
            if kind == "softplus":
                ops.append((kind, int(rng.integers(0, n_leaves + len(ops)))))
            else:
                total = n_leaves + len(ops)
                ops.append((kind, int(rng.integers(0, total)), int(rng.integers(0, total))))

        def run(leaves):
            nodes = list(leaves)
            for op in ops:
                if op[0] == "softplus":
                    x = nodes[op[1]]
                    nodes.append(x.softplus() if isinstance(x, Dual) else T.softplus(x))
                else:
                    f = binops[op[0]][0] if not isinstance(nodes[0], Dual) else binops[op[0]][1]
                    nodes.append(f(nodes[op[1]], nodes[op[2]]))
            if isinstance(nodes[0], Dual):
                total = nodes[-1]
                for n in nodes[n_leaves:-1]:
                    total = total + n
                return total
            acc = nodes[-1]
            for n in nodes[n_leaves:-1]:
                acc = T.add(acc, n)
            return acc

        params = [T.parameter(np.array([[v]])) for v in leaf_vals]
        out = run(params)
        T.backward(out)
        for i in range(n_leaves):
            duals = [Dual(v, 1.0 if j == i else 0.0) for j, v in enumerate(leaf_vals)]
            expected = run(duals).d
            got = params[i].grad[0, 0] if params[i].grad is not None else 0.0
            assert abs(got - expected) < 1e-10, f"leaf {i}: {got} vs {expected}"
