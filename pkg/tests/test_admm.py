import numpy as np
import pytest
from hypothesis import given, strategies as st

from gasm.admm import (
    AdmmParams,
    AdmmState,
    DivergenceError,
    augmented_lagrangian,
    fuse,
    initial_state,
    is_converged,
    objective,
    residuals,
    solve,
    step,
    update_duals,
    update_weight,
    update_z_hat,
)

from conftest import field_and_mask, make_bank


# -- independent helpers ------------------------------------------------------

def lagrangian(zh, ws, l1, l2, zs, z, m, beta):
    """Augmented Lagrangian written out directly from its definition."""
    f = sum(w * zi for w, zi in zip(ws, zs))
    s = sum(ws)
    return (0.5 * np.sum((m * (z - zh)) ** 2) + np.sum(l1 * (zh - f)) + 0.5 * beta * np.sum((zh - f) ** 2)
            + np.sum(l2 * (s - 1)) + 0.5 * beta * np.sum((s - 1) ** 2))


def fd_gradient(fun, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fun(xp) - fun(xm)) / (2 * h)
    return g


def random_state(rng, shape, m):
    ws = [rng.uniform(-0.5, 1.5, shape) for _ in range(m)]
    return AdmmState(rng.uniform(0, 1, shape), ws, rng.normal(size=shape), rng.normal(size=shape))


def instance(rng, shape, m=2, p=0.5):
    zs = [rng.uniform(0, 1, shape) for _ in range(m)]
    z = rng.uniform(0, 1, shape)
    mask = rng.random(shape) < p
    mask.flat[0] = True
    return zs, z, mask


def convex_instance(rng, shape):
    """Observations that are a convex combination of the two fields, so the
    exact per-cell optimum has weights in [0, 1]."""
    z1, z2 = rng.uniform(0, 1, (2, *shape))
    theta = rng.uniform(0, 1, shape)
    mask = rng.random(shape) < 0.5
    mask.flat[0] = True
    return [z1, z2], theta * z1 + (1 - theta) * z2, mask


# -- objective ---------------------------------------------------------------

class TestObjective:
    def test_exact_fit(self):
        zs = [np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]])]
        ws = [np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]])]
        obs, m = field_and_mask(fuse(ws, zs), [[1, 1]])
        assert objective(ws, make_bank(*zs), obs, m) == 0.0

    def test_single_field_offset(self):
        z1 = np.arange(6.0).reshape(2, 3) + 10
        z = z1 - 1.0
        mask = np.array([[1, 0, 1], [1, 0, 0]], dtype=bool)
        obs, m = field_and_mask(z, mask)
        assert objective([np.ones((2, 3))], make_bank(z1), obs, m) == pytest.approx(3 / 2)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        zs, z, mask = instance(rng, (3, 4), m=3)
        ws = [rng.normal(size=(3, 4)) for _ in range(3)]
        total = 0.0
        for j in range(3):
            for k in range(4):
                if mask[j, k]:
                    fused = sum(ws[i][j, k] * zs[i][j, k] for i in range(3))
                    total += 0.5 * (fused - z[j, k]) ** 2
        obs, m = field_and_mask(z, mask)
        assert objective(ws, make_bank(*zs), obs, m) == pytest.approx(total, rel=1e-13)

    def test_shape_mismatch(self):
        obs, m = field_and_mask(np.ones((2, 2)), np.ones((2, 2)))
        with pytest.raises(ValueError):
            objective([np.ones((2, 2))], make_bank(np.ones((2, 2)), np.ones((2, 2))), obs, m)


# -- block updates -----------------------------------------------------------

class TestZHatUpdate:
    def test_unobserved_reduces_to_fusion(self):
        rng = np.random.default_rng(0)
        zs, z, _ = instance(rng, (2, 3))
        st_ = initial_state(zs)
        st_.weights = [rng.uniform(0, 1, (2, 3)) for _ in zs]
        obs, m = field_and_mask(z, np.zeros((2, 3)))
        got = update_z_hat(st_, make_bank(*zs), obs, m, AdmmParams())
        np.testing.assert_allclose(got, fuse(st_.weights, zs), rtol=1e-15)

    def test_beta_limits(self):
        rng = np.random.default_rng(1)
        zs, z, _ = instance(rng, (2, 3))
        st_ = initial_state(zs)
        obs, m = field_and_mask(z, np.ones((2, 3)))
        big = update_z_hat(st_, make_bank(*zs), obs, m, AdmmParams(beta=1e12))
        small = update_z_hat(st_, make_bank(*zs), obs, m, AdmmParams(beta=1e-12))
        np.testing.assert_allclose(big, fuse(st_.weights, zs), atol=1e-10)
        np.testing.assert_allclose(small, z, atol=1e-10)

    def test_matches_gradient_descent(self):
        rng = np.random.default_rng(2)
        zs, z, mask = instance(rng, (2, 3))
        st_ = random_state(rng, (2, 3), 2)
        obs, m = field_and_mask(z, mask)
        got = update_z_hat(st_, make_bank(*zs), obs, m, AdmmParams(beta=1.0))
        mk = mask.astype(float)
        f = fuse(st_.weights, zs)
        x = np.zeros((2, 3))
        for _ in range(5000):
            grad = mk * (x - z) + st_.lambda1 + (x - f)
            x -= 0.4 * grad
        np.testing.assert_allclose(got, x, atol=1e-8)


class TestWeightUpdate:
    def test_single_field_gives_ones(self):
        z1 = np.array([[30.0, 70.0]])
        st_ = initial_state([z1])
        st_.z_hat = z1.copy()
        np.testing.assert_allclose(update_weight(0, st_, make_bank(z1), AdmmParams()), 1.0, rtol=1e-15)

    def test_gradient_vanishes(self):
        rng = np.random.default_rng(4)
        zs, z, mask = instance(rng, (2, 2))
        st_ = random_state(rng, (2, 2), 2)
        beta = 1.0
        for i in range(2):
            st_.weights[i] = update_weight(i, st_, make_bank(*zs), AdmmParams(beta=beta))
            f = fuse(st_.weights, zs)
            s = sum(st_.weights)
            grad = -st_.lambda1 * zs[i] - beta * (st_.z_hat - f) * zs[i] + st_.lambda2 + beta * (s - 1)
            assert np.linalg.norm(grad) < 1e-10

    def test_matches_gradient_descent(self):
        rng = np.random.default_rng(5)
        zs, z, mask = instance(rng, (2, 3))
        st_ = random_state(rng, (2, 3), 2)
        got = update_weight(1, st_, make_bank(*zs), AdmmParams(beta=1.0))
        x = np.zeros((2, 3))
        w0, z0, z1 = st_.weights[0], zs[0], zs[1]
        for _ in range(20000):
            r1 = st_.z_hat - w0 * z0 - x * z1
            r2 = w0 + x - 1
            grad = -st_.lambda1 * z1 - r1 * z1 + st_.lambda2 + r2
            x -= 0.3 * grad
        np.testing.assert_allclose(got, x, atol=1e-8)

    def test_bad_index(self):
        z = np.ones((1, 1))
        with pytest.raises(IndexError):
            update_weight(2, initial_state([z, z]), make_bank(z, z), AdmmParams())

    def test_fusion_dual_in_place_of_sum_dual_is_not_stationary(self):
        # using the fusion dual where the sum dual belongs breaks stationarity
        rng = np.random.default_rng(6)
        zs, z, mask = instance(rng, (3, 3))
        st_ = random_state(rng, (3, 3), 2)
        zi, wr, zr = zs[0], st_.weights[1], zs[1]
        variant = ((zi * st_.z_hat + 1 - wr * (zr * zi + 1)) + st_.lambda1 * zi - st_.lambda1) / (zi * zi + 1)

        def lag(w0):
            return lagrangian(st_.z_hat, [w0, wr], st_.lambda1, st_.lambda2, zs, z, mask, 1.0)

        assert np.abs(fd_gradient(lag, variant)).max() > 1e-3
        good = update_weight(0, st_, make_bank(*zs), AdmmParams(beta=1.0))
        assert np.abs(fd_gradient(lag, good)).max() < 1e-6


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.1, 1.0, 5.0]), st.integers(1, 3))
def test_block_updates_stationary(seed, beta, m):
    rng = np.random.default_rng(seed)
    zs, z, mask = instance(rng, (3, 3), m=m)
    st_ = random_state(rng, (3, 3), m)
    bank = make_bank(*zs)
    obs, mk = field_and_mask(z, mask)
    params = AdmmParams(beta=beta)
    st_.z_hat = update_z_hat(st_, bank, obs, mk, params)
    g = fd_gradient(lambda x: lagrangian(x, st_.weights, st_.lambda1, st_.lambda2, zs, z, mask, beta), st_.z_hat)
    assert np.abs(g).max() < 1e-6
    for i in range(m):
        st_.weights[i] = update_weight(i, st_, bank, params)

        def lag(w, i=i):
            ws = list(st_.weights)
            ws[i] = w
            return lagrangian(st_.z_hat, ws, st_.lambda1, st_.lambda2, zs, z, mask, beta)

        assert np.abs(fd_gradient(lag, st_.weights[i])).max() < 1e-6


class TestDuals:
    def test_feasible_unchanged(self):
        zs = [np.array([[2.0, 3.0]]), np.array([[5.0, 7.0]])]
        ws = [np.array([[0.3, 0.6]]), np.array([[0.7, 0.4]])]
        l1, l2 = np.array([[0.1, -0.2]]), np.array([[1.0, 2.0]])
        st_ = AdmmState(fuse(ws, zs), ws, l1, l2)
        a, b = update_duals(st_, make_bank(*zs), AdmmParams())
        np.testing.assert_allclose(a, l1, rtol=0, atol=1e-15)
        np.testing.assert_allclose(b, l2, rtol=0, atol=1e-15)

    def test_constant_residual(self):
        zs = [np.array([[2.0, 3.0]])]
        ws = [np.ones((1, 2))]
        st_ = AdmmState(zs[0] + 0.25, ws, np.zeros((1, 2)), np.zeros((1, 2)))
        a, _ = update_duals(st_, make_bank(*zs), AdmmParams(beta=1.0))
        np.testing.assert_allclose(a, 0.25)

    def test_scalar_trace(self):
        # two sweeps on a 1x1 instance, stepped by hand in plain floats
        z1, z2, z, beta = 0.8, 0.2, 0.35, 1.0
        w1 = w2 = 0.5
        l1 = l2 = 0.0
        zh = w1 * z1 + w2 * z2
        expected = []
        for _ in range(2):
            zh = (z - l1 + beta * (w1 * z1 + w2 * z2)) / (1 + beta)
            w1 = (beta * (zh * z1 + 1 - w2 * (z2 * z1 + 1)) + l1 * z1 - l2) / (beta * (z1 * z1 + 1))
            w2 = (beta * (zh * z2 + 1 - w1 * (z1 * z2 + 1)) + l1 * z2 - l2) / (beta * (z2 * z2 + 1))
            l1 = l1 + beta * (zh - w1 * z1 - w2 * z2)
            l2 = l2 + beta * (w1 + w2 - 1)
            expected.append((l1, l2))
        bank = make_bank(np.array([[z1]]), np.array([[z2]]))
        obs, m = field_and_mask([[z]], [[1]])
        s = initial_state(bank)
        for want in expected:
            s = step(s, bank, obs, m, AdmmParams(beta=beta))
            assert (s.lambda1[0, 0], s.lambda2[0, 0]) == pytest.approx(want, rel=1e-14, abs=1e-16)


class TestResiduals:
    def test_feasible_stationary(self):
        zs = [np.array([[2.0]]), np.array([[5.0]])]
        ws = [np.array([[0.3]]), np.array([[0.7]])]
        s = AdmmState(fuse(ws, zs), ws, np.zeros((1, 1)), np.zeros((1, 1)), iter=1,
                      prev_z_hat=fuse(ws, zs), prev_weights=list(ws))
        assert residuals(s, zs) == (0.0, 0.0)

    def test_sum_violation(self):
        zs = [np.array([[2.0]])]
        ws = [np.array([[1.1]])]
        s = AdmmState(fuse(ws, zs), ws, np.zeros((1, 1)), np.zeros((1, 1)), iter=1,
                      prev_z_hat=fuse(ws, zs), prev_weights=list(ws))
        assert residuals(s, zs)[0] == pytest.approx(0.1)

    def test_requires_iterate(self):
        with pytest.raises(ValueError, match="no iterate"):
            residuals(initial_state([np.ones((1, 1))]), [np.ones((1, 1))])


# -- full solve --------------------------------------------------------------

TIGHT = AdmmParams(beta=0.1, eps_abs=1e-10, eps_rel=1e-10, max_iters=500_000)


class TestSolve:
    def test_single_field_is_identity(self):
        rng = np.random.default_rng(7)
        zs, z, mask = instance(rng, (3, 4), m=1)
        obs, m = field_and_mask(z, mask)
        r = solve(obs, m, make_bank(*zs), TIGHT)
        assert r.converged
        np.testing.assert_allclose(r.weights[0], 1.0, atol=1e-8)
        np.testing.assert_allclose(r.fused_field.values, zs[0], atol=1e-8)

    def test_equal_fields(self):
        rng = np.random.default_rng(8)
        f = rng.uniform(0, 1, (3, 4))
        obs, m = field_and_mask(rng.uniform(0, 1, (3, 4)), rng.random((3, 4)) < 0.5)
        r = solve(obs, m, make_bank(f, f.copy()), AdmmParams(max_iters=2000))
        np.testing.assert_allclose(r.fused_field.values, f * r.weights.total(), rtol=1e-15)
        np.testing.assert_allclose(r.fused_field.values, f, atol=1e-3)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        zs, z, mask = instance(rng, (4, 5))
        obs, m = field_and_mask(z, mask)
        a = solve(obs, m, make_bank(*zs), AdmmParams(max_iters=300))
        b = solve(obs, m, make_bank(*zs), AdmmParams(max_iters=300))
        assert np.array_equal(a.fused_field.values, b.fused_field.values)
        assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
        assert a.state.primal_residuals == b.state.primal_residuals

    @pytest.mark.parametrize("m_fields", [1, 2, 3])
    def test_compiled_loop_matches_step(self, m_fields):
        rng = np.random.default_rng(10 + m_fields)
        zs, z, mask = instance(rng, (3, 4), m=m_fields)
        bank = make_bank(*zs)
        obs, m = field_and_mask(z, mask)
        params = AdmmParams(beta=0.7, max_iters=40)
        seen = []
        r = solve(obs, m, bank, params, trace=lambda *row: seen.append(row))
        s = initial_state(bank)
        for _ in range(r.iters):
            s = step(s, bank, obs, m, params)
        np.testing.assert_allclose(r.state.z_hat, s.z_hat, rtol=1e-12, atol=1e-14)
        for a, b in zip(r.weights, s.weights):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(r.state.lambda2, s.lambda2, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(r.state.primal_residuals, s.primal_residuals, rtol=1e-10)
        np.testing.assert_allclose(r.state.dual_residuals, s.dual_residuals, rtol=1e-10)
        assert [row[0] for row in seen] == list(range(1, r.iters + 1))
        assert seen[-1][1] == pytest.approx(objective(s.weights, bank, obs, m), rel=1e-10)

    def test_converged_run_meets_tolerances(self):
        rng = np.random.default_rng(12)
        zs, z, mask = convex_instance(rng, (4, 5))
        bank = make_bank(*zs)
        obs, m = field_and_mask(z, mask)
        params = AdmmParams(beta=0.1, eps_abs=1e-8, eps_rel=1e-8, max_iters=200_000)
        r = solve(obs, m, bank, params)
        assert r.converged
        assert is_converged(r.state, bank, params)
        assert r.state.primal_residuals[-1] < r.state.primal_residuals[0]
        assert np.linalg.norm(r.weights.total() - 1) / np.sqrt(20) < 1e-4

    def test_matches_constraint_eliminated_descent(self):
        # per-cell minimisation of 0.5 (w z1 + (1 - w) z2 - z)^2 over w on observed cells
        rng = np.random.default_rng(13)
        zs, z, mask = convex_instance(rng, (4, 5))
        obs, m = field_and_mask(z, mask)
        bank = make_bank(*zs)
        w = np.full((4, 5), 0.5)
        d = zs[0] - zs[1]
        for _ in range(20000):
            grad = mask * (w * d + zs[1] - z) * d
            w -= 1.0 * grad
        oracle = objective([w, 1 - w], bank, obs, m)
        r = solve(obs, m, bank, TIGHT)
        assert abs(r.objective - oracle) < 1e-6

    def test_not_worse_than_any_single_field(self):
        rng = np.random.default_rng(14)
        zs, z, mask = convex_instance(rng, (4, 5))
        obs, m = field_and_mask(z, mask)
        bank = make_bank(*zs)
        r = solve(obs, m, bank, TIGHT)
        for i in range(2):
            ws = [np.full((4, 5), float(i == r_)) for r_ in range(2)]
            assert r.objective <= objective(ws, bank, obs, m) + 1e-12

    def test_three_fields_descend(self):
        rng = np.random.default_rng(15)
        zs, z, mask = instance(rng, (4, 5), m=3)
        obs, m = field_and_mask(z, mask)
        bank = make_bank(*zs)
        r = solve(obs, m, bank, AdmmParams(beta=0.5, max_iters=5000))
        assert r.objective < objective(initial_state(bank).weights, bank, obs, m)

    @pytest.mark.parametrize("m_fields", [2, 3])
    def test_unobserved_cells_keep_uniform_weights(self, m_fields):
        # the problem separates per cell; with no data a cell's iterates never
        # leave the uniform starting point, so the estimate there is the mean field
        rng = np.random.default_rng(17)
        zs, z, mask = instance(rng, (4, 5), m=m_fields)
        obs, m = field_and_mask(z, mask)
        r = solve(obs, m, make_bank(*zs), AdmmParams(max_iters=500))
        for w in r.weights:
            np.testing.assert_allclose(w[~mask], 1.0 / m_fields, rtol=0, atol=1e-12)

    def test_empty_mask(self):
        obs, m = field_and_mask(np.ones((2, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError, match="empty"):
            solve(obs, m, make_bank(np.ones((2, 2)), np.ones((2, 2))))

    def test_divergence_keeps_trace(self):
        big = np.full((1, 2), 1e200)
        obs, m = field_and_mask([[1.0, 1.0]], [[1, 1]])
        seen = []
        with pytest.raises(DivergenceError) as info:
            solve(obs, m, make_bank(big, big * 0.5), AdmmParams(), trace=lambda *row: seen.append(row))
        assert info.value.state is not None
        assert len(seen) == info.value.state.iter >= 1

    def test_params_validated(self):
        for kw in ({"beta": 0}, {"eps_abs": 0}, {"eps_rel": -1}, {"max_iters": 0}):
            with pytest.raises(ValueError):
                AdmmParams(**kw)


def test_lagrangian_matches_definition():
    rng = np.random.default_rng(16)
    zs, z, mask = instance(rng, (3, 3), m=2)
    s = random_state(rng, (3, 3), 2)
    obs, m = field_and_mask(z, mask)
    got = augmented_lagrangian(s, zs, obs, m, 0.7)
    want = lagrangian(s.z_hat, s.weights, s.lambda1, s.lambda2, zs, z, mask, 0.7)
    assert got == pytest.approx(want, rel=1e-13)
