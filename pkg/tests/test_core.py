import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, jacobian_difference, random_instance, rel_err
from pln_sandwich.core import (
    CountDataset,
    ModelParams,
    VariationalParams,
    compute_a_tilde,
    elbo_single,
    elbo_total,
    grad_model,
    grad_variational,
    hess_variational,
    single_obs_B_derivatives,
    unvec,
    vec,
)
from pln_sandwich.exceptions import (
    DatasetError,
    NumericOverflowError,
    ParameterDomainError,
    RankDeficiencyError,
)

E_HALF = math.exp(0.5)


def trivial(y=0.0):
    """n = p = m = 1, o = 0, x = 1, B = 0, Omega = 1, m = 0, s = 1."""
    data = CountDataset([[y]], [[1.0]])
    return data, ModelParams([[0.0]], [[1.0]]), VariationalParams([[0.0]], [[1.0]])


def symmetric_fd_omega(f, Omega, rel_step=1e-5):
    """Finite differences of ``f`` in Omega, perturbing (k, l) and (l, k) together."""
    p = Omega.shape[0]
    out = np.zeros((p, p))
    for k in range(p):
        for l in range(k, p):
            h = rel_step * (1 + abs(Omega[k, l]))
            E = np.zeros((p, p))
            E[k, l] = E[l, k] = h
            out[k, l] = out[l, k] = (f(Omega + E) - f(Omega - E)) / (2 * h)
    return out


class TestVec:
    def test_column_major(self):
        B = np.arange(6.0).reshape(2, 3)
        assert list(vec(B)) == [0.0, 3.0, 1.0, 4.0, 2.0, 5.0]
        np.testing.assert_array_equal(unvec(vec(B), 2, 3), B)


class TestCountDataset:
    def test_shapes_and_defaults(self):
        data = CountDataset([[1, 2], [0, 3], [4, 0]], [[1, 0], [1, 1], [1, 2]])
        assert (data.n, data.p, data.m) == (3, 2, 2)
        np.testing.assert_array_equal(data.offsets, 0.0)

    def test_log_factorial_cached(self):
        data = CountDataset([[0, 1], [2, 3]], [[1.0], [1.0]])
        np.testing.assert_allclose(data.row_log_factorial, [0.0, -math.log(2) - math.log(6)])
        assert data.row(0).log_factorial == 0.0

    def test_rejects_fractional_counts(self):
        with pytest.raises(DatasetError) as err:
            CountDataset([[1, 1.5]], [[1.0]])
        assert (err.value.row, err.value.col) == (0, 1)

    def test_rejects_negative_counts(self):
        with pytest.raises(DatasetError):
            CountDataset([[-1]], [[1.0]])

    def test_rejects_rank_deficient(self):
        X = np.array([[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(RankDeficiencyError):
            CountDataset(np.ones((3, 1)), X)

    def test_rejects_row_mismatch(self):
        with pytest.raises(DatasetError):
            CountDataset(np.ones((3, 1)), np.ones((2, 1)))

    def test_rejects_empty(self):
        with pytest.raises(DatasetError):
            CountDataset(np.zeros((0, 2)), np.zeros((0, 1)))

    def test_arrays_read_only(self):
        data = CountDataset([[1]], [[1.0]])
        with pytest.raises(ValueError):
            data.counts[0, 0] = 5


class TestModelParams:
    def test_caches_covariance(self):
        theta = ModelParams(np.zeros((1, 2)), [[2.0, 0.5], [0.5, 1.0]])
        np.testing.assert_allclose(theta.covariance @ theta.precision, np.eye(2), atol=1e-14)
        np.testing.assert_allclose(theta.logdet_precision, math.log(1.75))

    def test_from_covariance(self):
        Sigma = np.array([[2.0, 0.9], [0.9, 2.0]])
        theta = ModelParams.from_covariance(np.zeros((1, 2)), Sigma)
        np.testing.assert_allclose(theta.covariance, Sigma, rtol=1e-14)

    def test_rejects_non_spd(self):
        with pytest.raises(ParameterDomainError):
            ModelParams(np.zeros((1, 2)), [[1.0, 2.0], [2.0, 1.0]])

    def test_rejects_nonpositive_sdevs(self):
        with pytest.raises(ParameterDomainError):
            VariationalParams([[0.0]], [[0.0]])


class TestATilde:
    def test_trivial(self):
        data, theta, vpar = trivial()
        np.testing.assert_allclose(compute_a_tilde(theta, vpar, data), [[E_HALF]], rtol=1e-15)

    def test_all_zero_exponent(self):
        data = CountDataset(np.zeros((2, 3)), np.ones((2, 1)))
        theta = ModelParams(np.zeros((1, 3)), np.eye(3))
        # s tiny: exponent s^2/2 is below double resolution next to 0 -> exp = 1
        vpar = VariationalParams(np.zeros((2, 3)), np.full((2, 3), 1e-200))
        assert np.all(compute_a_tilde(theta, vpar, data) == 1.0)

    def test_exponent_three(self):
        data = CountDataset([[0]], [[1.0]])
        theta = ModelParams([[2.0]], [[1.0]])
        vpar = VariationalParams([[-1.0]], [[2.0]])
        np.testing.assert_allclose(compute_a_tilde(theta, vpar, data), [[math.exp(3)]], rtol=1e-15)

    def test_overflow_names_cell(self):
        data = CountDataset(np.zeros((2, 2)), np.ones((2, 1)))
        theta = ModelParams(np.zeros((1, 2)), np.eye(2))
        M = np.zeros((2, 2))
        M[1, 0] = 800.0
        with pytest.raises(NumericOverflowError) as err:
            compute_a_tilde(theta, VariationalParams(M, np.ones((2, 2))), data)
        assert err.value.index == (1, 0)


class TestElbo:
    def test_trivial_y0(self):
        data, theta, vpar = trivial()
        assert elbo_single(theta, vpar.row(0), data.row(0)) == pytest.approx(-E_HALF, abs=1e-12)

    def test_trivial_y2(self):
        data, theta, vpar = trivial(2.0)
        assert elbo_single(theta, vpar.row(0), data.row(0)) == pytest.approx(-2.3418685, abs=1e-7)

    def test_log_factorial_zero_one(self):
        data = CountDataset([[0, 1]], [[1.0]])
        assert data.row(0).log_factorial == 0.0

    def test_identical_copies(self):
        n = 7
        data = CountDataset(np.zeros((n, 1)), np.ones((n, 1)))
        theta = ModelParams([[0.0]], [[1.0]])
        vpar = VariationalParams(np.zeros((n, 1)), np.ones((n, 1)))
        assert elbo_total(theta, vpar, data) == pytest.approx(-n * E_HALF, rel=1e-14)

    def test_small_instance_matches_row_sum(self):
        data, theta, vpar = random_instance(11, n=4, p=2, m=1)
        rows = sum(elbo_single(theta, vpar.row(i), data.row(i)) for i in range(data.n))
        assert abs(elbo_total(theta, vpar, data) - rows) < 1e-12

    def test_single_rejects_nonpositive_s(self):
        data, theta, _ = trivial()
        with pytest.raises(ParameterDomainError):
            elbo_single(theta, (np.zeros(1), np.zeros(1)), data.row(0))


class TestGradients:
    def test_trivial_values(self):
        data, theta, vpar = trivial()
        gB, _ = grad_model(theta, vpar, data)
        np.testing.assert_allclose(gB, [[-E_HALF]], rtol=1e-15)
        gm, gs = grad_variational(theta, vpar.row(0), data.row(0))
        np.testing.assert_allclose(gm, [-E_HALF], rtol=1e-15)
        np.testing.assert_allclose(gs, [-E_HALF], rtol=1e-15)

    def test_grad_omega_zero_at_match(self):
        n, p = 5, 3
        data = CountDataset(np.zeros((n, p)), np.ones((n, 1)))
        theta = ModelParams(np.zeros((1, p)), np.eye(p))
        _, gO = grad_model(theta, VariationalParams(np.zeros((n, p)), np.ones((n, p))), data)
        assert np.all(gO == 0.0)

    def test_hessian_trivial(self):
        data, theta, vpar = trivial()
        blocks = hess_variational(theta, vpar.row(0), data.row(0))
        np.testing.assert_allclose(blocks.mm, [[-(E_HALF + 1)]], rtol=1e-15)
        np.testing.assert_allclose(blocks.ms, [[-E_HALF]], rtol=1e-15)
        np.testing.assert_allclose(blocks.ss, [[-2 * E_HALF - 2]], rtol=1e-15)
        assert blocks.ss[0, 0] == pytest.approx(-5.2974425, abs=1e-7)

    def test_ss_dominated_by_large_s(self):
        data = CountDataset([[0]], [[1.0]])
        theta = ModelParams([[0.0]], [[1.0]])
        s = 30.0
        m = -s * s / 2  # keeps a~ = 1
        ss = hess_variational(theta, (np.array([m]), np.array([s])), data.row(0)).ss[0, 0]
        assert ss < 0 and ss == pytest.approx(-(s * s), rel=0.01)

    def test_B_derivatives_trivial(self):
        data, theta, vpar = trivial()
        g, H, C = single_obs_B_derivatives(theta, vpar.row(0), data.row(0))
        np.testing.assert_allclose(g, [-E_HALF])
        np.testing.assert_allclose(H, [[-E_HALF]])
        np.testing.assert_allclose(C, [[-E_HALF, -E_HALF]])

    def test_B_gradient_zero_residual(self):
        data = CountDataset([[1.0, 1.0], [0.0, 0.0]], [[1.0, 0.5], [1.0, 0.0]])
        theta = ModelParams(np.zeros((2, 2)), np.eye(2))
        vpar = (np.zeros(2), np.full(2, 1e-200))  # a~ = 1 = y
        g, _, _ = single_obs_B_derivatives(theta, vpar, data.row(0))
        assert np.all(g == 0.0)

    def test_B_gradient_sums_to_grad_model(self):
        data, theta, vpar = random_instance(3, n=6, p=3, m=2)
        total = sum(single_obs_B_derivatives(theta, vpar.row(i), data.row(i))[0] for i in range(6))
        gB, _ = grad_model(theta, vpar, data)
        np.testing.assert_allclose(total, vec(gB), atol=1e-12)


def _certify_point(seed):
    """Max relative errors (first order, second order) at one random point."""
    rng = np.random.default_rng(1000 + seed)
    p, m = int(rng.integers(1, 7)), int(rng.integers(1, 4))
    data, theta, vpar = random_instance(seed, n=4, p=p, m=m)
    B, Omega = np.array(theta.regression), np.array(theta.precision)
    first, second = [], []

    gB, gO = grad_model(theta, vpar, data)
    fd_B = central_difference(lambda b: elbo_total(ModelParams(b, Omega), vpar, data), B)
    first.append(rel_err(gB, fd_B))
    fd_O = symmetric_fd_omega(lambda om: elbo_total(ModelParams(B, om), vpar, data), Omega)
    first.append(rel_err(gO * (2 - np.eye(p)), fd_O))

    obs, (mi, si) = data.row(0), vpar.row(0)
    gm, gs = grad_variational(theta, (mi, si), obs)
    first.append(rel_err(gm, central_difference(lambda v: elbo_single(theta, (v, si), obs), mi)))
    first.append(rel_err(gs, central_difference(lambda v: elbo_single(theta, (mi, v), obs), si)))

    psi = np.concatenate([mi, si])

    def psi_grad(z):
        return np.concatenate(grad_variational(theta, (z[:p], z[p:]), obs))

    H = hess_variational(theta, (mi, si), obs).assembled
    second.append(rel_err(H, jacobian_difference(psi_grad, psi)))

    g_b, H_b, C_b = single_obs_B_derivatives(theta, (mi, si), obs)
    vB = vec(B)

    def elbo_of_vecB(v):
        return elbo_single(ModelParams(unvec(v, m, p), Omega), (mi, si), obs)

    first.append(rel_err(g_b, central_difference(elbo_of_vecB, vB)))

    def grad_of_vecB(v):
        return single_obs_B_derivatives(ModelParams(unvec(v, m, p), Omega), (mi, si), obs)[0]

    second.append(rel_err(H_b, jacobian_difference(grad_of_vecB, vB)))

    def grad_B_of_psi(z):
        return single_obs_B_derivatives(theta, (z[:p], z[p:]), obs)[0]

    second.append(rel_err(C_b, jacobian_difference(grad_B_of_psi, psi)))
    return max(first), max(second)


def certify_derivatives(points=20):
    errs = [_certify_point(seed) for seed in range(points)]
    return max(e[0] for e in errs), max(e[1] for e in errs)


class TestFiniteDifferenceCertification:
    @pytest.mark.parametrize("seed", range(20))
    def test_point(self, seed):
        first, second = _certify_point(seed)
        assert first <= 1e-5
        assert second <= 1e-4


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 5), st.integers(1, 3))
    def test_additivity(self, seed, n, p, m):
        data, theta, vpar = random_instance(seed, n=n, p=p, m=m)
        rows = math.fsum(elbo_single(theta, vpar.row(i), data.row(i)) for i in range(data.n))
        total = elbo_total(theta, vpar, data)
        assert abs(total - rows) <= 1e-9 * max(1.0, abs(rows))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 10), st.integers(1, 5), st.integers(1, 3))
    def test_offset_exchange(self, seed, n, p, m):
        data, theta, vpar = random_instance(seed, n=n, p=p, m=m)
        moved = CountDataset(data.counts, data.covariates, data.offsets + data.covariates @ theta.regression)
        zero = ModelParams(np.zeros_like(theta.regression), theta.precision)
        a, b = elbo_total(theta, vpar, data), elbo_total(zero, vpar, moved)
        assert abs(a - b) <= 1e-10 * max(1.0, abs(a))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 8))
    def test_hessian_negative_definite(self, seed, p):
        data, theta, vpar = random_instance(seed, n=1, p=p, m=2)
        H = hess_variational(theta, vpar.row(0), data.row(0)).assembled
        np.testing.assert_array_equal(H, H.T)
        np.linalg.cholesky(-H)
