"""Randomized GEVD and low-rank posterior tests.

Dense oracles run on the tiny problem (25 basal dofs) where full
matrices are cheap; algebraic identities use synthetic operators whose
spectra are known exactly.
"""

import numpy as np
import pytest

from iceinv import (PriorModel, ConfigurationError, linearize,
                    dense_hessian, MisfitHessianOperator, randomized_gevd,
                    dense_gevd, LowRankPosterior, build_posterior)


class ScaledPrecisionOperator:
    """Fake misfit Hessian c * Gamma_pr^-1: every GEVD eigenvalue is c."""

    def __init__(self, prior, c):
        self.prior = prior
        self.c = c
        self.applies = 0

    @property
    def n(self):
        return self.prior.n

    def apply(self, v):
        self.applies += 1
        return self.c * self.prior.precision_apply(v)

    def apply_block(self, V):
        self.applies += V.shape[1]
        return self.c * self.prior.precision_apply(V)


@pytest.fixture(scope="module")
def gn_gevd(tiny, tiny_map):
    beta_map, ctx, _ = tiny_map
    op = MisfitHessianOperator(ctx, gauss_newton=True)
    rng = np.random.default_rng(7)
    res = randomized_gevd(op, tiny.prior, rank_max=tiny.prior.n, rng=rng)
    return ctx, res


def prior_orthonormality_error(prior, W):
    G = W.T @ prior.precision_apply(W)
    return np.abs(G - np.eye(W.shape[1])).max()


def test_constant_spectrum_kappa_one(tiny):
    op = ScaledPrecisionOperator(tiny.prior, 3.5)
    res = randomized_gevd(op, tiny.prior, rank_max=tiny.prior.n,
                          rng=np.random.default_rng(0))
    assert np.abs(res.eigenvalues - 3.5).max() < 1e-8
    assert prior_orthonormality_error(tiny.prior, res.W) < 1e-8


def test_constant_spectrum_kappa_half(tiny):
    prior = PriorModel(tiny.mesh, gamma=1.0, delta=0.05, kappa=0.5, beta0=0.0)
    op = ScaledPrecisionOperator(prior, 0.7)
    res = randomized_gevd(op, prior, rank_max=prior.n,
                          rng=np.random.default_rng(1))
    assert np.abs(res.eigenvalues - 0.7).max() < 1e-10
    assert prior_orthonormality_error(prior, res.W) < 1e-10


def test_narrow_sketch_flags(tiny):
    # Constant spectrum: a narrow sketch sees lam = c in every direction.
    op = ScaledPrecisionOperator(tiny.prior, 5.0)
    res = randomized_gevd(op, tiny.prior, rank_max=3, oversample=2,
                          rng=np.random.default_rng(2))
    assert res.eigenvalues.size == 5
    assert np.abs(res.eigenvalues - 5.0).max() < 1e-8
    assert res.rank == 3                      # capped at rank_max
    assert not res.exhausted                  # nothing fell below threshold
    hi = randomized_gevd(op, tiny.prior, rank_max=3, oversample=2,
                         rng=np.random.default_rng(2), threshold=6.0)
    assert hi.rank == 0
    assert hi.exhausted


def test_gevd_matches_dense_oracle(tiny, gn_gevd):
    ctx, res = gn_gevd
    H = dense_hessian(ctx, gauss_newton=True, include_reg=False)
    lam_d, _ = dense_gevd(H, tiny.prior)
    top = slice(0, 10)
    assert np.abs(res.eigenvalues[top] - lam_d[top]).max() \
        < 1e-8 * max(lam_d[0], 1.0)
    assert prior_orthonormality_error(tiny.prior, res.W) < 1e-8
    assert res.exhausted                      # full width computes everything
    assert res.rank == int(np.sum(lam_d >= 0.2))


def test_gevd_deterministic(tiny):
    op = ScaledPrecisionOperator(tiny.prior, 2.0)
    a = randomized_gevd(op, tiny.prior, rank_max=4, oversample=3,
                        rng=np.random.default_rng(11))
    b = randomized_gevd(op, tiny.prior, rank_max=4, oversample=3,
                        rng=np.random.default_rng(11))
    assert np.array_equal(a.eigenvalues, b.eigenvalues)
    assert np.array_equal(a.W, b.W)


def test_operator_counters(tiny, tiny_map):
    _, ctx, _ = tiny_map
    op = MisfitHessianOperator(ctx, gauss_newton=True)
    res = randomized_gevd(op, tiny.prior, rank_max=tiny.prior.n,
                          rng=np.random.default_rng(3))
    assert res.hessian_applies == tiny.prior.n
    # each action is one incremental forward plus one incremental adjoint
    assert res.linear_solves == 2 * res.hessian_applies


def test_variance_filter_spot_values(tiny):
    # W columns F e_i are exactly Gamma_pr^-1-orthonormal, so the
    # covariance deflation is W diag(lam/(1+lam)) W^T with known filter
    # values 0, 1/2, 3/4 at lam = 0, 1, 3.
    F = tiny.prior.cov_half_apply(np.eye(tiny.prior.n))
    W = F[:, :3]
    lam = np.array([0.0, 1.0, 3.0])
    post = LowRankPosterior(tiny.prior, np.zeros(tiny.prior.n), lam, W)
    drop = tiny.prior.covariance_matrix() - post.covariance_matrix()
    expect = (W * np.array([0.0, 0.5, 0.75])) @ W.T
    assert np.abs(drop - expect).max() < 1e-12 * np.abs(F).max() ** 2


def test_posterior_matches_dense_inverse(tiny, tiny_map, gn_gevd):
    beta_map, ctx, _ = tiny_map
    _, res = gn_gevd
    lam_r, W_r = res.eigenvalues, res.W      # full rank, no truncation
    post = LowRankPosterior(tiny.prior, beta_map, lam_r, W_r)
    H = dense_hessian(ctx, gauss_newton=True, include_reg=False)
    dense_cov = np.linalg.inv(0.5 * (H + H.T) + tiny.prior.precision_matrix())
    got = post.covariance_matrix()
    scale = np.abs(dense_cov).max()
    assert np.abs(got - dense_cov).max() < 1e-8 * scale
    assert np.abs(post.pointwise_variance() - np.diag(dense_cov)).max() \
        < 1e-8 * scale
    w = np.random.default_rng(4).standard_normal(tiny.prior.n)
    assert np.abs(post.covariance_apply(w) - dense_cov @ w).max() \
        < 1e-8 * scale * np.abs(w).max()


def test_truncation_monotone_variance(tiny, tiny_map, gn_gevd):
    beta_map = tiny_map[0]
    lam, W = gn_gevd[1].eigenvalues, gn_gevd[1].W
    keep = np.flatnonzero(lam > 0.0)
    lam, W = lam[keep], W[:, keep]
    var_prior = tiny.prior.pointwise_variance()
    prev = var_prior
    for r in (2, 5, lam.size):
        post = LowRankPosterior(tiny.prior, beta_map, lam[:r], W[:, :r])
        var = post.pointwise_variance()
        # each retained mode only removes variance
        assert np.all(var <= prev + 1e-12 * var_prior.max())
        prev = var
    assert prev.min() >= -1e-12 * var_prior.max()
    # the data are informative somewhere
    assert (prev / var_prior).min() < 0.5


def test_sampling_deterministic_and_centered(tiny, tiny_map, gn_gevd):
    beta_map = tiny_map[0]
    lam_r, W_r = gn_gevd[1].retained()
    post = LowRankPosterior(tiny.prior, beta_map, lam_r, W_r)
    a = post.sample(np.random.default_rng(42), size=6)
    b = post.sample(np.random.default_rng(42), size=6)
    assert np.array_equal(a, b)
    assert a.shape == (6, tiny.prior.n)
    single = post.sample(np.random.default_rng(9))
    assert single.shape == (tiny.prior.n,)


def test_rank_zero_posterior_is_prior(tiny):
    n = tiny.prior.n
    post = LowRankPosterior(tiny.prior, np.ones(n),
                            np.zeros(0), np.zeros((n, 0)))
    assert post.rank == 0
    assert np.abs(post.pointwise_variance()
                  - tiny.prior.pointwise_variance()).max() == 0.0
    rng_a, rng_b = np.random.default_rng(3), np.random.default_rng(3)
    got = post.sample(rng_a, size=4)
    ref = 1.0 + (tiny.prior.sample(rng_b, size=4) - tiny.prior.beta0)
    assert np.abs(got - ref).max() < 1e-12


def test_sample_covariance_converges(tiny, tiny_map, gn_gevd):
    beta_map = tiny_map[0]
    lam_r, W_r = gn_gevd[1].retained()
    post = LowRankPosterior(tiny.prior, beta_map, lam_r, W_r)
    draws = post.sample(np.random.default_rng(0), size=4000)
    emp = np.cov(draws.T)
    ref = post.covariance_matrix()
    # Monte Carlo check at 4e3 draws; the acceptance run tightens this.
    assert np.abs(emp - ref).max() < 0.1 * np.abs(ref).max()
    assert np.abs(draws.mean(axis=0) - beta_map).max() \
        < 0.1 * np.sqrt(np.abs(ref).max())


def test_posterior_validation(tiny):
    n = tiny.prior.n
    with pytest.raises(ConfigurationError):
        LowRankPosterior(tiny.prior, np.zeros(n),
                         np.array([1.0, 2.0]), np.zeros((n, 3)))
    with pytest.raises(ConfigurationError):
        LowRankPosterior(tiny.prior, np.zeros(n),
                         np.array([1.0, -0.5]), np.zeros((n, 2)))
    # roundoff-scale negatives are tolerated
    LowRankPosterior(tiny.prior, np.zeros(n),
                     np.array([1.0, -1e-14]), np.zeros((n, 2)))


class SignFlipOperatorContext:
    """Fake MapContext: full Hessian is negative definite, GN is not."""

    def __init__(self, prior, c):
        self.prior = prior
        self.beta = np.zeros(prior.n)
        self.c = c

    def misfit_hessian_action(self, v, gauss_newton=False, counter=None):
        s = 1.0 if gauss_newton else -1.0
        return s * self.c * self.prior.precision_apply(v)


def test_negative_ritz_triggers_gauss_newton_retry(tiny):
    ctx = SignFlipOperatorContext(tiny.prior, 2.0)
    with pytest.warns(RuntimeWarning, match="Gauss-Newton"):
        post, res = build_posterior(ctx, tiny.prior, np.zeros(tiny.prior.n),
                                    rank_max=4, oversample=2,
                                    rng=np.random.default_rng(5))
    assert np.abs(res.eigenvalues - 2.0).max() < 1e-8
    assert post.rank == 4


def test_build_posterior_gauss_newton_path(tiny, tiny_map):
    beta_map, ctx, _ = tiny_map
    post, res = build_posterior(ctx, tiny.prior, beta_map, rank_max=8,
                                oversample=4, rng=np.random.default_rng(6),
                                gauss_newton=True)
    assert post.rank == res.rank <= 8
    assert post.rank == res.retained()[0].size
    assert np.all(res.retained()[0] >= res.threshold)
