"""Adjoint gradient, Hessian actions, and misfit functionals."""

import numpy as np
import pytest

from iceinv import (ObservationSet, SurfaceMisfit, ConfigurationError,
                    eval_cost_and_gradient, linearize, dense_hessian,
                    SolveCounter, MISFIT_MODES)
from iceinv.adjoint import match_surface_nodes
from iceinv.stokes import surface_velocity


@pytest.fixture(scope="module")
def ctx_true(desk):
    """Linearization at the truth (any point works for operator identities)."""
    return linearize(desk.assembler, desk.beta_true, desk.x_true,
                     desk.misfit, desk.prior)


def test_gradient_vs_finite_differences(desk):
    rng = np.random.default_rng(10)
    beta = desk.beta_true + 0.2 * rng.standard_normal(desk.beta_true.size)
    j0, g, ctx, rec = eval_cost_and_gradient(desk.assembler, beta,
                                             desk.misfit, desk.prior)
    assert rec.converged
    h = 1e-5
    for _ in range(3):
        d = rng.standard_normal(beta.size)
        d /= np.linalg.norm(d)
        jp = eval_cost_and_gradient(desk.assembler, beta + h * d,
                                    desk.misfit, desk.prior, x0=ctx.x)[0]
        jm = eval_cost_and_gradient(desk.assembler, beta - h * d,
                                    desk.misfit, desk.prior, x0=ctx.x)[0]
        fd = (jp - jm) / (2.0 * h)
        assert abs(fd - g @ d) < 1e-6 * max(abs(fd), abs(g @ d))


def test_cost_decomposition(ctx_true, desk):
    j, jm, jr = ctx_true.cost()
    assert j == jm + jr
    assert jm == desk.misfit.value(desk.state.u)
    assert jr == desk.prior.reg_value(desk.beta_true)
    assert jm >= 0.0 and jr >= 0.0


def test_hessian_symmetry(ctx_true):
    rng = np.random.default_rng(11)
    n = ctx_true.beta.size
    for _ in range(20):
        b1 = rng.standard_normal(n)
        b2 = rng.standard_normal(n)
        h1 = ctx_true.hessian_action(b1)
        h2 = ctx_true.hessian_action(b2)
        s1, s2 = b2 @ h1, b1 @ h2
        assert abs(s1 - s2) < 1e-8 * max(abs(s1), abs(s2))


def test_hessian_vs_fd_of_gradient(desk, ctx_true):
    rng = np.random.default_rng(12)
    beta = desk.beta_true
    h = 1e-5
    for _ in range(2):
        d = rng.standard_normal(beta.size)
        d /= np.linalg.norm(d)
        gp = eval_cost_and_gradient(desk.assembler, beta + h * d,
                                    desk.misfit, desk.prior, x0=ctx_true.x)[1]
        gm = eval_cost_and_gradient(desk.assembler, beta - h * d,
                                    desk.misfit, desk.prior, x0=ctx_true.x)[1]
        fd = (gp - gm) / (2.0 * h)
        hd = ctx_true.hessian_action(d)
        assert np.linalg.norm(fd - hd) < 1e-4 * np.linalg.norm(hd)


def test_gauss_newton_misfit_psd(ctx_true):
    rng = np.random.default_rng(13)
    for _ in range(10):
        v = rng.standard_normal(ctx_true.beta.size)
        q = v @ ctx_true.misfit_hessian_action(v, gauss_newton=True)
        assert q >= -1e-10 * np.dot(v, v)


def test_reg_term_is_exact_difference(ctx_true, desk):
    rng = np.random.default_rng(14)
    v = rng.standard_normal(ctx_true.beta.size)
    full = ctx_true.hessian_action(v, include_reg=True)
    mis = ctx_true.misfit_hessian_action(v)
    assert np.allclose(full - mis, desk.prior.reg_hessian_apply(v))


def test_dense_hessian_matches_actions(tiny_map):
    _, ctx, _ = tiny_map
    H = dense_hessian(ctx, gauss_newton=True)
    rng = np.random.default_rng(15)
    v = rng.standard_normal(ctx.beta.size)
    hv = ctx.hessian_action(v, gauss_newton=True)
    assert np.linalg.norm(H @ v - hv) < 1e-8 * np.linalg.norm(hv)
    assert np.allclose(H, H.T)


def test_counter_ticks(desk):
    counter = SolveCounter()
    ctx = linearize(desk.assembler, desk.beta_true, desk.x_true,
                    desk.misfit, desk.prior, counter=counter)
    assert counter.n == 1          # the adjoint solve
    ctx.hessian_action(np.ones(ctx.beta.size), counter=counter)
    assert counter.n == 3          # plus two incremental solves


def test_misfit_quadratic_identity(desk):
    mis = desk.misfit
    rng = np.random.default_rng(16)
    u = rng.standard_normal(desk.mesh.n_velocity_dofs)
    val = 0.5 * u @ (mis.M2 @ u) - mis.b @ u + mis.c
    assert abs(mis.value(u) - val) < 1e-9 * max(1.0, abs(val))
    h = 1e-6
    d = rng.standard_normal(u.size)
    fd = (mis.value(u + h * d) - mis.value(u - h * d)) / (2 * h)
    assert abs(fd - mis.gradient(u) @ d) < 1e-5 * max(1.0, abs(fd))


def test_misfit_zero_at_data(desk):
    # noise-free observations at the model's own surface trace
    us = surface_velocity(desk.mesh, desk.state)
    xs = desk.mesh.coords[desk.mesh.boundary_nodes["top"], 0]
    obs = ObservationSet(x=xs, vx=us[0::2], vz=us[1::2],
                         sigma=np.full(xs.size, 0.3))
    mis = SurfaceMisfit(desk.mesh, obs, mode="diagonal")
    assert abs(mis.value(desk.state.u)) < 1e-10 * abs(mis.c)
    assert np.abs(mis.gradient(desk.state.u)).max() < 1e-8


def test_misfit_chi2_scale(desk):
    # with 10% noise the optimal-fit misfit is near half the number of
    # scalar observations; at the truth it is within a loose chi2 band
    val = desk.misfit.value(desk.state.u)
    n_half = desk.obs.size
    assert 0.3 * n_half < val < 3.0 * n_half


def test_integral_mode(desk):
    us = surface_velocity(desk.mesh, desk.state)
    xs = desk.mesh.coords[desk.mesh.boundary_nodes["top"], 0]
    obs = ObservationSet(x=xs, vx=us[0::2], vz=us[1::2])
    mis = SurfaceMisfit(desk.mesh, obs, mode="integral")
    assert abs(mis.value(desk.state.u)) < 1e-9 * abs(mis.c)
    # half the data on the lattice is not enough
    with pytest.raises(ConfigurationError):
        SurfaceMisfit(desk.mesh, ObservationSet(x=xs[::2], vx=us[0::2][::2],
                                                vz=us[1::2][::2]),
                      mode="integral")


def test_misfit_mode_validation(desk):
    assert set(MISFIT_MODES) == {"diagonal", "integral"}
    with pytest.raises(ConfigurationError):
        SurfaceMisfit(desk.mesh, desk.obs, mode="l1")


def test_match_surface_nodes(desk):
    mesh = desk.mesh
    xs = mesh.coords[mesh.boundary_nodes["top"], 0]
    nodes = match_surface_nodes(mesh, xs[3:6])
    assert np.array_equal(nodes, mesh.boundary_nodes["top"][3:6])
    with pytest.raises(ConfigurationError):
        match_surface_nodes(mesh, np.array([xs[2] + 0.37 * (xs[3] - xs[2])]))


def test_observation_validation():
    x = np.linspace(0.0, 1.0, 5)
    with pytest.raises(ConfigurationError):
        ObservationSet(x=x, vx=np.zeros(4), vz=np.zeros(5))
    with pytest.raises(ConfigurationError):
        ObservationSet(x=x, vx=np.zeros(5), vz=np.zeros(5),
                       sigma=np.zeros(5))
    with pytest.raises(ConfigurationError):
        ObservationSet(x=x, vx=np.full(5, np.nan), vz=np.zeros(5))
    obs = ObservationSet(x=x, vx=np.full(5, 3.0), vz=np.full(5, 4.0))
    assert obs.size == 5
    assert np.allclose(obs.speeds(), 5.0)
