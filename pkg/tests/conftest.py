"""Shared problems for the test suite.

The desk problem is the default configuration (32x8 slab, sinusoidal
bed, one slippery trough); the tiny problem shrinks the basal dimension
to 25 and uses a better-conditioned prior so that dense oracles are
meaningful at 1e-8 tolerances.  Expensive constructions (fine-mesh
synthetic data, MAP points) are session fixtures.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from iceinv import (DomainSpec, build_mesh, StokesAssembler, PhysicsParams,
                    solve_forward, surface_velocity, ObservationSet,
                    SurfaceMisfit, PriorModel, NewtonCGConfig, invert,
                    linearize)


def desk_domain():
    return DomainSpec(length=100.0,
                      bed=lambda x: 0.05 * np.sin(2 * np.pi * 2 * x / 100.0),
                      surface=lambda x: 1.3 - 0.3 * x / 100.0,
                      left_bc="no-slip", right_bc="hydrostatic-ocean",
                      sea_level=0.5, water_density=1028.0)


def beta_truth(x):
    return -1.0 - 3.0 * np.exp(-(((x - 60.0) / 12.0) ** 2))


def synth_obs(mesh, state, seed, noise_rel=0.1, eps=1e-9):
    """Same-mesh synthetic observations at every surface lattice node."""
    us = surface_velocity(mesh, state)
    xs = mesh.coords[mesh.boundary_nodes["top"], 0]
    scale = np.sqrt(us[0::2] ** 2 + us[1::2] ** 2 + eps)
    rng = np.random.default_rng(seed)
    zeta = rng.standard_normal((2, xs.size))
    return ObservationSet(x=xs,
                          vx=us[0::2] + noise_rel * scale * zeta[0],
                          vz=us[1::2] + noise_rel * scale * zeta[1],
                          sigma=0.1 * scale)


class Problem:
    """One meshed inverse problem with data and prior."""

    def __init__(self, nx, nz, gamma, delta, seed):
        self.mesh = build_mesh(desk_domain(), nx, nz, k=2)
        self.assembler = StokesAssembler(self.mesh, PhysicsParams())
        self.beta_true = beta_truth(self.mesh.basal_x)
        self.state, self.fwd_record, self.x_true = solve_forward(
            self.assembler, self.beta_true)
        self.obs = synth_obs(self.mesh, self.state, seed)
        self.misfit = SurfaceMisfit(self.mesh, self.obs, mode="diagonal")
        self.prior = PriorModel(self.mesh, gamma=gamma, delta=delta,
                                kappa=1.0, beta0=0.0)
        self.gamma = gamma

    def invert(self, **kw):
        return invert(self.assembler, self.misfit, lambda g: self.prior,
                      np.full(self.mesh.basal_x.size, 5.9),
                      cfg=NewtonCGConfig(**kw), gamma=self.gamma)


@pytest.fixture(scope="session")
def desk():
    return Problem(nx=32, nz=8, gamma=10.0, delta=1e-5, seed=42)


@pytest.fixture(scope="session")
def desk_map(desk):
    beta_map, ctx, record = desk.invert()
    assert record.converged
    return beta_map, ctx, record


@pytest.fixture(scope="session")
def tiny():
    return Problem(nx=24, nz=6, gamma=1.0, delta=0.05, seed=5)


@pytest.fixture(scope="session")
def tiny_map(tiny):
    beta_map, ctx, record = tiny.invert()
    assert record.converged
    return beta_map, ctx, record


@pytest.fixture(scope="session")
def fine_obs():
    """Observations from a 4x-refined truth at the nx=16 lattice positions.

    The positions live on the surface lattices of every mesh in
    {16, 32, 64, 128}, so inversions and spectra across resolutions see
    one experiment.  The fine mesh, assembler, and converged reduced
    state ride along so other tests can relinearize on nx=128 without
    repeating the forward solve.
    """
    fine = build_mesh(desk_domain(), 128, 32, k=2)
    asm = StokesAssembler(fine, PhysicsParams())
    state, rec, x = solve_forward(asm, beta_truth(fine.basal_x))
    assert rec.converged
    us = surface_velocity(fine, state)
    xs_f = fine.coords[fine.boundary_nodes["top"], 0]
    coarse = build_mesh(desk_domain(), 16, 4, k=2)
    x_obs = coarse.coords[coarse.boundary_nodes["top"], 0]
    pick = np.searchsorted(xs_f, x_obs)
    assert np.abs(xs_f[pick] - x_obs).max() < 1e-9 * 100.0
    vx, vz = us[0::2][pick], us[1::2][pick]
    scale = np.sqrt(vx ** 2 + vz ** 2 + 1e-9)
    rng = np.random.default_rng(42)
    zeta = rng.standard_normal((2, x_obs.size))
    obs = ObservationSet(x=x_obs, vx=vx + 0.1 * scale * zeta[0],
                         vz=vz + 0.1 * scale * zeta[1], sigma=0.1 * scale)
    return SimpleNamespace(obs=obs, mesh=fine, assembler=asm, x=x)


@pytest.fixture(scope="session")
def mms_rates():
    from iceinv import convergence_rates
    return convergence_rates(sizes=(4, 8, 16), k=2)


def multimesh_invert(nx, nz, obs, gamma=10.0, delta=1e-5):
    """Invert the shared-data experiment on one resolution."""
    mesh = build_mesh(desk_domain(), nx, nz, k=2)
    asm = StokesAssembler(mesh, PhysicsParams())
    misfit = SurfaceMisfit(mesh, obs, mode="diagonal")
    prior = PriorModel(mesh, gamma=gamma, delta=delta, kappa=1.0, beta0=0.0)
    beta_map, ctx, rec = invert(asm, misfit, lambda g: prior,
                                np.full(mesh.basal_x.size, 5.9), gamma=gamma)
    return mesh, asm, misfit, prior, beta_map, ctx, rec
