"""
Manufactured-solution verification problems on the unit slab.

The reference velocity is the divergence-free field

    u_x = sin^2(pi x) sin(2 pi z),   u_z = -sin(2 pi x) sin^2(pi z),

which vanishes on all four sides of [0, 1]^2, so it is compatible with
no-slip lateral walls and with the strong no-normal-flow constraint on a
flat bed.  The forcing, surface traction, and tangential basal source that
make it an exact solution of the Glen-rheology system (n = 3, A = 1) were
generated offline by symbolic differentiation of the stress and frozen
here as plain ndarray expressions; `eps_reg` must match the rheology used
in the solve.

Two variants: `pressure=False` uses an identically zero pressure (velocity
convergence is then limited only by the velocity space), `pressure=True`
adds p = sin(pi x) cos(pi z) through the momentum source and the surface
traction.
"""

import numpy as np

from .mesh import DomainSpec, build_mesh
from .stokes import (GlenRheology, PhysicsParams, StokesAssembler, NewtonConfig,
                     solve_forward, velocity_l2_error)


def exact_velocity():
    """Exact velocity components as (fx(x, z), fz(x, z)) callables."""
    def ux(x, z):
        return np.sin(np.pi * x) ** 2 * np.sin(2 * np.pi * z)

    def uz(x, z):
        return -np.sin(2 * np.pi * x) * np.sin(np.pi * z) ** 2
    return ux, uz


def _stress_terms(x, z, eps_reg):
    """Frozen symbolic results: forcing (fx, fz) and deviatoric stress."""
    x0 = np.pi * z
    x1 = 2 * x0
    x2 = np.sin(x1)
    x3 = np.pi * x
    x4 = np.sin(x3)
    x5 = x4 ** 2
    x6 = x2 * x5
    x7 = np.cos(x3)
    x8 = x7 ** 2
    x9 = 2 * x3
    x10 = np.cos(x9)
    x11 = np.cos(x0)
    x12 = np.sin(x0)
    x13 = x11 * x12
    x14 = x10 * x13
    x15 = x2 ** 2
    x16 = x12 ** 2
    x17 = x10 * x16
    x18 = np.sin(x9)
    x19 = x11 ** 2
    x20 = np.cos(x1)
    x21 = -x17 + x20 * x5
    x22 = x16 * x18
    x23 = x4 * x7
    x24 = x20 * x23
    x25 = (-x15 * x4 ** 3 * x7 + x15 * x4 * x7 ** 3
           + 2 * x17 * x18 * x19 + x21 * (x22 + x24))
    x26 = np.pi ** 2
    x27 = 2 * x26
    x28 = x18 ** 2
    x29 = (eps_reg + x15 * x27 * x5 * x8 + x16 * x19 * x27 * x28
           + x21 ** 2 * x26)
    x30 = 1.0 / x29
    x31 = x26 * x30
    x32 = x2 * x23
    x33 = x31 * (x11 ** 3 * x12 * x28 - x11 * x12 ** 3 * x28
                 + 2 * x2 * x20 * x5 * x8 - x21 * (x14 + x6))
    x34 = x29 ** (-1.0 / 3.0)
    x35 = x27 * x34
    x36 = x13 * x18
    x37 = np.pi * x34
    x38 = 2 * x37
    fx = x35 * (x14 - x2 * x8 + (2.0 / 3.0) * x21 * x33
                + (4.0 / 3.0) * x25 * x31 * x32 + 2 * x6)
    fz = x35 * (x18 * x19 + (2.0 / 3.0) * x21 * x25 * x26 * x30
                - 2 * x22 - x24 - (4.0 / 3.0) * x33 * x36)
    sxx = x32 * x38
    szz = -x36 * x38
    sxz = x21 * x37
    return fx, fz, sxx, szz, sxz


def manufactured_problem(eps_reg=1e-10, pressure=False):
    """
    Hooks and exact fields for the manufactured unit-slab problem.

    Returns
    -------
    dict with keys 'body_force', 'top_traction', 'basal_source' (assembler
    hooks), 'ux', 'uz' (exact velocity callables), 'physics', 'beta_value'.
    """
    ux, uz = exact_velocity()

    def body_force(x, z):
        fx, fz, *_ = _stress_terms(x, z, eps_reg)
        if pressure:
            fx = fx + np.pi * np.cos(np.pi * x) * np.cos(np.pi * z)
            fz = fz - np.pi * np.sin(np.pi * x) * np.sin(np.pi * z)
        return fx, fz

    def top_traction(x, z):
        _, _, _, szz, sxz = _stress_terms(x, z, eps_reg)
        if pressure:
            szz = szz - np.sin(np.pi * x) * np.cos(np.pi * z)
        return sxz, szz

    def basal_source(x):
        # g_b = exp(beta) u_t + t.(sigma n) with u_t = 0 and n = (0, -1)
        _, _, _, _, sxz = _stress_terms(x, np.zeros_like(x), eps_reg)
        return -sxz

    physics = PhysicsParams(rheology=GlenRheology(n_glen=3.0, A_glen=1.0,
                                                  eps_reg=eps_reg))
    return {"body_force": body_force, "top_traction": top_traction,
            "basal_source": basal_source, "ux": ux, "uz": uz,
            "physics": physics, "beta_value": 0.0}


def manufactured_velocity_error(nx, k=2, eps_reg=1e-10, pressure=False):
    """Solve the manufactured problem on an nx x nx mesh; return L2 error."""
    prob = manufactured_problem(eps_reg=eps_reg, pressure=pressure)
    spec = DomainSpec(length=1.0, bed=0.0, surface=1.0,
                      left_bc="no-slip", right_bc="no-slip")
    mesh = build_mesh(spec, nx, nx, k=k)
    asm = StokesAssembler(mesh, prob["physics"], body_force=prob["body_force"],
                          top_traction=prob["top_traction"],
                          basal_source=prob["basal_source"])
    beta = np.full(mesh.n_basal_dofs, prob["beta_value"])
    state, record, _ = solve_forward(asm, beta, NewtonConfig(rel_tol=1e-12, abs_tol=1e-13))
    return velocity_l2_error(mesh, state.u, prob["ux"], prob["uz"]), record


def convergence_rates(sizes=(4, 8, 16), k=2, pressure=False):
    """
    Observed L2 convergence orders over successive mesh refinements.

    Returns (errors, rates) with one rate per refinement step.
    """
    errs = []
    for nx in sizes:
        err, _ = manufactured_velocity_error(nx, k=k, pressure=pressure)
        errs.append(err)
    errs = np.asarray(errs)
    hs = 1.0 / np.asarray(sizes, dtype=float)
    rates = np.log(errs[:-1] / errs[1:]) / np.log(hs[:-1] / hs[1:])
    return errs, rates
