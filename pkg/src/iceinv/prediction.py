"""
Scalar mass-flux prediction and its uncertainty under the basal friction
posterior.

The quantity of interest is the boundary flux

    Q(beta) = rho_flux * int_{Gamma_o} u(beta) . n ds,

a linear functional of the velocity, so its value and its state
derivative come from the same facet assembly.  The parameter gradient F
needs one adjoint solve with the flux dual as source and is otherwise
the misfit gradient formula with the regularization term removed; the
linearized prediction variances are quadratic forms of F in the prior
and posterior covariances, so once the low-rank posterior exists they
cost only basal-size linear algebra.  The influential direction is the
posterior-covariance image of F, normalized so that its inner product
with F equals Sigma^(3/2); it is the single parameter mode that a new
observation campaign aimed at this QoI should pin down first.
"""

from dataclasses import dataclass, field

import numpy as np

from .mesh import ConfigurationError


@dataclass(frozen=True)
class QoISpec:
    """
    One scalar flux functional.

    boundary None defers to the domain's configured outflow side; z_min
    and z_max keep only facets whose midpoint height falls inside the
    window (facet-granular, never splitting a facet).  rho_flux converts
    the area flux to reporting units; 0.91 is ice density in Gt/km^3, so
    fluxes read as Gt/a per km of breadth.
    """
    tag: str
    boundary: str = None
    rho_flux: float = 0.91
    z_min: float = None
    z_max: float = None

    def resolve_boundary(self, mesh):
        return self.boundary if self.boundary is not None else mesh.spec.outflow


def flux_functional(mesh, spec):
    """Velocity dual vector g with Q(u) = g . u for the given QoISpec."""
    ed = mesh.edge_data(spec.resolve_boundary(mesh))
    zmid = ed["z"].mean(axis=1)
    sel = np.ones(zmid.size, dtype=bool)
    if spec.z_min is not None:
        sel &= zmid >= spec.z_min
    if spec.z_max is not None:
        sel &= zmid <= spec.z_max
    if not np.any(sel):
        raise ConfigurationError(
            f"QoI {spec.tag!r}: empty outflow boundary selection")
    el = spec.rho_flux * np.einsum("fq,qa,fqi->fai",
                                   ed["w"][sel], ed["N"], ed["n"][sel])
    g = np.zeros(mesh.n_velocity_dofs)
    np.add.at(g, 2 * ed["nodes"][sel], el[..., 0])
    np.add.at(g, 2 * ed["nodes"][sel] + 1, el[..., 1])
    return g


def eval_qoi(state, spec, mesh):
    """Flux at a converged state, rho_flux * int u.n ds over Gamma_o."""
    return float(flux_functional(mesh, spec) @ state.u)


def prediction_gradient(ctx, spec):
    """
    Parameter gradient F of the flux at the context's linearization point.

    One adjoint solve with the cached forward-Newton factorization (the
    adjoint operator is the forward operator: the reduced Jacobian is
    symmetric), then the basal coupling of forward and adjoint tangential
    traces.  This is the misfit gradient path with the flux dual in place
    of the data term and no regularization.
    """
    g = flux_functional(ctx.assembler.mesh, spec)
    lam = ctx.lu.solve(-ctx.assembler.reduce_dual(g))
    lam_u, _ = ctx.assembler.expand(lam)
    return ctx.C.T @ lam_u


def prediction_variance(F, post):
    """
    Linearized prediction standard deviations (posterior, prior).

    sigma_post^2 = F . Gamma_post F and sigma_prior^2 = F . Gamma_pr F,
    evaluated through the low-rank update so no incremental solves occur.
    """
    F = np.asarray(F, dtype=float)
    s2_prior = float(F @ post.prior.covariance_apply(F))
    s2_post = float(F @ post.covariance_apply(F))
    floor = -1e-12 * max(s2_prior, 1.0)
    if s2_post < floor or s2_prior < floor:
        raise RuntimeError("negative prediction variance beyond roundoff")
    return np.sqrt(max(s2_post, 0.0)), np.sqrt(max(s2_prior, 0.0))


def ifp_direction(F, post):
    """
    Influential direction W = Sigma^(-1/2) Gamma_post F and Sigma^2.

    The parameter-to-prediction map has rank one, so its whole posterior
    geometry is this single field; <F, W> = Sigma^(3/2) by construction.
    """
    F = np.asarray(F, dtype=float)
    y = post.covariance_apply(F)
    sigma2 = float(F @ y)
    if not sigma2 > 0.0:
        raise ConfigurationError(
            "zero prediction gradient admits no influential direction")
    return y / sigma2 ** 0.25, sigma2


def posterior_solve_cg(ctx, prior, w, rtol=1e-10, max_iter=500,
                       gauss_newton=True):
    """
    Cross-check solve of (H_mis + precision) x = w by CG.

    Prior-covariance preconditioning clusters the spectrum at 1 + lam, so
    iterations scale with the number of data-informed modes, not the
    basal dimension.  This is the incremental-solve route to the same
    quadratic forms the low-rank posterior evaluates algebraically.
    """
    w = np.asarray(w, dtype=float)

    def apply(v):
        return ctx.misfit_hessian_action(v, gauss_newton=gauss_newton) \
            + prior.precision_apply(v)

    x = np.zeros_like(w)
    r = w.copy()
    z = prior.covariance_apply(r)
    p = z.copy()
    rz = float(r @ z)
    tol2 = rtol ** 2 * float(w @ prior.covariance_apply(w))
    for _ in range(max_iter):
        if rz <= tol2:
            return x
        Ap = apply(p)
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = prior.covariance_apply(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise RuntimeError("posterior CG cross-check did not converge")


@dataclass
class PredictionReport:
    """Univariate prediction density plus its parameter-space geometry."""
    tag: str
    q_map: float
    sigma_post: float
    sigma_prior: float
    Sigma2: float
    gradient: np.ndarray = field(repr=False)
    direction: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not (0.0 <= self.sigma_post <= self.sigma_prior * (1.0 + 1e-12)):
            raise RuntimeError("prediction deviations violate contraction")


def predict(ctx, post, specs):
    """
    Full prediction report per QoISpec at the posterior's MAP point.

    QoIs are independent univariate densities; evaluation is sequential
    but each report depends only on immutable inputs.
    """
    mesh = ctx.assembler.mesh
    out = []
    for spec in specs:
        g = flux_functional(mesh, spec)
        q = float(g @ ctx.u)
        F = prediction_gradient(ctx, spec)
        s_post, s_prior = prediction_variance(F, post)
        Wdir, sigma2 = ifp_direction(F, post)
        out.append(PredictionReport(tag=spec.tag, q_map=q, sigma_post=s_post,
                                    sigma_prior=s_prior, Sigma2=sigma2,
                                    gradient=F, direction=Wdir))
    return out
