"""
Adjoint-based gradient and Hessian actions for the basal friction control
problem.

Everything here differentiates the discrete residual and the discrete
objective exactly, so gradients match finite differences of the assembled
cost to truncation error and all Hessian actions are symmetric to
roundoff.  The objective is

    J(beta) = J_mis(u(beta)) + R(beta),

with u(beta) the forward solution.  Both misfit flavors are quadratic in
u (the data weighting is fixed by the observations), so the misfit
contributes a constant second-derivative operator; all other curvature
enters through the parameter-to-state map.

A `MapContext` caches one linearization point: the re-assembled saddle
Jacobian and its factorization, the adjoint state, and the three coupling
operators that appear in Hessian actions (the beta-residual Jacobian C,
its adjoint-weighted counterpart, and the basal (beta, beta) block).  The
factorization is shared by the adjoint, incremental forward, and
incremental adjoint solves.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import splu

from .mesh import ConfigurationError
from .stokes import solve_forward, NewtonConfig

MISFIT_MODES = ("diagonal", "integral")


@dataclass
class ObservationSet:
    """
    Surface velocity observations at fixed along-flow positions.

    Positions are physical x coordinates that must coincide with surface
    lattice nodes of whatever mesh the misfit is built on; keeping the
    data tied to locations rather than dof indices is what makes
    inversions on different resolutions see the same experiment.

    sigma is the per-point noise standard deviation shared by both
    components (used by the diagonal mode); eps_norm regularizes the
    relative normalization in the integral mode.
    """
    x: np.ndarray
    vx: np.ndarray
    vz: np.ndarray
    sigma: np.ndarray = None
    eps_norm: float = 1e-9

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.vx = np.asarray(self.vx, dtype=float)
        self.vz = np.asarray(self.vz, dtype=float)
        if not (self.x.shape == self.vx.shape == self.vz.shape):
            raise ConfigurationError("observation arrays must share a shape")
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)
            if self.sigma.shape != self.x.shape:
                raise ConfigurationError("sigma shape mismatch")
            if np.any(self.sigma <= 0.0):
                raise ConfigurationError("sigma must be positive")
        for a in (self.x, self.vx, self.vz):
            if not np.all(np.isfinite(a)):
                raise ConfigurationError("observations must be finite")

    @property
    def size(self):
        return self.x.size

    def speeds(self):
        return np.sqrt(self.vx ** 2 + self.vz ** 2)


def match_surface_nodes(mesh, x_obs):
    """Map observation x positions to surface lattice node ids (exact match)."""
    top = mesh.boundary_nodes["top"]
    xs = mesh.coords[top, 0]
    tol = 1e-9 * mesh.spec.length
    j = np.clip(np.searchsorted(xs, x_obs), 0, xs.size - 1)
    jm = np.clip(j - 1, 0, xs.size - 1)
    pick = np.where(np.abs(xs[j] - x_obs) <= np.abs(xs[jm] - x_obs), j, jm)
    if np.any(np.abs(xs[pick] - x_obs) > tol):
        bad = x_obs[np.abs(xs[pick] - x_obs) > tol]
        raise ConfigurationError(
            f"observation positions not on the surface lattice: {bad[:5]}")
    return top[pick]


class SurfaceMisfit:
    """
    Quadratic surface-velocity misfit J_mis(u) = 1/2 u^T M2 u - b^T u + c.

    mode 'diagonal': weighted sum of squares at observation nodes with
    weights 1/sigma_i^2 (both components); the expected value at the truth
    under the noise model is half the number of scalar observations.

    mode 'integral': 1/2 int_top |u - d|^2 / (|d|^2 + eps) ds with d the
    trace-interpolated data; requires observations at every surface
    lattice node.
    """

    def __init__(self, mesh, obs, mode="diagonal"):
        if mode not in MISFIT_MODES:
            raise ConfigurationError(f"unknown misfit mode {mode!r}")
        self.mesh, self.obs, self.mode = mesh, obs, mode
        nodes = match_surface_nodes(mesh, obs.x)
        nv = mesh.n_velocity_dofs
        if mode == "diagonal":
            if obs.sigma is None:
                raise ConfigurationError("diagonal misfit requires sigma")
            w = 1.0 / obs.sigma ** 2
            dofs = np.concatenate([2 * nodes, 2 * nodes + 1])
            ww = np.concatenate([w, w])
            self.M2 = coo_matrix((ww, (dofs, dofs)), shape=(nv, nv)).tocsr()
            b = np.zeros(nv)
            np.add.at(b, 2 * nodes, w * obs.vx)
            np.add.at(b, 2 * nodes + 1, w * obs.vz)
            self.b = b
            self.c = 0.5 * float(w @ (obs.vx ** 2 + obs.vz ** 2))
        else:
            top = mesh.boundary_nodes["top"]
            if nodes.size != top.size or np.unique(nodes).size != top.size:
                raise ConfigurationError(
                    "integral misfit needs data on the full surface lattice")
            order = np.empty(top.size, dtype=np.int64)
            order[np.searchsorted(top, nodes, sorter=np.argsort(top))] = \
                np.arange(nodes.size)
            # data as a trace-space field in surface lattice order
            pos = {nd: i for i, nd in enumerate(top)}
            dx = np.empty(top.size)
            dz = np.empty(top.size)
            for i, nd in enumerate(nodes):
                dx[pos[nd]] = obs.vx[i]
                dz[pos[nd]] = obs.vz[i]
            ed = mesh.edge_data("top")
            loc = np.vectorize(pos.get)(ed["nodes"])
            dqx = np.einsum("qa,fa->fq", ed["N"], dx[loc])
            dqz = np.einsum("qa,fa->fq", ed["N"], dz[loc])
            gam = 1.0 / (dqx ** 2 + dqz ** 2 + obs.eps_norm)
            wq = ed["w"] * gam
            blk = np.einsum("fq,qa,qb->fab", wq, ed["N"], ed["N"])
            k1 = ed["nodes"].shape[1]
            idx = np.empty((ed["nodes"].shape[0], 2 * k1), dtype=np.int64)
            idx[:, 0::2] = 2 * ed["nodes"]
            idx[:, 1::2] = 2 * ed["nodes"] + 1
            big = np.zeros((blk.shape[0], 2 * k1, 2 * k1))
            big[:, 0::2, 0::2] = blk
            big[:, 1::2, 1::2] = blk
            rows = np.repeat(idx, 2 * k1, axis=1).ravel()
            cols = np.tile(idx, (1, 2 * k1)).ravel()
            self.M2 = coo_matrix((big.ravel(), (rows, cols)),
                                 shape=(nv, nv)).tocsr()
            b = np.zeros(nv)
            elx = np.einsum("fq,fq,qa->fa", wq, dqx, ed["N"])
            elz = np.einsum("fq,fq,qa->fa", wq, dqz, ed["N"])
            np.add.at(b, 2 * ed["nodes"], elx)
            np.add.at(b, 2 * ed["nodes"] + 1, elz)
            self.b = b
            self.c = 0.5 * float(np.sum(wq * (dqx ** 2 + dqz ** 2)))

    def value(self, u):
        return 0.5 * float(u @ (self.M2 @ u)) - float(self.b @ u) + self.c

    def gradient(self, u):
        """Misfit derivative as a Cartesian velocity dual vector."""
        return self.M2 @ u - self.b


class MapContext:
    """
    One linearization point of the parameter-to-state map.

    Construction re-assembles and factorizes the saddle Jacobian at the
    converged state (the same operator object then serves the adjoint and
    both incremental solves) and solves the adjoint system.
    """

    def __init__(self, assembler, beta, x, misfit, prior, counter=None):
        self.assembler = assembler
        self.beta = np.asarray(beta, dtype=float).copy()
        self.x = x.copy()
        self.misfit, self.prior = misfit, prior
        self.u, self.p = assembler.expand(x)
        self.robin = assembler.robin_matrix(self.beta)
        self.K = assembler.jacobian(x, self.beta, robin=self.robin)
        self.lu = splu(self.K)
        g_mis = misfit.gradient(self.u)
        self.lam = self.lu.solve(-assembler.reduce_dual(g_mis))
        if counter is not None:
            counter.tick()
        self.lam_u, self.lam_p = assembler.expand(self.lam)
        ed = assembler._basal_edges
        self._edge_weight = ed["w"] * np.exp(
            assembler._basal_interp @ self.beta).reshape(ed["w"].shape)
        self.C = self._basal_coupling(self.u)
        self.P = self._basal_coupling(self.lam_u)
        self._Rbb = self._basal_block()

    # -- coupling operators ---------------------------------------------

    def _tangential_trace(self, vel):
        ed = self.assembler._basal_edges
        Vc = np.stack([vel[0::2][ed["nodes"]], vel[1::2][ed["nodes"]]], axis=-1)
        vq = np.einsum("qa,fai->fqi", ed["N"], Vc)
        return np.einsum("fqi,fqi->fq", vq, ed["t"])

    def _basal_coupling(self, vel):
        """Sparse map beta_hat -> velocity dual int exp(b) bhat (v.t)(w.t)."""
        asm = self.assembler
        ed = asm._basal_edges
        vt = self._tangential_trace(vel)
        nf, nq1 = vt.shape
        k1 = ed["nodes"].shape[1]
        scale = self._edge_weight * vt
        el = np.einsum("fq,fqi,qa->fqai", scale, ed["t"], ed["N"])
        rows_dof = np.empty((nf, nq1, k1, 2), dtype=np.int64)
        rows_dof[..., 0] = (2 * ed["nodes"])[:, None, :]
        rows_dof[..., 1] = (2 * ed["nodes"] + 1)[:, None, :]
        G = coo_matrix((el.ravel(),
                        (np.broadcast_to(np.arange(nf * nq1).reshape(nf, nq1, 1, 1),
                                         rows_dof.shape).ravel(),
                         rows_dof.ravel())),
                       shape=(nf * nq1, asm.mesh.n_velocity_dofs)).tocsr()
        return (G.T @ asm._basal_interp).tocsr()

    def _basal_block(self):
        """Dense (beta, beta) curvature block from the Robin term."""
        asm = self.assembler
        ut = self._tangential_trace(self.u)
        lt = self._tangential_trace(self.lam_u)
        w = (self._edge_weight * ut * lt).ravel()
        B = asm._basal_interp
        return (B.T @ csr_matrix((w, (np.arange(w.size), np.arange(w.size)))) @ B).toarray()

    # -- reductions ------------------------------------------------------

    def _reduce_vel_dual(self, g_u):
        return self.assembler.reduce_dual(g_u)

    def _apply_M2_red(self, y):
        u_y, _ = self.assembler.expand(y)
        return self.assembler.reduce_dual(self.misfit.M2 @ u_y)

    # -- public evaluations ----------------------------------------------

    def cost(self):
        jm = self.misfit.value(self.u)
        jr = self.prior.reg_value(self.beta)
        return jm + jr, jm, jr

    def gradient(self):
        """Exact discrete objective gradient as a basal dual vector."""
        return self.prior.reg_gradient(self.beta) + self.C.T @ self.lam_u

    def hessian_action(self, bhat, gauss_newton=False, include_reg=True,
                       counter=None):
        """
        Exact (or Gauss-Newton) Hessian action on a basal direction.

        Two triangular solves with the cached factorization: the
        incremental forward and the incremental adjoint.  With
        include_reg=False this is the data-misfit Hessian used for the
        posterior spectrum.
        """
        bhat = np.asarray(bhat, dtype=float)
        uhat = self.lu.solve(-self._reduce_vel_dual(self.C @ bhat))
        rhs = self._apply_M2_red(uhat)
        if not gauss_newton:
            uhat_u, _ = self.assembler.expand(uhat)
            t2 = self.assembler.second_variation_source(self.x, uhat_u, self.lam_u)
            rhs = rhs + self.assembler.reduce_dual(t2) \
                + self._reduce_vel_dual(self.P @ bhat)
        vhat = self.lu.solve(-rhs)
        if counter is not None:
            counter.tick()
            counter.tick()
        vhat_u, _ = self.assembler.expand(vhat)
        out = self.C.T @ vhat_u
        if not gauss_newton:
            uhat_u, _ = self.assembler.expand(uhat)
            out = out + self.P.T @ uhat_u + self._Rbb @ bhat
        if include_reg:
            out = out + self.prior.reg_hessian_apply(bhat)
        return out

    def misfit_hessian_action(self, bhat, gauss_newton=False, counter=None):
        return self.hessian_action(bhat, gauss_newton=gauss_newton,
                                   include_reg=False, counter=counter)


def linearize(assembler, beta, x, misfit, prior, counter=None):
    """Build a MapContext at a converged reduced state x."""
    return MapContext(assembler, beta, x, misfit, prior, counter=counter)


def eval_cost_and_gradient(assembler, beta, misfit, prior, newton_cfg=None,
                           x0=None, counter=None):
    """
    Forward solve + adjoint solve at beta.

    Returns (cost, gradient, context, forward_record); the context can be
    reused for Hessian actions at the same point.
    """
    state, record, x = solve_forward(assembler, beta, cfg=newton_cfg, x0=x0,
                                     counter=counter)
    ctx = linearize(assembler, beta, x, misfit, prior, counter=counter)
    j, jm, jr = ctx.cost()
    return j, ctx.gradient(), ctx, record


def dense_hessian(ctx, gauss_newton=False, include_reg=True):
    """Column-by-column dense Hessian (small problems and oracles only)."""
    n = ctx.beta.size
    H = np.empty((n, n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        H[:, i] = ctx.hessian_action(e, gauss_newton=gauss_newton,
                                     include_reg=include_reg)
        e[i] = 0.0
    return 0.5 * (H + H.T)
