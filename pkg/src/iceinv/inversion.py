"""
Inexact Newton-CG MAP estimation for the basal friction field.

The outer loop is line-search Newton with Eisenstat-Walker forcing; the
inner loop is preconditioned conjugate gradients on the Hessian system
with the prior covariance as preconditioner, truncated on negative
curvature.  Far from the optimum the Hessian action can be replaced by
its Gauss-Newton part (positive semidefinite misfit curvature), switching
to full Newton once the gradient has dropped by a configurable factor.

Gradient norms are measured in the basal-mass dual norm so convergence
thresholds mean the same thing on every mesh resolution.

Every linearized Stokes solve performed anywhere in the loop is ticked
into exactly one accounting bucket (forward solves at accepted iterates,
forward solves spent on rejected line-search trials, adjoint solves,
incremental solves inside CG), so the bookkeeping identity

    total = accepted + line_search + adjoint + incremental

holds by construction rather than by reconciliation.
"""

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .mesh import ConfigurationError
from .stokes import solve_forward, NonlinearSolveError
from .adjoint import linearize


class SolveCounter:
    """Counts linearized Stokes solves; optionally forwards to a parent."""

    def __init__(self, parent=None):
        self.n = 0
        self._parent = parent

    def tick(self):
        self.n += 1
        if self._parent is not None:
            self._parent.tick()


class SolveBuckets:
    """Named solve counters sharing one running total."""

    NAMES = ("forward_accepted", "line_search", "adjoint", "incremental")

    def __init__(self):
        self.total = SolveCounter()
        for name in self.NAMES:
            setattr(self, name, SolveCounter(parent=self.total))

    def as_dict(self):
        d = {name: getattr(self, name).n for name in self.NAMES}
        d["total"] = self.total.n
        return d


@dataclass
class NewtonCGConfig:
    """Outer/inner iteration controls for the MAP solve."""
    grad_rtol: float = 1e-5
    grad_atol: float = 0.0
    max_newton: int = 60
    max_cg: int = 300
    eta_max: float = 0.05
    eta_min: float = 1e-6
    forcing_coeff: float = 1.0
    gauss_newton: str = "auto"        # 'auto' | 'always' | 'never'
    switch_ratio: float = 1e-2
    ls_c1: float = 1e-4
    ls_shrink: float = 0.5
    ls_alpha_min: float = 1e-8
    ls_max: int = 40
    continuation: bool = False
    continuation_factor: float = 100.0
    continuation_step: float = 10.0
    continuation_rtol: float = 1e-2

    def __post_init__(self):
        if self.gauss_newton not in ("auto", "always", "never"):
            raise ConfigurationError("gauss_newton must be auto/always/never")


@dataclass
class InversionRecord:
    """History and solve accounting of one inversion."""
    iterations: list = field(default_factory=list)
    buckets: dict = field(default_factory=dict)
    converged: bool = False
    stop_reason: str = ""
    grad_norm0: float = np.nan
    grad_norm: float = np.nan
    stages: list = field(default_factory=list)

    @property
    def newton_iters(self):
        return len(self.iterations)

    @property
    def cg_iters(self):
        return sum(it["cg_iters"] for it in self.iterations)

    def costs(self):
        return np.array([it["cost"] for it in self.iterations])

    def accounting_identity(self):
        b = self.buckets
        return b["total"] == (b["forward_accepted"] + b["line_search"]
                              + b["adjoint"] + b["incremental"])


def steihaug_pcg(hess_apply, g, precond, norm_solve, eta, max_iter):
    """
    Truncated preconditioned CG on H d = -g.

    precond maps dual vectors to fields (here: the prior covariance).
    Termination measures the residual in the mass-inverse dual norm
    supplied by norm_solve, the same norm the outer Newton test uses; with
    a very weak prior the covariance-metric residual can collapse by
    orders of magnitude after one iteration while the actual gradient
    equation is nowhere near solved, so the preconditioner metric is not
    trustworthy for stopping.  On negative curvature the current iterate
    is returned (or the preconditioned steepest-descent direction if it
    appears immediately).

    Returns (d, iterations, negative_curvature).
    """
    d = np.zeros_like(g)
    r = -g
    nr0 = float(np.sqrt(r @ norm_solve(r)))
    z = precond(r)
    rz = float(r @ z)
    if rz <= 0.0:
        raise ConfigurationError("preconditioner is not positive definite")
    p = z.copy()
    for j in range(1, max_iter + 1):
        Hp = hess_apply(p)
        pHp = float(p @ Hp)
        if pHp <= 0.0:
            return (z if j == 1 else d), j, True
        alpha = rz / pHp
        d += alpha * p
        r -= alpha * Hp
        if float(np.sqrt(r @ norm_solve(r))) <= eta * nr0:
            return d, j, False
        z = precond(r)
        rz_new = float(r @ z)
        if rz_new <= 0.0:
            return d, j, False
        p = z + (rz_new / rz) * p
        rz = rz_new
    return d, max_iter, False


def _trial_cost(assembler, beta, misfit, prior, newton_cfg, x0, counter):
    state, _, x = solve_forward(assembler, beta, cfg=newton_cfg, x0=x0,
                                counter=counter)
    return misfit.value(state.u) + prior.reg_value(beta), x


def _newton_loop(assembler, misfit, prior, beta, cfg, buckets, record,
                 newton_cfg, x_ws, grad_rtol):
    dual_norm = lambda g: float(np.sqrt(g @ prior.mass_solve(g)))
    state, _, x_ws = solve_forward(assembler, beta, cfg=newton_cfg, x0=x_ws,
                                   counter=buckets.forward_accepted)
    ctx = linearize(assembler, beta, x_ws, misfit, prior,
                    counter=buckets.adjoint)
    j, _, _ = ctx.cost()
    g = ctx.gradient()
    gn = dual_norm(g)
    gn0 = gn
    record.grad_norm0 = gn0
    for _ in range(cfg.max_newton):
        if gn <= max(grad_rtol * gn0, cfg.grad_atol):
            record.converged = True
            record.stop_reason = "converged"
            break
        # forcing tied to overall progress; monotone in the gradient norm,
        # so CG tightens toward a true Newton step near the solution
        eta = min(cfg.eta_max,
                  max(cfg.eta_min, cfg.forcing_coeff * np.sqrt(gn / gn0)))
        use_gn = (cfg.gauss_newton == "always"
                  or (cfg.gauss_newton == "auto" and gn > cfg.switch_ratio * gn0))
        hess = lambda v: ctx.hessian_action(v, gauss_newton=use_gn,
                                            counter=buckets.incremental)
        d, cg_iters, negcurv = steihaug_pcg(hess, g, prior.covariance_apply,
                                            prior.mass_solve, eta, cfg.max_cg)
        gd = float(g @ d)
        if gd >= 0.0:
            d = prior.covariance_apply(-g)
            gd = float(g @ d)
            negcurv = True
        alpha = 1.0
        accepted = False
        for _ls in range(cfg.ls_max):
            trial = SolveCounter()
            try:
                j_t, x_t = _trial_cost(assembler, beta + alpha * d, misfit,
                                       prior, newton_cfg, x_ws, trial)
            except NonlinearSolveError:
                j_t = np.inf
            # strict decrease required: accepting a step that changes
            # nothing in floating point would loop forever
            if np.isfinite(j_t) and j_t < j and j_t <= j + cfg.ls_c1 * alpha * gd:
                for _ in range(trial.n):
                    buckets.forward_accepted.tick()
                accepted = True
                break
            for _ in range(trial.n):
                buckets.line_search.tick()
            alpha *= cfg.ls_shrink
            if alpha < cfg.ls_alpha_min:
                break
        if not accepted:
            # the predicted decrease is below the evaluation noise of the
            # cost (each trial is an inexact forward solve); the incumbent
            # iterate is the best this precision can deliver
            record.stop_reason = "line search stalled"
            break
        beta = beta + alpha * d
        x_ws = x_t
        j = j_t
        ctx = linearize(assembler, beta, x_ws, misfit, prior,
                        counter=buckets.adjoint)
        g = ctx.gradient()
        gn = dual_norm(g)
        record.iterations.append({
            "cost": j, "grad_norm": gn, "eta": eta, "cg_iters": cg_iters,
            "alpha": alpha, "gauss_newton": use_gn, "neg_curvature": negcurv,
        })
    else:
        record.stop_reason = "iteration limit"
    record.grad_norm = gn
    return beta, ctx, x_ws


def invert(assembler, misfit, prior_factory, beta_init, cfg=None,
           newton_cfg=None, gamma=None):
    """
    MAP estimation, optionally with regularization-strength continuation.

    Parameters
    ----------
    assembler : StokesAssembler
    misfit : SurfaceMisfit
    prior_factory : callable gamma -> PriorModel, or a PriorModel
        A factory is required when continuation is enabled.
    beta_init : (n_basal,) array
    cfg : NewtonCGConfig, optional
    newton_cfg : NewtonConfig, optional
        Controls the inner forward solves.
    gamma : float, optional
        Target regularization weight (required with a factory).

    Returns
    -------
    beta_map : array
    ctx : MapContext at the solution
    record : InversionRecord
        converged is False when the iteration budget ran out or the line
        search stalled at the cost evaluation noise; beta_map is then the
        best iterate found, and stop_reason says which limit was hit.
        Forward solve failures still raise NonlinearSolveError.
    """
    cfg = cfg or NewtonCGConfig()
    buckets = SolveBuckets()
    record = InversionRecord()
    beta = np.asarray(beta_init, dtype=float).copy()
    x_ws = None
    if callable(prior_factory):
        if gamma is None:
            raise ConfigurationError("gamma required with a prior factory")
        make_prior = prior_factory
    else:
        make_prior = lambda _g: prior_factory
        gamma = 0.0 if gamma is None else gamma

    if cfg.continuation and callable(prior_factory):
        g_stage = gamma * cfg.continuation_factor
        gammas = []
        while g_stage > gamma * (1.0 + 1e-12):
            gammas.append(g_stage)
            g_stage /= cfg.continuation_step
        gammas.append(gamma)
    else:
        gammas = [gamma]

    ctx = None
    for g_val in gammas:
        prior = make_prior(g_val)
        last = g_val == gammas[-1]
        rtol = cfg.grad_rtol if last else cfg.continuation_rtol
        stage_rec = InversionRecord()
        beta, ctx, x_ws = _newton_loop(assembler, misfit, prior, beta, cfg,
                                       buckets, stage_rec, newton_cfg, x_ws,
                                       rtol)
        record.iterations.extend(stage_rec.iterations)
        record.stages.append({"gamma": g_val, "newton_iters": stage_rec.newton_iters,
                              "grad_norm0": stage_rec.grad_norm0,
                              "grad_norm": stage_rec.grad_norm})
        if last:
            record.converged = stage_rec.converged
            record.stop_reason = stage_rec.stop_reason
            record.grad_norm0 = stage_rec.grad_norm0
            record.grad_norm = stage_rec.grad_norm
    record.buckets = buckets.as_dict()
    return beta, ctx, record


def menger_corner(log_mis, log_reg):
    """
    Corner index of an L-curve by discrete Menger curvature on log-log
    points ordered by increasing regularization weight.

    Points on the convex elbow turn counterclockwise; the corner is the
    interior point of maximum positive curvature (falls back to maximum
    absolute curvature when no positive turn exists).
    """
    P = np.column_stack([log_mis, log_reg])
    n = P.shape[0]
    if n < 3:
        raise ConfigurationError("need at least 3 points for a corner")
    kappa = np.full(n, -np.inf)
    for j in range(1, n - 1):
        a, b, c = P[j - 1], P[j], P[j + 1]
        ab, bc, ca = b - a, c - b, a - c
        cross = ab[0] * bc[1] - ab[1] * bc[0]
        denom = (np.linalg.norm(ab) * np.linalg.norm(bc) * np.linalg.norm(ca))
        kappa[j] = 0.0 if denom == 0.0 else 2.0 * cross / denom
    if np.all(kappa[1:-1] <= 0.0):
        return int(1 + np.argmax(np.abs(kappa[1:-1])))
    return int(np.argmax(kappa))


@dataclass
class LCurvePoint:
    gamma: float
    misfit: float = np.nan
    reg: float = np.nan
    total: float = np.nan
    newton_iters: int = 0
    cg_iters: int = 0
    solves: int = 0
    converged: bool = False
    error: str = ""


def lcurve_scan(assembler, misfit, prior_factory, beta_init, gammas,
                cfg=None, newton_cfg=None, threads=1):
    """
    Run inversions across a ladder of regularization weights.

    Sequential scans walk from the largest gamma down, warm-starting each
    point from the previous solution; threaded scans run points
    independently.  Stalled inversions (weakly regularized points cannot
    always reach the full gradient tolerance) still contribute their best
    iterate, flagged converged=False; hard failures are recorded per
    point and do not abort the scan.

    Returns (points, corner_index) with points in the order given.
    """
    gammas = np.asarray(gammas, dtype=float)
    points = [LCurvePoint(gamma=g) for g in gammas]

    def run_one(i, b0):
        g = gammas[i]
        try:
            beta_map, ctx, rec = invert(assembler, misfit, prior_factory, b0,
                                        cfg=cfg, newton_cfg=newton_cfg, gamma=g)
            _, jm, jr = ctx.cost()
            points[i] = LCurvePoint(gamma=g, misfit=jm, reg=jr,
                                    total=jm + jr, newton_iters=rec.newton_iters,
                                    cg_iters=rec.cg_iters,
                                    solves=rec.buckets["total"])
            return beta_map
        except (NonlinearSolveError, ConfigurationError) as exc:
            points[i] = LCurvePoint(gamma=g, error=str(exc))
            return None

    order = np.argsort(gammas)[::-1]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futs = {pool.submit(run_one, int(i), np.asarray(beta_init, dtype=float).copy())
                    : int(i) for i in order}
            for f in futs:
                f.result()
    else:
        b0 = np.asarray(beta_init, dtype=float).copy()
        for i in order:
            res = run_one(int(i), b0.copy())
            if res is not None:
                b0 = res
    ok = [i for i, pt in enumerate(points) if pt.error == ""
          and np.isfinite(pt.misfit) and pt.misfit > 0.0 and pt.reg > 0.0]
    if len(ok) >= 3:
        sub = sorted(ok, key=lambda i: points[i].gamma)
        lm = np.log10([points[i].misfit for i in sub])
        lr = np.log10([points[i].reg for i in sub])
        corner = sub[menger_corner(lm, lr)]
    else:
        corner = -1
    return points, corner
