"""
Nonlinear Stokes solver with Glen's-law rheology and exponential Robin
basal sliding.

The strong problem on the slab interior is

    -div(2 eta(u) strain(u) - p I) = rho g,   div u = 0,

with effective viscosity eta = 1/2 A^(-1/n) (strain_II + eps_reg)^((1-n)/(2n)),
strain_II = 1/2 tr(strain^2).  Boundary conditions: traction-free surface,
no normal flow plus tangential Robin traction exp(beta) u_t on the bed,
and configurable lateral conditions (no-slip, traction-free, or hydrostatic
ocean pressure below a sea level).

The discrete unknown is (u, p_dyn) with p_dyn = p - p_cryo, where
p_cryo(x, z) = rho g (s(x) - z) is removed analytically during assembly.
This makes the hydrostatic rest state of a flat slab exactly representable
(the discontinuous pressure space cannot interpolate a linear function),
so equilibrium holds to roundoff rather than to discretization error.
Dumped pressures are total.

No normal flow on the bed is enforced strongly: velocity dofs at basal
nodes are rotated to a (tangent, normal) frame and the normal component is
constrained.  The reduced residual and Jacobian returned by the assembler
live on the free dofs; the saddle Jacobian is symmetric, which the adjoint
machinery in :mod:`iceinv.adjoint` relies on.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, bmat, identity
from scipy.sparse.linalg import splu, gmres, LinearOperator

from .mesh import _lagrange_tables, QuadratureRule, ConfigurationError


def rho_g_mpa_per_km(rho, g):
    """Convert a density (kg/m^3) and gravity (m/s^2) to MPa per km of depth."""
    return rho * g * 1e-3 * 1e-6 * 1e6  # Pa/m * (MPa/Pa) * (m/km)


@dataclass(frozen=True)
class GlenRheology:
    """Glen's flow law parameters: n >= 1, A > 0 (MPa^-n a^-1), eps_reg > 0 (a^-2)."""
    n_glen: float = 3.0
    A_glen: float = 0.1
    eps_reg: float = 1e-10

    def __post_init__(self):
        if self.n_glen < 1.0 or self.A_glen <= 0.0 or self.eps_reg <= 0.0:
            raise ConfigurationError("rheology invariants violated")

    @property
    def exponent(self):
        """Viscosity exponent m = (1-n)/(2n); eta = 1/2 A^(-1/n) phi^m."""
        return (1.0 - self.n_glen) / (2.0 * self.n_glen)

    @property
    def half_A_pow(self):
        return 0.5 * self.A_glen ** (-1.0 / self.n_glen)


@dataclass(frozen=True)
class PhysicsParams:
    """Ice physics: rheology plus density (kg/m^3) and gravity (m/s^2)."""
    rheology: GlenRheology = field(default_factory=GlenRheology)
    rho: float = 910.0
    g: float = 9.81

    def __post_init__(self):
        if self.rho <= 0.0 or self.g <= 0.0:
            raise ConfigurationError("rho, g must be positive")

    @property
    def rho_g(self):
        """Body-force magnitude rho*g in MPa/km."""
        return rho_g_mpa_per_km(self.rho, self.g)


@dataclass
class StokesState:
    """Velocity (km/a, interleaved) and dynamic pressure (MPa) coefficients."""
    u: np.ndarray
    p: np.ndarray

    def total_pressure(self, assembler):
        """Total pressure p_dyn + p_cryo at the pressure dof coordinates."""
        coords = assembler.mesh.pressure_dof_coords()
        pc = assembler.physics.rho_g * (assembler.mesh.spec.surface(coords[:, 0]) - coords[:, 1])
        return self.p + pc


@dataclass
class NewtonConfig:
    """Forward Newton solve controls."""
    rel_tol: float = 1e-10
    abs_tol: float = 1e-11
    max_iters: int = 50
    linear_solver: str = "direct"   # 'direct' | 'krylov'
    krylov_rtol_max: float = 0.1
    krylov_restart: int = 200
    ls_shrink: float = 0.5
    ls_c: float = 1e-4
    ls_max: int = 25

    def __post_init__(self):
        if self.rel_tol <= 0.0 or self.abs_tol <= 0.0:
            raise ConfigurationError("tolerances must be positive")
        if self.linear_solver not in ("direct", "krylov"):
            raise ConfigurationError(f"unknown linear solver {self.linear_solver!r}")


class NonlinearSolveError(RuntimeError):
    """Forward Newton failure; carries the partial convergence record."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


@dataclass
class ForwardRecord:
    """Per-iteration history of one nonlinear forward solve."""
    residual_norms: list = field(default_factory=list)
    step_lengths: list = field(default_factory=list)
    linear_iters: list = field(default_factory=list)
    converged: bool = False
    newton_iters: int = 0
    linear_solves: int = 0


def effective_viscosity(strain_rate, rheology):
    """
    Glen's-law effective viscosity of a strain-rate tensor.

    Parameters
    ----------
    strain_rate : (..., 2, 2) array
        Symmetric strain-rate tensor(s) in 1/a.
    rheology : GlenRheology

    Returns
    -------
    array
        eta = 1/2 A^(-1/n) (strain_II + eps_reg)^((1-n)/(2n)) in MPa a,
        with strain_II = 1/2 tr(strain^2).
    """
    e = np.asarray(strain_rate, dtype=float)
    phi = 0.5 * np.einsum("...ij,...ij->...", e, e) + rheology.eps_reg
    return rheology.half_A_pow * phi ** rheology.exponent


class StokesAssembler:
    """
    Residual/Jacobian assembly and dof bookkeeping for one mesh + physics.

    Optional manufactured-solution hooks replace or supplement the natural
    data: ``body_force(x, z) -> (fx, fz)`` overrides gravity,
    ``top_traction(x, z) -> (tx, tz)`` applies a surface traction, and
    ``basal_source(x) -> g`` adds a tangential source g (w.t) on the bed.
    All assembled vectors are duals; reduced vectors stack free velocity
    dofs (rotated frame) before pressure dofs.
    """

    def __init__(self, mesh, physics, body_force=None, top_traction=None,
                 basal_source=None):
        self.mesh = mesh
        self.physics = physics
        self.body_force = body_force
        self.top_traction = top_traction
        self.basal_source = basal_source
        self._build_dof_maps()
        self._build_constant_operators()
        self._build_constant_loads()

    # -- construction ---------------------------------------------------

    def _build_dof_maps(self):
        mesh = self.mesh
        conn = mesh.conn
        nc, na = conn.shape
        edof = np.empty((nc, 2 * na), dtype=np.int64)
        edof[:, 0::2] = 2 * conn
        edof[:, 1::2] = 2 * conn + 1
        self.edof = edof
        self._Arows = np.repeat(edof, 2 * na, axis=1).ravel()
        self._Acols = np.tile(edof, (1, 2 * na)).ravel()

        npb = mesh.pressure_per_cell
        pdof = (np.arange(nc)[:, None] * npb + np.arange(npb)[None, :])
        self.pdof = pdof

        # basal rotation frame from the bed slope at basal lattice nodes
        xb = mesh.coords[mesh.boundary_nodes["bottom"], 0]
        h = 1e-6 * max(mesh.spec.length, 1.0)
        slope = (mesh.spec.bed(xb + h) - mesh.spec.bed(xb - h)) / (2.0 * h)
        t = np.column_stack([np.ones_like(slope), slope])
        t /= np.linalg.norm(t, axis=1, keepdims=True)
        nvec = np.column_stack([t[:, 1], -t[:, 0]])  # outward (down)
        nv = mesh.n_velocity_dofs
        R = identity(nv, format="lil")
        bn = mesh.boundary_nodes["bottom"]
        for i, nd in enumerate(bn):
            R[2 * nd, 2 * nd] = t[i, 0]
            R[2 * nd, 2 * nd + 1] = t[i, 1]
            R[2 * nd + 1, 2 * nd] = nvec[i, 0]
            R[2 * nd + 1, 2 * nd + 1] = nvec[i, 1]
        self.R = R.tocsr()
        self.basal_tangents = t

        constrained = set(2 * bn + 1)  # normal components on the bed
        for side, bc in (("left", mesh.spec.left_bc), ("right", mesh.spec.right_bc)):
            if bc == "no-slip":
                for nd in mesh.boundary_nodes[side]:
                    constrained.add(2 * nd)
                    constrained.add(2 * nd + 1)
        mask = np.ones(nv, dtype=bool)
        mask[np.fromiter(constrained, dtype=np.int64)] = False
        self.free_velocity = np.flatnonzero(mask)
        self.n_free_velocity = self.free_velocity.size
        self.n_reduced = self.n_free_velocity + mesh.n_pressure_dofs

    def _build_constant_operators(self):
        mesh = self.mesh
        dN, P, w = mesh.dN_phys, mesh.ref_P, mesh.detJxW
        nc = mesh.n_cells
        Del = np.einsum("cq,qb,cqai->cbai", w, P, dN)
        rows = np.repeat(self.pdof, self.edof.shape[1], axis=1).ravel()
        cols = np.tile(self.edof, (1, mesh.pressure_per_cell)).ravel()
        D = coo_matrix((Del.reshape(nc, -1).ravel(), (rows, cols)),
                       shape=(mesh.n_pressure_dofs, mesh.n_velocity_dofs)).tocsr()
        self.D = D  # divergence operator: (D u)_b = int P_b div(u)
        self.D_rot = (D @ self.R.T).tocsr()[:, self.free_velocity].tocsr()

        ed = mesh.edge_data("bottom")
        self._basal_edges = ed
        self._basal_interp = mesh.basal_interp_matrix(ed["x"].ravel())

    def _eval_hook2(self, hook, x, z):
        fx, fz = hook(x, z)
        out = np.empty(x.shape + (2,))
        out[..., 0], out[..., 1] = fx, fz
        return out

    def _build_constant_loads(self):
        """Constant dual vector subtracted from the velocity residual."""
        mesh, phys = self.mesh, self.physics
        N, w, xq = mesh.ref_N, mesh.detJxW, mesh.qpoints
        load = np.zeros(mesh.n_velocity_dofs)

        if self.body_force is None:
            fq = np.zeros(xq.shape)
            fq[..., 1] = -phys.rho_g
            # cryostatic pressure counterterm: + int p_cryo div(w)
            pc = phys.rho_g * (mesh.spec.surface(xq[..., 0]) - xq[..., 1])
            el = np.einsum("cq,cqai->cai", w * pc, mesh.dN_phys)
            np.add.at(load, self.edof, el.reshape(mesh.n_cells, -1))
            self._has_cryo = True
        else:
            fq = self._eval_hook2(self.body_force, xq[..., 0], xq[..., 1])
            self._has_cryo = False
        el = np.einsum("cq,qa,cqi->cai", w, N, fq)
        eli = np.empty((mesh.n_cells, self.edof.shape[1]))
        eli[:, 0::2], eli[:, 1::2] = el[..., 0], el[..., 1]
        np.add.at(load, self.edof, eli)

        if self.top_traction is not None:
            ed = mesh.edge_data("top")
            tr = self._eval_hook2(self.top_traction, ed["x"], ed["z"])
            self._scatter_edge_vector(load, ed, tr)
        for side, bc in (("left", mesh.spec.left_bc), ("right", mesh.spec.right_bc)):
            if bc == "hydrostatic-ocean":
                rho_w_g = rho_g_mpa_per_km(mesh.spec.water_density, phys.g)
                ed = mesh.edge_data(side)
                p_oc = rho_w_g * np.maximum(mesh.spec.sea_level - ed["z"], 0.0)
                self._scatter_edge_vector(load, ed, -p_oc[..., None] * ed["n"])

        if self.basal_source is not None:
            ed = self.mesh.edge_data("bottom")
            gq = np.asarray(self.basal_source(ed["x"]), dtype=float)
            tr = gq[..., None] * ed["t"]
            self._scatter_edge_vector(load, ed, tr)

        self.load = load

    def _scatter_edge_vector(self, out, ed, values):
        """Scatter int_e values . w over edge quadrature into a dual vector."""
        el = np.einsum("fq,qa,fqi->fai", ed["w"], ed["N"], values)
        nf, k1 = ed["nodes"].shape
        idx = np.empty((nf, 2 * k1), dtype=np.int64)
        idx[:, 0::2] = 2 * ed["nodes"]
        idx[:, 1::2] = 2 * ed["nodes"] + 1
        eli = np.empty((nf, 2 * k1))
        eli[:, 0::2], eli[:, 1::2] = el[..., 0], el[..., 1]
        np.add.at(out, idx, eli)

    # -- kinematics -----------------------------------------------------

    def kinematics(self, u):
        """Strain tensors and viscosity tables at the cell quadrature points."""
        mesh = self.mesh
        Uc = np.empty(mesh.conn.shape + (2,))
        Uc[..., 0] = u[0::2][mesh.conn]
        Uc[..., 1] = u[1::2][mesh.conn]
        G = np.einsum("cai,cqaj->cqij", Uc, mesh.dN_phys)
        eps = 0.5 * (G + np.swapaxes(G, -1, -2))
        rhe = self.physics.rheology
        phi = 0.5 * np.einsum("cqij,cqij->cq", eps, eps) + rhe.eps_reg
        eta = rhe.half_A_pow * phi ** rhe.exponent
        return {"eps": eps, "divu": G[..., 0, 0] + G[..., 1, 1],
                "phi": phi, "eta": eta}

    # -- Robin term -----------------------------------------------------

    def robin_matrix(self, beta):
        """Sparse basal Robin operator int_bed exp(beta) (u.t)(w.t)."""
        ed = self._basal_edges
        nf, nq1 = ed["w"].shape
        k1 = self.mesh.k + 1
        ebeta = np.exp(self._basal_interp @ beta).reshape(nf, nq1)
        blk = np.einsum("fq,fqi,fqj,qa,qb->faibj", ed["w"] * ebeta,
                        ed["t"], ed["t"], ed["N"], ed["N"])
        idx = np.empty((nf, 2 * k1), dtype=np.int64)
        idx[:, 0::2] = 2 * ed["nodes"]
        idx[:, 1::2] = 2 * ed["nodes"] + 1
        rows = np.repeat(idx, 2 * k1, axis=1).ravel()
        cols = np.tile(idx, (1, 2 * k1)).ravel()
        # blk index order (f,a,i,b,j) flattens to local rows a*2+i, cols b*2+j
        vals = blk.reshape(nf, 2 * k1, 2 * k1)
        nv = self.mesh.n_velocity_dofs
        return coo_matrix((vals.ravel(), (rows, cols)), shape=(nv, nv)).tocsr()

    # -- residual and Jacobian ------------------------------------------

    def residual(self, x, beta, robin=None):
        """
        Reduced residual dual vector at a reduced state x.

        Parameters
        ----------
        x : (n_reduced,) array
        beta : (n_basal,) array
        robin : sparse matrix, optional
            Cached ``robin_matrix(beta)``.

        Returns
        -------
        (n_reduced,) array
        """
        mesh = self.mesh
        u, p = self.expand(x)
        if robin is None:
            robin = self.robin_matrix(beta)
        kin = self.kinematics(u)
        w2eta = mesh.detJxW * 2.0 * kin["eta"]
        el = np.einsum("cq,cqij,cqaj->cai", w2eta, kin["eps"], mesh.dN_phys)
        r_u = np.zeros(mesh.n_velocity_dofs)
        eli = np.empty((mesh.n_cells, self.edof.shape[1]))
        eli[:, 0::2], eli[:, 1::2] = el[..., 0], el[..., 1]
        np.add.at(r_u, self.edof, eli)
        r_u += robin @ u
        r_u -= self.D.T @ p
        r_u -= self.load
        r_p = -(self.D @ u)
        return self.reduce_dual(r_u, r_p)

    def jacobian(self, x, beta, robin=None):
        """Reduced symmetric saddle Jacobian (csc) at a reduced state x."""
        mesh = self.mesh
        u, _ = self.expand(x)
        if robin is None:
            robin = self.robin_matrix(beta)
        kin = self.kinematics(u)
        A = self._viscous_tangent(kin) + robin
        A_red = (self.R @ A @ self.R.T).tocsr()[self.free_velocity][:, self.free_velocity]
        K = bmat([[A_red, -self.D_rot.T], [-self.D_rot, None]], format="csc")
        return K

    def _viscous_tangent(self, kin):
        mesh = self.mesh
        dN, w = mesh.dN_phys, mesh.detJxW
        eta, phi, eps = kin["eta"], kin["phi"], kin["eps"]
        rhe = self.physics.rheology
        weta = w * eta
        waniso = w * 2.0 * eta * rhe.exponent / phi
        E = np.einsum("cqij,cqaj->cqai", eps, dN)
        nc, na = mesh.conn.shape
        M = np.einsum("cq,cqaj,cqbi->caibj", weta, dN, dN)
        M += np.einsum("cq,cqai,cqbj->caibj", waniso, E, E)
        diag = np.einsum("cq,cqaj,cqbj->cab", weta, dN, dN)
        M[:, :, 0, :, 0] += diag
        M[:, :, 1, :, 1] += diag
        nv = mesh.n_velocity_dofs
        return coo_matrix((M.reshape(nc, -1).ravel(), (self._Arows, self._Acols)),
                          shape=(nv, nv)).tocsr()

    def second_variation_source(self, x, a_field, b_field):
        """
        Dual vector of the viscous second variation contracted with two
        velocity fields: w -> int D^2[2 eta(u) strain(u)](a, b) : strain(w).

        Symmetric in (a_field, b_field); used for the Hessian term that
        couples the incremental forward solution with the adjoint.
        """
        mesh = self.mesh
        u, _ = self.expand(x)
        kin = self.kinematics(u)
        eps, phi, eta = kin["eps"], kin["phi"], kin["eta"]
        m = self.physics.rheology.exponent
        ea = self._strain_of(a_field)
        eb = self._strain_of(b_field)
        d1 = 2.0 * eta * m / phi
        d2 = 2.0 * eta * m * (m - 1.0) / phi ** 2
        sa = np.einsum("cqij,cqij->cq", eps, ea)
        sb = np.einsum("cqij,cqij->cq", eps, eb)
        sab = np.einsum("cqij,cqij->cq", ea, eb)
        tau = (d1 * sb)[..., None, None] * ea \
            + (d1 * sa)[..., None, None] * eb \
            + (d1 * sab + d2 * sa * sb)[..., None, None] * eps
        el = np.einsum("cq,cqij,cqaj->cai", mesh.detJxW, tau, mesh.dN_phys)
        out = np.zeros(mesh.n_velocity_dofs)
        eli = np.empty((mesh.n_cells, self.edof.shape[1]))
        eli[:, 0::2], eli[:, 1::2] = el[..., 0], el[..., 1]
        np.add.at(out, self.edof, eli)
        return out

    def _strain_of(self, u):
        mesh = self.mesh
        Uc = np.empty(mesh.conn.shape + (2,))
        Uc[..., 0] = u[0::2][mesh.conn]
        Uc[..., 1] = u[1::2][mesh.conn]
        G = np.einsum("cai,cqaj->cqij", Uc, mesh.dN_phys)
        return 0.5 * (G + np.swapaxes(G, -1, -2))

    # -- dof transforms -------------------------------------------------

    def expand(self, x):
        """Reduced state -> Cartesian (u, p)."""
        u_rot = np.zeros(self.mesh.n_velocity_dofs)
        u_rot[self.free_velocity] = x[:self.n_free_velocity]
        return self.R.T @ u_rot, x[self.n_free_velocity:].copy()

    def reduce_state(self, u, p):
        """Cartesian (u, p) -> reduced state (drops constrained components)."""
        return np.concatenate([(self.R @ u)[self.free_velocity], p])

    def reduce_dual(self, g_u, g_p=None):
        """Cartesian dual (g_u, g_p) -> reduced dual vector."""
        if g_p is None:
            g_p = np.zeros(self.mesh.n_pressure_dofs)
        return np.concatenate([(self.R @ g_u)[self.free_velocity], g_p])

    def expand_dual(self, r):
        """Reduced dual -> Cartesian dual (zeros on constrained rows)."""
        g_rot = np.zeros(self.mesh.n_velocity_dofs)
        g_rot[self.free_velocity] = r[:self.n_free_velocity]
        return self.R.T @ g_rot, r[self.n_free_velocity:].copy()


class _DirectSolver:
    def __init__(self, K):
        self.lu = splu(K)
        self.iters = 1

    def solve(self, b):
        return self.lu.solve(b)


class _KrylovSolver:
    """GMRES with an upper-triangular block preconditioner.

    The (1,1) block is solved by a direct factorization and the Schur
    complement is approximated by the inverse viscosity-weighted lumped
    pressure mass matrix.
    """

    def __init__(self, assembler, K, kin, rtol, restart):
        nf = assembler.n_free_velocity
        self.K, self.nf, self.rtol = K, nf, rtol
        self.restart = restart
        Kc = K.tocsr()
        self.A_lu = splu(Kc[:nf, :nf].tocsc())
        self.K_up = Kc[:nf, nf:]
        mesh = assembler.mesh
        sdiag = np.einsum("cq,qb,qb->cb", mesh.detJxW / kin["eta"], mesh.ref_P, mesh.ref_P)
        self.S_inv = 1.0 / sdiag.ravel()
        self.iters = 0

    def _prec(self, r):
        zp = -self.S_inv * r[self.nf:]
        zu = self.A_lu.solve(r[:self.nf] - self.K_up @ zp)
        return np.concatenate([zu, zp])

    def solve(self, b):
        n = self.K.shape[0]
        M = LinearOperator((n, n), matvec=self._prec)
        count = [0]

        def cb(_):
            count[0] += 1
        x, info = gmres(self.K, b, M=M, rtol=self.rtol, atol=0.0,
                        restart=self.restart, maxiter=50, callback=cb,
                        callback_type="pr_norm")
        if info != 0:
            raise NonlinearSolveError(f"GMRES failed (info={info})", None)
        self.iters = max(count[0], 1)
        return x


def solve_forward(assembler, beta, cfg=None, x0=None, counter=None):
    """
    Newton solve of the nonlinear Stokes system at a basal parameter beta.

    Parameters
    ----------
    assembler : StokesAssembler
    beta : (n_basal,) array
    cfg : NewtonConfig, optional
    x0 : (n_reduced,) array, optional
        Warm-start state (zero velocity / zero dynamic pressure default).
    counter : SolveCounter, optional
        Receives one tick per linearized Stokes solve.

    Returns
    -------
    state : StokesState
    record : ForwardRecord
    x : (n_reduced,) array
        Converged reduced state (for warm starts and linearization).

    Raises
    ------
    NonlinearSolveError
        On step-length collapse or iteration exhaustion.
    """
    cfg = cfg or NewtonConfig()
    beta = np.asarray(beta, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ConfigurationError("beta contains non-finite values")
    robin = assembler.robin_matrix(beta)
    x = np.zeros(assembler.n_reduced) if x0 is None else x0.copy()
    record = ForwardRecord()
    r = assembler.residual(x, beta, robin=robin)
    rn = np.linalg.norm(r)
    record.residual_norms.append(rn)
    tol = max(cfg.rel_tol * rn, cfg.abs_tol)
    for _ in range(cfg.max_iters):
        if rn <= tol:
            record.converged = True
            break
        K = assembler.jacobian(x, beta, robin=robin)
        if cfg.linear_solver == "direct":
            solver = _DirectSolver(K)
        else:
            forcing = max(min(cfg.krylov_rtol_max,
                              0.5 * np.sqrt(rn / record.residual_norms[0])), 1e-12)
            solver = _KrylovSolver(assembler, K, assembler.kinematics(assembler.expand(x)[0]),
                                   forcing, cfg.krylov_restart)
        d = solver.solve(-r)
        record.linear_solves += 1
        record.linear_iters.append(solver.iters)
        if counter is not None:
            counter.tick()
        alpha = 1.0
        for _ls in range(cfg.ls_max):
            r_new = assembler.residual(x + alpha * d, beta, robin=robin)
            rn_new = np.linalg.norm(r_new)
            if np.isfinite(rn_new) and rn_new <= (1.0 - cfg.ls_c * alpha) * rn:
                break
            alpha *= cfg.ls_shrink
        else:
            raise NonlinearSolveError("forward line search failed", record)
        x = x + alpha * d
        r, rn = r_new, rn_new
        record.residual_norms.append(rn)
        record.step_lengths.append(alpha)
        record.newton_iters += 1
    else:
        raise NonlinearSolveError("forward Newton did not converge", record)
    u, p = assembler.expand(x)
    return StokesState(u=u, p=p), record, x


def assemble_residual(state, beta, physics, mesh):
    """Reduced residual at a Cartesian state (spec-level convenience)."""
    asm = StokesAssembler(mesh, physics)
    return asm.residual(asm.reduce_state(state.u, state.p), np.asarray(beta, dtype=float))


def assemble_newton_system(state, beta, physics, mesh):
    """Reduced saddle Jacobian at a Cartesian state (spec-level convenience)."""
    asm = StokesAssembler(mesh, physics)
    return asm.jacobian(asm.reduce_state(state.u, state.p), np.asarray(beta, dtype=float))


def surface_velocity(mesh, state):
    """Interleaved surface-lattice velocity trace of a state."""
    from .mesh import trace_to_boundary
    return trace_to_boundary(mesh, state.u, "top")


def cell_divergence_integrals(assembler, u):
    """Per-cell integrals of div(u) at the converged state."""
    kin = assembler.kinematics(u)
    return assembler.mesh.cell_integrals(kin["divu"])


def velocity_l2_error(mesh, u, fx, fz, n1d=None):
    """
    L2-norm of the difference between a discrete velocity and an exact one.

    Uses an independent (finer) Gauss rule so the error measure is not the
    assembly rule.
    """
    k = mesh.k
    rule = QuadratureRule(n1d if n1d is not None else k + 3)
    nodes = np.linspace(0.0, 1.0, k + 1)
    vx, _ = _lagrange_tables(nodes, rule.points[:, 0])
    vz, _ = _lagrange_tables(nodes, rule.points[:, 1])
    na = (k + 1) ** 2
    N = np.empty((rule.points.shape[0], na))
    for az in range(k + 1):
        for ax in range(k + 1):
            N[:, az * (k + 1) + ax] = vx[:, ax] * vz[:, az]
    Xc = mesh.coords[mesh.conn]
    dN_ref = np.empty((rule.points.shape[0], na, 2))
    _, dx = _lagrange_tables(nodes, rule.points[:, 0])
    _, dz = _lagrange_tables(nodes, rule.points[:, 1])
    for az in range(k + 1):
        for ax in range(k + 1):
            a = az * (k + 1) + ax
            dN_ref[:, a, 0] = dx[:, ax] * vz[:, az]
            dN_ref[:, a, 1] = vx[:, ax] * dz[:, az]
    J = np.einsum("caj,qai->cqij", Xc, dN_ref)
    detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    xq = np.einsum("qa,caj->cqj", N, Xc)
    Uc = np.empty(mesh.conn.shape + (2,))
    Uc[..., 0] = u[0::2][mesh.conn]
    Uc[..., 1] = u[1::2][mesh.conn]
    uh = np.einsum("qa,cai->cqi", N, Uc)
    ex = np.stack([fx(xq[..., 0], xq[..., 1]), fz(xq[..., 0], xq[..., 1])], axis=-1)
    err2 = np.einsum("cqi,cqi->cq", uh - ex, uh - ex)
    return np.sqrt(np.einsum("cq,q,cq->", detJ, rule.weights, err2))
