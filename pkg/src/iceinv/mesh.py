"""
Structured quadrilateral mesh and finite-element primitives for a 2D
vertical flowline slab.

The domain is the region between a bed curve z = b(x) and a surface curve
z = s(x) for x in [0, L].  It is meshed by nx columns and nz rows of
quadrilateral cells; within each column the nodes are graded linearly from
the bed to the surface.  Velocity components live in continuous
tensor-product Lagrange polynomials of order k (isoparametric geometry),
pressure in discontinuous tensor-product polynomials of order k-2, and the
basal sliding parameter in continuous piecewise linears on the 1D trace
mesh of the bottom boundary.

Units are MPa-km-a throughout the package: coordinates in km, velocities
in km/a, stresses and pressures in MPa.
"""

import numpy as np
from scipy.sparse import coo_matrix


BOUNDARY_TAGS = ("bottom", "right", "top", "left")
BC_CHOICES = ("no-slip", "traction-free", "hydrostatic-ocean")


class GeometryError(ValueError):
    """Raised for degenerate domain geometry (surface not above bed)."""


class ConfigurationError(ValueError):
    """Raised for invalid discretization or boundary-condition settings."""


def _as_function(f):
    """Wrap a constant as a vectorized function of x."""
    if callable(f):
        return lambda x: np.asarray(f(np.asarray(x, dtype=float)), dtype=float) + 0.0 * np.asarray(x, dtype=float)
    c = float(f)
    return lambda x: np.full_like(np.asarray(x, dtype=float), c)


class DomainSpec:
    """
    Geometry and boundary-condition roles of the flowline slab.

    Parameters
    ----------
    length : float
        Horizontal extent L in km.
    bed : callable or float
        Bed elevation b(x) in km.
    surface : callable or float
        Surface elevation s(x) in km; must satisfy s(x) > b(x) on [0, L].
    left_bc, right_bc : str
        Lateral boundary roles, one of 'no-slip', 'traction-free',
        'hydrostatic-ocean'.
    sea_level : float
        Elevation of the ocean surface (km), used by 'hydrostatic-ocean'.
    water_density : float
        Ocean water density in kg/m^3.
    outflow : str
        Boundary tag carrying the mass-flux quantity of interest.
    """

    def __init__(self, length, bed=0.0, surface=1.0, left_bc="no-slip",
                 right_bc="hydrostatic-ocean", sea_level=0.0,
                 water_density=1028.0, outflow="right"):
        if length <= 0.0:
            raise GeometryError("domain length must be positive")
        for name, bc in (("left_bc", left_bc), ("right_bc", right_bc)):
            if bc not in BC_CHOICES:
                raise ConfigurationError(f"{name}={bc!r} not in {BC_CHOICES}")
        if outflow not in ("left", "right"):
            raise ConfigurationError(f"outflow={outflow!r} must be a lateral tag")
        self.length = float(length)
        self.bed = _as_function(bed)
        self.surface = _as_function(surface)
        self.left_bc = left_bc
        self.right_bc = right_bc
        self.sea_level = float(sea_level)
        self.water_density = float(water_density)
        self.outflow = outflow

    def validate(self, nsample=257):
        """Check s(x) > b(x) on a sample grid; raise GeometryError if not."""
        x = np.linspace(0.0, self.length, nsample)
        h = self.surface(x) - self.bed(x)
        if not np.all(h > 0.0):
            raise GeometryError("surface must lie strictly above the bed")


def _lagrange_tables(nodes, pts):
    """
    Values and derivatives of the 1D Lagrange basis on given nodes.

    Parameters
    ----------
    nodes : (n,) array
        Interpolation nodes.
    pts : (m,) array
        Evaluation points.

    Returns
    -------
    val, der : (m, n) arrays
        Basis values and first derivatives at the evaluation points.
    """
    nodes = np.asarray(nodes, dtype=float)
    pts = np.asarray(pts, dtype=float)
    n = nodes.size
    val = np.empty((pts.size, n))
    der = np.empty((pts.size, n))
    for i in range(n):
        others = np.delete(nodes, i)
        denom = np.prod(nodes[i] - others)
        coeffs = np.atleast_1d(np.poly(others)) / denom
        val[:, i] = np.polyval(coeffs, pts)
        der[:, i] = np.polyval(np.polyder(coeffs), pts) if n > 1 else 0.0
    return val, der


def gauss_rule(n, a=0.0, b=1.0):
    """Gauss-Legendre points/weights mapped to [a, b]; exact to degree 2n-1."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * (x + 1.0) + a, 0.5 * (b - a) * w


class QuadratureRule:
    """
    Tensor-product Gauss quadrature on the reference cell [0,1]^2 and its
    edges.

    With n1d points per direction the cell rule integrates bivariate
    polynomials of degree 2*n1d-1 per variable exactly, so n1d = k+1
    meets the degree >= 2k requirement on affine cells.
    """

    def __init__(self, n1d):
        self.n1d = int(n1d)
        g, w = gauss_rule(self.n1d)
        self.edge_points = g
        self.edge_weights = w
        px, pz = np.meshgrid(g, g, indexing="xy")
        wx, wz = np.meshgrid(w, w, indexing="xy")
        self.points = np.column_stack([px.ravel(), pz.ravel()])
        self.weights = (wx * wz).ravel()


def _edge_local_nodes(k, edge):
    """Local scalar-node indices along one edge of the (k+1)^2 tensor cell."""
    ax = np.arange(k + 1)
    if edge == "bottom":
        return ax
    if edge == "top":
        return k * (k + 1) + ax
    if edge == "left":
        return ax * (k + 1)
    if edge == "right":
        return ax * (k + 1) + k
    raise ValueError(edge)


class FlowlineMesh:
    """
    Structured flowline mesh with cached basis and geometry tables.

    Attributes
    ----------
    nx, nz, k : int
        Cell counts and polynomial order.
    coords : (n_nodes, 2) array
        Scalar lattice node coordinates (km).
    conn : (n_cells, (k+1)^2) array
        Cell -> scalar node connectivity, tensor ordering
        a = az*(k+1) + ax.
    n_velocity_dofs, n_pressure_dofs, n_basal_dofs : int
        Space dimensions; velocity dofs are interleaved (x,z) per node.
    basal_x, basal_z : (nx+1,) arrays
        Coordinates of the basal P1 trace nodes.
    """

    def __init__(self, spec, nx, nz, k=2, quad_n1d=None):
        if nx < 1 or nz < 1:
            raise ConfigurationError("nx, nz must be >= 1")
        if k < 2 or k > 3:
            raise ConfigurationError("element order k must be 2 or 3")
        spec.validate()
        self.spec = spec
        self.nx, self.nz, self.k = int(nx), int(nz), int(k)
        self.quad = QuadratureRule(quad_n1d if quad_n1d is not None else k + 1)

        Nx, Nz = k * nx, k * nz
        self.Nx, self.Nz = Nx, Nz
        xg = np.linspace(0.0, spec.length, Nx + 1)
        bg = spec.bed(xg)
        sg = spec.surface(xg)
        if not np.all(sg > bg):
            raise GeometryError("surface must lie strictly above the bed")
        frac = np.linspace(0.0, 1.0, Nz + 1)
        # node id = l*(Nx+1) + m, rows bottom to top
        X = np.tile(xg, Nz + 1)
        Z = (bg[None, :] + frac[:, None] * (sg - bg)[None, :]).ravel()
        self.coords = np.column_stack([X, Z])
        self.n_nodes = (Nx + 1) * (Nz + 1)

        na = (k + 1) ** 2
        conn = np.empty((nx * nz, na), dtype=np.int64)
        for j in range(nz):
            for i in range(nx):
                c = j * nx + i
                for az in range(k + 1):
                    for ax in range(k + 1):
                        conn[c, az * (k + 1) + ax] = (j * k + az) * (Nx + 1) + i * k + ax
        self.conn = conn
        self.n_cells = nx * nz

        self.n_velocity_dofs = 2 * self.n_nodes
        self.pressure_per_cell = (k - 1) ** 2
        self.n_pressure_dofs = self.n_cells * self.pressure_per_cell
        self.n_basal_dofs = nx + 1

        # boundary lattice node ids, ordered along the boundary
        self.boundary_nodes = {
            "bottom": np.arange(Nx + 1),
            "top": Nz * (Nx + 1) + np.arange(Nx + 1),
            "left": np.arange(Nz + 1) * (Nx + 1),
            "right": np.arange(Nz + 1) * (Nx + 1) + Nx,
        }
        # boundary facets as (cell, edge) pairs
        self.facets = {
            "bottom": [(i, "bottom") for i in range(nx)],
            "top": [((nz - 1) * nx + i, "top") for i in range(nx)],
            "left": [(j * nx, "left") for j in range(nz)],
            "right": [(j * nx + nx - 1, "right") for j in range(nz)],
        }

        # basal P1 trace mesh (cell-corner columns)
        ib = np.arange(nx + 1) * k
        self.basal_x = xg[ib]
        self.basal_z = bg[ib]

        self._build_reference_tables()
        self._build_geometry_tables()
        self._edge_cache = {}

    # ------------------------------------------------------------------
    # reference and physical tables
    # ------------------------------------------------------------------

    def _build_reference_tables(self):
        k = self.k
        nodes = np.linspace(0.0, 1.0, k + 1)
        q = self.quad
        vx, dx = _lagrange_tables(nodes, q.points[:, 0])
        vz, dz = _lagrange_tables(nodes, q.points[:, 1])
        na = (k + 1) ** 2
        nq = q.points.shape[0]
        N = np.empty((nq, na))
        dN = np.empty((nq, na, 2))
        for az in range(k + 1):
            for ax in range(k + 1):
                a = az * (k + 1) + ax
                N[:, a] = vx[:, ax] * vz[:, az]
                dN[:, a, 0] = dx[:, ax] * vz[:, az]
                dN[:, a, 1] = vx[:, ax] * dz[:, az]
        self.ref_N, self.ref_dN = N, dN

        # discontinuous pressure basis: Lagrange on the (k-1)-point Gauss grid
        pn, _ = gauss_rule(k - 1)
        pvx, _ = _lagrange_tables(pn, q.points[:, 0])
        pvz, _ = _lagrange_tables(pn, q.points[:, 1])
        npb = (k - 1) ** 2
        P = np.empty((nq, npb))
        for bz in range(k - 1):
            for bx in range(k - 1):
                P[:, bz * (k - 1) + bx] = pvx[:, bx] * pvz[:, bz]
        self.ref_P = P
        self.pressure_ref_nodes = pn

        v1, d1 = _lagrange_tables(nodes, q.edge_points)
        self.edge_N, self.edge_dN = v1, d1

    def _build_geometry_tables(self):
        """Jacobians, physical basis gradients, and mapped quadrature data."""
        Xc = self.coords[self.conn]                      # (nc, na, 2)
        dN = self.ref_dN                                 # (nq, na, 2)
        J = np.einsum("caj,qai->cqij", Xc, dN)           # dPhi_j/dxi_i, see below
        # J[c,q,i,j] = d x_j / d xi_i
        detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        if np.any(detJ <= 0.0):
            raise GeometryError("non-positive cell Jacobian (mesh tangled)")
        Jinv = np.empty_like(J)                          # Jinv[c,q,j,i] = d xi_i / d x_j
        Jinv[..., 0, 0] = J[..., 1, 1] / detJ
        Jinv[..., 1, 1] = J[..., 0, 0] / detJ
        Jinv[..., 0, 1] = -J[..., 0, 1] / detJ
        Jinv[..., 1, 0] = -J[..., 1, 0] / detJ
        # dN_phys[c,q,a,j] = dN_a/dx_j = dN_a/dxi_i * dxi_i/dx_j
        self.dN_phys = np.einsum("qai,cqji->cqaj", dN, Jinv)
        self.detJxW = detJ * self.quad.weights[None, :]
        self.qpoints = np.einsum("qa,caj->cqj", self.ref_N, Xc)

    def edge_data(self, tag):
        """
        Quadrature data for all facets of a boundary tag.

        Returns a dict with arrays over (facet, edge quadrature point):
        'nodes' (nf, k+1) global scalar node ids along the edge, 'x' and
        'z' coordinates, 'w' measure-weighted quadrature weights, 't' unit
        tangents (along increasing boundary parameter), 'n' outward unit
        normals, and 'N' the 1D basis table (nq1, k+1).
        """
        if tag in self._edge_cache:
            return self._edge_cache[tag]
        if tag not in BOUNDARY_TAGS:
            raise ConfigurationError(f"unknown boundary tag {tag!r}")
        facets = self.facets[tag]
        k = self.k
        nf, nq1 = len(facets), self.quad.n1d
        nodes = np.empty((nf, k + 1), dtype=np.int64)
        for f, (c, edge) in enumerate(facets):
            nodes[f] = self.conn[c, _edge_local_nodes(k, edge)]
        P = self.coords[nodes]                            # (nf, k+1, 2)
        xy = np.einsum("qa,faj->fqj", self.edge_N, P)
        dxy = np.einsum("qa,faj->fqj", self.edge_dN, P)
        speed = np.hypot(dxy[..., 0], dxy[..., 1])
        t = dxy / speed[..., None]
        if tag in ("bottom", "right"):
            n = np.stack([t[..., 1], -t[..., 0]], axis=-1)
        else:
            n = np.stack([-t[..., 1], t[..., 0]], axis=-1)
        w = speed * self.quad.edge_weights[None, :]
        data = {"nodes": nodes, "x": xy[..., 0], "z": xy[..., 1],
                "w": w, "t": t, "n": n, "N": self.edge_N}
        self._edge_cache[tag] = data
        return data

    # ------------------------------------------------------------------
    # interpolation helpers
    # ------------------------------------------------------------------

    def interpolate_scalar(self, fn):
        """Nodal interpolation of fn(x, z) onto the scalar lattice."""
        return np.asarray(fn(self.coords[:, 0], self.coords[:, 1]), dtype=float)

    def interpolate_velocity(self, fx, fz):
        """Nodal interpolation of a vector field, interleaved (x,z) layout."""
        u = np.empty(self.n_velocity_dofs)
        u[0::2] = fx(self.coords[:, 0], self.coords[:, 1])
        u[1::2] = fz(self.coords[:, 0], self.coords[:, 1])
        return u

    def basal_interp_matrix(self, x):
        """
        Sparse matrix evaluating the basal P1 field at abscissae x.

        Rows are evaluation points, columns basal dofs.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        xb = self.basal_x
        idx = np.clip(np.searchsorted(xb, x, side="right") - 1, 0, self.nx - 1)
        h = xb[idx + 1] - xb[idx]
        s = (x - xb[idx]) / h
        rows = np.repeat(np.arange(x.size), 2)
        cols = np.column_stack([idx, idx + 1]).ravel()
        vals = np.column_stack([1.0 - s, s]).ravel()
        return coo_matrix((vals, (rows, cols)), shape=(x.size, self.n_basal_dofs)).tocsr()

    def pressure_dof_coords(self):
        """Physical coordinates of the discontinuous pressure dofs."""
        k = self.k
        pn = self.pressure_ref_nodes
        px, pz = np.meshgrid(pn, pn, indexing="xy")
        pts = np.column_stack([px.ravel(), pz.ravel()])
        val, _ = _lagrange_tables(np.linspace(0.0, 1.0, k + 1), pts[:, 0])
        valz, _ = _lagrange_tables(np.linspace(0.0, 1.0, k + 1), pts[:, 1])
        na = (k + 1) ** 2
        N = np.empty((pts.shape[0], na))
        for az in range(k + 1):
            for ax in range(k + 1):
                N[:, az * (k + 1) + ax] = val[:, ax] * valz[:, az]
        return np.einsum("pa,caj->cpj", N, self.coords[self.conn]).reshape(-1, 2)

    def cell_integrals(self, values_at_q):
        """Per-cell integrals of a quantity sampled at quadrature points."""
        return np.einsum("cq,cq->c", self.detJxW, values_at_q)


def build_mesh(spec, nx, nz, k=2, quad_n1d=None):
    """
    Build a flowline mesh.

    Parameters
    ----------
    spec : DomainSpec
    nx, nz : int
        Cell counts in x and z.
    k : int
        Velocity polynomial order (2 or 3); pressure order is k-2.
    quad_n1d : int, optional
        Gauss points per direction (default k+1).

    Returns
    -------
    FlowlineMesh
    """
    return FlowlineMesh(spec, nx, nz, k=k, quad_n1d=quad_n1d)


# ----------------------------------------------------------------------
# boundary mass, traces, and basal operators
# ----------------------------------------------------------------------

def assemble_boundary_mass(mesh, tag, space="lattice"):
    """
    L2 mass matrix of a trace space on a tagged boundary.

    Parameters
    ----------
    mesh : FlowlineMesh
    tag : str
        One of 'bottom', 'right', 'top', 'left'.
    space : str
        'lattice' for the order-k scalar trace space on the boundary
        lattice nodes; 'basal' for the piecewise-linear basal parameter
        space (bottom tag only).

    Returns
    -------
    scipy.sparse.csr_matrix
        Symmetric positive definite; 1^T M 1 equals the boundary measure.
    """
    if space == "basal":
        if tag != "bottom":
            raise ConfigurationError("basal space lives on the bottom boundary")
        _, M = basal_p1_operators(mesh)
        return M
    if space != "lattice":
        raise ConfigurationError(f"unknown trace space {space!r}")
    ed = mesh.edge_data(tag)
    bnodes = mesh.boundary_nodes[tag]
    glob_to_loc = {g: i for i, g in enumerate(bnodes)}
    nf, nq1 = ed["w"].shape
    k1 = mesh.k + 1
    Me = np.einsum("fq,qa,qb->fab", ed["w"], ed["N"], ed["N"])
    rows = np.empty(nf * k1 * k1, dtype=np.int64)
    cols = np.empty_like(rows)
    vals = np.empty(nf * k1 * k1)
    pos = 0
    for f in range(nf):
        loc = np.array([glob_to_loc[g] for g in ed["nodes"][f]])
        rows[pos:pos + k1 * k1] = np.repeat(loc, k1)
        cols[pos:pos + k1 * k1] = np.tile(loc, k1)
        vals[pos:pos + k1 * k1] = Me[f].ravel()
        pos += k1 * k1
    n = bnodes.size
    return coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def basal_p1_operators(mesh):
    """
    Stiffness and mass of the P1 basal space on the bed polyline.

    The stiffness is the Laplace-Beltrami operator in the arc-length
    metric with natural boundary conditions; constants are in its kernel.

    Returns
    -------
    S, M : scipy.sparse.csr_matrix
    """
    nb = mesh.n_basal_dofs
    dx = np.diff(mesh.basal_x)
    dz = np.diff(mesh.basal_z)
    ell = np.hypot(dx, dz)
    i = np.arange(nb - 1)
    rows = np.concatenate([i, i, i + 1, i + 1])
    cols = np.concatenate([i, i + 1, i, i + 1])
    sv = np.concatenate([1.0 / ell, -1.0 / ell, -1.0 / ell, 1.0 / ell])
    mv = np.concatenate([ell / 3.0, ell / 6.0, ell / 6.0, ell / 3.0])
    S = coo_matrix((sv, (rows, cols)), shape=(nb, nb)).tocsr()
    M = coo_matrix((mv, (rows, cols)), shape=(nb, nb)).tocsr()
    return S, M


def trace_to_boundary(mesh, field, tag):
    """
    Restrict a volume lattice field to the boundary dofs of a tag.

    Parameters
    ----------
    field : array
        Scalar (n_nodes,) or interleaved vector (2*n_nodes,) field.

    Returns
    -------
    array
        Boundary values, ordered along the boundary; vector fields stay
        interleaved.
    """
    ids = mesh.boundary_nodes[tag]
    field = np.asarray(field)
    if field.size == mesh.n_nodes:
        return field[ids]
    if field.size == mesh.n_velocity_dofs:
        out = np.empty(2 * ids.size)
        out[0::2] = field[2 * ids]
        out[1::2] = field[2 * ids + 1]
        return out
    raise ConfigurationError("field size matches neither scalar nor vector space")


def trace_adjoint(mesh, w_boundary, tag, mass=None):
    """
    Adjoint lift of a boundary field: the volume dual vector B* M w with
    M the boundary mass, satisfying <B u, w>_Gamma = <u, B* M w> exactly.

    Parameters
    ----------
    w_boundary : array
        Scalar or interleaved vector boundary field.
    mass : sparse matrix, optional
        Boundary lattice mass (assembled on demand if omitted).

    Returns
    -------
    array
        Dual vector in the matching volume space (zeros off the boundary).
    """
    ids = mesh.boundary_nodes[tag]
    if mass is None:
        mass = assemble_boundary_mass(mesh, tag, space="lattice")
    w = np.asarray(w_boundary, dtype=float)
    if w.size == ids.size:
        out = np.zeros(mesh.n_nodes)
        out[ids] = mass @ w
        return out
    if w.size == 2 * ids.size:
        out = np.zeros(mesh.n_velocity_dofs)
        out[2 * ids] = mass @ w[0::2]
        out[2 * ids + 1] = mass @ w[1::2]
        return out
    raise ConfigurationError("boundary field size mismatch")
