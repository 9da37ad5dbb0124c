"""
Gaussian smoothness prior for the log basal friction field.

The prior precision is built from the elliptic operator A = -gamma d^2/ds^2
+ delta on the bed polyline with natural boundary conditions, discretized
with P1 elements: K = gamma S + delta M where S and M are the basal
stiffness and mass matrices.  Two exponents are supported:

* kappa = 1: precision K M^-1 K, covariance K^-1 M K^-1 (the squared
  inverse elliptic operator; mesh-independent pointwise variance).
* kappa = 1/2: precision K itself (plain Tikhonov smoothing used on the
  deterministic/L-curve path).

All factorizations are dense; the basal space is one-dimensional and
small, so Cholesky on nb x nb matrices is cheaper and simpler than
anything sparse.  Dual/primal conventions: `precision_apply` maps a field
to a dual vector, `covariance_apply` maps a dual vector to a field; the
regularization term is R(beta) = 1/2 (beta-beta0)^T P (beta-beta0).
"""

import numpy as np
from scipy.linalg import cholesky, cho_factor, cho_solve, solve_triangular

from .mesh import basal_p1_operators, ConfigurationError


class PriorModel:
    """
    Squared-elliptic (or plain elliptic) Gaussian prior on the bed.

    Parameters
    ----------
    mesh : FlowlineMesh
    gamma, delta : float
        Smoothness weight and zeroth-order weight; both must be positive.
    kappa : float
        Operator exponent, 1.0 or 0.5.
    beta0 : float or (n_basal,) array
        Prior mean.
    """

    def __init__(self, mesh, gamma, delta, kappa=1.0, beta0=0.0):
        if gamma <= 0.0 or delta <= 0.0:
            raise ConfigurationError("gamma and delta must be positive")
        if kappa not in (1.0, 0.5):
            raise ConfigurationError("kappa must be 1.0 or 0.5")
        self.gamma, self.delta, self.kappa = float(gamma), float(delta), kappa
        S, M = basal_p1_operators(mesh)
        self.n = mesh.n_basal_dofs
        self.S = S.toarray()
        self.M = M.toarray()
        self.K = self.gamma * self.S + self.delta * self.M
        self.beta0 = np.broadcast_to(np.asarray(beta0, dtype=float),
                                     (self.n,)).copy()
        self._cho_K = cho_factor(self.K, lower=True)
        self._C_K = cholesky(self.K, lower=True)
        self._L_M = cholesky(self.M, lower=True)
        self._cho_M = cho_factor(self.M, lower=True)

    # -- regularization interface ---------------------------------------

    def reg_value(self, beta):
        d = beta - self.beta0
        return 0.5 * float(d @ self.precision_apply(d))

    def reg_gradient(self, beta):
        return self.precision_apply(beta - self.beta0)

    def reg_hessian_apply(self, v):
        return self.precision_apply(v)

    # -- precision and covariance ---------------------------------------

    def mass_solve(self, w):
        """Basal mass inverse apply (dual-norm weights for gradients)."""
        return cho_solve(self._cho_M, w)

    def precision_apply(self, v):
        """Field -> dual: P v with P the prior precision."""
        if self.kappa == 1.0:
            return self.K @ cho_solve(self._cho_M, self.K @ v)
        return self.K @ v

    def covariance_apply(self, w):
        """Dual -> field: Gamma_pr w = P^-1 w."""
        if self.kappa == 1.0:
            return cho_solve(self._cho_K, self.M @ cho_solve(self._cho_K, w))
        return cho_solve(self._cho_K, w)

    def cov_half_apply(self, z):
        """
        One covariance factor F with Gamma_pr = F F^T: white -> field.

        This is the sampling transform; it also whitens the prior metric,
        so Gram matrices of F-transformed blocks stay well conditioned
        even when the precision spans many orders of magnitude.
        """
        if self.kappa == 1.0:
            return cho_solve(self._cho_K, self._L_M @ np.asarray(z, dtype=float))
        return solve_triangular(self._C_K.T, np.asarray(z, dtype=float),
                                lower=False)

    def cov_half_tapply(self, v):
        """Transpose factor F^T: dual -> white."""
        if self.kappa == 1.0:
            return self._L_M.T @ cho_solve(self._cho_K, np.asarray(v, dtype=float))
        return solve_triangular(self._C_K, np.asarray(v, dtype=float),
                                lower=True)

    def precision_matrix(self):
        if self.kappa == 1.0:
            return self.K @ cho_solve(self._cho_M, self.K)
        return self.K.copy()

    def covariance_matrix(self):
        if self.kappa == 1.0:
            X = cho_solve(self._cho_K, self.M)
            return cho_solve(self._cho_K, X.T)
        return cho_solve(self._cho_K, np.eye(self.n))

    # -- sampling and variance ------------------------------------------

    def sample(self, rng, size=None):
        """
        Draw prior sample(s) beta0 + P^(-1/2)-like transform of white noise.

        Returns a (n_basal,) array, or (size, n_basal) when size is given.
        """
        m = 1 if size is None else int(size)
        z = rng.standard_normal((self.n, m))
        out = self.beta0[:, None] + self.cov_half_apply(z)
        return out[:, 0] if size is None else out.T

    def pointwise_variance(self):
        """Diagonal of the prior covariance."""
        if self.kappa == 1.0:
            X = cho_solve(self._cho_K, self._L_M)
            return np.einsum("ij,ij->i", X, X)
        return np.diag(self.covariance_matrix()).copy()
