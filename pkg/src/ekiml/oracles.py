"""Reference computations used to check the optimizer.

These are deliberately simple and independent of the EKI code path.
"""

import numpy as np

__all__ = ["fd_gradient", "objective", "projected_lsq_oracle"]


def objective(model, loss, params, batch):
    """``Phi(u) = sum_j L(G(u | x_j), y_j)`` for one vector or a ``(K, P)`` stack."""
    x, y = batch
    forward = model.forward if hasattr(model, "forward") else model
    u = np.asarray(params, dtype=np.float64)
    single = u.ndim == 1
    G = np.asarray(forward(np.atleast_2d(u), x), dtype=np.float64)
    vals = np.asarray(loss.value(G, y), dtype=np.float64).reshape(G.shape[0], -1).sum(axis=1)
    return float(vals[0]) if single else vals


def fd_gradient(model, loss, params, batch, h=1e-5):
    """Central-difference gradient of :func:`objective` at `params`.

    All ``2P`` perturbed parameter vectors are evaluated as one ensemble.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    u = np.asarray(params, dtype=np.float64)
    P = u.shape[0]
    E = np.eye(P) * h
    vals = objective(model, loss, np.vstack([u + E, u - E]), batch)
    if not np.all(np.isfinite(vals)):
        raise ValueError("objective is not finite near the evaluation point")
    return (vals[:P] - vals[P:]) / (2.0 * h)


def projected_lsq_oracle(A, y, gamma, particles):
    """Minimiser of ``0.5 ||y - A u||^2_Gamma`` over ``mean + span{u_j - mean}``.

    Parameters
    ----------
    A : ndarray, shape (m, P)
    y : ndarray, shape (m,)
    gamma : float or ndarray, shape (m,)
        Diagonal of ``Gamma``.
    particles : ndarray, shape (J, P)
        Initial ensemble defining the affine subspace.

    Returns
    -------
    u : ndarray, shape (P,)
        The minimiser; the minimum-norm coefficient solution when the reduced
        system is singular.
    degenerate : bool
        True when the minimiser is not unique within the subspace.
    """
    A = np.asarray(A, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    U = np.asarray(particles, dtype=np.float64)
    w = 1.0 / np.sqrt(np.broadcast_to(np.asarray(gamma, dtype=np.float64), y.shape))
    mean = U.mean(axis=0)
    E = (U - mean).T
    M = w[:, None] * (A @ E)
    rhs = w * (y - A @ mean)
    c, *_ = np.linalg.lstsq(M, rhs, rcond=None)
    degenerate = np.linalg.matrix_rank(M) < np.linalg.matrix_rank(E)
    return mean + E @ c, bool(degenerate)
