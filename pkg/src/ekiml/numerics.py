"""Dense linear algebra, seeded randomness and Gaussian sampling.

Matrices and vectors are plain ``numpy.ndarray`` objects in float64.
Randomness always flows through :func:`make_rng`, which pins the generator
to NumPy's PCG64 bit generator seeded through ``SeedSequence``; OS entropy
is never consulted.
"""

import numpy as np

__all__ = [
    "RNG_ALGORITHM",
    "make_rng",
    "spawn_rngs",
    "as_matrix",
    "frobenius_norm",
    "sym_eig",
    "sample_gaussian",
    "GaussianPrior",
]

RNG_ALGORITHM = "numpy.PCG64"


def make_rng(seed):
    """Return a ``numpy.random.Generator`` backed by PCG64 for `seed`."""
    if seed is None:
        raise ValueError("a seed is required; OS entropy is never used")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed, n):
    """Derive `n` independent generators from `seed`, in a fixed order."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def as_matrix(m):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {a.shape}")
    return a


def frobenius_norm(m):
    """Square root of the sum of squared entries."""
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def _round_robin(n):
    # Tournament schedule: n-1 rounds (n even) of n/2 disjoint pairs
    # covering every unordered pair exactly once.
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _check_symmetric(m, symmetry_tol):
    a = as_matrix(m)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError(f"sym_eig needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("sym_eig input has non-finite entries")
    scale = max(np.max(np.abs(a)), 1.0) if n else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > symmetry_tol * scale:
        raise ValueError("sym_eig input is not symmetric")
    return 0.5 * (a + a.T)


def _sorted(w, v):
    order = np.argsort(w, kind="stable")
    return w[order], np.ascontiguousarray(v[:, order])


def _jacobi(a, tol, max_sweeps):
    n = a.shape[0]
    # Odd sizes get a decoupled dummy row/column that never rotates.
    size = n + (n % 2)
    if size != n:
        padded = np.zeros((size, size))
        padded[:n, :n] = a
        a = padded
    # Rows of `vt` are the eigenvectors; row operations keep every update
    # on contiguous memory, and A' = J^T A J is formed as two row passes
    # around a transpose.
    vt = np.eye(size)
    rounds = _round_robin(size)
    target = tol * frobenius_norm(a)

    for _ in range(max_sweeps):
        if frobenius_norm(a - np.diag(np.diag(a))) <= target:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            safe = np.where(active, apq, 1.0)
            theta = (a[q, q] - a[p, p]) / (2.0 * safe)
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            t = np.where(theta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            c = np.where(active, c, 1.0)[:, None]
            s = np.where(active, s, 0.0)[:, None]
            for m in (a, vt):
                mp = m[p]
                mq = m[q]
                m[p] = c * mp - s * mq
                m[q] = s * mp + c * mq
            a = np.ascontiguousarray(a.T)
            ap = a[p]
            aq = a[q]
            a[p] = c * ap - s * aq
            a[q] = s * ap + c * aq
    else:
        raise RuntimeError("sym_eig: Jacobi sweeps did not converge")
    return np.diag(a)[:n].copy(), vt.T[:n, :n]


def _householder_tridiagonal(a):
    """Return (d, e, q) with ``a = q @ T @ q.T``, T tridiagonal (d diag, e off)."""
    a = a.copy()
    n = a.shape[0]
    q = np.eye(n)
    for k in range(n - 2):
        x = a[k + 1 :, k]
        norm_x = np.sqrt(x @ x)
        if norm_x == 0.0:
            continue
        alpha = -norm_x if x[0] >= 0 else norm_x
        v = x.copy()
        v[0] -= alpha
        norm_v = np.sqrt(v @ v)
        if norm_v == 0.0:
            continue
        v /= norm_v
        sub = a[k + 1 :, k + 1 :]
        p = sub @ v
        w = p - (v @ p) * v
        sub -= 2.0 * (np.outer(v, w) + np.outer(w, v))
        a[k + 1 :, k] = 0.0
        a[k, k + 1 :] = 0.0
        a[k + 1, k] = a[k, k + 1] = alpha
        qs = q[:, k + 1 :]
        qs -= 2.0 * np.outer(qs @ v, v)
    d = np.diag(a).copy()
    e = np.append(np.diag(a, 1), 0.0)
    return d, e, q


def _tridiagonal_ql(d, e, zt, max_iter=60):
    # Implicit QL with Wilkinson-type shifts; e[i] couples i and i+1.
    # Rotations act on rows of zt (= eigenvectors transposed).
    n = d.shape[0]
    eps = np.finfo(np.float64).eps
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > max_iter:
                raise RuntimeError("sym_eig: QL iteration did not converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + (r if g >= 0 else -r))
            s = c = 1.0
            p = 0.0
            i = m - 1
            underflow = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = np.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                zi = zt[i].copy()
                zi1 = zt[i + 1].copy()
                zt[i + 1] = s * zi + c * zi1
                zt[i] = c * zi - s * zi1
                i -= 1
            if underflow:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return d, zt


def sym_eig(m, method="ql", tol=1e-13, max_sweeps=60, symmetry_tol=1e-10):
    """Eigendecomposition of a real symmetric matrix.

    Parameters
    ----------
    m : array_like, shape (n, n)
        Symmetric matrix (within `symmetry_tol`, relative to its largest entry).
    method : {'ql', 'jacobi'}
        ``'ql'`` reduces to tridiagonal form with Householder reflections and
        finishes with implicit QL; ``'jacobi'`` runs cyclic Jacobi sweeps in
        parallel (round-robin) order. QL is much faster for n in the hundreds.
    tol, max_sweeps : float, int
        Jacobi stopping rule: off-diagonal Frobenius norm below ``tol * ||m||_F``.

    Returns
    -------
    w : ndarray, shape (n,)
        Eigenvalues in ascending order.
    v : ndarray, shape (n, n)
        Orthonormal eigenvectors stored as columns, ``m @ v[:, i] = w[i] * v[:, i]``.
    """
    a = _check_symmetric(m, symmetry_tol)
    n = a.shape[0]
    if n <= 1:
        return np.diag(a).copy(), np.eye(n)
    if method == "jacobi":
        w, v = _jacobi(a, tol, max_sweeps)
    elif method == "ql":
        d, e, q = _householder_tridiagonal(a)
        w, zt = _tridiagonal_ql(d, e, np.ascontiguousarray(q.T))
        v = zt.T
    else:
        raise ValueError(f"unknown sym_eig method {method!r}")
    return _sorted(w, v)


def sample_gaussian(mean, cov_factor, n, rng):
    """Draw `n` samples ``mean + cov_factor @ z`` with ``z ~ N(0, I)``.

    `cov_factor` may be a 2-d matrix with ``len(mean)`` rows, or a 1-d vector
    of per-coordinate standard deviations (a diagonal factor).

    Returns an array of shape ``(n, len(mean))``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    factor = np.asarray(cov_factor, dtype=np.float64)
    if factor.ndim == 1:
        if factor.shape[0] != mean.shape[0]:
            raise ValueError("diagonal factor length does not match mean")
        z = rng.standard_normal((n, mean.shape[0]))
        return mean + z * factor
    if factor.ndim != 2 or factor.shape[0] != mean.shape[0]:
        raise ValueError(
            f"cov_factor shape {factor.shape} incompatible with mean length {mean.shape[0]}"
        )
    z = rng.standard_normal((n, factor.shape[1]))
    return mean + z @ factor.T


class GaussianPrior:
    """Gaussian measure N(mean, F F^T) described by a covariance factor F.

    The factor is either a 1-d array (diagonal standard deviations, used for
    the block-diagonal Xavier priors) or a dense ``(P, r)`` matrix.
    """

    def __init__(self, mean, factor, blocks=None):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.factor = np.asarray(factor, dtype=np.float64)
        if self.factor.shape[0] != self.mean.shape[0]:
            raise ValueError("prior factor does not match mean length")
        # Optional [(name, start, stop, variance)] per parameter block.
        self.blocks = list(blocks) if blocks is not None else []

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def is_diagonal(self):
        return self.factor.ndim == 1

    def covariance(self):
        if self.is_diagonal:
            return np.diag(self.factor**2)
        return self.factor @ self.factor.T

    def sample(self, n, rng):
        return sample_gaussian(self.mean, self.factor, n, rng)

    def noise(self, n, rng):
        """Centered draws, i.e. samples of N(0, F F^T)."""
        return sample_gaussian(np.zeros_like(self.mean), self.factor, n, rng)

    def scaled(self, cov_scale):
        """Prior whose covariance is multiplied by `cov_scale`."""
        if cov_scale < 0:
            raise ValueError("covariance scale must be nonnegative")
        return GaussianPrior(
            self.mean,
            self.factor * np.sqrt(cov_scale),
            [(name, a, b, var * cov_scale) for name, a, b, var in self.blocks],
        )

    def __repr__(self):
        kind = "diagonal" if self.is_diagonal else f"dense{self.factor.shape}"
        return f"GaussianPrior(dim={self.dim}, factor={kind})"
