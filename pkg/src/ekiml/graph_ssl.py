"""Graph-based semi-supervised classification.

Nodes carry feature vectors; a Gaussian affinity defines a weighted graph
whose Laplacian yields both the spectral (Fiedler) baseline and a Gaussian
prior ``N(0, (L + tau^2 I)^{-alpha})`` on real-valued node functions.  EKI then
fits the node function to the few labelled nodes, observing the labelled
coordinates of ``u`` directly, and classifies every node by ``sign(u)``.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .numerics import GaussianPrior, sym_eig

__all__ = [
    "GraphWarning",
    "AffinityGraph",
    "LabeledSubset",
    "GraphPrior",
    "affinity_matrix",
    "graph_laplacian",
    "prior_from_laplacian",
    "fiedler_classifier",
    "select_labeled",
    "ObservedCoordinates",
    "ssl_loss_grads",
    "sign_labels",
]


class GraphWarning(UserWarning):
    """The graph has more than one connected component."""


@dataclass(frozen=True)
class AffinityGraph:
    """Symmetric nonnegative weights with zero diagonal."""

    W: np.ndarray

    def __post_init__(self):
        W = self.W
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValueError("weight matrix must be square")
        if np.any(W < 0) or not np.array_equal(W, W.T) or np.any(np.diag(W) != 0):
            raise ValueError("weights must be symmetric, nonnegative, with zero diagonal")

    @property
    def N(self):
        return self.W.shape[0]


def affinity_matrix(X, bandwidth=1.25):
    """``W_ij = exp(-||x_i - x_j||^2 / (2 bandwidth^2))`` off the diagonal."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    X = np.asarray(X, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    W = np.exp(-d2 / (2.0 * bandwidth**2))
    np.fill_diagonal(W, 0.0)
    return AffinityGraph(0.5 * (W + W.T))


def graph_laplacian(graph, kind="unnormalized"):
    """Graph Laplacian of an affinity graph (or weight matrix).

    ``'unnormalized'`` gives ``D - W``; ``'symmetric'`` gives
    ``I - D^{-1/2} W D^{-1/2}``, whose null vector is ``D^{1/2} 1``.
    """
    W = graph.W if isinstance(graph, AffinityGraph) else np.asarray(graph, dtype=np.float64)
    deg = W.sum(axis=1)
    if kind == "unnormalized":
        return np.diag(deg) - W
    if kind == "symmetric":
        if np.any(deg <= 0):
            raise ValueError("symmetric normalisation needs every node to have an edge")
        s = 1.0 / np.sqrt(deg)
        L = np.eye(W.shape[0]) - s[:, None] * W * s[None, :]
        return 0.5 * (L + L.T)
    raise ValueError(f"unknown Laplacian kind {kind!r}")


class GraphPrior(GaussianPrior):
    """Gaussian prior ``N(0, (L + tau^2 I)^{-alpha})`` built from a Laplacian.

    With ``tau = 0`` the null modes of ``L`` are dropped, so draws lie in
    their orthogonal complement.

    Attributes
    ----------
    eigenvalues, eigenvectors : ndarray
        Full eigendecomposition of ``L`` (ascending, columns).
    null_dim : int
        Number of excluded modes.
    """

    def __init__(self, L, tau, alpha, eigenvalues, eigenvectors, null_dim):
        keep = slice(null_dim, None)
        scale = (eigenvalues[keep] + tau**2) ** (-alpha / 2.0)
        super().__init__(np.zeros(L.shape[0]), eigenvectors[:, keep] * scale)
        self.L = L
        self.tau = tau
        self.alpha = alpha
        self.eigenvalues = eigenvalues
        self.eigenvectors = eigenvectors
        self.null_dim = null_dim


def prior_from_laplacian(L, tau=0.0, alpha=1.0, null_tol=1e-9, eig=None):
    """Build the graph prior.

    Parameters
    ----------
    L : ndarray
        Graph Laplacian.
    tau, alpha : float
        Shift and exponent; ``tau >= 0``, ``alpha > 0``.
    null_tol : float
        Eigenvalues below ``null_tol * max(eigenvalue)`` count as zero when
        ``tau = 0``.
    eig : tuple, optional
        Precomputed ``(eigenvalues, eigenvectors)`` of `L`.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    L = np.asarray(L, dtype=np.float64)
    w, V = eig if eig is not None else sym_eig(L)
    null_dim = 0
    if tau == 0:
        null_dim = int(np.sum(w <= null_tol * max(w[-1], 1e-300)))
        if null_dim > 1:
            warnings.warn(
                f"graph has {null_dim} zero Laplacian modes (disconnected); all are excluded",
                GraphWarning,
                stacklevel=2,
            )
        if null_dim == w.shape[0]:
            raise ValueError("Laplacian is zero; no modes left for the prior")
    return GraphPrior(L, tau, alpha, w, V, null_dim)


def _null_count(w, null_tol):
    return int(np.sum(w <= null_tol * max(w[-1], 1e-300)))


def fiedler_classifier(L, subset=None, null_tol=1e-9, eig=None):
    """Threshold the eigenvector of the smallest nonzero eigenvalue.

    Entries ``>= 0`` map to +1 (so exact zeros become +1).  If `subset` is
    given the global sign is chosen to agree with the most known labels;
    otherwise the largest-magnitude entry is made positive.

    Returns
    -------
    ndarray of int, values in {+1, -1}
    """
    w, V = eig if eig is not None else sym_eig(L)
    if _null_count(w, null_tol) != 1:
        raise ValueError("Fiedler classifier needs a connected graph (one zero eigenvalue)")
    f = V[:, 1]
    labels = np.where(f >= 0, 1, -1)
    if subset is not None:
        agree = np.sum(labels[subset.indices] == subset.labels)
        if agree < len(subset.indices) - agree:
            labels = np.where(-f >= 0, 1, -1)
    elif f[np.argmax(np.abs(f))] < 0:
        labels = np.where(-f >= 0, 1, -1)
    return labels


@dataclass(frozen=True)
class LabeledSubset:
    """Observed node indices with their +1 / -1 labels."""

    indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.indices) < 1 or len(self.indices) != len(self.labels):
            raise ValueError("need at least one labelled node and one label per index")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("labelled indices must be distinct")
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise ValueError("labels must be +1 or -1")

    def __len__(self):
        return len(self.indices)


def select_labeled(labels, counts, rng):
    """Draw a labelled subset with ``counts = {label: how_many}``.

    Classes are drawn in sorted label order without replacement; the result is
    sorted by node index.
    """
    labels = np.asarray(labels)
    chosen = []
    for lab in sorted(counts):
        pool = np.flatnonzero(labels == lab)
        k = int(counts[lab])
        if k > pool.shape[0]:
            raise ValueError(f"only {pool.shape[0]} nodes carry label {lab}, asked for {k}")
        chosen.append(rng.choice(pool, size=k, replace=False))
    idx = np.sort(np.concatenate(chosen))
    return LabeledSubset(idx, labels[idx].astype(np.int64))


class ObservedCoordinates:
    """Forward map ``G(u | j) = u_j``: the EKI data are node indices."""

    def forward(self, U, idx):
        U = np.asarray(U, dtype=np.float64)
        idx = np.asarray(idx, dtype=np.int64)
        return U[..., idx]


def ssl_loss_grads(u, subset, gamma=None):
    """Squared-error gradient on the labelled coordinates, zero elsewhere.

    ``gamma`` defaults to ``|Z'|``, the number of labelled nodes.
    """
    u = np.asarray(u, dtype=np.float64)
    gamma = float(len(subset)) if gamma is None else float(gamma)
    g = np.zeros_like(u)
    g[subset.indices] = (u[subset.indices] - subset.labels) / gamma
    return g


def sign_labels(u):
    """Node classes ``sign(u)`` with zeros mapped to +1."""
    return np.where(np.asarray(u) >= 0, 1, -1)
