"""Output-space loss gradients that drive the ensemble dynamic.

Only the gradient with respect to the prediction is needed by the optimizer;
loss values are provided for reporting.  Gradients act on arrays of any
leading shape: a stack ``(J, B, m)`` of ensemble predictions against targets
``(B, m)`` yields per-particle, per-sample gradients that the optimizer
concatenates.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DEFAULT_DELTA",
    "LossSpec",
    "mse_grad",
    "xent_grad",
    "mse_value",
    "xent_value",
    "l1_argmin_agree",
]

DEFAULT_DELTA = 0.005


def _gamma_array(gamma, m):
    if type(gamma) is float and 0.0 < gamma < np.inf:
        return gamma
    g = np.asarray(gamma, dtype=np.float64)
    if g.ndim > 1 or (g.ndim == 1 and g.shape[0] != m):
        raise ValueError(f"diagonal noise covariance must be a scalar or length-{m} vector")
    if np.any(g <= 0) or not np.all(np.isfinite(g)):
        raise ValueError("noise covariance must be positive definite")
    return g


def mse_grad(pred, target, gamma=1.0):
    """``Gamma^{-1} (pred - target)`` with diagonal ``Gamma`` over the last axis."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape[pred.ndim - target.ndim :] != target.shape:
        raise ValueError(f"prediction shape {pred.shape} incompatible with target {target.shape}")
    g = _gamma_array(gamma, target.shape[-1] if target.ndim else 1)
    return (pred - target) / g


def mse_value(pred, target, gamma=1.0):
    """``0.5 * ||pred - target||^2_Gamma`` summed over the target axes."""
    r = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    t = np.ndim(target)
    g = _gamma_array(gamma, np.shape(target)[-1] if t else 1)
    q = r * r / g
    return 0.5 * q.sum(axis=tuple(range(q.ndim - t, q.ndim))) if t else 0.5 * q


def xent_grad(pred, target, delta=DEFAULT_DELTA):
    """Stabilised cross-entropy gradient ``-y_k / (p_k + delta)``.

    Coordinates where the target is zero get an exact zero.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape[pred.ndim - target.ndim :] != target.shape:
        raise ValueError(f"prediction shape {pred.shape} incompatible with target {target.shape}")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if np.any(pred < 0):
        raise ValueError("cross-entropy needs nonnegative predicted probabilities")
    hot = target != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(hot, -target / (pred + delta), 0.0)


def xent_value(pred, target, delta=DEFAULT_DELTA):
    """``-<y, log(p + delta)>`` summed over the target axes."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    t = target.ndim
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(target != 0, -target * np.log(pred + delta), 0.0)
    return terms.sum(axis=tuple(range(terms.ndim - t, terms.ndim)))


@dataclass(frozen=True)
class LossSpec:
    """Loss choice plus its constants.

    Parameters
    ----------
    kind : {'squared-error', 'cross-entropy'}
    gamma : float or sequence of float
        Diagonal noise covariance for the squared error.
    delta : float
        Stabiliser for the cross-entropy gradient.
    """

    kind: str = "squared-error"
    gamma: object = 1.0
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        if self.kind not in ("squared-error", "cross-entropy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "cross-entropy" and not self.delta > 0:
            raise ValueError("cross-entropy stabiliser delta must be positive")
        g = np.asarray(self.gamma, dtype=np.float64)
        if g.ndim > 1 or np.any(g <= 0):
            raise ValueError("gamma must be a positive scalar or vector")

    def grad(self, pred, target):
        if self.kind == "squared-error":
            return mse_grad(pred, target, self.gamma)
        return xent_grad(pred, target, self.delta)

    def value(self, pred, target):
        if self.kind == "squared-error":
            return mse_value(pred, target, self.gamma)
        return xent_value(pred, target, self.delta)

    def to_dict(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        d = {"kind": self.kind}
        if self.kind == "squared-error":
            d["gamma"] = g.tolist()
        else:
            d["delta"] = float(self.delta)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"kind", "gamma", "delta"}
        if unknown:
            raise ValueError(f"unknown loss keys: {sorted(unknown)}")
        return cls(
            kind=d.get("kind", "squared-error"),
            gamma=d.get("gamma", 1.0),
            delta=float(d.get("delta", DEFAULT_DELTA)),
        )


def _argmin_set(values, rtol):
    best = np.min(values)
    return set(np.flatnonzero(values <= best + rtol * max(abs(best), 1.0)).tolist())


def l1_argmin_agree(candidates, target, rtol=1e-12):
    """Check that the l1 residual and the l1 norm of the cross-entropy gradient
    (with ``delta = 0``) select the same candidates.

    Parameters
    ----------
    candidates : array_like, shape (n, m) or (n, N, m)
        Points of the open probability simplex; with a middle axis the
        objectives are summed over the ``N`` samples.
    target : array_like, shape (m,) or (N, m)
        One-hot target(s).

    Returns
    -------
    bool
    """
    p = np.asarray(candidates, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if p.shape[0] == 0:
        raise ValueError("empty candidate set")
    if p.ndim == 2:
        p = p[:, None, :]
    if y.ndim == 1:
        y = y[None, :]
    if p.shape[1:] != y.shape:
        raise ValueError(f"candidate shape {p.shape[1:]} does not match target {y.shape}")
    if np.any(p <= 0):
        raise ValueError("candidates must lie in the open simplex")
    resid = np.abs(y - p).sum(axis=(1, 2))
    gnorm = np.abs(xent_grad(p, y, delta=0.0)).sum(axis=(1, 2))
    return _argmin_set(resid, rtol) == _argmin_set(gnorm, rtol)
