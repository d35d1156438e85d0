"""Ensemble Kalman inversion for training forward-only models.

Particles are stored row-wise in a ``(J, P)`` array.  One step evaluates the
forward map for every particle on a batch, forms the coupling matrix

    D[k, j] = < G_k - mean(G), grad_j >

from the centred outputs and the output-space loss gradients, and moves each
particle by ``u_j <- u_j - h * sum_k D[k, j] u_k`` with the adaptive step
``h = h0 / (||D||_F + eps)``.  Because every column of ``D`` sums to zero the
update is applied to the centred particles, which is the same map in exact
arithmetic and keeps collapsed ensembles exactly fixed.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import frobenius_norm

__all__ = [
    "RANDOMIZATION_MODES",
    "EkiConfig",
    "EnsembleState",
    "NonFiniteForwardError",
    "init_ensemble",
    "coupling_matrix",
    "adaptive_step",
    "drift_update",
    "eki_step",
    "meki_step",
    "step",
    "randomize_per_step",
    "randomize_around_mean",
    "expand_ensemble",
    "epoch_end",
    "batch_indices",
    "run_epoch",
    "ensemble_mean",
    "online_step",
]

RANDOMIZATION_MODES = ("none", "per-step", "around-mean")


class NonFiniteForwardError(RuntimeError):
    """Forward outputs or loss gradients contained NaN or infinity."""

    def __init__(self, step_index, bad_particles):
        self.step_index = step_index
        self.bad_particles = list(bad_particles)
        shown = self.bad_particles[:10]
        more = "" if len(self.bad_particles) <= 10 else f" (+{len(self.bad_particles) - 10} more)"
        super().__init__(
            f"non-finite forward values at step {step_index} for particles {shown}{more}"
        )


@dataclass(frozen=True)
class EkiConfig:
    """Optimizer settings.

    Parameters
    ----------
    h0, eps : float
        Adaptive step constants, ``h = h0 / (||D||_F + eps)``.
    momentum : float or None
        Nesterov factor ``lambda`` in ``[0, 1)``; ``None`` disables momentum.
    randomization : {'none', 'per-step', 'around-mean'}
        ``'per-step'`` adds ``N(0, sqrt(h) C0)`` noise after every drift;
        ``'around-mean'`` redraws particles around their mean at epoch end.
    batch_size : int
    growth, j_max : int
        Epoch-end expansion ``J <- min(J + growth, j_max)``; ``growth = 0``
        keeps the size fixed.
    scale_by_J : bool
        Divide ``D`` by ``J``.  Off by default; the adaptive step absorbs the
        constant anyway except through ``eps``.
    """

    h0: float = 2.0
    eps: float = 0.5
    momentum: float | None = None
    randomization: str = "none"
    batch_size: int = 600
    growth: int = 0
    j_max: int | None = None
    scale_by_J: bool = False

    def __post_init__(self):
        if not (self.h0 > 0 and self.eps > 0):
            raise ValueError("h0 and eps must be positive")
        if self.momentum is not None and not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum factor must lie in [0, 1)")
        if self.randomization not in RANDOMIZATION_MODES:
            raise ValueError(f"randomization must be one of {RANDOMIZATION_MODES}")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.growth < 0:
            raise ValueError("growth must be nonnegative")
        if self.j_max is not None and self.j_max < 2:
            raise ValueError("j_max must be at least 2")

    @property
    def uses_momentum(self):
        return self.momentum is not None

    def to_dict(self):
        return {
            "h0": self.h0,
            "eps": self.eps,
            "momentum": self.momentum,
            "randomization": self.randomization,
            "batch_size": self.batch_size,
            "growth": self.growth,
            "j_max": self.j_max,
            "scale_by_J": self.scale_by_J,
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ValueError(f"unknown optimizer keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EnsembleState:
    """J particles (rows) plus optional Nesterov look-ahead points.

    ``momenta`` holds the points ``v`` where the forward map is evaluated in
    momentum mode; they equal the particles when the velocity is zero.
    """

    particles: np.ndarray
    momenta: np.ndarray | None = None
    step: int = 0
    epoch: int = 0
    last_h: float | None = field(default=None, compare=False)

    def __post_init__(self):
        u = self.particles
        if u.ndim != 2 or u.shape[0] < 2:
            raise ValueError(f"need a (J, P) ensemble with J >= 2, got shape {u.shape}")
        if self.momenta is not None and self.momenta.shape != u.shape:
            raise ValueError("momenta must match the particle array")

    @property
    def J(self):
        return self.particles.shape[0]

    @property
    def P(self):
        return self.particles.shape[1]


def init_ensemble(prior, J, rng, momentum=False):
    """Draw `J` i.i.d. particles from `prior`.

    In momentum mode the look-ahead points start on the particles, i.e. with
    zero velocity.
    """
    if J < 2:
        raise ValueError("an ensemble needs J >= 2 particles")
    u = prior.sample(J, rng)
    return EnsembleState(u, u.copy() if momentum else None)


def ensemble_mean(state):
    u = state.particles if isinstance(state, EnsembleState) else np.asarray(state, dtype=np.float64)
    return u.mean(axis=0)


def coupling_matrix(G_values, grads):
    """``D[k, j] = <G_k - mean(G), grads_j>`` for row-stacked outputs and gradients."""
    G = np.asarray(G_values, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    G = G.reshape(G.shape[0], -1)
    g = g.reshape(g.shape[0], -1)
    if G.shape != g.shape:
        raise ValueError(f"outputs {G.shape} and gradients {g.shape} differ in shape")
    return (G - G.mean(axis=0)) @ g.T


def adaptive_step(D, h0=2.0, eps=0.5):
    """``h0 / (||D||_F + eps)``."""
    if not (h0 > 0 and eps > 0):
        raise ValueError("h0 and eps must be positive")
    return h0 / (frobenius_norm(D) + eps)


def drift_update(X, D, h):
    """``X_j - h * sum_k D[k, j] (X_k - mean(X))`` for every row ``j``."""
    return X - h * (D.T @ (X - X.mean(axis=0)))


def _evaluate(model, X, batch_x):
    forward = model.forward if hasattr(model, "forward") else model
    return np.asarray(forward(X, batch_x), dtype=np.float64)


def _outputs_and_grads(model, loss, X, batch, step_index):
    bx, by = batch
    G = _evaluate(model, X, bx)
    J = X.shape[0]
    grads = np.asarray(loss.grad(G, by), dtype=np.float64)
    G = G.reshape(J, -1)
    grads = grads.reshape(J, -1)
    # One cheap reduction on the happy path; NaN/inf propagate into the sum.
    if not np.isfinite(np.sum(G) + np.sum(grads)):
        bad = ~(np.all(np.isfinite(G), axis=1) & np.all(np.isfinite(grads), axis=1))
        if np.any(bad):
            raise NonFiniteForwardError(step_index, np.flatnonzero(bad).tolist())
    return G, grads


def _drift(X, G, grads, cfg):
    """Adaptive drift of the rows of `X`; returns ``(X_new, h)``.

    When the stacked output length K is below J the J x J matrix D is never
    formed: ``D^T Xc = grads (Gc^T Xc)`` and ``||D||_F^2 = <Gc^T Gc, grads^T grads>``.
    """
    J, K = G.shape
    Gc = G - np.add.reduce(G, axis=0) / J
    scale = 1.0 / J if cfg.scale_by_J else 1.0
    if K < J:
        norm2 = float(np.add.reduce(((Gc.T @ Gc) * (grads.T @ grads)).ravel()))
        h = cfg.h0 / (scale * np.sqrt(max(norm2, 0.0)) + cfg.eps)
        Xc = X - np.add.reduce(X, axis=0) / J
        return X - (h * scale) * (grads @ (Gc.T @ Xc)), h
    D = Gc @ grads.T
    if cfg.scale_by_J:
        D = D / J
    h = adaptive_step(D, cfg.h0, cfg.eps)
    return drift_update(X, D, h), h


def eki_step(state, batch, model, loss, cfg, prior=None, rng=None):
    """One discrete EKI step on `batch` = ``(x, y)``.

    Per-step randomization (if configured) is applied after the drift and
    needs `prior` and `rng`.
    """
    if np.shape(batch[1])[0] == 0:
        raise ValueError("empty batch")
    U = state.particles
    G, grads = _outputs_and_grads(model, loss, U, batch, state.step)
    U_new, h = _drift(U, G, grads, cfg)
    new = replace(state, particles=U_new, step=state.step + 1, last_h=h)
    if cfg.randomization == "per-step":
        new = randomize_per_step(new, prior, h, rng)
    return new


def meki_step(state, batch, model, loss, cfg, prior=None, rng=None):
    """One momentum step: ``u' = v - h D(v) v`` and ``v' = u' + lambda (u' - u)``.

    Per-step noise goes onto ``v'``.  With ``lambda = 0`` the look-ahead
    equals the particle, so the result is exactly an :func:`eki_step`.
    """
    if state.momenta is None:
        raise ValueError("momentum step needs an ensemble with momenta")
    if np.shape(batch[1])[0] == 0:
        raise ValueError("empty batch")
    lam = cfg.momentum or 0.0
    V = state.momenta
    G, grads = _outputs_and_grads(model, loss, V, batch, state.step)
    U_new, h = _drift(V, G, grads, cfg)
    if lam == 0.0:
        V_new = U_new
    else:
        V_new = U_new + lam * (U_new - state.particles)
    new = replace(state, particles=U_new, momenta=V_new, step=state.step + 1, last_h=h)
    if cfg.randomization == "per-step":
        new = randomize_per_step(new, prior, h, rng)
    if lam == 0.0:
        new = replace(new, particles=new.momenta, momenta=new.momenta.copy())
    return new


def step(state, batch, model, loss, cfg, prior=None, rng=None):
    """Dispatch to :func:`meki_step` or :func:`eki_step` according to `cfg`."""
    if cfg.uses_momentum:
        return meki_step(state, batch, model, loss, cfg, prior, rng)
    return eki_step(state, batch, model, loss, cfg, prior, rng)


def randomize_per_step(state, prior, h, rng):
    """Add i.i.d. ``N(0, sqrt(h) C0)`` noise to each particle (to ``v`` in momentum mode)."""
    if prior is None or rng is None:
        raise ValueError("per-step randomization needs a prior and an rng")
    if not h > 0:
        raise ValueError("step size must be positive")
    noise = prior.scaled(np.sqrt(h)).noise(state.J, rng)
    if state.momenta is not None:
        return replace(state, momenta=state.momenta + noise)
    return replace(state, particles=state.particles + noise)


def randomize_around_mean(state, prior, rng):
    """Replace every particle by ``mean + eta``, ``eta`` a centred prior draw."""
    return _regenerate(state, prior, state.J, rng)


def _regenerate(state, prior, J, rng):
    mean = ensemble_mean(state)
    u = mean + prior.noise(J, rng)
    return replace(state, particles=u, momenta=u.copy() if state.momenta is not None else None)


def expand_ensemble(state, prior, growth, j_max, rng):
    """Regenerate around the mean with ``min(J + growth, j_max)`` particles."""
    if growth < 0:
        raise ValueError("growth must be nonnegative")
    cap = state.J if j_max is None else max(int(j_max), state.J)
    return _regenerate(state, prior, min(state.J + int(growth), cap), rng)


def epoch_end(state, prior, cfg, rng):
    """Apply the configured epoch-boundary randomization or expansion."""
    state = replace(state, epoch=state.epoch + 1)
    if cfg.growth > 0:
        return expand_ensemble(state, prior, cfg.growth, cfg.j_max, rng)
    if cfg.randomization == "around-mean":
        return randomize_around_mean(state, prior, rng)
    return state


def batch_indices(n, batch_size, rng):
    """Seeded shuffle of ``range(n)`` cut into ``ceil(n / batch_size)`` batches."""
    if n < 1:
        raise ValueError("dataset is empty")
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def run_epoch(state, dataset, model, loss, cfg, rng, prior=None):
    """One pass over ``dataset = (x, y)`` in shuffled mini-batches.

    A step whose forward values are not finite is retried once after
    redrawing the ensemble around its mean; a second failure propagates.

    Returns
    -------
    state : EnsembleState
    metrics : dict
        ``steps``, ``batch_sizes``, ``mean_h``, ``retries``, ``J`` (after the
        epoch-end operation), ``seconds`` and ``mean``, the mean particle
        before the epoch-end randomization (used for prediction).
    """
    x, y = dataset
    n = np.shape(y)[0]
    t0 = time.perf_counter()
    hs, sizes = [], []
    retries = 0
    for idx in batch_indices(n, cfg.batch_size, rng):
        batch = (x[idx], y[idx])
        try:
            state = step(state, batch, model, loss, cfg, prior, rng)
        except NonFiniteForwardError:
            if prior is None:
                raise
            retries += 1
            state = randomize_around_mean(state, prior, rng)
            state = step(state, batch, model, loss, cfg, prior, rng)
        hs.append(state.last_h)
        sizes.append(len(idx))
    if cfg.growth > 0 or cfg.randomization == "around-mean":
        if prior is None:
            raise ValueError("epoch-end randomization needs a prior")
    mean = ensemble_mean(state)
    state = epoch_end(state, prior, cfg, rng)
    metrics = {
        "steps": len(sizes),
        "batch_sizes": sizes,
        "mean_h": float(np.mean(hs)),
        "retries": retries,
        "J": state.J,
        "seconds": time.perf_counter() - t0,
        "mean": mean,
    }
    return state, metrics


def online_step(state, sample, model, loss, cfg, hidden=None, prior=None, rng=None):
    """Assimilate one data pair ``(x_t, y_t)``.

    For models with a ``step(params, h, x)`` method (recurrent networks)
    each particle advances the shared hidden state with its own parameters
    to produce its output; afterwards the persisted hidden state is advanced
    with the updated mean particle.  Other models take a plain step on a
    one-sample batch.

    Returns
    -------
    state : EnsembleState
    hidden : ndarray or None
        Hidden state to pass to the next call.
    prediction : ndarray
        Mean-particle prediction for ``y_t`` made before the update.
    """
    x_t, y_t = sample
    x_b = np.asarray(x_t, dtype=np.float64)[None]
    y_b = np.asarray(y_t, dtype=np.float64)[None]
    if hasattr(model, "step"):
        def forward(U, bx):
            return model.step(U, hidden, bx)[0]

        prediction = model.step(ensemble_mean(state), hidden, x_b)[0][0, 0]
        state = step(state, (x_b, y_b), forward, loss, cfg, prior, rng)
        hidden = model.step(ensemble_mean(state), hidden, x_b)[1][0]
        return state, hidden, prediction
    prediction = _evaluate(model, ensemble_mean(state)[None], x_b)[0, 0]
    state = step(state, (x_b, y_b), model, loss, cfg, prior, rng)
    return state, None, prediction
