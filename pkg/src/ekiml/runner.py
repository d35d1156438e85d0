"""Run a configured experiment end to end.

Randomness comes from three sub-streams spawned from the config seed, in a
fixed order: data selection, ensemble initialisation, and training (batch
shuffling and noise).  Prediction always uses the mean particle.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    load_mnist,
    load_series,
    load_voting,
    normalize_images,
    normalize_minmax,
    one_hot,
    one_step_split,
    sine_series,
    verify_checksum,
)
from .eki import ensemble_mean, init_ensemble, online_step, run_epoch, step
from .graph_ssl import (
    ObservedCoordinates,
    affinity_matrix,
    fiedler_classifier,
    graph_laplacian,
    prior_from_laplacian,
    select_labeled,
    sign_labels,
)
from .losses import LossSpec
from .metrics import MetricsRecord, MetricsWriter, accuracy, test_error
from .models import RnnSpec, xavier_prior
from .numerics import spawn_rngs, sym_eig

__all__ = ["RunResult", "run_experiment"]


@dataclass
class RunResult:
    records: list
    mean_params: np.ndarray
    summary: dict = field(default_factory=dict)


class _Clock:
    def __init__(self, enabled):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def __call__(self):
        return time.perf_counter() - self.t0 if self.enabled else 0.0


def _verify(cfg):
    for key, expected in cfg.data.get("checksums", {}).items():
        verify_checksum(cfg.data_path(key), expected)


def _emit(records, rec, writer, on_record):
    records.append(rec)
    if writer is not None:
        writer.write(rec)
    if on_record is not None:
        on_record(rec)


def _supervised_data(cfg, rng):
    d = cfg.data
    if d["dataset"] == "mnist":
        train = load_mnist(cfg.data_path("train_images"), cfg.data_path("train_labels"), "train")
        test = load_mnist(cfg.data_path("test_images"), cfg.data_path("test_labels"), "test")
        if d.get("train_size") is not None:
            train = train.subset(np.sort(rng.choice(len(train), int(d["train_size"]), replace=False)))
        if d.get("test_size") is not None:
            test = test.subset(np.sort(rng.choice(len(test), int(d["test_size"]), replace=False)))
        xtr, xte, _ = normalize_images(train, test)
        return xtr, train.labels, xte, test.labels, 10
    n_train = int(d.get("n_train", 100))
    n_test = int(d.get("n_test", 100))
    dim = int(d.get("dim", 2))
    k = int(d.get("classes", 2))
    spread = float(d.get("spread", 0.5))
    centres = 2.0 * rng.standard_normal((k, dim))
    labels = np.arange(n_train + n_test) % k
    x = centres[labels] + spread * rng.standard_normal((labels.shape[0], dim))
    return x[:n_train], labels[:n_train], x[n_train:], labels[n_train:], k


def _predict_classes(model, u, x, chunk=2000):
    out = [model.forward(u, x[i : i + chunk]).argmax(axis=-1) for i in range(0, x.shape[0], chunk)]
    return np.concatenate(out)


def _run_supervised(cfg, rngs, clock, writer, on_record):
    data_rng, init_rng, train_rng = rngs
    model = cfg.model
    xtr, ytr, xte, yte, k = _supervised_data(cfg, data_rng)
    xtr = xtr.reshape(xtr.shape[0], *model.input_shape)
    xte = xte.reshape(xte.shape[0], *model.input_shape)
    prior = xavier_prior(model)
    state = init_ensemble(prior, cfg.ensemble_size, init_rng, momentum=cfg.optimizer.uses_momentum)
    targets = one_hot(ytr, k)
    records = []
    mean = ensemble_mean(state)
    for epoch in range(cfg.epochs):
        state, info = run_epoch(state, (xtr, targets), model, cfg.loss, cfg.optimizer, train_rng, prior)
        mean = info["mean"]
        rec = MetricsRecord(
            step=epoch + 1,
            train_metric=accuracy(_predict_classes(model, mean, xtr), ytr),
            test_metric=accuracy(_predict_classes(model, mean, xte), yte),
            wall_time=clock(),
            ensemble_size=state.J,
        )
        _emit(records, rec, writer, on_record)
    summary = {
        "steps": state.step,
        "first_test_accuracy": records[0].test_metric,
        "final_test_accuracy": records[-1].test_metric,
        "final_train_accuracy": records[-1].train_metric,
        "n_train": int(xtr.shape[0]),
        "n_test": int(xte.shape[0]),
    }
    return records, mean, summary


def _run_ssl(cfg, rngs, clock, writer, on_record):
    data_rng, init_rng, train_rng = rngs
    g = cfg.graph
    voting = load_voting(cfg.data_path("path"))
    L = graph_laplacian(affinity_matrix(voting.features, g["bandwidth"]), g["laplacian"])
    eig = sym_eig(L)
    prior = prior_from_laplacian(L, g["tau"], g["alpha"], eig=eig)
    counts = cfg.data.get("labeled", {"republican": 2, "democrat": 3})
    unknown = set(counts) - {"republican", "democrat"}
    if unknown:
        raise ValueError(f"unknown parties in data.labeled: {sorted(unknown)}")
    subset = select_labeled(
        voting.labels, {-1: counts.get("republican", 0), 1: counts.get("democrat", 0)}, data_rng
    )
    fiedler = fiedler_classifier(L, subset, eig=eig)
    fiedler_acc = accuracy(fiedler, voting.labels)

    loss = cfg.loss if cfg.loss is not None else LossSpec(gamma=float(len(subset)))
    model = ObservedCoordinates()
    state = init_ensemble(prior, cfg.ensemble_size, init_rng, momentum=cfg.optimizer.uses_momentum)
    batch = (subset.indices, subset.labels.astype(np.float64))
    records = []
    log_every = cfg.output["log_every"]
    n_steps = 0
    for n_steps in range(1, cfg.steps + 1):
        prev = state.particles
        state = step(state, batch, model, loss, cfg.optimizer, prior, train_rng)
        moved = float(np.max(np.abs(state.particles - prev)))
        done = moved < g["tol"] or n_steps == cfg.steps
        if n_steps % log_every == 0 or done:
            pred = sign_labels(ensemble_mean(state))
            rec = MetricsRecord(
                step=n_steps,
                train_metric=accuracy(pred[subset.indices], subset.labels),
                test_metric=accuracy(pred, voting.labels),
                wall_time=clock(),
                ensemble_size=state.J,
            )
            _emit(records, rec, writer, on_record)
        if done:
            break
    mean = ensemble_mean(state)
    summary = {
        "fiedler_accuracy": fiedler_acc,
        "eki_accuracy": records[-1].test_metric,
        "labeled_indices": subset.indices.tolist(),
        "labeled_labels": subset.labels.tolist(),
        "steps": n_steps,
        "laplacian": g["laplacian"],
    }
    return records, mean, summary


def _online_series(cfg, rng):
    d = cfg.data
    if d["dataset"] == "sine":
        n = int(d.get("length", 500))
        values = sine_series(
            n,
            period=float(d.get("period", 50.0)),
            amplitude=float(d.get("amplitude", 1.0)),
            noise=float(d.get("noise", 0.0)),
            rng=rng,
        )
        boundary = int(d.get("train_count", n))
    else:
        ds = load_series(cfg.data_path("path"), d.get("train_count"))
        values, boundary = ds.values, ds.boundary
    transform, _ = normalize_minmax(values[:boundary])
    return transform(values), boundary


def _run_online(cfg, rngs, clock, writer, on_record):
    data_rng, init_rng, train_rng = rngs
    model = cfg.model
    if not isinstance(model, RnnSpec) or model.input_dim != 1 or model.output_dim != 1:
        raise ValueError("online task needs a recurrent model with scalar input and output")
    z, boundary = _online_series(cfg, data_rng)
    x, y = one_step_split(z)
    n_train = boundary - 1
    if n_train < 1:
        raise ValueError("online task needs at least two training values")
    prior = xavier_prior(model)
    state = init_ensemble(prior, cfg.ensemble_size, init_rng, momentum=cfg.optimizer.uses_momentum)
    window = cfg.output["log_every"]
    hidden = None
    sq = np.empty(n_train)
    records = []
    for t in range(n_train):
        state, hidden, pred = online_step(
            state, (x[t : t + 1], y[t : t + 1]), model, cfg.loss, cfg.optimizer,
            hidden=hidden, prior=prior, rng=train_rng,
        )
        sq[t] = test_error(pred[None], y[t : t + 1][None])
        if (t + 1) % window == 0 or t + 1 == n_train:
            rec = MetricsRecord(
                step=t + 1,
                train_metric=float(np.mean(sq[: t + 1])),
                test_metric=float(np.mean(sq[max(0, t + 1 - window) : t + 1])),
                wall_time=clock(),
                ensemble_size=state.J,
                metric="mse",
            )
            _emit(records, rec, writer, on_record)
    mean = ensemble_mean(state)
    summary = {
        "steps": n_train,
        "first_window_mse": float(np.mean(sq[:window])),
        "final_window_mse": float(np.mean(sq[-window:])),
        "window": window,
    }
    if boundary < z.shape[0]:
        # Held-out tail: predict without updates, hidden state carried by the mean.
        preds = []
        for t in range(n_train, x.shape[0]):
            out, h = model.step(mean, hidden, x[t : t + 1][None])
            preds.append(out[0, 0])
            hidden = h[0]
        summary["heldout_mse"] = test_error(np.array(preds), y[n_train:][:, None])
    return records, mean, summary


_TASKS = {"supervised": _run_supervised, "semi-supervised": _run_ssl, "online": _run_online}


def run_experiment(cfg, out_dir=None, on_record=None):
    """Execute `cfg`; stream metrics to ``out_dir/<output.metrics>`` if `out_dir` is given.

    Returns
    -------
    RunResult
        Records, the final mean particle and a task-specific summary.
    """
    _verify(cfg)
    rngs = spawn_rngs(cfg.seed, 3)
    clock = _Clock(cfg.output["record_wall_time"])
    writer = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(Path(out_dir) / cfg.output["metrics"])
    try:
        records, mean, summary = _TASKS[cfg.task](cfg, rngs, clock, writer, on_record)
    finally:
        if writer is not None:
            writer.close()
    summary = {"name": cfg.name, "task": cfg.task, "seed": cfg.seed, **summary,
               "seconds": time.perf_counter() - clock.t0}
    return RunResult(records, mean, summary)

