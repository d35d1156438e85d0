"""Tables and plots from a metrics stream."""

from pathlib import Path

from .metrics import write_metrics_csv

__all__ = ["emit_report"]


def _plot_png(path, steps, series, ylabel):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, values in series.items():
        ax.plot(steps, values, marker="o", markersize=3, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if ylabel == "mse":
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(records, out_dir, plots=False, prefix="metrics"):
    """Write ``<prefix>.csv`` plus one plot (PNG) or plot-ready ``.dat`` file per metric.

    PNG output needs matplotlib and ``plots=True``; otherwise whitespace
    separated ``step value`` files are written.

    Returns
    -------
    list of Path
        Every file written.
    """
    records = list(records)
    if not records:
        raise ValueError("metrics stream is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = out / f"{prefix}.csv"
    write_metrics_csv(table, records)
    written = [table]
    steps = [r.step for r in records]
    metric = records[0].metric
    series = {
        f"train_{metric}": [r.train_metric for r in records],
        f"test_{metric}": [r.test_metric for r in records],
    }
    if plots:
        path = out / f"{prefix}_{metric}.png"
        _plot_png(path, steps, series, metric)
        written.append(path)
    else:
        for label, values in series.items():
            path = out / f"{prefix}_{label}.dat"
            path.write_text("".join(f"{s} {v!r}\n" for s, v in zip(steps, values)))
            written.append(path)
    return written
