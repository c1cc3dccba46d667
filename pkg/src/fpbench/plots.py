"""Convergence-trace figures, rendered to SVG next to the CSV output."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["plot_traces", "plot_train_report"]

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]


def plot_traces(traces, out_path, crossover=None, title=None):
    """Two-panel figure: residual vs iteration and residual vs wall-clock.

    Residual axes are logarithmic.  When a crossover report with a finite
    crossover time is supplied, the time panel marks it with a vertical line.
    """
    fig, (ax_it, ax_t) = plt.subplots(1, 2, figsize=(10, 4))
    for i, tr in enumerate(traces):
        color = _COLORS[i % len(_COLORS)]
        label = tr.label or f"trace {i + 1}"
        ax_it.semilogy(tr.iterations, tr.residuals, color=color, label=label)
        ax_t.semilogy(tr.times, tr.residuals, color=color, label=label)
    ax_it.set_xlabel("iteration")
    ax_it.set_ylabel("relative residual")
    ax_t.set_xlabel("wall-clock time [s]")
    ax_t.set_ylabel("relative residual")
    if crossover is not None and crossover.crossover_time_seconds is not None:
        t = crossover.crossover_time_seconds
        ax_t.axvline(t, color="gray", linestyle="--", linewidth=1)
        ax_t.annotate("crossover", xy=(t, ax_t.get_ylim()[1]),
                      xytext=(3, -12), textcoords="offset points",
                      fontsize=8, color="gray")
    for ax in (ax_it, ax_t):
        ax.legend()
        ax.grid(True, which="both", alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_train_report(reports, out_path, title=None):
    """Accuracy and loss curves for one or more training reports."""
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    for i, rep in enumerate(reports):
        color = _COLORS[i % len(_COLORS)]
        epochs = [r.epoch for r in rep.rows]
        ax_acc.plot(epochs, [r.train_accuracy for r in rep.rows],
                    color=color, label=f"{rep.solver_kind} train")
        ax_acc.plot(epochs, [r.test_accuracy for r in rep.rows],
                    color=color, linestyle="--", label=f"{rep.solver_kind} test")
        ax_loss.semilogy(epochs, [r.train_loss for r in rep.rows],
                         color=color, label=rep.solver_kind)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    for ax in (ax_acc, ax_loss):
        ax.legend()
        ax.grid(True, alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)
