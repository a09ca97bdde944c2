"""Matplotlib figures rendered next to the report and CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .harness import RunReport  # noqa: E402


def _accuracy_figure(report: RunReport, path: Path) -> None:
    subtasks = list(report.per_subtask_accuracy)
    values = [report.per_subtask_accuracy[name] for name in subtasks]
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.bar(range(len(subtasks)), values, color="#4878a8")
    if report.macro_average is not None:
        ax.axhline(report.macro_average, color="#a84848", linestyle="--",
                   label=f"macro average {report.macro_average:.2f}")
        ax.legend(loc="lower right")
    ax.set_xticks(range(len(subtasks)))
    ax.set_xticklabels([name.replace("_", "\n") for name in subtasks], fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.set_title("Accuracy per subtask")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _reward_figure(trace_columns: dict[str, dict], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for instance_id, columns in sorted(trace_columns.items()):
        iterations = columns.get("iteration", [])
        best = columns.get("best_reward", [])
        if iterations:
            ax.plot(iterations, best, alpha=0.5, linewidth=1.2, label=instance_id)
    ax.set_xlabel("iteration")
    ax.set_ylabel("best reward")
    ax.set_title("Best-reward trajectories")
    if len(trace_columns) <= 12:
        ax.legend(fontsize=6, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report_figures(report: RunReport, trace_columns: dict[str, dict],
                          out_dir: str | Path) -> list[Path]:
    """Write the accuracy and reward-trajectory figures; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if report.per_subtask_accuracy:
        accuracy_path = out / "subtask_accuracy.png"
        _accuracy_figure(report, accuracy_path)
        written.append(accuracy_path)

    if any(columns.get("iteration") for columns in trace_columns.values()):
        reward_path = out / "reward_trajectories.png"
        _reward_figure(trace_columns, reward_path)
        written.append(reward_path)

    return written
