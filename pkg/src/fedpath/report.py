"""Human-readable tables, convergence CSV and figures from run directories."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .federation import read_history
from .imaging import GRADES, MAGNIFICATIONS


def load_run(run_dir) -> dict:
    run_dir = Path(run_dir)
    path = run_dir / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; train the run first")
    rep = json.loads(path.read_text())
    rep["_history"] = read_history(run_dir) if (run_dir / "history.csv").exists() else rep.get("history", [])
    return rep


def _pct(x) -> str:
    return "n/a" if x is None else f"{100.0 * x:.1f}%"


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(c)) for c in col) for col in zip(header, *rows)]
    line = lambda cells: "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"  # noqa: E731
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), sep] + [line(r) for r in rows])


def overall_table(rep: dict) -> str:
    t = rep["test"] or {}
    rows = [["Accuracy", _pct(t.get("accuracy"))],
            ["Macro F1-score", _pct(t.get("macro_f1"))],
            ["Weighted F1-score", _pct(t.get("weighted_f1"))],
            ["Best validation accuracy", f"{_pct(rep.get('best_val_accuracy'))} (round {rep.get('best_round')})"],
            ["Test samples", str(t.get("n_samples", 0))]]
    return _table(["Metric", "Value"], rows)


def comparison_table(fed: dict, central: dict | None) -> str:
    rows = []
    for name, rep in (("Federated (FedProx + FedAvg)", fed), ("Centralized", central)):
        if rep is None:
            continue
        t = rep["test"] or {}
        rows.append([name, _pct(t.get("accuracy")), _pct(t.get("macro_f1")), _pct(t.get("weighted_f1")),
                     str(rep.get("best_round"))])
    if central is not None and fed["test"] and central["test"]:
        gap = 100.0 * (fed["test"]["accuracy"] - central["test"]["accuracy"])
        rows.append(["Difference (fed - central)", f"{gap:+.1f} pts", "", "", ""])
    return _table(["Setting", "Accuracy", "Macro F1", "Weighted F1", "Best round"], rows)


def grade_table(rep: dict) -> str:
    t = rep["test"] or {"per_grade": []}
    rows = []
    for g in t["per_grade"]:
        flag = f" (undefined: {', '.join(g['undefined'])})" if g.get("undefined") else ""
        rows.append([f"Grade {g['grade']}", _pct(g["precision"]), _pct(g["recall"]), _pct(g["f1"]) + flag,
                     str(g["support"])])
    return _table(["Grade", "Precision", "Recall", "F1-score", "Support"], rows)


def magnification_table(rep: dict) -> str:
    acc = (rep["test"] or {}).get("per_magnification_accuracy", {})
    rows = [[m.replace("x", "×"), _pct(acc[m])] for m in MAGNIFICATIONS if m in acc]
    return _table(["Magnification", "Accuracy"], rows)


def render_tables(fed: dict, central: dict | None = None) -> str:
    parts = ["## Overall test performance", overall_table(fed)]
    parts += ["## Federated vs centralized", comparison_table(fed, central)]
    parts += ["## Grade-wise performance", grade_table(fed)]
    parts += ["## Accuracy by magnification", magnification_table(fed)]
    return "\n\n".join(parts) + "\n"


def write_convergence_csv(path, fed: dict, central: dict | None = None) -> None:
    """One row per round; centralized columns are empty when no baseline is given."""
    f_rows = {r["round"]: r for r in fed["_history"]}
    c_rows = {r["round"]: r for r in central["_history"]} if central else {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "fed_train_loss", "fed_val_accuracy", "fed_best_round",
                    "central_train_loss", "central_val_accuracy", "central_best_round"])
        for r in sorted(set(f_rows) | set(c_rows)):
            f, c = f_rows.get(r, {}), c_rows.get(r, {})
            fmt = lambda v: "" if v is None or (isinstance(v, float) and np.isnan(v)) else (  # noqa: E731
                f"{v:.6f}" if isinstance(v, float) else str(v))
            w.writerow([r, fmt(f.get("train_loss_mean")), fmt(f.get("val_accuracy")), fmt(f.get("best_round")),
                        fmt(c.get("train_loss_mean")), fmt(c.get("val_accuracy")), fmt(c.get("best_round"))])


# ---------------------------------------------------------------------------
# figures


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_convergence(path, fed: dict, central: dict | None = None) -> None:
    plt = _plt()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for rep, name, style in ((fed, "federated", "-o"), (central, "centralized", "--s")):
        if rep is None:
            continue
        h = rep["_history"]
        rounds = [r["round"] for r in h]
        ax1.plot(rounds, [r["val_accuracy"] for r in h], style, label=name, markersize=4)
        ax2.plot(rounds[1:], [r["train_loss_mean"] for r in h][1:], style, label=name, markersize=4)
        best = rep.get("best_round")
        if best is not None:
            acc = next((r["val_accuracy"] for r in h if r["round"] == best), None)
            if acc is not None:
                ax1.scatter([best], [acc], s=80, facecolors="none", edgecolors="k")
    ax1.set(xlabel="round", ylabel="validation accuracy", title="Validation accuracy", ylim=(0, 1.02))
    ax2.set(xlabel="round", ylabel="mean training loss", title="Training loss")
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(path, rep: dict) -> None:
    plt = _plt()
    cm = np.asarray(rep["test"]["confusion"])
    fig, ax = plt.subplots(figsize=(4.2, 4))
    ax.imshow(cm, cmap="Blues")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                    color="white" if cm[i, j] > cm.max() / 2 else "black", fontweight="bold" if i == j else None)
    labels = [f"Grade {g}" for g in GRADES]
    ax.set(xticks=range(3), yticks=range(3), xticklabels=labels, yticklabels=labels,
           xlabel="predicted", ylabel="true", title="Confusion matrix (test)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_grades(path, rep: dict) -> None:
    plt = _plt()
    pg = rep["test"]["per_grade"]
    x = np.arange(len(pg))
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, name in enumerate(("precision", "recall", "f1")):
        ax.bar(x + (k - 1) * 0.27, [g[name] for g in pg], width=0.27, label=name)
    ax.set(xticks=x, xticklabels=[f"Grade {g['grade']}" for g in pg], ylim=(0, 1.05),
           title="Grade-wise performance (test)")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_magnification(path, rep: dict) -> None:
    plt = _plt()
    acc = rep["test"]["per_magnification_accuracy"]
    levels = [m for m in MAGNIFICATIONS if m in acc]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(levels, [acc[m] for m in levels], color="tab:purple")
    ax.set(ylim=(0, 1.05), xlabel="magnification", ylabel="accuracy", title="Accuracy by magnification (test)")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_report(run_dir, baseline_dir=None, out_dir=None, figures: bool = True) -> dict:
    """Write tables, convergence CSV and figures; returns the paths written plus the table text."""
    fed = load_run(run_dir)
    central = load_run(baseline_dir) if baseline_dir else None
    out = Path(out_dir) if out_dir else Path(run_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    tables = render_tables(fed, central)
    (out / "tables.md").write_text(tables)
    write_convergence_csv(out / "convergence.csv", fed, central)
    written = {"tables": str(out / "tables.md"), "convergence_csv": str(out / "convergence.csv")}
    if figures:
        plot_convergence(out / "convergence.png", fed, central)
        written["convergence_png"] = str(out / "convergence.png")
        if fed.get("test"):
            plot_confusion(out / "confusion.png", fed)
            plot_grades(out / "grades.png", fed)
            plot_magnification(out / "magnification.png", fed)
            written.update(confusion_png=str(out / "confusion.png"), grades_png=str(out / "grades.png"),
                           magnification_png=str(out / "magnification.png"))
    return {"files": written, "tables": tables}
