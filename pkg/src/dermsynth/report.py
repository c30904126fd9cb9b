"""Result tables (delimited and human-readable) and figures."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .types import EvaluationReport


@dataclass
class ReportRow:
    label: str
    report: EvaluationReport
    # Rows sharing a group are compared with each other when flagging the best value.
    group: str = ""


@dataclass
class ReportTable:
    columns: list
    rows: list
    cells: list
    best: list = field(default_factory=list)

    def delimited(self, delimiter="\t") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(["experiment", "group", *self.columns, "best"])
        for row, cells, best in zip(self.rows, self.cells, self.best):
            flagged = [c for c, b in zip(self.columns, best) if b]
            w.writerow([row.label, row.group, *cells, ";".join(flagged)])
        return buf.getvalue()

    def human(self) -> str:
        shown = [[c + ("*" if b else " ") for c, b in zip(cells, best)] for cells, best in zip(self.cells, self.best)]
        label_w = max([len("Experiment")] + [len(r.label) for r in self.rows])
        widths = [max(len(h), *(len(s[i]) for s in shown)) for i, h in enumerate(self.columns)]
        lines = []
        head = "Experiment".ljust(label_w) + "  " + "  ".join(h.rjust(w) for h, w in zip(self.columns, widths))
        lines.append(head)
        lines.append("-" * len(head))
        group = None
        for row, cells in zip(self.rows, shown):
            if row.group and row.group != group:
                if group is not None:
                    lines.append("")
                lines.append(f"[{row.group}]")
                group = row.group
            lines.append(row.label.ljust(label_w) + "  " + "  ".join(c.rjust(w) for c, w in zip(cells, widths)))
        lines.append("* best in column" + (" within group" if any(r.group for r in self.rows) else ""))
        return "\n".join(lines)


def fmt(value: float) -> str:
    return f"{value:.3f}"


def render_report_table(rows) -> ReportTable:
    """Overall accuracy then per-class precision (classes alphabetical), 3 decimals, maxima flagged.

    Ties flag every maximum. Best values are compared on the rounded figures,
    so what is flagged matches what is printed.
    """
    rows = [r if isinstance(r, ReportRow) else ReportRow(*r) for r in rows]
    if not rows:
        raise ValidationError("no reports to render")
    classes = sorted(c.value for c in rows[0].report.classes)
    for r in rows[1:]:
        if sorted(c.value for c in r.report.classes) != classes:
            raise ValidationError(f"row {r.label!r} has a different class set")
    columns = ["accuracy", *classes]
    cells = []
    for r in rows:
        prec = {c.value: p for c, p in r.report.per_class_precision.items()}
        cells.append([fmt(r.report.overall_accuracy)] + [fmt(prec[c]) for c in classes])
    best = [[False] * len(columns) for _ in rows]
    groups = {}
    for i, r in enumerate(rows):
        groups.setdefault(r.group, []).append(i)
    for members in groups.values():
        for j in range(len(columns)):
            top = max(float(cells[i][j]) for i in members)
            for i in members:
                best[i][j] = float(cells[i][j]) == top
    return ReportTable(columns, rows, cells, best)


def write_table(table: ReportTable, out_dir, stem):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.tsv").write_text(table.delimited())
    (out_dir / f"{stem}.txt").write_text(table.human() + "\n")
    return out_dir / f"{stem}.tsv", out_dir / f"{stem}.txt"


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_precision(table: ReportTable, path, title=""):
    """Grouped bars of per-class precision, one bar per experiment."""
    import numpy as np

    plt = _pyplot()
    classes = table.columns[1:]
    n = len(table.rows)
    x = np.arange(len(classes))
    width = 0.8 / max(n, 1)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(classes) + 2), 3.8))
    for i, (row, cells) in enumerate(zip(table.rows, table.cells)):
        ax.bar(x + (i - (n - 1) / 2) * width, [float(c) for c in cells[1:]], width, label=row.label)
    ax.set_xticks(x, classes)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("precision")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, loc="upper left", bbox_to_anchor=(1.0, 1.0))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_confusion(report: EvaluationReport, path, title=""):
    plt = _pyplot()
    m = report.confusion_array()
    labels = [c.value for c in report.classes]
    fig, ax = plt.subplots(figsize=(1 + 0.6 * len(labels), 1 + 0.6 * len(labels)))
    ax.imshow(m, cmap="Blues")
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            ax.text(j, i, str(m[i, j]), ha="center", va="center", fontsize=7,
                    color="white" if m[i, j] > m.max() / 2 else "black")
    ax.set_xticks(range(len(labels)), labels, rotation=45)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_bundle(tables: dict, out_dir) -> dict:
    """Write every table as .tsv/.txt plus its precision chart and per-row confusion matrices.

    ``tables`` maps a file stem (e.g. "main_d7p") to a ReportTable. Returns the written paths.
    """
    out_dir = Path(out_dir)
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for stem, table in tables.items():
        tsv, txt = write_table(table, out_dir, stem)
        written[stem] = {"tsv": str(tsv), "txt": str(txt),
                         "precision_figure": str(plot_precision(table, fig_dir / f"{stem}_precision.png", stem))}
        conf = []
        for k, row in enumerate(table.rows):
            conf.append(str(plot_confusion(row.report, fig_dir / f"{stem}_confusion_{k}.png", row.label)))
        written[stem]["confusion_figures"] = conf
    return written
