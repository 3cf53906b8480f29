"""Comparison tables and static plots."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

@dataclass
class Table:
    title: str
    columns: list
    rows: list = field(default_factory=list)     # (label, values...) tuples
    notes: list = field(default_factory=list)

    def add(self, label: str, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"row {label!r} has {len(values)} values for {len(self.columns)} columns")
        self.rows.append((label,) + tuple(values))

    def column(self, name: str) -> dict:
        j = self.columns.index(name) + 1
        return {r[0]: r[j] for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant"] + list(self.columns))
        for r in self.rows:
            w.writerow([r[0]] + [_fmt(v) for v in r[1:]])
        return buf.getvalue()

    def to_text(self) -> str:
        head = ["variant"] + list(self.columns)
        body = [[r[0]] + [_fmt(v) for v in r[1:]] for r in self.rows]
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        line = lambda cells: "  ".join(str(c).ljust(w) for c, w in zip(cells, widths))
        out = [self.title, line(head), line(["-" * w for w in widths])]
        out += [line(b) for b in body]
        out += [f"note: {n}" for n in self.notes]
        return "\n".join(out) + "\n"

    def to_dict(self) -> dict:
        return {"title": self.title, "columns": self.columns, "rows": [list(r) for r in self.rows],
                "notes": self.notes}

    def save(self, out_dir: str | Path, stem: str) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / f"{stem}.csv", out / f"{stem}.txt"]
        paths[0].write_text(self.to_csv())
        paths[1].write_text(self.to_text())
        return paths


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_curve(xs: Sequence[float], ys: Sequence[float], errs: Sequence[float] | None, path: str | Path,
               xlabel: str = "domain weight", ylabel: str = "success rate", title: str = "") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_ylim(-0.02, 1.02)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def plot_rollouts(results: Sequence, path: str | Path, box: float | None = None, title: str = "") -> Path:
    """Executed tool paths with start (circle) and object (square) markers."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for r in results:
        color = "tab:green" if r.success else "tab:red"
        ax.plot(r.poses[:, 0], r.poses[:, 1], color=color, lw=1)
        ax.plot(*r.scene.tool, "o", color=color, ms=3)
        ax.plot(*r.scene.obj, "s", color="k", ms=4)
    if box is not None:
        ax.add_patch(plt.Rectangle((-box, -box), 2 * box, 2 * box, fill=False, ls="--", color="gray"))
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)

