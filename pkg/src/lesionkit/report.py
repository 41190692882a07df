"""Delimited score reports and the matplotlib figures that accompany them."""
from __future__ import annotations

import csv
import io
import json
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imgcore import ATTRIBUTES, CLASSES  # noqa: E402

# fixed metadata keeps figure bytes identical between runs
_PNG_META = {"Software": None}


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class Report:
    """Ordered table of rows written as CSV or JSON lines."""

    def __init__(self, command: str, columns, fmt: str = "csv", banner: bool = True):
        if fmt not in ("csv", "jsonl"):
            raise ValueError(f"unknown report format {fmt!r}")
        self.command = command
        self.columns = list(columns)
        self.fmt = fmt
        self.banner = banner
        self.rows: list[dict] = []

    def add(self, **row):
        self.rows.append(row)

    def render(self) -> str:
        lines = []
        if self.banner:
            stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
            lines.append(f"# lesionkit {self.command} {stamp}")
        if self.fmt == "csv":
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([_cell(row.get(c)) for c in self.columns])
            lines.append(buf.getvalue().rstrip("\n"))
        else:
            for row in self.rows:
                lines.append(json.dumps({c: row.get(c) for c in self.columns}))
        return "\n".join(lines) + "\n"

    def write(self, dest=None):
        text = self.render()
        if dest is None:
            sys.stdout.write(text)
        else:
            Path(dest).write_text(text)


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_jaccard_histogram(raw, threshold, path):
    """Per-image raw Jaccard distribution with the zeroing cutoff marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(raw, bins=np.linspace(0.0, 1.0, 21), color="0.6", edgecolor="k")
    ax.axvline(threshold, color="tab:red", linestyle="--", label=f"cutoff {threshold:g}")
    ax.set_xlabel("Jaccard index")
    ax.set_ylabel("images")
    below = sum(1 for v in raw if v < threshold)
    ax.set_title(f"{len(raw)} images, {below} scored 0")
    ax.legend(loc="upper left")
    fig.tight_layout()
    _save(fig, path)


def plot_attribute_scores(means, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [a.replace("_", " ") for a in ATTRIBUTES]
    ax.bar(range(len(means)), means, color="0.6", edgecolor="k")
    ax.set_xticks(range(len(means)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean Jaccard")
    fig.tight_layout()
    _save(fig, path)


def plot_confusion(counts, path):
    counts = np.asarray(counts)
    support = counts.sum(axis=1, keepdims=True)
    frac = np.divide(counts, support, out=np.zeros(counts.shape), where=support > 0)
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(frac, vmin=0, vmax=1, cmap="Greys")
    ax.set_xticks(range(len(CLASSES)))
    ax.set_yticks(range(len(CLASSES)))
    ax.set_xticklabels(CLASSES)
    ax.set_yticklabels(CLASSES)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(CLASSES)):
        for j in range(len(CLASSES)):
            if counts[i, j]:
                ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                        color="w" if frac[i, j] > 0.5 else "k", fontsize=8)
    fig.colorbar(im, ax=ax, label="row fraction")
    fig.tight_layout()
    _save(fig, path)
