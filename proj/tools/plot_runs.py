#!/usr/bin/env python3
"""Render reference figures from `lisa_cli plot-data` output.

    lisa_cli plot-data runs/desk/full runs/desk/lisa runs/desk/lora --out runs/desk/plot
    python3 tools/plot_runs.py runs/desk/plot

Writes loss.png (training loss per run) and norms.png (mean weight norm per
layer group, one bar series per run) next to the CSVs.
"""

import argparse
import csv
import pathlib

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_table(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def series(rows, column):
    xs, ys = [], []
    for row in rows:
        if column < len(row) and row[column] != "":
            xs.append(float(row[0]))
            ys.append(float(row[column]))
    return xs, ys


def plot_loss(directory):
    header, rows = read_table(directory / "loss.csv")
    fig, ax = plt.subplots(figsize=(6, 4))
    for c, name in enumerate(header[1:], start=1):
        xs, ys = series(rows, c)
        ax.plot(xs, ys, label=name.removeprefix("loss_"))
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(directory / "loss.png", dpi=150)


def plot_norms(directory):
    header, rows = read_table(directory / "norms.csv")
    runs = header[2:]
    labels = [row[1] for row in rows]
    width = 0.8 / max(len(runs), 1)
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(labels)), 4))
    for k, name in enumerate(runs):
        heights = [float(row[2 + k]) if row[2 + k] else 0.0 for row in rows]
        ax.bar([i + k * width for i in range(len(rows))], heights, width, label=name.removeprefix("norm_"))
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(rows))])
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("mean weight norm")
    ax.legend()
    fig.tight_layout()
    fig.savefig(directory / "norms.png", dpi=150)


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("directory", type=pathlib.Path, help="plot-data output directory")
    args = parser.parse_args()
    plot_loss(args.directory)
    plot_norms(args.directory)


if __name__ == "__main__":
    main()
