"""Figure rendering for run and grid directories.

Reads the delimited logs a run leaves behind and writes PNG figures next
to them (or into a separate directory when asked).
"""

from __future__ import annotations

import json
import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402


def _read_jsonl(path: str) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _read_csv(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().strip().split("\n")
    return [line.split(",") for line in lines[1:] if line]


def _save(fig, out_dir: str, name: str, written: list):
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    written.append(path)


def render_run(run_dir: str, out_dir: str | None = None) -> list:
    """Error, loss, weight-trajectory, and cosine figures for one run."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    written = []

    records = [r for r in _read_jsonl(os.path.join(run_dir, "metrics.jsonl"))
               if "epoch" in r]
    epochs = [r["epoch"] for r in records]

    weight_rows = _read_csv(os.path.join(run_dir, "weights.csv"))
    path_ids = []
    for row in weight_rows:
        if row[1] not in path_ids:
            path_ids.append(row[1])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["top1_err"] for r in records], label="top1 error")
    if records and records[0]["top1_agreement_err"] is not None:
        ax.plot(epochs, [r["top1_agreement_err"] for r in records],
                label="top1 agreement error")
    ax.set_xlabel("epoch")
    ax.set_ylabel("error (%)")
    ax.legend()
    ax.set_title(os.path.basename(os.path.abspath(run_dir)))
    _save(fig, out_dir, "errors.png", written)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["main_loss"] for r in records], label="main")
    for k, pid in enumerate(path_ids):
        series = [r["per_path_losses"][k] for r in records
                  if k < len(r["per_path_losses"])]
        if series:
            ax.plot(epochs[:len(series)], series, label=pid)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend()
    _save(fig, out_dir, "losses.png", written)

    if weight_rows:
        by_path = defaultdict(lambda: ([], []))
        for row in weight_rows:
            by_path[row[1]][0].append(int(row[0]))
            by_path[row[1]][1].append(float(row[2]))
        fig, ax = plt.subplots(figsize=(6, 4))
        for pid in path_ids:
            iters, vs = by_path[pid]
            ax.plot(iters, vs, label=pid)
        ax.set_xlabel("iteration")
        ax.set_ylabel("path weight v")
        ax.legend()
        _save(fig, out_dir, "weights.png", written)

    cosine_rows = _read_csv(os.path.join(run_dir, "cosine.csv"))
    if cosine_rows:
        by_pair = defaultdict(lambda: ([], []))
        for row in cosine_rows:
            by_pair[row[1]][0].append(int(row[0]))
            by_pair[row[1]][1].append(float(row[2]))
        fig, ax = plt.subplots(figsize=(6, 4))
        for pair, (iters, cos) in by_pair.items():
            ax.plot(iters, cos, label=pair)
        ax.axhline(0.0, color="gray", linewidth=0.5)
        ax.set_xlabel("iteration")
        ax.set_ylabel("gradient cosine")
        ax.set_ylim(-1.05, 1.05)
        ax.legend()
        _save(fig, out_dir, "cosines.png", written)

    return written


def render_grid(grid_dir: str, out_dir: str | None = None) -> list:
    """Strategy comparison bars from a grid's results.csv."""
    out_dir = out_dir or grid_dir
    os.makedirs(out_dir, exist_ok=True)
    written = []
    rows = _read_csv(os.path.join(grid_dir, "results.csv"))
    errs = defaultdict(list)
    agrs = defaultdict(list)
    order = []
    for strategy, _seed, err, agr in rows:
        if strategy not in order:
            order.append(strategy)
        errs[strategy].append(float(err))
        if agr:
            agrs[strategy].append(float(agr))

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    x = np.arange(len(order))
    axes[0].bar(x, [float(np.mean(errs[s])) for s in order])
    axes[0].set_xticks(x)
    axes[0].set_xticklabels(order, rotation=30, ha="right")
    axes[0].set_ylabel("mean val top1 error (%)")
    with_agr = [s for s in order if agrs[s]]
    xa = np.arange(len(with_agr))
    axes[1].bar(xa, [float(np.mean(agrs[s])) for s in with_agr])
    axes[1].set_xticks(xa)
    axes[1].set_xticklabels(with_agr, rotation=30, ha="right")
    axes[1].set_ylabel("mean top1 agreement error (%)")
    fig.suptitle(os.path.basename(os.path.abspath(grid_dir)))
    _save(fig, out_dir, "results.png", written)
    return written


def render(path: str, out_dir: str | None = None) -> list:
    """Dispatch on directory contents: grid (results.csv) or run (metrics)."""
    if os.path.isfile(os.path.join(path, "results.csv")):
        return render_grid(path, out_dir)
    if os.path.isfile(os.path.join(path, "metrics.jsonl")):
        return render_run(path, out_dir)
    raise ValueError(f"{path} has neither results.csv nor metrics.jsonl")
