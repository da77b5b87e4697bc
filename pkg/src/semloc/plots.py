"""Standalone SVG plot emission for the evaluation reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import AccuracyReport, IoUReport, RetrievalCurve


def plot_iou_histogram(report: IoUReport, path) -> None:
    counts, edges = report.histogram()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.bar(edges[:-1], counts, width=report.bin_width * 0.9, align="edge")
    ax.axvline(report.threshold, color="red", linestyle="--",
               label=f"threshold {report.threshold}")
    ax.set_xlabel("segment overlap IoU")
    ax.set_ylabel("pairs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_retrieval_curve(curve: RetrievalCurve, path) -> None:
    table = curve.bucket_table()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if table:
        xs = [b + curve.bucket_width / 2 for b, _, _ in table]
        ys = [mean_rank for _, mean_rank, _ in table]
        ax.plot(xs, ys, marker="o")
    ax.set_xlabel("observation completeness")
    ax.set_ylabel("mean retrieval rank")
    ax.set_xlim(0, 1)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_accuracy_curve(report: AccuracyReport, path) -> None:
    errs, cum = report.cumulative_curve()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if len(errs):
        ax.step(errs, cum, where="post")
    ax.set_xlabel("translation error [m]")
    ax.set_ylabel("cumulative localizations")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
