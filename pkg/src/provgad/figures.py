"""Figure rendering for detection reports.

Figures land next to the JSON/CSV report: a score histogram (split by label
when labels are present) and, when both classes appear, an ROC curve.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_report_figures(report: dict, base: str) -> list[str]:
    written: list[str] = []
    targets = report["targets"]
    if not targets:
        return written
    scores = np.array([t["score"] for t in targets])
    labels = [t.get("label") for t in targets]
    have_labels = all(l is not None for l in labels)

    path = base + "_scores.png"
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = min(50, max(10, len(scores) // 10))
    if have_labels:
        benign = scores[[l == "benign" for l in labels]]
        malicious = scores[[l == "malicious" for l in labels]]
        ax.hist(benign, bins=bins, alpha=0.65, label="benign", color="tab:blue")
        if len(malicious):
            ax.hist(malicious, bins=bins, alpha=0.65, label="malicious", color="tab:red")
        ax.legend()
    else:
        ax.hist(scores, bins=bins, color="tab:blue")
    theta = report.get("theta")
    if theta is not None:
        ax.axvline(theta, color="k", linestyle="--", linewidth=1, label="threshold")
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("targets")
    ax.set_title("anomaly score distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    if have_labels:
        y = np.array([l == "malicious" for l in labels])
        if 0 < y.sum() < len(y):
            written.append(_render_roc(y, scores, base + "_roc.png"))
    return written


def _render_roc(y: np.ndarray, scores: np.ndarray, path: str) -> str:
    order = np.argsort(-scores, kind="mergesort")
    ys = y[order]
    tps = np.cumsum(ys)
    fps = np.cumsum(~ys)
    tpr = np.concatenate([[0.0], tps / ys.sum()])
    fpr = np.concatenate([[0.0], fps / (~ys).sum()])
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(fpr, tpr, color="tab:red")
    ax.plot([0, 1], [0, 1], color="gray", linestyle=":", linewidth=1)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
