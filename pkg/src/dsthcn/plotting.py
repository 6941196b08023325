"""Figures written next to the CSV reports (training curves, incidences, features)."""

from __future__ import annotations

import io

import numpy as np

from .data import atomic_write


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=110, bbox_inches="tight")
    atomic_write(path, buf.getvalue())


def plot_metrics(history, path):
    plt = _pyplot()
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.2))
    ax_loss.plot(epochs, [r.train_loss for r in history], color="C0")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="C0")
    ax_lr = ax_loss.twinx()
    ax_lr.plot(epochs, [r.lr for r in history], color="0.6", lw=1, ls="--")
    ax_lr.set_ylabel("learning rate", color="0.4")
    ax_acc.plot(epochs, [r.train_acc for r in history], label="train")
    ax_acc.plot(epochs, [r.val_acc for r in history], label="val")
    ax_acc.set_ylim(0, 1.02)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("top-1 accuracy")
    ax_acc.legend(frameon=False, loc="lower right")
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)


def plot_matrix(mat, path, title="", xlabel="", ylabel="", signed=False):
    plt = _pyplot()
    mat = np.asarray(mat)
    fig, ax = plt.subplots(figsize=(0.18 * mat.shape[1] + 2.5, 0.18 * mat.shape[0] + 1.5))
    if signed:
        lim = max(np.abs(mat).max(), 1e-12)
        im = ax.imshow(mat, cmap="RdBu_r", vmin=-lim, vmax=lim, aspect="auto")
    else:
        im = ax.imshow(mat, cmap="viridis", aspect="auto")
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title(title, fontsize=9)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    _save(fig, path)
    plt.close(fig)


def plot_feature(x, path, title=""):
    """Channel-mean activation of a ``C x T x V`` feature, time against joints."""
    plot_matrix(np.asarray(x).mean(axis=0), path, title, xlabel="joint", ylabel="frame")
