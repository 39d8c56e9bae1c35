"""Mini-batch Adam training with best-on-validation model selection."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..labels import predict
from .adam import AdamHyper, AdamState, adam_step
from .arch import ArchDescriptor
from .network import Network

log = logging.getLogger(__name__)

EPOCHS = 20


@dataclass
class FitResult:
    params: list[np.ndarray]
    adam_state: AdamState
    best_epoch: int
    val_history: list[float]
    loss_history: list[float]
    val_loss_history: list[float]

    @property
    def best_val_acc(self) -> float:
        return self.val_history[self.best_epoch - 1]


def accuracy_of(arch: ArchDescriptor, params, x, y) -> float:
    post = Network(arch, params).predict_proba(x)
    return float(np.mean(predict(post) == y))


def _val_scores(arch, params, x, y) -> tuple[float, float]:
    post = Network(arch, params).predict_proba(x)
    acc = float(np.mean(predict(post) == y))
    nll = float(-np.mean(np.log(np.maximum(post[np.arange(len(y)), y], 1e-300))))
    return acc, nll


def fit(arch: ArchDescriptor, params, train_x, train_y, val_x, val_y,
        hyper: AdamHyper, rng: np.random.Generator, epochs: int = EPOCHS,
        trainable=None, tie_break: str = "earliest") -> FitResult:
    """Train for exactly ``epochs`` epochs and return the best-validation epoch.

    Each epoch draws a fresh permutation from ``rng``; the last short batch is
    kept. Ties in validation accuracy go to the earliest epoch, or with
    ``tie_break="val_loss"`` to the lowest validation cross-entropy first.
    """
    if tie_break not in ("earliest", "val_loss"):
        raise ValueError(f"tie_break must be 'earliest' or 'val_loss', got {tie_break!r}")
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if len(val_x) == 0:
        raise ValueError("empty validation set")
    if len(train_x) != len(train_y) or len(val_x) != len(val_y):
        raise ValueError("patches and labels differ in length")
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if train_y.min() < 0 or val_y.min() < 0:
        raise ValueError("training and validation labels must be known (0 or 1)")

    params = [p.copy() for p in params]
    state = AdamState.zeros_like(params)
    net = Network(arch, params)
    best = None
    val_hist, loss_hist, nll_hist = [], [], []
    n = len(train_x)
    bs = hyper.batch_size
    frozen = trainable is not None and not any(trainable)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            loss, grads = net.loss_and_grads(train_x[idx], train_y[idx])
            total += loss * len(idx)
            if not frozen:
                net.params, state = adam_step(net.params, grads, state, hyper, trainable)
        loss_hist.append(total / n)
        acc, nll = _val_scores(arch, net.params, val_x, val_y)
        val_hist.append(acc)
        nll_hist.append(nll)
        log.debug("epoch %d loss %.4f val %.4f", epoch, loss_hist[-1], acc)
        if best is None:
            better = True
        else:
            b = best[0] - 1
            better = acc > val_hist[b] or (tie_break == "val_loss" and acc == val_hist[b] and nll < nll_hist[b])
        if better:
            best = (epoch, [p.copy() for p in net.params], state.copy())
    epoch, best_params, best_state = best
    return FitResult(best_params, best_state, epoch, val_hist, loss_hist, nll_hist)
