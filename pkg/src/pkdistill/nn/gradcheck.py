"""Finite-difference verification of the analytic backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .arch import ArchDescriptor, MaxPool2x2, ReLU
from .network import Network, init_params


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    per_tensor: tuple[float, ...]
    checked: int
    skipped: int

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "per_tensor": list(self.per_tensor),
            "checked": self.checked,
            "skipped": self.skipped,
        }


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def _pattern(net: Network, x) -> bytes:
    """ReLU on/off states and pooling winners; changes mark a non-smooth point."""
    net.forward(x, train=True)
    parts = []
    for layer, cache in zip(net.arch.layers, net._caches):
        if isinstance(layer, ReLU):
            parts.append(np.packbits(cache).tobytes())
        elif isinstance(layer, MaxPool2x2):
            xin, out = cache
            a, b, c, _ = L._windows(xin)
            winner = np.where(a == out, 0, np.where(b == out, 1, np.where(c == out, 2, 3)))
            parts.append(winner.astype(np.uint8).tobytes())
    net._caches = None
    return b"".join(parts)


def _loss(net: Network, x, labels) -> float:
    loss, _, _ = L.batch_cross_entropy(net.forward(x), labels)
    return loss


def grad_check(arch: ArchDescriptor, seed: int = 0, eps: float = 1e-4,
               samples_per_tensor: int = 24, batch: int = 1) -> GradCheckReport:
    """Compare backprop against central differences in float64.

    Parameters whose ``+-eps`` perturbation flips a ReLU or a pooling winner
    are skipped and counted in ``skipped``.
    """
    rng = np.random.default_rng(seed)
    params = init_params(arch, rng, dtype=np.float64)
    for i, p in enumerate(params):
        if p.ndim == 1:
            params[i] = rng.uniform(-0.1, 0.1, size=p.shape)
    h, w, c = arch.input
    x = rng.random((batch, c, h, w))
    labels = rng.integers(0, 2, size=batch)
    net = Network(arch, params)
    _, grads = net.loss_and_grads(x, labels)
    base = _pattern(net, x)

    per_tensor = []
    checked = skipped = 0
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        k = min(samples_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            if _pattern(net, x) != base:
                flat[j] = orig
                skipped += 1
                continue
            plus = _loss(net, x, labels)
            flat[j] = orig - eps
            if _pattern(net, x) != base:
                flat[j] = orig
                skipped += 1
                continue
            minus = _loss(net, x, labels)
            flat[j] = orig
            numeric = (plus - minus) / (2 * eps)
            worst = max(worst, rel_error(float(gflat[j]), numeric))
            checked += 1
        per_tensor.append(worst)
    return GradCheckReport(max(per_tensor, default=0.0), tuple(per_tensor), checked, skipped)
