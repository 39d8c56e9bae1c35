"""Sequential network driven by an :class:`ArchDescriptor`."""
from __future__ import annotations

import numpy as np

from . import layers as L
from .arch import ArchDescriptor, Conv2D, Dense, Flatten, MaxPool2x2, ReLU

# samples per forward/backward sweep; larger chunks spill the im2col buffers out of cache
CHUNK = 16


def init_params(arch: ArchDescriptor, rng: np.random.Generator, dtype=np.float32) -> list[np.ndarray]:
    """He-uniform weights, zero biases, drawn in descriptor order."""
    params = []
    for shape in arch.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=dtype))
        else:
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-limit, limit, size=shape).astype(dtype))
    return params


class Network:
    """Forward/backward over a batch of channels-first patches ``(B, C, H, W)``."""

    def __init__(self, arch: ArchDescriptor, params: list[np.ndarray]):
        arch.validate()
        expected = arch.param_shapes()
        if len(params) != len(expected):
            raise L.ShapeError(f"expected {len(expected)} parameter tensors, got {len(params)}")
        for i, (p, shape) in enumerate(zip(params, expected)):
            if p.shape != shape:
                raise L.ShapeError(f"parameter {i} has shape {p.shape}, architecture needs {shape}")
        self.arch = arch
        self.params = params
        self._caches: list | None = None

    def _check_input(self, x):
        h, w, c = self.arch.input
        if x.ndim != 4 or x.shape[1:] != (c, h, w):
            raise L.ShapeError(f"input batch must be (B, {c}, {h}, {w}), got {x.shape}")

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        """Logits ``(B, 2)``. With ``train`` the activations needed by backward are kept."""
        self._check_input(x)
        a = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        caches = []
        pi = 0
        first_conv = True
        for layer in self.arch.layers:
            if isinstance(layer, Conv2D):
                a, cache = L.conv_forward(a, self.params[pi], self.params[pi + 1], layer.stride, layer.padding)
                caches.append((cache, first_conv))
                first_conv = False
                pi += 2
            elif isinstance(layer, ReLU):
                a, mask = L.relu_forward(a)
                caches.append(mask)
            elif isinstance(layer, MaxPool2x2):
                a, cache = L.maxpool_forward(a)
                caches.append(cache)
            elif isinstance(layer, Flatten):
                caches.append(a.shape)
                if a.ndim == 4:
                    a = a.transpose(0, 3, 1, 2)
                a = a.reshape(a.shape[0], -1)
            elif isinstance(layer, Dense):
                a, cache = L.dense_forward(a, self.params[pi], self.params[pi + 1])
                caches.append(cache)
                pi += 2
        self._caches = caches if train else None
        return a

    def backward(self, grad_logits: np.ndarray, input_grad: bool = False):
        """Parameter gradients for the last ``forward(train=True)`` call.

        Returns the gradient list, plus the input gradient when ``input_grad``.
        """
        if self._caches is None:
            raise RuntimeError("backward called without a preceding forward(train=True)")
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        pi = len(self.params)
        g = grad_logits
        for layer, cache in zip(reversed(self.arch.layers), reversed(self._caches)):
            if isinstance(layer, Dense):
                pi -= 2
                g, grads[pi], grads[pi + 1] = L.dense_backward(g, cache)
            elif isinstance(layer, Flatten):
                shape = cache
                if len(shape) == 4:
                    b, h, w, c = shape
                    g = g.reshape(b, c, h, w).transpose(0, 2, 3, 1)
                else:
                    g = g.reshape(shape)
            elif isinstance(layer, ReLU):
                g = L.relu_backward(g, cache)
            elif isinstance(layer, MaxPool2x2):
                g = L.maxpool_backward(g, cache)
            elif isinstance(layer, Conv2D):
                pi -= 2
                conv_cache, is_first = cache
                g, grads[pi], grads[pi + 1] = L.conv_backward(g, conv_cache, need_input_grad=input_grad or not is_first)
        self._caches = None
        if input_grad:
            return grads, g.transpose(0, 3, 1, 2)
        return grads

    def loss_and_grads(self, x, labels, chunk: int = CHUNK):
        """Mean cross-entropy over the batch and its parameter gradients.

        The batch is processed in chunks of ``chunk`` samples whose gradients
        are summed; small chunks keep the im2col buffers cache-resident.
        """
        n = len(x)
        total = 0.0
        grads = None
        for s in range(0, n, chunk):
            xs, ys = x[s:s + chunk], labels[s:s + chunk]
            logits = self.forward(xs, train=True)
            loss, _, g = L.batch_cross_entropy(logits, ys)
            g *= len(ys) / n
            part = self.backward(g.astype(logits.dtype, copy=False))
            total += loss * len(ys)
            if grads is None:
                grads = part
            else:
                for acc, p in zip(grads, part):
                    acc += p
        return total / n, grads

    def predict_proba(self, x: np.ndarray, batch_size: int = CHUNK) -> np.ndarray:
        """Posteriors ``(B, 2)``; rows sum to one."""
        self._check_input(x)
        out = np.empty((len(x), self.arch.shapes()[-1][0]), dtype=np.float64)
        for s in range(0, len(x), batch_size):
            out[s:s + batch_size] = L.softmax(self.forward(x[s:s + batch_size]).astype(np.float64))
        return out


def forward(checkpoint, patches: np.ndarray, batch_size: int = CHUNK) -> np.ndarray:
    """Posteriors of one checkpoint over a batch of channels-first patches."""
    return Network(checkpoint.arch, checkpoint.params).predict_proba(patches, batch_size)
