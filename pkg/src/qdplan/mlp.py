"""Flat-parameter tanh MLPs in numpy: forward, backward and initialization.

Parameters are one flat float64 vector laid out layer by layer as the
row-major ``(in, out)`` weight matrix followed by the ``out`` bias vector.
Hidden layers use tanh; the output layer is linear.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

Shapes = tuple[tuple[int, int], ...]


def shapes_for(sizes: Sequence[int]) -> Shapes:
    return tuple((int(a), int(b)) for a, b in zip(sizes[:-1], sizes[1:]))


def n_params(shapes: Shapes) -> int:
    return sum(i * o + o for i, o in shapes)


def unpack(flat: np.ndarray, shapes: Shapes) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    k = 0
    for i, o in shapes:
        w = flat[k : k + i * o].reshape(i, o)
        k += i * o
        b = flat[k : k + o]
        k += o
        layers.append((w, b))
    return layers


def forward(flat: np.ndarray, shapes: Shapes, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns the output and the list of layer inputs needed by :func:`backward`."""
    layers = unpack(flat, shapes)
    acts = [x]
    h = x
    last = len(layers) - 1
    for n, (w, b) in enumerate(layers):
        h = h @ w + b
        if n < last:
            h = np.tanh(h)
        acts.append(h)
    return h, acts


def backward(flat: np.ndarray, shapes: Shapes, acts: list[np.ndarray], grad_out: np.ndarray) -> np.ndarray:
    layers = unpack(flat, shapes)
    grads = []
    g = grad_out
    for n in range(len(layers) - 1, -1, -1):
        w, _ = layers[n]
        inp = acts[n]
        grads.append((inp.T @ g, g.sum(axis=0)))
        if n > 0:
            g = (g @ w.T) * (1.0 - acts[n] ** 2)
    out = np.empty_like(flat)
    k = 0
    for gw, gb in reversed(grads):
        out[k : k + gw.size] = gw.ravel()
        k += gw.size
        out[k : k + gb.size] = gb
        k += gb.size
    return out


def forward_many(flats: np.ndarray, shapes: Shapes, x: np.ndarray) -> np.ndarray:
    """Forward pass where row ``b`` of ``x`` goes through the network ``flats[b]``."""
    k = 0
    h = x
    last = len(shapes) - 1
    for n, (i, o) in enumerate(shapes):
        w = flats[:, k : k + i * o].reshape(-1, i, o)
        k += i * o
        b = flats[:, k : k + o]
        k += o
        h = np.einsum("bi,bio->bo", h, w) + b
        if n < last:
            h = np.tanh(h)
    return h


def orthogonal(shape: tuple[int, int], gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(shapes: Shapes, rng: np.random.Generator, hidden_gain: float = np.sqrt(2.0), out_gain: float = 1.0) -> np.ndarray:
    parts = []
    for n, (i, o) in enumerate(shapes):
        gain = out_gain if n == len(shapes) - 1 else hidden_gain
        parts.append(orthogonal((i, o), gain, rng).ravel())
        parts.append(np.zeros(o))
    return np.concatenate(parts)
