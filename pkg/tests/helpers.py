"""Shared test oracles, implemented independently of the package code.

The gradient oracle is plain central differencing; the transform oracle
builds the full DFT matrix elementwise from the defining double sum.
Both are deliberately slow and simple so they cannot share a bug with
the implementations under test.
"""

from __future__ import annotations

import numpy as np


def fd_grad(f, tensors, h: float = 1e-6):
    """Central-difference gradient of the scalar ``f()`` wrt each tensor.

    ``f`` must recompute the forward pass from the tensors' current
    ``data`` buffers and return a python float. Buffers are perturbed in
    place and restored exactly.
    """
    grads = []
    for t in tensors:
        grad = np.zeros_like(t.data)
        flat = t.data.ravel()
        gflat = grad.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fplus = f()
            flat[i] = orig - h
            fminus = f()
            flat[i] = orig
            gflat[i] = (fplus - fminus) / (2.0 * h)
        grads.append(grad)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise error |a-b| / max(1, |a|, |b|).

    The unit floor in the denominator keeps finite-difference roundoff
    (absolute noise ~1e-10 at h=1e-6) from exploding the ratio for
    near-zero gradient entries.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def dft2_reference(x: np.ndarray) -> np.ndarray:
    """Two-dimensional DFT straight from the defining double sum.

    Builds the full (W*k) x (W*k) transform matrix elementwise:
    X[f, s] = sum_t sum_c x[t, c] * exp(-2j*pi*(f*t/W + s*c/k)).
    """
    w, k = x.shape
    f = np.arange(w)[:, None, None, None]
    s = np.arange(k)[None, :, None, None]
    t = np.arange(w)[None, None, :, None]
    c = np.arange(k)[None, None, None, :]
    m = np.exp(-2j * np.pi * (f * t / w + s * c / k))
    return (m.reshape(w * k, w * k) @ x.reshape(w * k).astype(complex)).reshape(w, k)
