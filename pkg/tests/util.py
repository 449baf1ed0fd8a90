"""Shared test oracles: finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from draftdiff import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function, f64 accumulation.

    `f` maps an ndarray to a python float and must not mutate its input.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grad(build_loss, x0: np.ndarray, tol: float = 1e-3, h: float = 1e-3) -> float:
    """Compare autodiff gradient of build_loss(Tensor) against finite differences.

    `build_loss` takes a leaf Tensor and returns a scalar Tensor.
    Returns the max relative error; asserts it is within `tol`.
    """
    leaf = T.Tensor(np.asarray(x0, dtype=np.float32), requires_grad=True)
    loss = build_loss(leaf)
    T.backward(loss)
    assert leaf.grad is not None, "no gradient reached the leaf"

    def f(arr):
        with T.no_grad():
            out = build_loss(T.Tensor(arr.astype(np.float32)))
        return out.item()

    num = numeric_grad(f, np.asarray(x0, dtype=np.float64), h=h)
    err = rel_err(leaf.grad, num)
    assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol}"
    return err
