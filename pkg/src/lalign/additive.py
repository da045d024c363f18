"""Additive per-patch approximation of a model's masked outputs, and an
exact Shapley-value oracle for validating it.

The additive model predicts a masked output as bias + sum of the visible
patches' vectors. Fitting it exactly is a weighted least squares over all
2^n masks; under the Shapley kernel weighting (with the empty and full
masks pinned as constraints) the solution coincides with the Shapley
values of the underlying set function.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .masking import Mask, mask_probability, sample_uniform_mask


@dataclass
class AdditiveModel:
    g: np.ndarray  # (n, d) per-patch vectors
    bias: np.ndarray  # (d,) empty-mask output

    def predict(self, mask) -> np.ndarray:
        bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
        return bits.astype(float) @ self.g + self.bias

    @property
    def n(self) -> int:
        return self.g.shape[0]


def enumerate_masks(n: int) -> np.ndarray:
    """All 2^n visibility vectors; bit i of the index is patch i."""
    idx = np.arange(2**n, dtype=np.uint64)
    return ((idx[:, None] >> np.arange(n, dtype=np.uint64)[None, :]) & 1).astype(np.float64)


def _evaluate_all(set_function, masks: np.ndarray) -> np.ndarray:
    rows = [np.atleast_1d(np.asarray(set_function(m.astype(np.uint8)), dtype=np.float64)) for m in masks]
    return np.stack(rows)


def shapley_kernel_weight(n: int, k: int) -> float:
    """Interior Shapley kernel weight for a mask with k of n patches
    visible; the empty and full masks carry infinite weight and are
    treated as constraints instead."""
    if k <= 0 or k >= n:
        raise ValueError("kernel weight is only defined for 0 < k < n")
    return (n - 1) / (math.comb(n, k) * k * (n - k))


def shapley_brute_force(set_function, n: int) -> np.ndarray:
    """Exact Shapley values for every output coordinate by full enumeration.

    phi_i = sum over subsets S not containing i of
            |S|! (n - |S| - 1)! / n! * (v(S + i) - v(S)).
    """
    if n > 12:
        raise ValueError("brute-force Shapley enumeration is limited to n <= 12")
    if n < 1:
        raise ValueError("need at least one player")
    masks = enumerate_masks(n)
    values = _evaluate_all(set_function, masks)
    d = values.shape[1]
    fact = [math.factorial(i) for i in range(n + 1)]
    coeff = np.array([fact[s] * fact[n - s - 1] / fact[n] for s in range(n)])
    sizes = masks.sum(axis=1).astype(int)
    phi = np.zeros((n, d))
    for idx in range(2**n):
        s = sizes[idx]
        for i in range(n):
            if not (idx >> i) & 1:
                phi[i] += coeff[s] * (values[idx | (1 << i)] - values[idx])
    return phi


def fit_additive(
    set_function,
    n: int,
    weighting="uniform_cardinality",
    exhaustive: bool = True,
    n_steps: int | None = None,
    rng: np.random.Generator | None = None,
    lr: float = 0.1,
    ridge: float = 1e-8,
) -> AdditiveModel:
    """Fit bias + m.g to a set function over masks.

    weighting: "uniform_cardinality" (the training mask law),
    "shapley_kernel" (constrained solve reproducing Shapley values), or a
    callable mask_bits -> weight. Exhaustive mode solves the weighted
    least squares over all 2^n masks; otherwise stochastic descent over
    sampled masks for n_steps.
    """
    if exhaustive:
        if n > 20:
            raise ValueError("exhaustive additive fitting is limited to n <= 20")
        masks = enumerate_masks(n)
        values = _evaluate_all(set_function, masks)
        if weighting == "shapley_kernel":
            return _fit_shapley_kernel(masks, values, n)
        if callable(weighting):
            w = np.array([weighting(m.astype(np.uint8)) for m in masks], dtype=np.float64)
        elif weighting == "uniform_cardinality":
            w = np.array([mask_probability(Mask(m.astype(np.uint8))) for m in masks])
        else:
            raise ValueError(f"unknown weighting {weighting!r}")
        x = np.concatenate([np.ones((masks.shape[0], 1)), masks], axis=1)
        xtw = x.T * w
        normal = xtw @ x
        rhs = xtw @ values
        if np.linalg.cond(normal) > 1e12:
            warnings.warn("singular normal equations; adding ridge 1e-8", RuntimeWarning)
            normal = normal + ridge * np.eye(n + 1)
        beta = np.linalg.solve(normal, rhs)
        return AdditiveModel(g=beta[1:], bias=beta[0])

    if n_steps is None or rng is None:
        raise ValueError("stochastic fitting needs n_steps and rng")
    probe = np.atleast_1d(np.asarray(set_function(np.zeros(n, dtype=np.uint8)), dtype=np.float64))
    g = np.zeros((n, probe.shape[0]))
    bias = probe.copy()
    for step in range(n_steps):
        bits = sample_uniform_mask(n, rng).bits.astype(np.float64)
        value = np.atleast_1d(np.asarray(set_function(bits.astype(np.uint8)), dtype=np.float64))
        resid = bias + bits @ g - value
        step_lr = lr / (1.0 + step / max(n_steps, 1))
        g -= step_lr * np.outer(bits, resid)
        bias -= step_lr * resid
    return AdditiveModel(g=g, bias=bias)


def _fit_shapley_kernel(masks: np.ndarray, values: np.ndarray, n: int) -> AdditiveModel:
    """Constrained weighted least squares: bias pinned to the empty-mask
    value, coefficients summing to full minus empty, interior masks
    weighted by the Shapley kernel. Solved through the KKT system."""
    sizes = masks.sum(axis=1).astype(int)
    interior = (sizes > 0) & (sizes < n)
    w = np.array([shapley_kernel_weight(n, k) for k in sizes[interior]])
    m_int = masks[interior]
    v_empty = values[sizes == 0][0]
    v_full = values[sizes == n][0]
    a = (m_int.T * w) @ m_int
    b = (m_int.T * w) @ (values[interior] - v_empty)
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2.0 * a
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.concatenate([2.0 * b, (v_full - v_empty)[None, :]], axis=0)
    sol = np.linalg.solve(kkt, rhs)
    return AdditiveModel(g=sol[:n], bias=v_empty.copy())


def additive_objective(model: AdditiveModel, set_function, weighting="uniform_cardinality") -> float:
    """Weighted mean squared residual of the additive model over all masks."""
    n = model.n
    masks = enumerate_masks(n)
    values = _evaluate_all(set_function, masks)
    if weighting == "uniform_cardinality":
        w = np.array([mask_probability(Mask(m.astype(np.uint8))) for m in masks])
    elif callable(weighting):
        w = np.array([weighting(m.astype(np.uint8)) for m in masks], dtype=np.float64)
    else:
        raise ValueError(f"unsupported weighting {weighting!r}")
    resid = masks @ model.g + model.bias - values
    return float((w * (resid**2).sum(axis=1)).sum())
