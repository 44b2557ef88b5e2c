"""Row-permutation-invariant regression loss with a [0, 1] range hinge."""

from __future__ import annotations

import math
from itertools import permutations

import numpy as np


def _check(est, opt):
    if est.shape != opt.shape or est.ndim != 2:
        raise ValueError(f"expected matching 2D matrices, got {est.shape} and {opt.shape}")


def _hinge_terms(est):
    return np.concatenate([np.maximum(0.0, -est).ravel(), np.maximum(0.0, est - 1.0).ravel()])


def range_penalty(est) -> float:
    return math.fsum(_hinge_terms(np.asarray(est, dtype=np.float64)))


def best_permutation(est, opt):
    """Row order ``m`` minimizing ``||est[m] - opt||^2`` and that squared error.

    Squared errors are summed with ``math.fsum`` so the value does not depend
    on summation order; permuting the rows of ``opt`` therefore reproduces the
    loss exactly. Ties resolve to the first permutation in lexicographic order.
    """
    est = np.asarray(est, dtype=np.float64)
    opt = np.asarray(opt, dtype=np.float64)
    _check(est, opt)
    best, best_err = None, np.inf
    for perm in permutations(range(est.shape[0])):
        err = math.fsum(((est[list(perm)] - opt) ** 2).ravel())
        if err < best_err:
            best, best_err = perm, err
    return best, float(best_err)


def permutation_invariant_loss(est, opt) -> float:
    """``min_m ||est[m] - opt||^2 + sum(max(0, -est)) + sum(max(0, est - 1))``.

    Rows are subframes; their order does not change the displayed image, so
    the regression error is taken under the best row matching. The squared
    errors and hinge terms go through one correctly rounded sum.
    """
    est = np.asarray(est, dtype=np.float64)
    opt = np.asarray(opt, dtype=np.float64)
    perm, _ = best_permutation(est, opt)
    return _total(est, opt, perm)


def _total(est, opt, perm):
    sq = ((est[list(perm)] - opt) ** 2).ravel()
    return math.fsum(np.concatenate([sq, _hinge_terms(est)]))


def permutation_invariant_grad(est, opt):
    """Loss value and its gradient with respect to ``est``."""
    est = np.asarray(est, dtype=np.float64)
    opt = np.asarray(opt, dtype=np.float64)
    perm, _ = best_permutation(est, opt)
    value = _total(est, opt, perm)
    perm = list(perm)
    grad = np.zeros_like(est)
    grad[perm] = 2.0 * (est[perm] - opt)
    grad += np.where(est < 0, -1.0, 0.0) + np.where(est > 1, 1.0, 0.0)
    return value, grad


def batch_loss_and_grad(est, opt):
    """Mean loss over a batch of ``(N, F, P)`` predictions and its gradient."""
    n = est.shape[0]
    losses = np.empty(n)
    grads = np.empty(est.shape, dtype=np.float64)
    for i in range(n):
        losses[i], grads[i] = permutation_invariant_grad(est[i], opt[i])
    return losses, grads / n
