"""Platt scaling: p = 1 / (1 + exp(A*s + B)), fit by Newton's method.

Convention: A < 0 so that the recalibrated probability increases with the
raw score s.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

IDENTITY = (-1.0, 0.0)


def platt_transform(s, A: float, B: float):
    return expit(-(A * np.asarray(s, dtype=float) + B))


def fit_platt(scores, y, *, max_iter: int = 100, tol: float = 1e-12) -> tuple[float, float]:
    """Fit (A, B) on raw scores with Platt's smoothed targets.

    Targets are (N+ + 1)/(N+ + 2) for positives and 1/(N- + 2) for
    negatives. Constant scores carry no ordering information, so the
    identity map is returned.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(y, dtype=float)
    if s.size == 0:
        raise ValueError("no scores to calibrate")
    if np.ptp(s) == 0:
        return IDENTITY
    n_pos = y.sum()
    n_neg = len(y) - n_pos
    t = np.where(y > 0, (n_pos + 1) / (n_pos + 2), 1 / (n_neg + 2))

    def nll(A, B):
        f = A * s + B
        # -[t log p + (1-t) log(1-p)] with p = 1/(1+e^f)
        return float(np.sum(np.logaddexp(0.0, f) - (1 - t) * f))

    A, B = 0.0, float(np.log((n_neg + 1) / (n_pos + 1)))
    cur = nll(A, B)
    for _ in range(max_iter):
        p = expit(-(A * s + B))
        d1 = t - p  # derivative of nll wrt f
        gA, gB = float((s * d1).sum()), float(d1.sum())
        w = p * (1 - p)
        hAA = float((s * s * w).sum()) + 1e-12
        hAB = float((s * w).sum())
        hBB = float(w.sum()) + 1e-12
        det = hAA * hBB - hAB * hAB
        dA = (hBB * gA - hAB * gB) / det
        dB = (-hAB * gA + hAA * gB) / det
        step = 1.0
        while step > 1e-10:
            nA, nB = A - step * dA, B - step * dB
            val = nll(nA, nB)
            if val <= cur + 1e-4 * step * (gA * -dA + gB * -dB) or val <= cur:
                break
            step /= 2
        if step <= 1e-10:
            break
        A, B, prev, cur = nA, nB, cur, val
        if abs(step * dA) < tol and abs(step * dB) < tol:
            break
    if A >= 0:
        # non-increasing fit: scores are anti-informative on this sample
        raise ValueError(f"Platt fit is not monotone increasing (A={A:.6g} >= 0)")
    return A, B
