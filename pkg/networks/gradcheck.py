"""
Central finite-difference oracle used by the gradient test suites.
"""
import numpy as np


def central_difference(fn, point, rel_step=1e-5):
    """Numerical gradient of a scalar fn at point with step h = rel_step * (1 + |p|)."""
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    shifted = point.copy()
    for index in np.ndindex(point.shape):
        h = rel_step * (1.0 + abs(point[index]))
        shifted[index] = point[index] + h
        upper = fn(shifted)
        shifted[index] = point[index] - h
        lower = fn(shifted)
        shifted[index] = point[index]
        grad[index] = (upper - lower) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1.0):
    """Largest entrywise |a - n| / max(floor, |a|, |n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(floor, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale))
