"""Shared assertions for the test suite."""

import numpy as np


def assert_grads_close(analytic, numeric, rtol, atol=1e-8, label=""):
    """Per-coordinate |a - n| <= atol + rtol * max(|a|, |n|).

    This is the relative-error criterion with an absolute floor so that
    exactly-zero gradients (dead ReLU paths, mean-cancelled biases) compare
    against finite-difference noise sanely.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    assert analytic.shape == numeric.shape, f"{label}: shape {analytic.shape} vs {numeric.shape}"
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    worst = np.max(diff - bound)
    assert np.all(diff <= bound), (
        f"{label}: gradient mismatch, worst excess {worst:.3e}, "
        f"max |a-n| {diff.max():.3e}")
