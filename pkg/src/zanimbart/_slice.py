"""Univariate slice sampling with stepping out and shrinkage."""

import math


def slice_sample(x0, logf, rng, width=1.0, lower=-math.inf, upper=math.inf, max_steps=50):
    """One slice-sampling transition.

    Parameters
    ----------
    x0 : float
        Current point; ``logf(x0)`` must be finite.
    logf : callable
        Unnormalized log density.
    rng : numpy.random.Generator
    width : float
        Initial bracket width.
    lower, upper : float
        Support bounds.
    max_steps : int
        Stepping-out limit on each side.
    """
    level = logf(x0) + math.log(rng.random())
    left = x0 - width * rng.random()
    right = left + width
    j = int(max_steps * rng.random())
    k = max_steps - 1 - j
    while j > 0 and left > lower and logf(left) > level:
        left -= width
        j -= 1
    while k > 0 and right < upper and logf(right) > level:
        right += width
        k -= 1
    left = max(left, lower)
    right = min(right, upper)
    while True:
        x1 = left + (right - left) * rng.random()
        if logf(x1) > level:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
        if right - left < 1e-14 * (1.0 + abs(x0)):
            return x0
