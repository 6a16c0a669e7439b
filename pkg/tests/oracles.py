"""Independent reference implementations used only by the tests."""

import math
from fractions import Fraction


def rank_oracle(R, h):
    # exact decimal reading of R, so 0.29 * 100 is 29
    return max(1, math.floor(Fraction(repr(float(R))) * h))


def threshold_oracle(window, R):
    """Largest value among the rank smallest of ``window``; plain sort, no numpy."""
    ordered = sorted(window)
    return ordered[rank_oracle(R, len(window)) - 1]


def accept_oracle(losses, labels, windows, R, pooled=False):
    """Brute-force accept/reject for a whole batch.

    ``windows`` maps class -> list of the last h losses (all classes share
    key 0 when pooled).
    """
    out = []
    for loss, c in zip(losses, labels):
        window = windows[0 if pooled else c]
        out.append(1 if loss <= threshold_oracle(window, R) else 0)
    return out


def rescale_oracle(x, kappa):
    if x < 0.5:
        return 0.5 * (2 * x) ** (1 / kappa)
    return 1 - 0.5 * (2 - 2 * x) ** (1 / kappa)
