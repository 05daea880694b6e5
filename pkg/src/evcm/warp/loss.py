"""Multi-reference average-timestamp contrast loss."""

from __future__ import annotations

import numpy as np

from .window import EPS, IweStack


def contrast_loss(stack: IweStack) -> float:
    """Mean over reference times of ``sum_x (A+^2 + A-^2) / (n_active + eps)``.

    ``A_p = tsum_p / (count_p + eps)`` is the per-polarity average normalized
    timestamp. Returns 0.0 when no event survived (check ``stack.empty``).
    """
    if stack.empty:
        return 0.0
    avg = stack.tsums / (stack.counts + EPS)
    per_ref = np.sum(avg * avg, axis=(1, 2, 3)) / (stack.n_active + EPS)
    return float(per_ref.mean())


def loss_seeds(stack: IweStack):
    """Partial derivatives of the loss w.r.t. every count and tsum pixel.

    ``n_active`` is piecewise constant in the flow and treated as such.
    Returns ``(d_counts, d_tsums)`` shaped like the stack images.
    """
    refs = stack.counts.shape[0]
    denom = stack.counts + EPS
    avg = stack.tsums / denom
    scale = (2.0 / refs) / (stack.n_active + EPS)
    scale = scale[:, None, None, None]
    d_tsums = scale * avg / denom
    d_counts = -d_tsums * avg
    return d_counts, d_tsums
