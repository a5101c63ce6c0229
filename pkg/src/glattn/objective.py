"""Training loss: binary cross-entropy plus horizontal and vertical margins.

The horizontal hinge pushes the worst-scored positive class above the
best-scored negative class by a fixed margin in the aggregated prediction.
The vertical hinge does the same per positive class down the step axis: the
score at the class's assigned step must beat that class's score at every
other step. Both vanish exactly when their constraint holds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag

# shifts entries safely outside [0, 1] so masked extrema ignore them
_MASK_OFFSET = 2.0


@dataclass
class LossConfig:
    lambda_horizontal: float = 5e-2
    lambda_vertical: float = 5e-2
    margin: float = 0.2
    margin_vertical: float = 0.2

    def __post_init__(self):
        if self.lambda_horizontal < 0 or self.lambda_vertical < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0.0 <= self.margin <= 1.0 and 0.0 <= self.margin_vertical <= 1.0):
            raise ValueError("margins must lie in [0, 1]")


def bce(p_hat, labels):
    """Mean binary cross-entropy for one sample.

    ``p_hat`` is the (C,) aggregated score tensor (strictly inside (0, 1)
    when it comes from a sigmoid; clamped defensively regardless).
    """
    y = np.asarray(labels.y if hasattr(labels, "y") else labels, dtype=np.float64)
    if p_hat.values.shape != y.shape:
        raise ValueError(
            f"bce: prediction shape {p_hat.values.shape} does not match labels {y.shape}"
        )
    p = ag.clamp(p_hat, 1e-12, 1.0 - 1e-12)
    ones = ag.constant(np.ones_like(y))
    pos = ag.mul(ag.constant(y), ag.log(p))
    neg = ag.mul(ag.constant(1.0 - y), ag.log(ag.sub(ones, p)))
    return ag.scale(ag.sum_along(ag.add(pos, neg)), -1.0 / y.size)


def _masked_max(scores, keep_mask):
    """Max over the entries where keep_mask is 1; others pushed below range."""
    shifted = ag.add(
        ag.mul(scores, ag.constant(keep_mask)),
        ag.constant(-_MASK_OFFSET * (1.0 - keep_mask)),
    )
    return ag.amax(shifted)


def _masked_min(scores, keep_mask):
    """Min over the entries where keep_mask is 1, via -max(-x)."""
    shifted = ag.add(
        ag.scale(ag.mul(scores, ag.constant(keep_mask)), -1.0),
        ag.constant(-_MASK_OFFSET * (1.0 - keep_mask)),
    )
    return ag.scale(ag.amax(shifted), -1.0)


def horizontal_margin(p_hat, labels, margin):
    """Hinge on (max negative - min positive + margin) for one sample.

    Zero exactly when the minimum positive score beats every negative score
    by at least the margin. Degenerate label sets (no positive or no
    negative class) contribute zero by definition.
    """
    y = np.asarray(labels.y if hasattr(labels, "y") else labels, dtype=np.float64)
    if p_hat.values.shape != y.shape:
        raise ValueError(
            f"horizontal_margin: prediction shape {p_hat.values.shape} does not "
            f"match labels {y.shape}"
        )
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        return ag.constant(0.0)
    min_pos = _masked_min(p_hat, y)
    max_neg = _masked_max(p_hat, 1.0 - y)
    gap = ag.add(ag.sub(max_neg, min_pos), ag.constant(margin))
    return ag.hinge(gap)


def vertical_margin(pm, labels, margin):
    """Sum over positive classes of the down-the-steps hinge for one sample.

    For class j assigned to step t_j, the competitor is that class's best
    score at any other step. With a single step there is no competition and
    the term is zero.
    """
    q = pm.tensor if hasattr(pm, "tensor") else pm
    steps, num_classes = q.values.shape
    y = np.asarray(labels.y, dtype=np.float64)
    if y.shape != (num_classes,):
        raise ValueError(
            f"vertical_margin: labels have {y.shape[0]} classes, predictions {num_classes}"
        )
    positives = set(np.flatnonzero(y).tolist())
    listed = set(labels.step_targets)
    if listed != positives:
        raise ValueError("vertical_margin: step_targets inconsistent with labels")
    if steps == 1 or not positives:
        return ag.constant(0.0)
    total = None
    for step, cls in enumerate(labels.step_targets):
        if step >= steps:
            raise ValueError("vertical_margin: step assignment beyond prediction steps")
        own = np.zeros((steps, num_classes))
        own[step, cls] = 1.0
        others = np.zeros((steps, num_classes))
        others[:, cls] = 1.0
        others[step, cls] = 0.0
        assigned = ag.sum_along(ag.mul(q, ag.constant(own)))
        competitor = _masked_max(q, others)
        term = ag.hinge(ag.add(ag.sub(competitor, assigned), ag.constant(margin)))
        total = term if total is None else ag.add(total, term)
    return total if total is not None else ag.constant(0.0)


def total_loss(pm, p_hat, labels, config):
    """bce + lambda_h * horizontal + lambda_v * vertical, for one sample."""
    loss = bce(p_hat, labels)
    if config.lambda_horizontal:
        loss = ag.add(
            loss, ag.scale(horizontal_margin(p_hat, labels, config.margin), config.lambda_horizontal)
        )
    if config.lambda_vertical:
        loss = ag.add(
            loss, ag.scale(vertical_margin(pm, labels, config.margin_vertical), config.lambda_vertical)
        )
    return loss
