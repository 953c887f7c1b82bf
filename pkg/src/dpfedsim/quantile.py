"""Online tracking of a quantile of the client-update norm distribution.

The clipping norm is treated as the parameter of a pinball (quantile) loss
and updated by gradient steps on noisy per-round feedback: the fraction of
clients whose update norm fell at or below the current clip.  In
expectation that fraction is ``Pr[X <= C]``, so the fixed points of the
update are exactly the ``gamma``-quantiles of the norm distribution.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# Linear-rule updates are additive and can go nonpositive; clamp here.
LINEAR_CLIP_FLOOR = 1e-6


class UpdateRule(enum.Enum):
    GEOMETRIC = "geometric"
    LINEAR = "linear"


@dataclass(frozen=True)
class QuantileConfig:
    """Target quantile ``gamma``, step size ``eta``, initial clip ``c0``
    and update rule."""

    gamma: float
    eta: float = 0.2
    c0: float = 0.1
    rule: UpdateRule = UpdateRule.GEOMETRIC

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.c0 > 0.0:
            raise ValueError(f"c0 must be positive, got {self.c0}")


@dataclass(frozen=True)
class ClipState:
    """Current clipping norm plus the number of updates applied so far."""

    value: float
    round_index: int = 0

    def __post_init__(self) -> None:
        if not self.value > 0.0:
            raise ValueError(f"clip value must be positive, got {self.value}")


def quantile_loss(c: float, x, gamma: float):
    """Pinball loss of clip ``c`` against norm(s) ``x``.

    ``(1 - gamma) * (c - x)`` when ``x <= c``, else ``gamma * (x - c)``.
    Convex and piecewise linear in ``c``; minimized at any gamma-quantile
    of the distribution of ``x``.  Accepts a scalar or an array for ``x``.
    """
    x = np.asarray(x, dtype=float)
    below = x <= c
    out = np.where(below, (1.0 - gamma) * (c - x), gamma * (x - c))
    return float(out) if out.ndim == 0 else out


def quantile_loss_derivative(c: float, x, gamma: float):
    """Derivative of the pinball loss in ``c``: ``1 - gamma`` if ``x <= c`` else ``-gamma``.

    Averaged over a sample of norms this equals (empirical fraction at or
    below ``c``) minus ``gamma``, which is the only statistic the update
    needs from the clients.
    """
    x = np.asarray(x, dtype=float)
    out = np.where(x <= c, 1.0 - gamma, -gamma)
    return float(out) if out.ndim == 0 else out


def batch_fraction_below(norms, c: float) -> float:
    """Fraction of ``norms`` at or below ``c`` (ties count as below)."""
    norms = np.asarray(norms, dtype=float)
    if norms.size == 0:
        raise ValueError("norms must be nonempty")
    return float(np.mean(norms <= c))


def update_clip(state: ClipState, fraction_below: float, cfg: QuantileConfig) -> ClipState:
    """One gradient step on the pinball loss using noisy feedback.

    ``fraction_below`` is the (possibly noise-perturbed) fraction of
    client norms at or below the current clip; it may fall outside
    [0, 1].  The geometric rule multiplies by
    ``exp(-eta * (fraction_below - gamma))`` and so preserves positivity
    for any finite feedback; the linear rule subtracts
    ``eta * (fraction_below - gamma)`` and clamps at ``LINEAR_CLIP_FLOOR``.
    """
    step = cfg.eta * (fraction_below - cfg.gamma)
    if cfg.rule is UpdateRule.GEOMETRIC:
        value = state.value * math.exp(-step)
    else:
        value = max(state.value - step, LINEAR_CLIP_FLOOR)
    return ClipState(value=value, round_index=state.round_index + 1)
