"""Generalized dice loss over foreground/background, plus the L2 weight penalty.

Two variants are provided. ``as_written`` uses the foreground sums in the
denominator of BOTH terms and is unbounded below (a perfect one-foreground-
pixel prediction on four pixels scores -1.0). ``corrected`` gives the
background term its own complemented denominator, so a perfect prediction
scores 0; it is the training default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

GDL_EPSILON = 1e-7


@dataclass(frozen=True)
class GdlVariant:
    mode: str = "corrected"  # "as_written" | "corrected"
    epsilon: float = GDL_EPSILON

    def __post_init__(self):
        if self.mode not in ("as_written", "corrected"):
            raise ValidationError(f"unknown GDL mode {self.mode!r}")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")


def _check_pair(p, r):
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if p.shape != r.shape:
        raise ShapeError(f"prediction shape {p.shape} != label shape {r.shape}")
    if not np.all((r == 0) | (r == 1)):
        raise ValidationError("labels must be binary")
    return p, r


def gdl(p, r, variant: GdlVariant = GdlVariant()) -> float:
    """Generalized dice loss of foreground probabilities ``p`` against binary
    labels ``r``; both terms epsilon-guarded in the denominator."""
    p, r = _check_pair(p, r)
    eps = variant.epsilon
    fg_num = float((p * r).sum())
    bg_num = float(((1.0 - p) * (1.0 - r)).sum())
    d1 = float(p.sum() + r.sum()) + eps
    if variant.mode == "as_written":
        d2 = d1
    else:
        d2 = float((1.0 - p).sum() + (1.0 - r).sum()) + eps
    return 1.0 - fg_num / d1 - bg_num / d2


def gdl_gradient(p, r, variant: GdlVariant = GdlVariant()) -> np.ndarray:
    """Analytic d(GDL)/dp_n for the selected variant."""
    p, r = _check_pair(p, r)
    eps = variant.epsilon
    d1 = float(p.sum() + r.sum()) + eps
    t1 = float((p * r).sum()) / d1
    if variant.mode == "as_written":
        t2 = float(((1.0 - p) * (1.0 - r)).sum()) / d1
        # both terms share d1, whose derivative in p_n is 1
        return -r / d1 + t1 / d1 + (1.0 - r) / d1 + t2 / d1
    d2 = float((1.0 - p).sum() + (1.0 - r).sum()) + eps
    t2 = float(((1.0 - p) * (1.0 - r)).sum()) / d2
    return -r / d1 + t1 / d1 + (1.0 - r) / d2 - t2 / d2


def l2_penalty(weights, lam: float) -> float:
    """(lam/2) * sum of squared entries over the given weight arrays.

    BN scale/shift and conv biases are excluded by the caller (the network's
    ``weight_tensors`` already selects the decayable set).
    """
    if lam < 0:
        raise ValidationError("lambda must be nonnegative")
    if lam == 0:
        return 0.0
    total = 0.0
    for w in weights:
        a = np.asarray(getattr(w, "data", w), dtype=np.float64)
        total += float((a * a).sum())
    return 0.5 * lam * total


def l2_penalty_gradient(weights, lam: float):
    """Gradient of ``l2_penalty``: lam * w for each weight array."""
    if lam < 0:
        raise ValidationError("lambda must be nonnegative")
    return [lam * np.asarray(getattr(w, "data", w), dtype=np.float64) for w in weights]
