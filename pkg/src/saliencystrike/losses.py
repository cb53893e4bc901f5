"""Adversarial losses on class probabilities and point-set perceptibility distances.

Probability losses return gradients w.r.t. the probability vector; the
victim model maps those back to point coordinates. Distance functions
return gradients w.r.t. their first argument (the adversarial points).
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import ConfigError, DataError, DimensionError
from .core import pairwise_sq_dists

DISTANCE_KINDS = ("l2", "chamfer", "hausdorff")

RATIO_EPS = 1e-12


@dataclass
class LossBreakdown:
    l_base: float
    l_score: float
    l_cons: float
    J: float
    D: float = 0.0
    total: float = 0.0
    preferred_class: int | None = None

    def to_dict(self):
        return asdict(self)


def _check_class(probs, cls):
    if not 0 <= int(cls) < len(probs):
        raise IndexError(f"class {cls} out of range for {len(probs)} classes")


def argmax_wrong_class(probs, true_class):
    masked = np.asarray(probs, dtype=np.float64).copy()
    masked[true_class] = -np.inf
    return int(np.argmax(masked))


def l_base(probs, true_class):
    """Probability assigned to the true class; gradient is its one-hot vector."""
    probs = np.asarray(probs, dtype=np.float64)
    _check_class(probs, true_class)
    grad = np.zeros_like(probs)
    grad[true_class] = 1.0
    return float(probs[true_class]), grad


def l_score(probs, true_class, preferred_class=None):
    """``1 - max_{k != true} p_k``; with ``preferred_class`` set, the max is pinned there.

    Returns ``(value, wrong_class, grad)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) < 2:
        raise ConfigError("score loss needs at least two classes")
    _check_class(probs, true_class)
    wrong = argmax_wrong_class(probs, true_class) if preferred_class is None else int(preferred_class)
    grad = np.zeros_like(probs)
    grad[wrong] = -1.0
    return 1.0 - float(probs[wrong]), wrong, grad


def l_cons(probs, true_class, preferred_class, margin=0.1, eps=RATIO_EPS):
    """Contractive loss: hinge on (true - preferred) plus a preferred/non-preferred ratio term.

    With only two classes there is no non-preferred mass and the ratio term is 0.
    Returns ``(value, grad)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    _check_class(probs, true_class)
    _check_class(probs, preferred_class)
    if preferred_class == true_class:
        raise ConfigError("preferred class must differ from the true class")
    if margin < 0:
        raise ConfigError("margin must be non-negative")
    grad = np.zeros_like(probs)
    p_true, p_pre = probs[true_class], probs[preferred_class]
    hinge = margin - p_pre + p_true
    value = 0.0
    if hinge > 0:
        value += hinge
        grad[true_class] += 1.0
        grad[preferred_class] -= 1.0
    others = np.ones(len(probs), dtype=bool)
    others[[true_class, preferred_class]] = False
    if others.any():
        denom = probs[others].sum() + eps
        value += 1.0 - p_pre / denom
        grad[preferred_class] -= 1.0 / denom
        grad[others] += p_pre / denom**2
    return float(value), grad


def attack_loss_J(probs, true_class, preferred_class=None, kappa2=1.0, kappa3=0.5, margin=0.1,
                  use_score=True, use_cons=True):
    """Combined attack loss and its gradient w.r.t. ``probs``.

    ``preferred_class=None`` is warm-up mode: score and contractive terms are
    still reported (against the current strongest wrong class) but J is the
    base loss alone. ``use_score`` / ``use_cons`` switch the terms off for
    ablations.
    """
    probs = np.asarray(probs, dtype=np.float64)
    base, g = l_base(probs, true_class)
    score, wrong, g_score = l_score(probs, true_class, preferred_class)
    cons, g_cons = l_cons(probs, true_class, wrong, margin)
    J = base
    grad = g.copy()
    if preferred_class is not None:
        if use_score:
            J += kappa2 * score
            grad += kappa2 * g_score
        if use_cons:
            J += kappa3 * cons
            grad += kappa3 * g_cons
    pref = None if preferred_class is None else int(preferred_class)
    return LossBreakdown(base, score, cons, float(J), preferred_class=pref), grad


def _check_sets(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise DataError("distance between empty point sets is undefined")
    return a, b


def _unit(diff):
    norm = np.sqrt(np.einsum("...k,...k->...", diff, diff))
    safe = np.where(norm > 0, norm, 1.0)
    return norm, np.where(norm[..., None] > 0, diff / safe[..., None], 0.0)


def d_l2(adv, anchor):
    """Sum of Euclidean norms between index-aligned points; returns ``(value, grad)``."""
    adv = np.asarray(adv, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if adv.shape != anchor.shape:
        raise DimensionError(f"index-aligned sets differ in shape: {adv.shape} vs {anchor.shape}")
    norm, unit = _unit(adv - anchor)
    return float(norm.sum()), unit


def nearest_indices(a, b):
    """For every point of ``a`` the index of its nearest point in ``b`` (lowest index on ties)."""
    return np.argmin(pairwise_sq_dists(a, b), axis=1)


def d_chamfer(a, b):
    """Mean nearest-neighbour distance both ways; gradient w.r.t. ``a``."""
    a, b = _check_sets(a, b)
    d2 = pairwise_sq_dists(a, b)
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    norm_ab, unit_ab = _unit(a - b[nn_ab])
    norm_ba, unit_ba = _unit(a[nn_ba] - b)
    value = norm_ab.mean() + norm_ba.mean()
    grad = unit_ab / len(a)
    np.add.at(grad, nn_ba, unit_ba / len(b))
    return float(value), grad


def d_hausdorff(a, b):
    """One-sided: max over ``a`` of the distance to the nearest point of ``b``."""
    a, b = _check_sets(a, b)
    d2 = pairwise_sq_dists(a, b)
    nn = np.argmin(d2, axis=1)
    norm, unit = _unit(a - b[nn])
    worst = int(np.argmax(norm))
    grad = np.zeros_like(a)
    grad[worst] = unit[worst]
    return float(norm[worst]), grad


def distance(kind, adv, clean, mask=None):
    """Perceptibility distance of the configured kind.

    ``l2`` only looks at the points selected by ``mask`` (index-aligned);
    chamfer and hausdorff compare the full sets. The gradient is always
    returned for the full adversarial cloud.
    """
    adv = np.asarray(adv, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if kind == "l2":
        if mask is None:
            return d_l2(adv, clean)
        grad = np.zeros_like(adv)
        value, grad[mask] = d_l2(adv[mask], clean[mask])
        return value, grad
    if kind == "chamfer":
        return d_chamfer(adv, clean)
    if kind == "hausdorff":
        return d_hausdorff(adv, clean)
    raise ConfigError(f"unknown distance kind {kind!r}; choose from {', '.join(DISTANCE_KINDS)}")


def total_loss(J, D, kappa1):
    """Penalty objective ``J + kappa1 * D``.

    Works on plain values or on gradients alike, so the same call combines
    the two gradient fields.
    """
    return J + kappa1 * D
