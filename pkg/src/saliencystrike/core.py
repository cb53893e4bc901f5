"""Dense float64 primitives with hand-written backward passes.

Every forward op returns what its backward needs; the victim models chain
these by hand instead of recording a tape. Arrays may carry any number of
leading batch dimensions.
"""

from dataclasses import dataclass

import numpy as np

from . import CapacityError, DataError, DimensionError, NumericError


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


def affine_forward(x, weights, bias):
    """out[..., j] = sum_i x[..., i] * weights[i, j] + bias[j]."""
    x, weights, bias = _as_f64(x), _as_f64(weights), _as_f64(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise DimensionError(
            f"affine shapes do not conform: input {x.shape}, weights {weights.shape}, bias {bias.shape}"
        )
    return x @ weights + bias


def affine_backward(grad_out, x, weights):
    """Return (grad_input, grad_weights, grad_bias) for :func:`affine_forward`."""
    grad_out, x, weights = _as_f64(grad_out), _as_f64(x), _as_f64(weights)
    if grad_out.shape[:-1] != x.shape[:-1] or grad_out.shape[-1] != weights.shape[1]:
        raise DimensionError(
            f"upstream grad {grad_out.shape} does not match input {x.shape} and weights {weights.shape}"
        )
    grad_x = grad_out @ weights.T
    flat_x = x.reshape(-1, x.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    grad_w = flat_x.T @ flat_g
    grad_b = flat_g.sum(axis=0)
    return grad_x, grad_w, grad_b


def relu_forward(x):
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(grad_out, x):
    # subgradient at exactly 0 is 0
    return np.where(_as_f64(x) > 0.0, grad_out, 0.0)


def max_pool_points(features):
    """Max over the point axis (second to last).

    Returns ``(pooled, routing)`` where ``routing[..., d]`` is the row that
    supplied column ``d``; ties go to the lowest row.
    """
    features = _as_f64(features)
    if features.ndim < 2 or features.shape[-2] == 0:
        raise DataError(f"max_pool_points needs at least one point, got shape {features.shape}")
    routing = np.argmax(features, axis=-2)
    pooled = np.take_along_axis(features, routing[..., None, :], axis=-2)[..., 0, :]
    return pooled, routing


def max_pool_backward(grad_out, routing, n_points):
    grad_out = _as_f64(grad_out)
    shape = grad_out.shape[:-1] + (n_points, grad_out.shape[-1])
    grad = np.zeros(shape)
    np.put_along_axis(grad, routing[..., None, :], grad_out[..., None, :], axis=-2)
    return grad


def softmax(logits):
    logits = _as_f64(logits)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_probs, probs):
    """Map a gradient w.r.t. softmax outputs to one w.r.t. the logits."""
    inner = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    return probs * (grad_probs - inner)


def softmax_cross_entropy(logits, true_class):
    """Return ``(probs, loss, grad_logits)`` for a single logit vector.

    ``grad_logits`` is ``probs - onehot(true_class)``.
    """
    logits = _as_f64(logits)
    n_classes = logits.shape[-1]
    if n_classes < 2:
        raise DimensionError(f"need at least 2 classes, got {n_classes}")
    if not 0 <= int(true_class) < n_classes:
        raise IndexError(f"class {true_class} out of range for {n_classes} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    log_probs = shifted - log_z
    probs = np.exp(log_probs)
    loss = -float(log_probs[true_class])
    grad = probs.copy()
    grad[true_class] -= 1.0
    return probs, loss, grad


def pairwise_sq_dists(a, b):
    """Squared Euclidean distances computed from explicit differences.

    The expanded ``|a|^2 - 2ab + |b|^2`` form is avoided: it loses the
    exactness the nearest-neighbour tie rules depend on.
    """
    a, b = _as_f64(a), _as_f64(b)
    out = None
    for c in range(a.shape[-1]):
        d = a[..., :, None, c] - b[..., None, :, c]
        out = d * d if out is None else out + d * d
    return out


def knn_table(points, k):
    """Indices of the k nearest points to every point, self included.

    Ordering is by distance, then by index (stable sort).
    """
    points = _as_f64(points)
    n = points.shape[-2]
    if k > n:
        raise CapacityError(f"k={k} exceeds the number of points {n}")
    if k < 1:
        raise CapacityError(f"k must be at least 1, got {k}")
    d2 = pairwise_sq_dists(points, points)
    if k == n:
        return np.argsort(d2, axis=-1, kind="stable")
    part = np.argpartition(d2, k - 1, axis=-1)[..., :k]
    # order the k candidates by (distance, index)
    part = np.sort(part, axis=-1)
    vals = np.take_along_axis(d2, part, axis=-1)
    order = np.argsort(vals, axis=-1, kind="stable")
    out = np.take_along_axis(part, order, axis=-1)
    # argpartition picks arbitrarily among values tied with the k-th; redo those rows exactly
    kth = vals.max(axis=-1, keepdims=True)
    ambiguous = (d2 <= kth).sum(axis=-1) > k
    if ambiguous.any():
        out[ambiguous] = np.argsort(d2[ambiguous], axis=-1, kind="stable")[..., :k]
    return out


def knn_indices(points, query, k):
    points = _as_f64(points)
    n = points.shape[0]
    if k > n:
        raise CapacityError(f"k={k} exceeds the number of points {n}")
    diff = points - points[query]
    d2 = np.einsum("ij,ij->i", diff, diff)
    return np.argsort(d2, kind="stable")[:k]


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, beta1=0.9, beta2=0.999, eps=1e-8):
        param = _as_f64(param)
        return cls(np.zeros_like(param), np.zeros_like(param), 0, beta1, beta2, eps)


def adam_step(param, grad, state, lr):
    """One bias-corrected Adam update; mutates ``state`` and returns ``(new_param, state)``."""
    param, grad = _as_f64(param), _as_f64(grad)
    if param.shape != grad.shape or state.first_moment.shape != param.shape:
        raise DimensionError(
            f"Adam shapes differ: param {param.shape}, grad {grad.shape}, "
            f"moments {state.first_moment.shape}"
        )
    state.step_count += 1
    t = state.step_count
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = state.first_moment / (1.0 - state.beta1**t)
    v_hat = state.second_moment / (1.0 - state.beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + state.eps), state


def finite_diff_check(fn, point, eps=1e-6):
    """Max relative error between an analytic gradient and central differences.

    ``fn(x)`` must return ``(value, grad)``. The error per entry is
    ``|g_analytic - g_fd| / max(1e-12, |g_fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    point = _as_f64(point).copy()
    value, analytic = fn(point)
    if not np.isfinite(value):
        raise NumericError(f"function value is not finite: {value}")
    analytic = _as_f64(analytic)
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = fn(point)[0]
        flat[i] = orig - eps
        f_minus = fn(point)[0]
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite function value while probing entry {i}")
        num_flat[i] = (f_plus - f_minus) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
