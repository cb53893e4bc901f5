"""Salient-subset perturbation attack with budget withdrawing.

The attack moves only a perturbation subset of the cloud: the n nearest
neighbours of the m points whose cross-entropy input gradient is largest.
A warm-up phase minimizes the true-class probability plus the distance
penalty; at its end the strongest wrong class is frozen as the preferred
class, and the score and contractive terms join the objective. Once the
distance nears the budget, low-gradient points are pulled back toward
their anchors and their gradient is erased for that step.
"""

import math
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import CapacityError, ConfigError, NumericError
from . import core, victim
from .data import PointCloud
from .losses import DISTANCE_KINDS, argmax_wrong_class, attack_loss_J, distance, nearest_indices


@dataclass
class AttackConfig:
    distance: str = "l2"
    budget: float = 0.005
    kappa1: float = 0.01
    kappa2: float = 1.0
    kappa3: float = 0.5
    margin: float = 0.1
    m: int = 16
    n: int = 10
    iters: int = 200
    warmup: float = 0.2
    h: float | None = None
    w_mode: str = "percentile"
    w: float = 30.0
    gamma: float = 1.0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    local: bool = True
    use_score: bool = True
    use_cons: bool = True
    use_pwa: bool = True
    early_stop: bool = True
    patience: int = 5
    float_preferred: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.distance not in DISTANCE_KINDS:
            raise ConfigError(f"unknown distance kind {self.distance!r}")
        if not 0 < self.warmup < 1:
            raise ConfigError(f"warmup fraction must be in (0, 1), got {self.warmup}")
        if self.budget < 0:
            raise ConfigError(f"budget must be non-negative, got {self.budget}")
        if self.iters < 2:
            raise ConfigError(f"iters must be at least 2, got {self.iters}")
        if self.local and self.m * self.n < 1:
            raise ConfigError("local attacks need m * n >= 1")
        if self.w_mode not in ("absolute", "percentile"):
            raise ConfigError(f"w_mode must be 'absolute' or 'percentile', got {self.w_mode!r}")
        if self.h is not None and self.h < 0:
            raise ConfigError("h must be non-negative")

    @property
    def threshold(self):
        """PWA activation threshold; defaults to a tenth of the budget."""
        return 0.1 * self.budget if self.h is None else self.h

    @property
    def warmup_iters(self):
        return math.ceil(self.warmup * self.iters)

    def to_dict(self):
        d = asdict(self)
        d["h"] = self.threshold
        return d


PRESETS = {
    "l3a": dict(local=True, use_score=True, use_cons=True, use_pwa=True),
    "global-base": dict(local=False, use_score=False, use_cons=False, use_pwa=False),
}

# (score, cons, pwa, local) for the nine ablation groups
ABLATION_GROUPS = {
    1: (False, False, False, False),
    2: (True, False, False, False),
    3: (False, True, False, False),
    4: (False, False, True, False),
    5: (False, False, False, True),
    6: (True, True, False, False),
    7: (False, True, True, False),
    8: (False, False, True, True),
    9: (True, True, True, True),
}
for _g, (_s, _c, _p, _l) in ABLATION_GROUPS.items():
    PRESETS[f"group{_g}"] = dict(use_score=_s, use_cons=_c, use_pwa=_p, local=_l)


@dataclass
class PerturbationState:
    clean: np.ndarray
    mask: np.ndarray
    positions: np.ndarray
    anchors: np.ndarray
    adam: core.AdamState
    preferred_class: int | None = None
    iteration: int = 0


@dataclass
class AttackResult:
    adversarial: PointCloud
    success: bool
    label: int
    clean_pred: int
    adv_pred: int
    preferred_class: int | None
    iterations_used: int
    final_D: float
    per_point_displacement: np.ndarray
    mask: np.ndarray
    loss_trace: list = field(default_factory=list)
    variant: str = "l3a"

    def to_dict(self):
        return {
            "id": self.adversarial.id,
            "variant": self.variant,
            "label": self.label,
            "success": self.success,
            "clean_pred": self.clean_pred,
            "adv_pred": self.adv_pred,
            "preferred_class": self.preferred_class,
            "iterations_used": self.iterations_used,
            "final_D": self.final_D,
            "perturbed_points": int(self.mask.sum()),
            "perturbation_mask": [int(i) for i in np.flatnonzero(self.mask)],
            "per_point_displacement": [float(v) for v in self.per_point_displacement],
            "loss_trace": [b.to_dict() for b in self.loss_trace],
        }


def example_seed(seed, example_id):
    """Per-example seed independent of scheduling order."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(str(example_id).encode())]).generate_state(1)[0])


def select_salient(model, cloud, m, n, label=None):
    """Mask of the union of n-nearest neighbourhoods around the m highest-gradient points."""
    points = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    count = len(points)
    if m < 1 or n < 1:
        raise ConfigError("m and n must be at least 1")
    if m > count:
        raise CapacityError(f"m={m} exceeds the number of points {count}")
    label = getattr(cloud, "label", 0) if label is None else label
    _, grad = victim.input_gradient(model, points, "cross_entropy", {"label": label})
    norms = np.sqrt(np.einsum("ij,ij->i", grad, grad))
    vertices = np.argsort(-norms, kind="stable")[:m]
    mask = np.zeros(count, dtype=bool)
    for v in vertices:
        mask[core.knn_indices(points, v, n)] = True
    return mask


def _anchor_points(kind, positions, clean, mask):
    if kind == "l2":
        return clean[mask]
    return clean[nearest_indices(positions[mask], clean)]


def pwa_adjust(state, grad_J, grad_total, D, config):
    """Withdraw low-gradient perturbed points toward their anchors.

    ``grad_J`` and ``grad_total`` are |S_p| x 3 gradients for the perturbed
    points. When ``D > budget - h`` the anchors are refreshed, every point
    whose attack-gradient norm is below the selection threshold is moved
    toward its anchor by ``lr * gamma * |grad|`` of the offset, and its total
    gradient is zeroed. Returns ``(positions, grad_total, withdrawn)``; below
    the activation threshold the inputs are returned untouched.
    """
    withdrawn = np.zeros(len(grad_J), dtype=bool)
    if not D > config.budget - config.threshold:
        return state.positions, grad_total, withdrawn
    mask = state.mask
    state.anchors[mask] = _anchor_points(config.distance, state.positions, state.clean, mask)
    norms = np.sqrt(np.einsum("ij,ij->i", grad_J, grad_J))
    if config.w_mode == "absolute":
        cutoff = config.w
    else:
        cutoff = np.percentile(norms, config.w) if len(norms) else 0.0
    withdrawn = norms < cutoff
    if not withdrawn.any():
        return state.positions, grad_total, withdrawn
    positions = state.positions.copy()
    sub = positions[mask]
    anchors = state.anchors[mask]
    step = (config.lr * config.gamma * norms)[:, None]
    sub[withdrawn] = sub[withdrawn] - (sub[withdrawn] - anchors[withdrawn]) * step[withdrawn]
    positions[mask] = sub
    grad_total = grad_total.copy()
    grad_total[withdrawn] = 0.0
    return positions, grad_total, withdrawn


def run_attack(model, cloud, config, mask=None, variant="l3a"):
    """Attack one clean cloud; returns an :class:`AttackResult`."""
    clean = np.asarray(cloud.points, dtype=np.float64)
    label = int(cloud.label)
    clean_pred = int(np.argmax(victim.predict_probs(model, clean)))
    if mask is None:
        mask = select_salient(model, cloud, config.m, config.n) if config.local else np.ones(len(clean), bool)
    state = PerturbationState(
        clean=clean,
        mask=mask,
        positions=clean.copy(),
        anchors=clean.copy(),
        adam=core.AdamState.zeros_like(clean[mask], config.beta1, config.beta2),
    )
    warm = config.warmup_iters
    trace = []
    streak = 0
    pred = clean_pred
    used = config.iters
    for t in range(config.iters):
        state.iteration = t
        x = state.positions
        logits, cache = victim.forward(model, x)
        probs = core.softmax(logits[0])
        pred = int(np.argmax(probs))
        if t >= warm:
            if state.preferred_class is None or config.float_preferred:
                state.preferred_class = argmax_wrong_class(probs, label)
            streak = streak + 1 if pred != label else 0
            if config.early_stop and streak >= config.patience:
                used = t + 1
                break
        br, g_probs = attack_loss_J(
            probs, label, state.preferred_class if t >= warm else None,
            config.kappa2, config.kappa3, config.margin, config.use_score, config.use_cons,
        )
        g_logits = core.softmax_backward(g_probs, probs)
        grad_J = victim.backward(model, cache, g_logits[None])[0][0]
        D, grad_D = distance(config.distance, x, clean, mask)
        br.D = D
        br.total = br.J + config.kappa1 * D
        if not (np.isfinite(br.total) and np.isfinite(grad_J).all() and np.isfinite(grad_D).all()):
            raise NumericError(f"non-finite loss at iteration {t} for {cloud.id}: {br}")
        trace.append(br)
        g_sub = grad_J[mask] + config.kappa1 * grad_D[mask]
        withdrawn = np.zeros(len(g_sub), dtype=bool)
        if config.use_pwa and t > config.warmup * config.iters:
            state.positions, g_sub, withdrawn = pwa_adjust(state, grad_J[mask], g_sub, D, config)
        sub = state.positions[mask]
        stepped, state.adam = core.adam_step(sub, g_sub, state.adam, config.lr)
        # erased points take no optimizer step this iteration
        stepped[withdrawn] = sub[withdrawn]
        positions = state.positions.copy()
        positions[mask] = stepped
        state.positions = positions
    else:
        pred = int(np.argmax(victim.predict_probs(model, state.positions)))
    final = state.positions
    D_final, _ = distance(config.distance, final, clean, mask)
    disp = np.sqrt(np.einsum("ij,ij->i", final - clean, final - clean))
    return AttackResult(
        adversarial=cloud.with_points(final),
        success=pred != label,
        label=label,
        clean_pred=clean_pred,
        adv_pred=pred,
        preferred_class=state.preferred_class,
        iterations_used=used,
        final_D=D_final,
        per_point_displacement=disp,
        mask=mask,
        loss_trace=trace,
        variant=variant,
    )


def random_perturbation_baseline(cloud, budget, seed=0, kind="l2", tol=0.01):
    """Uniform noise on every coordinate, scaled so the distance to the clean cloud is ``budget``."""
    clean = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if budget <= 0:
        return cloud.with_points(clean.copy()) if isinstance(cloud, PointCloud) else clean.copy()
    noise = np.random.default_rng(seed).uniform(-1.0, 1.0, size=clean.shape)

    def dist(scale):
        return distance(kind, clean + scale * noise, clean)[0]

    scale = budget / dist(1.0)
    if kind != "l2":
        lo, hi = 0.0, scale
        while dist(hi) < budget:
            lo, hi = hi, 2 * hi
        for _ in range(200):
            if abs(dist(scale) - budget) <= tol * budget:
                break
            if dist(scale) < budget:
                lo = scale
            else:
                hi = scale
            scale = 0.5 * (lo + hi)
    out = clean + scale * noise
    return cloud.with_points(out) if isinstance(cloud, PointCloud) else out


def run_rp(model, cloud, config, variant="rp"):
    """Random-perturbation baseline packaged as an :class:`AttackResult`."""
    clean = np.asarray(cloud.points, dtype=np.float64)
    clean_pred = int(np.argmax(victim.predict_probs(model, clean)))
    adv = random_perturbation_baseline(cloud, config.budget, example_seed(config.seed, cloud.id), config.distance)
    pred = int(np.argmax(victim.predict_probs(model, adv.points)))
    D, _ = distance(config.distance, adv.points, clean)
    disp = np.sqrt(np.einsum("ij,ij->i", adv.points - clean, adv.points - clean))
    return AttackResult(adv, pred != cloud.label, int(cloud.label), clean_pred, pred, None, 0, D, disp,
                        np.ones(len(clean), bool), [], variant)


def resolve_variant(variant, config):
    """The concrete AttackConfig a named variant runs with (``rp`` keeps ``config`` as is)."""
    if variant == "rp":
        return config
    if variant not in PRESETS:
        raise ConfigError(f"unknown attack variant {variant!r}; choose from {', '.join(list(PRESETS) + ['rp'])}")
    return replace(config, **PRESETS[variant])


def attack_variant(model, cloud, variant, config):
    """Run a named variant (``rp``, ``l3a``, ``global-base``, ``groupN``) with ``config`` as the base."""
    if variant == "rp":
        return run_rp(model, cloud, config)
    return run_attack(model, cloud, resolve_variant(variant, config), variant=variant)
