"""Self-checks run by ``saliencystrike check``: gradients, distance axioms, PWA scenarios.

Each check returns ``(name, passed, detail)``. Module attributes are looked
up at call time so a test can patch a backward pass and watch the checks
fail.
"""

import numpy as np

from . import core, losses, victim
from .attack import AttackConfig, PerturbationState, pwa_adjust

GRAD_TOL = 1e-4
EXACT_TOL = 1e-9


def _fd(fn, x, eps=1e-6):
    return core.finite_diff_check(fn, x, eps)


def check_layers(seeds=range(5)):
    out = []
    worst = {"affine": 0.0, "relu": 0.0, "max_pool": 0.0, "softmax_ce": 0.0}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        b = rng.normal(size=2)
        up = rng.normal(size=(3, 2))

        def affine_in(v):
            return np.sum(core.affine_forward(v, w, b) * up), core.affine_backward(up, v, w)[0]

        def affine_w(v):
            return np.sum(core.affine_forward(x, v, b) * up), core.affine_backward(up, x, v)[1]

        def affine_b(v):
            return np.sum(core.affine_forward(x, w, v) * up), core.affine_backward(up, x, w)[2]

        worst["affine"] = max(worst["affine"], _fd(affine_in, x), _fd(affine_w, w), _fd(affine_b, b))

        # keep inputs away from the kink
        r = rng.normal(size=(3, 4))
        r = np.where(np.abs(r) < 0.1, 0.5, r)
        up_r = rng.normal(size=r.shape)

        def relu_fn(v):
            return np.sum(core.relu_forward(v) * up_r), core.relu_backward(up_r, v)

        worst["relu"] = max(worst["relu"], _fd(relu_fn, r))

        f = rng.permutation(24).reshape(6, 4).astype(float) + rng.uniform(0, 0.1, size=(6, 4))
        up_p = rng.normal(size=4)

        def pool_fn(v):
            pooled, routing = core.max_pool_points(v)
            return np.sum(pooled * up_p), core.max_pool_backward(up_p, routing, len(v))

        worst["max_pool"] = max(worst["max_pool"], _fd(pool_fn, f))

        logits = rng.normal(size=5)
        cls = int(rng.integers(5))

        def ce_fn(v):
            _, loss, g = core.softmax_cross_entropy(v, cls)
            return loss, g

        worst["softmax_ce"] = max(worst["softmax_ce"], _fd(ce_fn, logits))
    for name, err in worst.items():
        out.append((f"grad/{name}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    return out


def victim_fixture(arch, seed=0, n_points=16, num_classes=4):
    model = victim.build_model(arch, num_classes, [16, 24], 4 if arch == "dgcnn_mini" else None, seed=seed)
    rng = np.random.default_rng(1000 + seed)
    clean = rng.normal(size=(n_points, 3))
    clean /= np.linalg.norm(clean, axis=1).max()
    adv = clean + rng.normal(scale=0.05, size=clean.shape)
    mask = np.zeros(n_points, dtype=bool)
    mask[rng.choice(n_points, size=n_points // 2, replace=False)] = True
    adv[~mask] = clean[~mask]
    return model, clean, adv, mask


def victim_grad_error(arch, loss_kind, distance="l2", seed=0):
    """Max relative error of the input gradient for one fixture, graph held fixed."""
    model, clean, adv, mask = victim_fixture(arch, seed)
    label = seed % model.num_classes
    args = {"label": label, "preferred_class": (label + 1) % model.num_classes, "kappa2": 1.0, "kappa3": 0.5,
            "margin": 0.1, "clean": clean, "mask": mask, "distance": distance, "kappa1": 1.0}
    point = adv if loss_kind == "total" else clean
    neighbors = core.knn_table(point[None], model.k_neighbors) if model.k_neighbors else None

    def fn(v):
        return victim.input_gradient(model, v, loss_kind, args, neighbors=neighbors)

    return _fd(fn, point)


def check_victims(seeds=range(5)):
    out = []
    cases = [("cross_entropy", "l2"), ("attack", "l2"), ("total", "l2"), ("total", "chamfer"), ("total", "hausdorff")]
    for arch in victim.ARCHS:
        for kind, dist in cases:
            err = max(victim_grad_error(arch, kind, dist, s) for s in seeds)
            label = kind if kind != "total" else f"total+{dist}"
            out.append((f"grad/{arch}/{label}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    return out


def check_distance_grads(seeds=range(5)):
    out = []
    for name in losses.DISTANCE_KINDS:
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            a = rng.normal(size=(16, 3))
            b = rng.normal(size=(16, 3))
            worst = max(worst, _fd(lambda v: losses.distance(name, v, b), a))
        out.append((f"grad/distance/{name}", worst < GRAD_TOL, f"max rel err {worst:.2e}"))
    return out


def brute_chamfer(a, b):
    ab = sum(min(np.linalg.norm(x - y) for y in b) for x in a) / len(a)
    ba = sum(min(np.linalg.norm(x - y) for x in a) for y in b) / len(b)
    return ab + ba


def brute_hausdorff(a, b):
    return max(min(np.linalg.norm(x - y) for y in b) for x in a)


def brute_knn(points, query, k):
    d = [(float(np.sum((points[i] - points[query]) ** 2)), i) for i in range(len(points))]
    return [i for _, i in sorted(d)[:k]]


def check_distance_axioms(seed=0, sizes=((5, 7), (32, 48), (128, 96))):
    rng = np.random.default_rng(seed)
    ok = True
    worst = 0.0
    for na, nb in sizes:
        a = rng.normal(size=(na, 3))
        b = rng.normal(size=(nb, 3))
        for fn in (losses.d_chamfer, losses.d_hausdorff):
            ok &= fn(a, a)[0] == 0.0 and fn(a, b)[0] >= 0
        ok &= losses.d_l2(a, a)[0] == 0.0
        worst = max(worst, abs(losses.d_chamfer(a, b)[0] - losses.d_chamfer(b, a)[0]),
                    abs(losses.d_chamfer(a, b)[0] - brute_chamfer(a, b)),
                    abs(losses.d_hausdorff(a, b)[0] - brute_hausdorff(a, b)))
        q = int(rng.integers(na))
        k = int(rng.integers(1, na + 1))
        ok &= list(core.knn_indices(a, q, k)) == brute_knn(a, q, k)
    sub = np.zeros((1, 3))
    sup = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    ok &= losses.d_hausdorff(sub, sup)[0] == 0.0 and losses.d_hausdorff(sup, sub)[0] == 3.0
    ok &= worst < EXACT_TOL
    return [("distance/axioms", bool(ok), f"max deviation {worst:.2e}")]


def _pwa_state(positions, anchors):
    positions = np.asarray(positions, dtype=np.float64)
    mask = np.ones(len(positions), dtype=bool)
    return PerturbationState(clean=np.asarray(anchors, dtype=np.float64), mask=mask, positions=positions,
                             anchors=np.asarray(anchors, dtype=np.float64).copy(),
                             adam=core.AdamState.zeros_like(positions))


def check_pwa():
    ok = True
    cfg = AttackConfig(budget=0.3, h=0.05, w_mode="absolute", w=0.01, lr=0.001, gamma=1.0)
    state = _pwa_state([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]], [[0.9, 0.0, 0.0], [0.0, 0.0, 0.0]])
    gJ = np.array([[0.001, 0.0, 0.0], [1.0, 0.0, 0.0]])
    gT = np.array([[0.3, 0.2, 0.1], [0.4, 0.5, 0.6]])
    pos, g, withdrawn = pwa_adjust(state, gJ, gT, 0.28, cfg)
    ok &= bool(np.array_equal(withdrawn, [True, False]))
    ok &= bool(np.allclose(pos[0], [1.0 - 1e-7, 0.0, 0.0], rtol=0, atol=1e-15))
    ok &= bool(np.all(g[0] == 0)) and bool(np.array_equal(g[1], gT[1])) and bool(np.array_equal(pos[1], [0.5, 0.5, 0.0]))
    ok &= np.linalg.norm(pos[0] - [0.9, 0, 0]) <= np.linalg.norm(np.array([1.0, 0, 0]) - [0.9, 0, 0])
    # boundary: D == budget - h is below the strict threshold
    state = _pwa_state([[1.0, 0.0, 0.0]], [[0.9, 0.0, 0.0]])
    before, g_in = state.positions, gT[:1]
    pos, g, withdrawn = pwa_adjust(state, gJ[:1], g_in, cfg.budget - cfg.threshold, cfg)
    ok &= pos is before and g is g_in
    ok &= not withdrawn.any()
    # zero gradient point: selected, but the step is zero
    state = _pwa_state([[1.0, 0.0, 0.0]], [[0.9, 0.0, 0.0]])
    pos, g, withdrawn = pwa_adjust(state, np.zeros((1, 3)), gT[:1], 0.28, cfg)
    ok &= bool(withdrawn[0]) and bool(np.array_equal(pos[0], [1.0, 0.0, 0.0])) and bool(np.all(g == 0))
    return [("pwa/scenarios", bool(ok), "")]


def run_checks(quick=False):
    seeds = range(2) if quick else range(5)
    results = []
    results += check_layers(seeds)
    results += check_distance_grads(seeds)
    results += check_victims(seeds)
    results += check_distance_axioms()
    results += check_pwa()
    return results
