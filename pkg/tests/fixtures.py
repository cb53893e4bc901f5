import numpy as np

from saliencystrike import data


def sphere_with_outlier(n=100, seed=0):
    """n points on the unit sphere plus one far point at (10, 10, 10)."""
    sphere = data.gen_shape("sphere", n, noise_sd=0.0, seed=seed).points
    return np.vstack([sphere, [[10.0, 10.0, 10.0]]])


# criterion number -> (passed, detail); filled by test_acceptance, printed by conftest
ACCEPTANCE = {}

CRITERIA = {
    1: "gradient oracle suite",
    2: "distance-metric axioms",
    3: "desk-scale training",
    4: "attack efficacy vs random perturbation",
    5: "displacement histogram trend",
    6: "PWA unit scenarios",
    7: "ablation grid",
    8: "defense behavior",
    9: "determinism",
}


def record(n, passed, detail):
    ACCEPTANCE[n] = (bool(passed), detail)
    return bool(passed)
