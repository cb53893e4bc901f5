"""Published full-scale attack success rates, shown next to desk-scale results.

These are context values only (1024-point ModelNet40 victims); nothing in
the toolkit computes or asserts them.
"""

VICTIM_NAMES = {"pointnet_mini": "PointNet", "dgcnn_mini": "DGCNN"}

# victim -> budget -> distance -> (none, sor, srs)
MAIN_GRID = {
    "PointNet": {
        0.001: {"l2": (0.997, 0.926, 0.996), "chamfer": (0.997, 0.927, 0.997), "hausdorff": (0.997, 0.915, 0.997)},
        0.0025: {"l2": (0.997, 0.927, 0.996), "chamfer": (0.997, 0.927, 0.997), "hausdorff": (0.997, 0.924, 0.997)},
        0.005: {"l2": (0.997, 0.927, 0.996), "chamfer": (0.997, 0.927, 0.997), "hausdorff": (0.997, 0.924, 0.997)},
    },
    "PointNet++": {
        0.001: {"l2": (0.970, 0.940, 0.885), "chamfer": (0.972, 0.940, 0.892), "hausdorff": (0.970, 0.929, 0.900)},
        0.0025: {"l2": (0.969, 0.932, 0.905), "chamfer": (0.973, 0.924, 0.892), "hausdorff": (0.974, 0.944, 0.894)},
        0.005: {"l2": (0.968, 0.933, 0.895), "chamfer": (0.970, 0.934, 0.897), "hausdorff": (0.973, 0.929, 0.893)},
    },
    "DGCNN": {
        0.001: {"l2": (0.988, 0.970, 0.970), "chamfer": (0.990, 0.960, 0.974), "hausdorff": (0.989, 0.957, 0.975)},
        0.0025: {"l2": (0.989, 0.958, 0.958), "chamfer": (0.990, 0.960, 0.971), "hausdorff": (0.989, 0.960, 0.976)},
        0.005: {"l2": (0.990, 0.960, 0.960), "chamfer": (0.990, 0.960, 0.977), "hausdorff": (0.989, 0.964, 0.978)},
    },
}

# ablation group -> (PointNet, PointNet++, DGCNN)
ABLATION = {
    1: (0.983, 0.961, 1.000),
    2: (0.988, 0.972, 1.000),
    3: (1.000, 0.999, 1.000),
    4: (0.983, 0.963, 1.000),
    5: (0.972, 0.940, 0.980),
    6: (1.000, 0.999, 1.000),
    7: (1.000, 0.999, 1.000),
    8: (0.972, 0.945, 0.982),
    9: (0.993, 0.989, 0.999),
}

# (m, n) -> (perturbed proportion, PointNet, PointNet++, DGCNN)
SUBSET_SWEEP = {
    (30, 30): (0.2506, 0.955, 0.899, 0.952),
    (30, 40): (0.2592, 0.955, 0.905, 0.951),
    (30, 50): (0.2656, 0.955, 0.901, 0.949),
    (40, 30): (0.3217, 0.962, 0.917, 0.973),
    (40, 40): (0.3228, 0.962, 0.920, 0.974),
    (40, 50): (0.3353, 0.963, 0.919, 0.970),
    (50, 30): (0.3751, 0.968, 0.928, 0.984),
    (50, 40): (0.3922, 0.968, 0.926, 0.984),
    (50, 50): (0.3953, 0.968, 0.929, 0.985),
}

# method -> (PointNet, PointNet++, DGCNN)
BASELINES = {
    "l3a": (0.993, 0.989, 0.999),
    "rp": (0.124, 0.094, 0.116),
}

# average ASR drop under SOR (absolute), per victim
SOR_DROP = {"PointNet": 0.072, "PointNet++": 0.037, "DGCNN": 0.028}

_COLUMN = {"PointNet": 0, "PointNet++": 1, "DGCNN": 2}
_DEFENSE_COLUMN = {"none": 0, "sor": 1, "srs": 2}


def reference_asr(grid, victim_arch, variant, distance="l2", budget=None, defense="none", m=None, n=None):
    """Published ASR for a comparable cell, or None when there is none."""
    name = VICTIM_NAMES.get(victim_arch)
    if name is None:
        return None
    col = _COLUMN[name]
    if grid == "ablation" and variant.startswith("group") and defense == "none":
        return ABLATION[int(variant[5:])][col]
    if grid == "sweep" and (m, n) in SUBSET_SWEEP and defense == "none":
        return SUBSET_SWEEP[(m, n)][col + 1]
    if grid == "baselines" and variant in BASELINES and defense == "none":
        return BASELINES[variant][col]
    if variant == "l3a" and grid == "main":
        cell = MAIN_GRID[name].get(budget, {}).get(distance)
        return None if cell is None else cell[_DEFENSE_COLUMN[defense]]
    if variant == "rp" and defense == "none":
        return BASELINES["rp"][col]
    return None


def reference_proportion(m, n):
    entry = SUBSET_SWEEP.get((m, n))
    return None if entry is None else entry[0]
