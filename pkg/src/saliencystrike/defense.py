"""Input-sanitization defenses: simple random sampling and statistical outlier removal."""

from dataclasses import dataclass

import numpy as np

from . import CapacityError, ConfigError
from .core import knn_table, pairwise_sq_dists
from .data import PointCloud

DEFENSE_KINDS = ("none", "srs", "sor")


@dataclass
class DefenseConfig:
    kind: str = "none"
    srs_drop_ratio: float = 0.125
    sor_k: int = 2
    sor_alpha: float = 1.1

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}; choose from {', '.join(DEFENSE_KINDS)}")
        if not 0 <= self.srs_drop_ratio < 1:
            raise ConfigError("srs_drop_ratio must be in [0, 1)")
        if self.sor_k < 1:
            raise ConfigError("sor_k must be at least 1")
        if self.sor_alpha < 0:
            raise ConfigError("sor_alpha must be non-negative")


def _points(cloud):
    return np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)


def _wrap(cloud, points):
    return cloud.with_points(points) if isinstance(cloud, PointCloud) else points


def srs_keep(n_points, drop_ratio, seed=0):
    if not 0 <= drop_ratio < 1:
        raise ConfigError(f"drop ratio must be in [0, 1), got {drop_ratio}")
    n_drop = int(np.floor(drop_ratio * n_points))
    keep = np.ones(n_points, dtype=bool)
    if n_drop:
        keep[np.random.default_rng(seed).choice(n_points, size=n_drop, replace=False)] = False
    return keep


def srs(cloud, drop_ratio=0.125, seed=0):
    """Drop ``floor(drop_ratio * N)`` points uniformly at random; survivors keep their order."""
    pts = _points(cloud)
    return _wrap(cloud, pts[srs_keep(len(pts), drop_ratio, seed)])


def sor_mean_distances(points, k):
    """Mean distance from each point to its k nearest other points."""
    points = _points(points)
    if k >= len(points):
        raise CapacityError(f"SOR needs k < N, got k={k}, N={len(points)}")
    nbrs = knn_table(points, k + 1)
    d = np.sqrt(pairwise_sq_dists(points, points))
    idx = np.arange(len(points))
    # drop self from each neighbourhood; with duplicates self need not sort first
    own = nbrs == idx[:, None]
    rows = []
    for i in range(len(points)):
        others = nbrs[i][~own[i]][:k]
        rows.append(d[i, others].mean())
    return np.array(rows)


def sor_keep(points, k=2, alpha=1.1):
    mean_d = sor_mean_distances(points, k)
    return mean_d <= mean_d.mean() + alpha * mean_d.std()


def sor(cloud, k=2, alpha=1.1):
    """Remove points whose mean k-NN distance exceeds ``mean + alpha * std`` over the cloud."""
    pts = _points(cloud)
    return _wrap(cloud, pts[sor_keep(pts, k, alpha)])


def apply_defense(cloud, config, seed=0):
    if config.kind == "none":
        return cloud
    if config.kind == "srs":
        return srs(cloud, config.srs_drop_ratio, seed)
    return sor(cloud, config.sor_k, config.sor_alpha)
