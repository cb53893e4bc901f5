"""Synthetic labelled shapes, normalization, and the xyz / manifest file formats."""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import ConfigError, DataError, ParseError

SHAPE_KINDS = ("sphere", "cube", "cylinder", "cone", "torus", "plane", "pyramid", "helix")

_SPLIT_CODES = {"train": 0, "test": 1}


@dataclass
class PointCloud:
    points: np.ndarray
    label: int
    id: str = ""
    label_name: str | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"points must be N x 3, got {self.points.shape}")
        if len(self.points) == 0:
            raise DataError("a point cloud needs at least one point")

    def __len__(self):
        return len(self.points)

    def with_points(self, points):
        return PointCloud(points, self.label, self.id, self.label_name)


@dataclass
class Dataset:
    train: list
    test: list
    class_names: list = field(default_factory=list)

    @property
    def num_classes(self):
        return len(self.class_names)


def cloud_rng(seed, *coords):
    """Independent generator per (seed, coords) so clouds can be built in any order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(c) for c in coords]]))


def normalize_unit_sphere(cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt(np.einsum("ij,ij->i", centered, centered)).max()
    if scale > 0:
        centered = centered / scale
    if isinstance(cloud, PointCloud):
        return cloud.with_points(centered)
    return centered


def _triangle_samples(rng, triangles, n):
    tri = np.asarray(triangles, dtype=np.float64)
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    choice = rng.choice(len(tri), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[choice]
    return t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])


def _sample_sphere(rng, n):
    # antipodal pairs (plus a zero-sum triangle when n is odd) put the centroid
    # at the origin, so normalization keeps every point on the unit sphere
    g = rng.standard_normal((n // 2 - (n % 2), 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    parts = [g, -g]
    if n % 2:
        u, v = np.linalg.qr(rng.standard_normal((3, 3)))[0][:, :2].T
        ang = rng.uniform(0, 2 * math.pi) + np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3])
        tri = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
        parts.append(tri - tri.mean(axis=0))
    return np.concatenate(parts)[rng.permutation(n)]


def _sample_cube(rng, n):
    face = rng.integers(0, 6, size=n)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    axis = face // 2
    pts[np.arange(n), axis] = np.where(face % 2 == 0, -1.0, 1.0)
    return pts


def _sample_cylinder(rng, n, radius=0.6, half_height=1.0):
    side = 2 * math.pi * radius * 2 * half_height
    cap = math.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * math.pi, size=n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.random(n)))
    z = np.where(part == 0, rng.uniform(-half_height, half_height, size=n),
                 np.where(part == 1, -half_height, half_height))
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sample_cone(rng, n, radius=1.0, height=2.0):
    slant = math.hypot(radius, height)
    lateral = math.pi * radius * slant
    base = math.pi * radius**2
    on_side = rng.random(n) < lateral / (lateral + base)
    theta = rng.uniform(0, 2 * math.pi, size=n)
    s = np.sqrt(rng.random(n))
    r = radius * s
    z = np.where(on_side, height * (1 - s), 0.0)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _sample_torus(rng, n, major=1.0, minor=0.35):
    out = np.empty((0, 3))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        u = rng.uniform(0, 2 * math.pi, size=m)
        v = rng.uniform(0, 2 * math.pi, size=m)
        # rejection step makes the density uniform in surface area
        keep = rng.random(m) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[keep], v[keep]
        ring = major + minor * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def _sample_plane(rng, n):
    xy = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.column_stack([xy, np.zeros(n)])


def _sample_pyramid(rng, n):
    b = [(-1, -1, 0), (1, -1, 0), (1, 1, 0), (-1, 1, 0)]
    apex = (0, 0, 1.5)
    tris = [(b[i], b[(i + 1) % 4], apex) for i in range(4)]
    tris += [(b[0], b[1], b[2]), (b[0], b[2], b[3])]
    return _triangle_samples(rng, tris, n)


def _sample_helix(rng, n, turns=3.0, pitch=0.25):
    # constant speed curve: uniform in parameter is uniform in arc length
    t = rng.uniform(0, 2 * math.pi * turns, size=n)
    z = 2 * pitch * (t / (2 * math.pi) - turns / 2)
    return np.stack([np.cos(t), np.sin(t), z], axis=1)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "plane": _sample_plane,
    "pyramid": _sample_pyramid,
    "helix": _sample_helix,
}


def gen_shape(kind, n_points=256, noise_sd=0.02, seed=0, rng=None, label=0, id=""):
    """Sample ``n_points`` on the surface of ``kind``, jitter, then normalize."""
    if kind not in _SAMPLERS:
        raise ConfigError(f"unknown shape kind {kind!r}; choose from {', '.join(SHAPE_KINDS)}")
    if n_points < 8:
        raise ConfigError(f"n_points must be at least 8, got {n_points}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    pts = _SAMPLERS[kind](rng, n_points)
    if noise_sd > 0:
        pts = pts + rng.normal(0.0, noise_sd, size=pts.shape)
    return PointCloud(normalize_unit_sphere(pts), label, id or kind, kind)


def build_dataset(per_class_train=100, per_class_test=30, n_points=256, noise_sd=0.02,
                  seed=0, kinds=SHAPE_KINDS):
    kinds = list(kinds)
    if per_class_train < 1 or per_class_test < 1:
        raise ConfigError("per-class counts must be at least 1")
    for kind in kinds:
        if kind not in _SAMPLERS:
            raise ConfigError(f"unknown shape kind {kind!r}")
    splits = {"train": [], "test": []}
    for split, count in (("train", per_class_train), ("test", per_class_test)):
        for label, kind in enumerate(kinds):
            class_code = SHAPE_KINDS.index(kind)
            for i in range(count):
                rng = cloud_rng(seed, _SPLIT_CODES[split], class_code, i)
                splits[split].append(
                    gen_shape(kind, n_points, noise_sd, rng=rng, label=label, id=f"{split}_{kind}_{i:04d}")
                )
    return Dataset(splits["train"], splits["test"], kinds)


def save_xyz(cloud, path):
    lines = []
    if cloud.label_name is not None:
        lines.append(f"# label {cloud.label_name}")
    lines.extend(f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in cloud.points)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_xyz(path, label=0, id=None):
    name = None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                parts = text[1:].split(None, 1)
                if lineno == 1 and len(parts) == 2 and parts[0] == "label":
                    name = parts[1].strip()
                    continue
                raise ParseError(f"{path}:{lineno}: unexpected comment line")
            fields = text.split()
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 coordinates, got {len(fields)}")
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no points")
    if id is None:
        id = os.path.splitext(os.path.basename(path))[0]
    return PointCloud(np.array(rows), label, id, name)


def write_dataset(dataset, root):
    """Write ``train/`` and ``test/`` xyz files plus ``manifest.csv``."""
    entries = []
    for split in ("train", "test"):
        os.makedirs(os.path.join(root, split), exist_ok=True)
        for cloud in getattr(dataset, split):
            rel = f"{split}/{cloud.id}.xyz"
            save_xyz(cloud, os.path.join(root, rel))
            entries.append((rel, dataset.class_names[cloud.label]))
    with open(os.path.join(root, "manifest.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(entries)


def read_dataset(root):
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no manifest.csv under {root}")
    with open(manifest, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label"]:
            raise ParseError(f"{manifest}: header must be 'path,label'")
        entries = list(reader)
    class_names = []
    for e in entries:
        if e["label"] not in class_names:
            class_names.append(e["label"])
    splits = {"train": [], "test": []}
    for e in entries:
        split = e["path"].split("/", 1)[0]
        if split not in splits:
            raise ParseError(f"{manifest}: path {e['path']!r} is not under train/ or test/")
        cloud = load_xyz(os.path.join(root, e["path"]), label=class_names.index(e["label"]))
        cloud.label_name = e["label"]
        splits[split].append(cloud)
    return Dataset(splits["train"], splits["test"], class_names)
