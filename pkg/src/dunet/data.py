"""Synthetic labeled point clouds, ``.duc`` text files and augmentation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ParseError
from .geometry import PointCloud

CLS_PRIMITIVES = ("sphere", "cube", "cylinder", "cone", "torus")
SEG_COMPOSITES = ("capsule", "rocket", "mushroom")
FAMILIES = ("cls-primitives", "seg-composites")


@dataclass
class SyntheticSpec:
    family: str = "cls-primitives"
    points: int = 512
    per_class: int = 10
    noise: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.points < 64:
            raise ValueError(f"clouds need at least 64 points, got {self.points}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


@dataclass
class AugmentSpec:
    rotation: str = "none"
    scale_lo: float = 1.0
    scale_hi: float = 1.0
    anisotropic: bool = False
    translate: float = 0.0
    jitter: float = 0.0

    def __post_init__(self):
        if self.rotation not in ("none", "z", "full"):
            raise ValueError(f"unknown rotation mode {self.rotation!r}")
        if not 0 < self.scale_lo <= self.scale_hi:
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got [{self.scale_lo}, {self.scale_hi}]")

    @property
    def is_identity(self):
        return (self.rotation == "none" and self.scale_lo == self.scale_hi == 1.0
                and self.translate == 0.0 and self.jitter == 0.0)


# --- surface samplers -------------------------------------------------------

def _split(rng, n, areas):
    areas = np.asarray(areas, dtype=np.float64)
    return rng.multinomial(n, areas / areas.sum())


def _sphere(rng, n, radius=1.0):
    v = rng.normal(size=(n, 3))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def _disk(rng, n, radius, z, r_min=0.0):
    r = np.sqrt(rng.uniform(r_min ** 2, radius ** 2, n))
    t = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([r * np.cos(t), r * np.sin(t), np.full(n, z)])


def _tube(rng, n, radius, z0, z1):
    t = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([radius * np.cos(t), radius * np.sin(t), rng.uniform(z0, z1, n)])


def _cone_side(rng, n, radius, z_base, height):
    # radius shrinks linearly from base to apex; area density grows with radius
    s = np.sqrt(rng.uniform(0, 1, n))
    t = rng.uniform(0, 2 * np.pi, n)
    r = radius * s
    return np.column_stack([r * np.cos(t), r * np.sin(t), z_base + height * (1 - s)])


def _hemisphere(rng, n, radius, z_center):
    p = _sphere(rng, n, radius)
    p[:, 2] = np.abs(p[:, 2]) + z_center
    return p


def _cube(rng, n, half):
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-half, half, (n, 2))
    p = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    for a in range(3):
        m = axis == a
        others = [b for b in range(3) if b != a]
        p[m, a] = sign[m] * half
        p[m, others[0]] = uv[m, 0]
        p[m, others[1]] = uv[m, 1]
    return p


def _cylinder(rng, n, radius, height):
    lat, top, bot = _split(rng, n, [2 * np.pi * radius * height, np.pi * radius ** 2, np.pi * radius ** 2])
    return np.vstack([_tube(rng, lat, radius, -height / 2, height / 2),
                      _disk(rng, top, radius, height / 2), _disk(rng, bot, radius, -height / 2)])


def _cone(rng, n, radius, height):
    side, base = _split(rng, n, [np.pi * radius * np.hypot(radius, height), np.pi * radius ** 2])
    return np.vstack([_cone_side(rng, side, radius, -height / 2, height), _disk(rng, base, radius, -height / 2)])


def _torus(rng, n, major, minor):
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.uniform(0, 2 * np.pi, 2 * n)
        v = rng.uniform(0, 2 * np.pi, 2 * n)
        accept = rng.uniform(0, 1, 2 * n) < (major + minor * np.cos(v)) / (major + minor)
        u, v = u[accept], v[accept]
        ring = major + minor * np.cos(v)
        out.append(np.column_stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(v)]))
    return np.vstack(out)[:n]


def _primitive(rng, kind, n):
    jitter = lambda: rng.uniform(0.85, 1.15)  # noqa: E731
    if kind == "sphere":
        return _sphere(rng, n, 1.0)
    if kind == "cube":
        return _cube(rng, n, 0.6 * jitter())
    if kind == "cylinder":
        return _cylinder(rng, n, 0.5 * jitter(), 1.4 * jitter())
    if kind == "cone":
        return _cone(rng, n, 0.6 * jitter(), 1.4 * jitter())
    return _torus(rng, n, 0.7 * jitter(), 0.25 * jitter())


def _composite(rng, kind, n):
    """Two-part shape; returns positions, part labels, distance to the part interface."""
    r = rng.uniform(0.35, 0.55)
    h = rng.uniform(0.8, 1.6)
    top_z = h / 2
    if kind == "capsule":
        areas = [2 * np.pi * r * h, np.pi * r ** 2, 2 * np.pi * r ** 2]
        lat, bot, cap = _split(rng, n, areas)
        parts = [_tube(rng, lat, r, -h / 2, top_z), _disk(rng, bot, r, -h / 2), _hemisphere(rng, cap, r, top_z)]
        labels = [0, 0, 1]
        ring = r
    elif kind == "rocket":
        hc = rng.uniform(0.5, 1.0)
        areas = [2 * np.pi * r * h, np.pi * r ** 2, np.pi * r * np.hypot(r, hc)]
        lat, bot, cap = _split(rng, n, areas)
        parts = [_tube(rng, lat, r, -h / 2, top_z), _disk(rng, bot, r, -h / 2), _cone_side(rng, cap, r, top_z, hc)]
        labels = [0, 0, 1]
        ring = r
    else:
        rs = 0.45 * r
        rc = rng.uniform(1.6, 2.2) * r
        areas = [2 * np.pi * rs * h, np.pi * rs ** 2, 2 * np.pi * rc ** 2, np.pi * (rc ** 2 - rs ** 2)]
        lat, bot, dome, under = _split(rng, n, areas)
        parts = [_tube(rng, lat, rs, -h / 2, top_z), _disk(rng, bot, rs, -h / 2),
                 _hemisphere(rng, dome, rc, top_z), _disk(rng, under, rc, top_z, r_min=rs)]
        labels = [0, 0, 1, 1]
        ring = rs
    pos = np.vstack(parts)
    lab = np.concatenate([np.full(len(p), l) for p, l in zip(parts, labels)])
    radial = np.hypot(pos[:, 0], pos[:, 1])
    dist = np.hypot(radial - ring, pos[:, 2] - top_z)
    return pos, lab, dist


def _normalize(pos):
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    center = (lo + hi) / 2
    pos = pos - center
    return pos / np.linalg.norm(pos, axis=1).max()


def generate(spec):
    """Deterministic list of clouds for ``spec``; each cloud uses its own seeded stream."""
    kinds = CLS_PRIMITIVES if spec.family == "cls-primitives" else SEG_COMPOSITES
    clouds = []
    for class_id, kind in enumerate(kinds):
        for i in range(spec.per_class):
            rng = np.random.default_rng([spec.seed, class_id, i])
            name = f"{kind}_{i:04d}"
            if spec.family == "cls-primitives":
                pos = _primitive(rng, kind, spec.points)
                pos = pos + rng.normal(scale=spec.noise, size=pos.shape)
                labels = np.full(spec.points, class_id)
                clouds.append(PointCloud(pos, labels=labels, name=name))
            else:
                pos, labels, dist = _composite(rng, kind, spec.points)
                diag = np.linalg.norm(pos.max(axis=0) - pos.min(axis=0))
                boundary = dist <= 0.05 * diag
                pos = pos + rng.normal(scale=spec.noise, size=pos.shape)
                order = rng.permutation(spec.points)
                clouds.append(PointCloud(_normalize(pos[order]), labels=labels[order], name=name,
                                         boundary=boundary[order]))
    return clouds


def category_of(cloud):
    return cloud.name.rsplit("_", 1)[0]


def checksum(clouds):
    h = hashlib.sha256()
    for c in clouds:
        h.update(c.positions.tobytes())
        if c.labels is not None:
            h.update(c.labels.tobytes())
    return h.hexdigest()


# --- .duc files --------------------------------------------------------------

def write_cloud(cloud, path):
    """Write ``duc v1 N d has_labels`` then one ``x y z f1..fd [label]`` row per point."""
    n = len(cloud)
    feats = cloud.features if cloud.features is not None else np.zeros((n, 0))
    has_labels = cloud.labels is not None
    lines = [f"duc v1 {n} {feats.shape[1]} {int(has_labels)}"]
    for i in range(n):
        row = [repr(float(v)) for v in cloud.positions[i]] + [repr(float(v)) for v in feats[i]]
        if has_labels:
            row.append(str(int(cloud.labels[i])))
        lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path):
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{path}: empty file or missing header", line=1)
    head = lines[0].split()
    if len(head) != 5 or head[:2] != ["duc", "v1"]:
        raise ParseError(f"{path}: expected header 'duc v1 N d has_labels'", line=1)
    try:
        n, d, has_labels = int(head[2]), int(head[3]), int(head[4])
    except ValueError:
        raise ParseError(f"{path}: non-integer header field", line=1) from None
    if n < 0 or d < 0 or has_labels not in (0, 1):
        raise ParseError(f"{path}: invalid header values", line=1)
    width = 3 + d + has_labels
    rows = [ln for ln in lines[1:]]
    while rows and not rows[-1].strip():
        rows.pop()
    if len(rows) != n:
        raise ParseError(f"{path}: header declares {n} points, found {len(rows)} rows", line=len(rows) + 2)
    values = np.empty((n, 3 + d))
    labels = np.empty(n, dtype=np.int64) if has_labels else None
    for i, ln in enumerate(rows):
        parts = ln.split()
        if len(parts) != width:
            raise ParseError(f"{path}: expected {width} columns, got {len(parts)}", line=i + 2)
        try:
            values[i] = [float(v) for v in parts[:3 + d]]
            if has_labels:
                labels[i] = int(parts[-1])
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", line=i + 2) from None
    return PointCloud(values[:, :3], features=values[:, 3:] if d else None, labels=labels, name=path.stem)


def load_dir(directory):
    files = sorted(Path(directory).glob("*.duc"))
    return [read_cloud(f) for f in files]


# --- augmentation ------------------------------------------------------------

def augment(cloud, spec, rng):
    """Rotate, scale, translate, then jitter; labels and point count are untouched."""
    pos = cloud.positions.copy()
    if spec.rotation == "z":
        angle = rng.uniform(0, 2 * np.pi)
        c, s = np.cos(angle), np.sin(angle)
        pos = pos @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    elif spec.rotation == "full":
        pos = pos @ Rotation.random(random_state=rng).as_matrix().T
    if spec.scale_lo != 1.0 or spec.scale_hi != 1.0:
        size = 3 if spec.anisotropic else 1
        pos = pos * rng.uniform(spec.scale_lo, spec.scale_hi, size)
    if spec.translate:
        pos = pos + rng.uniform(-spec.translate, spec.translate, 3)
    if spec.jitter:
        pos = pos + rng.normal(scale=spec.jitter, size=pos.shape)
    return PointCloud(pos, features=cloud.features, labels=cloud.labels, name=cloud.name, boundary=cloud.boundary)
