"""Classical explicit diffusion on point clouds with handcrafted diffusivities.

This is the non-learned reference for the diffusion unit: with a constant
diffusivity ``g == w`` and ``tau == 1`` one step equals a diffusion unit whose
filter is ``w * I`` and which has no BN/ReLU wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, StabilityError
from .geometry import NeighborIndex, PointCloud, self_excluded_knn
from .layers import DiffusionUnit, DiffusionUnitSpec


@dataclass(frozen=True)
class DiffusivityFn:
    tag: str = "constant"
    lam: float = 1.0
    value: float = 1.0

    def __post_init__(self):
        if self.tag not in ("constant", "perona-malik"):
            raise ValueError(f"unknown diffusivity {self.tag!r}")
        if self.lam <= 0:
            raise ValueError(f"contrast parameter must be positive, got {self.lam}")

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        if self.tag == "constant":
            return np.full_like(s, self.value)
        return 1.0 / (1.0 + (s / self.lam) ** 2)

    @property
    def bound(self):
        """Supremum of ``|g|``."""
        return abs(self.value) if self.tag == "constant" else 1.0


def perona_malik(lam):
    return DiffusivityFn("perona-malik", lam=lam)


def constant(value=1.0):
    return DiffusivityFn("constant", value=value)


def classic_diffusion_step(features, nbrs, g, tau):
    """One explicit step ``u_s += tau * mean_n g(|u_n - u_s|) (u_n - u_s)``."""
    if tau <= 0:
        raise StabilityError(f"step size must be positive, got {tau}")
    if tau * g.bound > 1.0:
        raise StabilityError(f"tau * max|g| = {tau * g.bound} exceeds 1")
    u = np.asarray(features, dtype=np.float64)
    squeeze = u.ndim == 1
    if squeeze:
        u = u[:, None]
    diff = u[nbrs.indices] - u[nbrs.center_rows()]
    mag = np.sqrt((diff * diff).sum(axis=1))
    flux = g(mag)[:, None] * diff
    counts = nbrs.counts.astype(np.float64)[:, None]
    update = T.segment_sum_np(flux, nbrs.offsets) / counts
    out = u.copy()
    out[nbrs.centers] = u[nbrs.centers] + tau * update
    return out[:, 0] if squeeze else out


@dataclass
class DiffusionRun:
    steps: int
    tau: float
    snapshots: list = field(default_factory=list)
    contrast: list = field(default_factory=list)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def region_contrast(features, labels):
    u = np.asarray(features, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    a = u[labels == 0].mean(axis=0)
    b = u[labels == 1].mean(axis=0)
    return float(np.linalg.norm(a - b))


def diffuse(cloud, g, steps, tau, k=16, nbrs=None, keep_snapshots=False):
    """Run ``steps`` explicit steps on ``cloud.features`` and track region contrast."""
    if cloud.labels is None:
        raise ValueError("contrast tracking needs a labeled two-region cloud")
    if len(np.unique(cloud.labels)) != 2:
        raise ValueError("contrast tracking needs exactly two regions")
    nbrs = self_excluded_knn(cloud.positions, k) if nbrs is None else nbrs
    u = cloud.features.copy()
    run = DiffusionRun(steps=steps, tau=tau)
    labels = np.unique(cloud.labels, return_inverse=True)[1]
    base = region_contrast(u, labels)
    run.contrast.append((0, 1.0))
    if keep_snapshots:
        run.snapshots.append(u.copy())
    for t in range(1, steps + 1):
        u = classic_diffusion_step(u, nbrs, g, tau)
        run.contrast.append((t, region_contrast(u, labels) / base))
        if keep_snapshots:
            run.snapshots.append(u.copy())
    return run


def contrast_ratio(run):
    """Series of ``(step, |mean_A - mean_B| / initial)``."""
    return list(run.contrast)


def two_region_cloud(n=256, contrast=1.0, seed=0):
    """Points uniform in the unit square (z=0), left half 0, right half ``contrast``."""
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0.0, 1.0, size=(n, 2))
    labels = (xy[:, 0] >= 0.5).astype(np.int64)
    pos = np.column_stack([xy, np.zeros(n)])
    return PointCloud(pos, features=labels[:, None] * float(contrast), labels=labels, name="two-region")


def step_edge_profile(n=64, sharpness=4.0):
    """``tanh(sharpness * x)`` sampled at ``n`` points of x in [-1, 1] along the x axis."""
    if n < 8:
        raise ValueError(f"step edge needs at least 8 samples, got {n}")
    x = np.linspace(-1.0, 1.0, n)
    pos = np.column_stack([x, np.zeros(n), np.zeros(n)])
    return PointCloud(pos, features=np.tanh(sharpness * x)[:, None], name=f"tanh{sharpness:g}")


def edge_response(weight, cloud=None, k=2):
    """Change of |u_x| at the steepest sample pair after one diffusion-unit step.

    The unit uses the linear filter ``weight * I`` and no BN/ReLU wrapper.
    """
    cloud = step_edge_profile() if cloud is None else cloud
    order = np.argsort(cloud.positions[:, 0], kind="stable")
    x = cloud.positions[order, 0]
    u = cloud.features[order, 0]
    du = np.diff(u)
    if not (np.all(du >= 0) or np.all(du <= 0)):
        raise ContractError("edge profile must be monotone along x")
    nbrs = self_excluded_knn(cloud.positions, k)
    unit = DiffusionUnit(DiffusionUnitSpec(1, k=k, enable_phi=True, enable_varphi=False))
    unit.phi.weight.data[...] = weight
    with T.no_grad():
        out = unit(T.Tensor(cloud.features), nbrs).data[order, 0]
    slope_before = np.abs(du / np.diff(x))
    slope_after = np.abs(np.diff(out) / np.diff(x))
    i = int(np.argmax(slope_before))
    return float(slope_after[i] - slope_before[i])


def edge_response_sign(weight, cloud=None, k=2):
    return int(np.sign(edge_response(weight, cloud, k)))


def mutual_knn(positions, k):
    """Symmetrized kNN graph: s and n are neighbors if either lists the other."""
    base = self_excluded_knn(positions, k)
    n = len(base)
    rows = base.center_rows()
    pairs = np.unique(np.concatenate([
        np.stack([rows, base.indices], axis=1),
        np.stack([base.indices, rows], axis=1),
    ]), axis=0)
    counts = np.bincount(pairs[:, 0], minlength=n)
    return NeighborIndex(np.concatenate([[0], np.cumsum(counts)]), pairs[:, 1], np.arange(n))
