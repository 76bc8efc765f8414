"""DU-Net: KPConv-l + diffusion-unit encoder with classification and segmentation heads."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import DimensionError, SpecError
from .geometry import (
    NeighborIndex,
    adaptive_radius_neighbors,
    concat_neighbors,
    farthest_point_sample,
    interpolation_weights,
    radius_neighbors,
    self_excluded_knn,
)
from .layers import (
    DiffusionUnit,
    DiffusionUnitSpec,
    Dropout,
    KPConvL,
    Linear,
    Module,
    PointwiseBlock,
    BatchNorm,
    global_max_pool,
    smoothness,
)

TASKS = ("classification", "segmentation")


@dataclass
class ModelConfig:
    task: str = "classification"
    widths: tuple = (64, 128, 256, 512)
    ratios: tuple = (0.25, 0.25, 0.25, 0.25)
    k: int = 16
    enable_phi: bool = True
    enable_varphi: bool = True
    repeat: int = 1
    num_classes: int = 5
    num_parts: int = 2
    in_channels: int = 3
    lift_width: int = 64
    kernel_points: int = 15
    conv_radius: tuple | None = None
    conv_cap: int = 32
    head_widths: tuple = (512, 256)
    dropout: float = 0.5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.ratios = tuple(float(r) for r in self.ratios)
        self.head_widths = tuple(int(w) for w in self.head_widths)
        if self.conv_radius is not None:
            self.conv_radius = tuple(float(r) for r in self.conv_radius)
        self.validate()

    def validate(self):
        if self.task not in TASKS:
            raise SpecError(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.widths) != 4 or len(self.ratios) != 4:
            raise SpecError("exactly four encoder stages (widths and ratios) are required")
        if not all(0.0 < r <= 1.0 for r in self.ratios):
            raise SpecError(f"downsample ratios must lie in (0, 1], got {self.ratios}")
        d_prev = self.lift_width
        for w in self.widths:
            if w <= 0 or w % d_prev:
                raise SpecError(f"stage width {w} is not a positive multiple of its input width {d_prev}")
            d_prev = w
        if self.conv_radius is not None and len(self.conv_radius) != 4:
            raise SpecError("conv_radius needs one radius per stage")
        if self.repeat < 1 or self.k < 1:
            raise SpecError("repeat and k must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise SpecError("dropout must lie in [0, 1)")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise SpecError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# --- geometry ------------------------------------------------------------------

@dataclass
class Geometry:
    """Precomputed neighborhoods for one cloud or a batch of concatenated clouds.

    Level 0 is the input cloud; level i (1..4) holds the centers of encoder stage i.
    """

    positions: list
    level_offsets: list
    du_nbrs: list
    conv_nbrs: list
    conv_sigma: list
    up: list = field(default_factory=list)

    @property
    def num_clouds(self):
        return len(self.level_offsets[0]) - 1


def level_sizes(n, ratios):
    sizes = [n]
    for r in ratios:
        sizes.append(max(1, int(np.floor(sizes[-1] * r + 0.5))))
    return sizes


def cloud_geometry(positions, cfg):
    """Neighborhood structure of a single cloud; a deterministic function of its geometry."""
    pos = [np.asarray(positions, dtype=np.float64)]
    conv_nbrs, conv_sigma, du_nbrs = [], [], []
    du_nbrs.append(self_excluded_knn(pos[0], cfg.k) if cfg.task == "segmentation" else None)
    for stage, n_out in enumerate(level_sizes(len(pos[0]), cfg.ratios)[1:]):
        src = pos[-1]
        centers = src[farthest_point_sample(src, n_out)]
        if cfg.conv_radius is None:
            nbrs, r = adaptive_radius_neighbors(centers, src, cfg.k, cfg.conv_cap)
        else:
            r = cfg.conv_radius[stage]
            nbrs = radius_neighbors(centers, src, r, cfg.conv_cap)
        conv_nbrs.append(nbrs)
        conv_sigma.append(np.full(n_out, r))
        du_nbrs.append(self_excluded_knn(centers, cfg.k))
        pos.append(centers)
    up = []
    if cfg.task == "segmentation":
        for lvl in range(4):
            coarse = pos[lvl + 1]
            up.append(interpolation_weights(pos[lvl], coarse, k=min(3, len(coarse))))
    return Geometry(pos, [np.array([0, len(p)]) for p in pos], du_nbrs, conv_nbrs, conv_sigma, up)


def merge_geometry(parts):
    """Concatenate per-cloud geometries into one batch with global point ids."""
    if len(parts) == 1:
        return parts[0]
    n_levels = len(parts[0].positions)
    starts = [np.concatenate([[0], np.cumsum([len(g.positions[l]) for g in parts])]) for l in range(n_levels)]

    du = []
    for lvl in range(n_levels):
        if parts[0].du_nbrs[lvl] is None:
            du.append(None)
            continue
        du.append(concat_neighbors([g.du_nbrs[lvl].shifted(starts[lvl][b], starts[lvl][b])
                                    for b, g in enumerate(parts)]))
    conv = [concat_neighbors([g.conv_nbrs[s].shifted(starts[s][b], starts[s + 1][b]) for b, g in enumerate(parts)])
            for s in range(n_levels - 1)]
    sigma = [np.concatenate([g.conv_sigma[s] for g in parts]) for s in range(n_levels - 1)]
    up = []
    for lvl in range(len(parts[0].up)):
        nb = concat_neighbors([g.up[lvl][0].shifted(starts[lvl + 1][b], starts[lvl][b]) for b, g in enumerate(parts)])
        up.append((nb, np.concatenate([g.up[lvl][1] for g in parts])))
    return Geometry(
        [np.concatenate([g.positions[l] for g in parts]) for l in range(n_levels)],
        starts, du, conv, sigma, up,
    )


# --- network -------------------------------------------------------------------

class EncoderStage(Module):
    def __init__(self, d_in, d_out, cfg, rng):
        super().__init__()
        self.conv = KPConvL(d_in, d_out, l=cfg.kernel_points, rng=rng)
        self.bn = BatchNorm(d_out)
        self.du = DiffusionUnit(DiffusionUnitSpec(d_out, cfg.k, cfg.enable_phi, cfg.enable_varphi, cfg.repeat), rng=rng)

    def forward(self, u, geo, stage):
        x = self.conv(u, geo.positions[stage], geo.positions[stage + 1], geo.conv_nbrs[stage], geo.conv_sigma[stage])
        x = T.relu(self.bn(x))
        return self.du(x, geo.du_nbrs[stage + 1])


class DecoderStage(Module):
    """3-NN upsample, concatenate the skip features, fuse pointwise, then diffuse."""

    def __init__(self, d_coarse, d_skip, cfg, rng):
        super().__init__()
        self.fuse = PointwiseBlock(d_coarse + d_skip, d_skip, rng)
        self.du = DiffusionUnit(DiffusionUnitSpec(d_skip, cfg.k, cfg.enable_phi, cfg.enable_varphi, cfg.repeat), rng=rng)

    def forward(self, coarse, skip, geo, level):
        nbrs, weights = geo.up[level]
        up = T.segment_sum(T.gather_rows(coarse, nbrs.indices) * weights[:, None], nbrs.offsets)
        x = self.fuse(T.concat([up, skip], axis=1))
        return self.du(x, geo.du_nbrs[level])


class DUNet(Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self._dropout_rng = np.random.default_rng([seed, 1])
        self.lift = PointwiseBlock(cfg.in_channels, cfg.lift_width, rng)
        self.encoder = Module()
        level_widths = [cfg.lift_width, *cfg.widths]
        for s in range(4):
            setattr(self.encoder, f"stage{s + 1}", EncoderStage(level_widths[s], level_widths[s + 1], cfg, rng))
        if cfg.task == "classification":
            self.head = Module()
            d = cfg.widths[-1]
            for i, hw in enumerate(cfg.head_widths):
                setattr(self.head, f"fc{i + 1}", PointwiseBlock(d, hw, rng))
                setattr(self.head, f"drop{i + 1}", Dropout(cfg.dropout, self._dropout_rng))
                d = hw
            self.head.out = Linear(d, cfg.num_classes, rng=rng)
        else:
            self.decoder = Module()
            d = cfg.widths[-1]
            for j in range(4):
                lvl = 3 - j
                setattr(self.decoder, f"stage{j + 1}", DecoderStage(d, level_widths[lvl], cfg, rng))
                d = level_widths[lvl]
            self.head = Module()
            self.head.fc1 = PointwiseBlock(d, d, rng)
            self.head.drop1 = Dropout(cfg.dropout, self._dropout_rng)
            self.head.out = Linear(d, cfg.num_parts, rng=rng)

    def geometry(self, clouds):
        return merge_geometry([cloud_geometry(c.positions, self.cfg) for c in clouds])

    def inputs(self, clouds):
        feats = [cloud_input(c, self.cfg) for c in clouds]
        return T.Tensor(np.concatenate(feats))

    def forward(self, x, geo):
        if x.shape[1] != self.cfg.in_channels:
            raise DimensionError(f"model expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        u = self.lift(x)
        skips = [u]
        for s in range(4):
            u = getattr(self.encoder, f"stage{s + 1}")(u, geo, s)
            skips.append(u)
        if self.cfg.task == "classification":
            u = global_max_pool(u, geo.level_offsets[4])
            for i in range(len(self.cfg.head_widths)):
                u = getattr(self.head, f"drop{i + 1}")(getattr(self.head, f"fc{i + 1}")(u))
            return self.head.out(u)
        for j in range(4):
            lvl = 3 - j
            u = getattr(self.decoder, f"stage{j + 1}")(u, skips[lvl], geo, lvl)
        return self.head.out(self.head.drop1(self.head.fc1(u)))

    def depthwise_parameter_counts(self):
        return {path: m.depthwise_parameter_count
                for path, m in self.named_modules() if isinstance(m, KPConvL)}

    def du_paths(self):
        return [path for path, m in self.named_modules() if isinstance(m, DiffusionUnit)]

    def du_level(self, path):
        parts = path.split("/")
        stage = int(parts[1].removeprefix("stage"))
        return stage if parts[0] == "encoder" else 4 - stage


def cloud_input(cloud, cfg):
    """Coordinates serve as input features when the width matches, otherwise stored features."""
    if cfg.in_channels == 3 and (cloud.features is None or cloud.features.shape[1] != 3):
        return cloud.positions
    if cloud.features is None or cloud.features.shape[1] != cfg.in_channels:
        got = 0 if cloud.features is None else cloud.features.shape[1]
        raise DimensionError(f"model expects {cfg.in_channels} input features, cloud has {got}")
    return cloud.features


def build_model(cfg, seed=0):
    return DUNet(cfg, seed=seed)


def _eval_forward(model, clouds):
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            return model(model.inputs(clouds), model.geometry(clouds)).data
    finally:
        model.train(was_training)


def forward_classify(model, cloud):
    """Eval-mode class scores for one cloud."""
    return _eval_forward(model, [cloud])[0]


def forward_segment(model, cloud):
    """Eval-mode per-point part scores at the input resolution."""
    return _eval_forward(model, [cloud])


@dataclass
class SmoothnessReport:
    before: np.ndarray
    after: np.ndarray
    positions: np.ndarray
    labels: np.ndarray | None = None
    boundary: np.ndarray | None = None

    def boundary_ratio(self, which="after"):
        """Mean smoothness on boundary points over the mean on interior points."""
        s = self.after if which == "after" else self.before
        b = self.boundary
        return float(s[b].mean() / s[~b].mean())


def smoothness_probe(model, cloud, layer):
    """Smoothness of the features entering and leaving the diffusion unit at ``layer``."""
    paths = model.du_paths()
    if layer not in paths:
        raise LookupError(f"unknown diffusion unit {layer!r}; valid paths: {', '.join(paths)}")
    du = model.get(layer)
    du.record = True
    try:
        _eval_forward(model, [cloud])
        before, after, nbrs = du.last
    finally:
        du.record = False
        du.last = None
    level = model.du_level(layer)
    positions = model.geometry([cloud]).positions[level]
    at_input = level == 0
    return SmoothnessReport(
        smoothness(before, nbrs),
        smoothness(after, nbrs),
        positions,
        cloud.labels if at_input else None,
        cloud.boundary if at_input else None,
    )
