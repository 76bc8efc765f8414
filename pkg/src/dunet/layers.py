"""Trainable building blocks: pointwise maps, batch norm, the diffusion unit and KPConv-l."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, SpecError
from .geometry import NeighborIndex
from .tensor import BNState, Tensor

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


class Module:
    """Minimal parameter container.

    Attributes holding a :class:`Module` or a gradient-tracked :class:`Tensor`
    are registered in assignment order; their slash-joined attribute names
    form stable parameter paths such as ``encoder/stage2/du/phi/weight``.
    """

    def __init__(self):
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if not name.startswith("_"):
            if isinstance(value, Module) or (isinstance(value, Tensor) and value.requires_grad):
                self._children[name] = value
            else:
                self._children.pop(name, None)
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, child in self._children.items():
            if isinstance(child, Module):
                yield from child.named_modules(f"{prefix}/{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        for name, child in self._children.items():
            path = f"{prefix}/{name}" if prefix else name
            if isinstance(child, Module):
                yield from child.named_parameters(path)
            else:
                yield path, child

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, child in self._children.items():
            if isinstance(child, Module):
                yield from child.named_buffers(f"{prefix}/{name}" if prefix else name)

    def set_buffer(self, name, value):
        raise KeyError(name)

    def get(self, path):
        module = self
        for part in path.split("/"):
            module = module._children[part]
        return module

    def train(self, mode=True):
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Row-wise affine map ``x @ W.T + b`` (a kernel-size-1 convolution over points)."""

    def __init__(self, d_in, d_out, bias=True, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.d_out = d_in, d_out
        self.weight = Tensor(kaiming_uniform(rng, (d_out, d_in), d_in), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear map expects {self.d_in} columns, got shape {x.shape}")
        out = T.matmul(x, self.weight.T)
        return out + self.bias if self.bias is not None else out


class PhiFilter(Linear):
    """Square channel-mixing filter; bias-free by default so that phi(0) == 0."""

    def __init__(self, d, bias=False, rng=None):
        super().__init__(d, d, bias=bias, rng=rng)


class BatchNorm(Module):
    def __init__(self, d, momentum=0.1, eps=1e-5):
        super().__init__()
        self.state = BNState.create(d, momentum=momentum, eps=eps)
        self.weight = self.state.gamma
        self.bias = self.state.beta

    def forward(self, x):
        return T.batch_stats_normalize(x, self.state, self.training)

    def named_buffers(self, prefix=""):
        yield f"{prefix}/running_mean", self.state.running_mean
        yield f"{prefix}/running_var", self.state.running_var

    def set_buffer(self, name, value):
        if name not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self.state, name, np.array(value, dtype=np.float64))


class VarphiWrapper(Module):
    """Batch norm followed by ReLU."""

    def __init__(self, d):
        super().__init__()
        self.bn = BatchNorm(d)

    def forward(self, x):
        return T.relu(self.bn(x))


class PointwiseBlock(Module):
    """Linear -> BN -> ReLU."""

    def __init__(self, d_in, d_out, rng):
        super().__init__()
        self.linear = Linear(d_in, d_out, bias=False, rng=rng)
        self.bn = BatchNorm(d_out)

    def forward(self, x):
        return T.relu(self.bn(self.linear(x)))


class Dropout(Module):
    def __init__(self, p, rng):
        super().__init__()
        self.p = p
        self._rng = rng

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = (self._rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return T.mul(x, keep)


@dataclass
class DiffusionUnitSpec:
    channels: int
    k: int = 16
    enable_phi: bool = True
    enable_varphi: bool = True
    repeat: int = 1

    def __post_init__(self):
        if self.repeat < 1 or self.k < 1:
            raise SpecError(f"diffusion unit needs repeat >= 1 and k >= 1, got {self}")


class DiffusionUnit(Module):
    """Residual learned diffusion step.

    ``u_s <- u_s + varphi(mean_n phi(u_n - u_s))``, repeated ``spec.repeat``
    times with the same parameters. Disabled components act as identity.
    """

    def __init__(self, spec, rng=None):
        super().__init__()
        self.spec = spec
        if spec.enable_phi:
            self.phi = PhiFilter(spec.channels, rng=rng)
        if spec.enable_varphi:
            self.varphi = VarphiWrapper(spec.channels)
        self.record = False
        self.last = None

    def forward(self, u, nbrs):
        n = u.shape[0]
        if u.ndim != 2 or u.shape[1] != self.spec.channels:
            raise DimensionError(f"diffusion unit over {self.spec.channels} channels got shape {u.shape}")
        if len(nbrs) != n or not np.array_equal(nbrs.centers, np.arange(n)):
            raise ContractError("diffusion unit neighborhoods must cover every point in order")
        u_in = u
        rows = nbrs.center_rows()
        for _ in range(self.spec.repeat):
            diff = T.gather_rows(u, nbrs.indices) - T.gather_rows(u, rows)
            if self.spec.enable_phi:
                diff = self.phi(diff)
            flux = T.segment_mean(diff, nbrs.offsets)
            if self.spec.enable_varphi:
                flux = self.varphi(flux)
            u = u + flux
        if self.record:
            self.last = (u_in.data.copy(), u.data.copy(), nbrs)
        return u


def diffusion_unit_step(spec, u, nbrs, phi_weight=None, rng=None):
    """Functional form of one diffusion unit (fresh parameters unless ``phi_weight`` is given)."""
    du = DiffusionUnit(spec, rng=rng)
    if phi_weight is not None:
        du.phi.weight.data[...] = phi_weight
    return du(T.as_tensor(u), nbrs)


@dataclass
class KernelDisposition:
    points: np.ndarray  # (l, 3) for unit footprint radius
    sigma: float = 1.0

    @property
    def count(self):
        return len(self.points)

    def scaled(self):
        return self.points * self.sigma


def kernel_disposition(l=15, sigma=1.0, shell=0.66):
    """Origin plus ``l - 1`` spherical-Fibonacci points on a shell of radius ``shell * sigma``."""
    if l < 1:
        raise SpecError("kernel needs at least one point")
    m = l - 1
    i = np.arange(m)
    z = 1.0 - (2.0 * i + 1.0) / max(m, 1)
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    theta = i * GOLDEN_ANGLE
    shell_pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1) * shell
    return KernelDisposition(np.vstack([np.zeros((1, 3)), shell_pts]), sigma)


def kernel_correlation(offsets, kernel_points, sigma, extent=0.5):
    """Hat correlation ``max(0, 1 - |offset - sigma*x_k| / (extent*sigma))`` per neighbor row and kernel point.

    ``sigma`` is a scalar or one value per offset row.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    sig = sigma.reshape(-1, 1) if sigma.ndim else sigma
    diff = offsets[:, None, :] - kernel_points[None, :, :] * (sig[..., None] if sigma.ndim else sig)
    dist = np.sqrt((diff * diff).sum(axis=-1))
    return np.maximum(0.0, 1.0 - dist / (extent * sig))


class RelativePositionalEncoding(Module):
    """``relu(Linear([u_n, p_n - p_s]))`` mapping back to the feature width."""

    def __init__(self, d_in, rng=None):
        super().__init__()
        self.linear = Linear(d_in + 3, d_in, bias=True, rng=rng)

    def forward(self, u_n, offsets):
        offsets = T.as_tensor(offsets)
        if u_n.shape[0] != offsets.shape[0] or offsets.shape[1:] != (3,):
            raise DimensionError(f"features {u_n.shape} and offsets {offsets.shape} do not align")
        return T.relu(self.linear(T.concat([u_n, offsets], axis=1)))


def relative_positional_encode(rpe, u_n, offsets):
    return rpe(u_n, offsets)


class KPConvL(Module):
    """Depthwise kernel-point convolution with a depth multiplier.

    Output channel ``j`` reads input channel ``j // m`` with ``m = d_out / d_in``;
    the only kernel weights are one ``(l, d_out)`` matrix.
    """

    def __init__(self, d_in, d_out, l=15, rng=None):
        super().__init__()
        if d_out % d_in:
            raise SpecError(f"d_out={d_out} is not a multiple of d_in={d_in}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.d_in, self.d_out = d_in, d_out
        self.multiplier = d_out // d_in
        self.disposition = kernel_disposition(l)
        self.rpe = RelativePositionalEncoding(d_in, rng=rng)
        self.weight = Tensor(kaiming_uniform(rng, (l, d_out), l), requires_grad=True)

    @property
    def depthwise_parameter_count(self):
        return self.weight.data.size

    def forward(self, u, src_pos, center_pos, nbrs, sigma):
        """Convolve source features ``u`` onto ``center_pos``.

        ``sigma`` is the footprint radius, a scalar or one value per center.
        """
        if u.shape[1] != self.d_in:
            raise DimensionError(f"KPConv-l expects {self.d_in} input channels, got shape {u.shape}")
        rows = nbrs.center_rows()
        offsets = src_pos[nbrs.indices] - center_pos[rows]
        sigma = np.asarray(sigma, dtype=np.float64)
        sigma_rows = sigma[rows] if sigma.ndim else sigma
        h = kernel_correlation(offsets, self.disposition.points, sigma_rows)
        u_tilde = self.rpe(T.gather_rows(u, nbrs.indices), offsets)
        weighted = T.matmul(h, self.weight)
        return T.segment_mean(weighted * T.repeat_cols(u_tilde, self.multiplier), nbrs.offsets)


def kpconv_l(conv, u, src_pos, center_pos, nbrs, sigma):
    return conv(u, src_pos, center_pos, nbrs, sigma)


def global_max_pool(u, offsets=None):
    """Per-channel max over all rows, or over each ``offsets`` segment."""
    if u.shape[0] == 0:
        raise ValueError("global_max_pool over an empty set")
    if offsets is None:
        return T.reshape(T.segment_max(u, [0, u.shape[0]]), (u.shape[1],))
    return T.segment_max(u, offsets)


def smoothness(features, nbrs):
    """Per-center norm of the summed neighbor differences ``|sum_n (f_n - f_s)|``."""
    f = np.asarray(features, dtype=np.float64)
    diff = f[nbrs.indices] - f[nbrs.center_rows()]
    agg = T.segment_sum_np(diff, nbrs.offsets)
    return np.sqrt((agg * agg).sum(axis=1))


__all__ = [
    "BatchNorm", "DiffusionUnit", "DiffusionUnitSpec", "Dropout", "KPConvL", "KernelDisposition",
    "Linear", "Module", "NeighborIndex", "PhiFilter", "PointwiseBlock", "RelativePositionalEncoding",
    "VarphiWrapper", "diffusion_unit_step", "global_max_pool", "kernel_correlation", "kernel_disposition",
    "kpconv_l", "relative_positional_encode", "smoothness",
]
