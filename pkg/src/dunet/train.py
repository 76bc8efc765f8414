"""Losses, optimizers, metrics, the training loop, checkpoints and voting evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AugmentSpec, augment, category_of
from .errors import ParseError, TrainingDiverged
from .model import DUNet, ModelConfig, cloud_geometry, cloud_input, merge_geometry

logger = logging.getLogger(__name__)

MAGIC = b"DUNET001"
FORMAT_VERSION = 1
LOG_HEADER = ("epoch", "split", "loss", "metric_name", "metric_value")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    lr_decay: float = 1.0
    lr_step: int = 0
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.betas = tuple(self.betas)
        if isinstance(self.augment, dict):
            self.augment = AugmentSpec(**self.augment)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def for_task(cls, task, **overrides):
        """Desk-scale recipe: Adam 1e-3 for classification, SGD 0.1 with step decay for segmentation."""
        if task == "classification":
            base = dict(optimizer="adam", lr=1e-3,
                        augment=AugmentSpec(rotation="z", scale_lo=0.8, scale_hi=1.2, translate=0.1))
        else:
            base = dict(optimizer="sgd-momentum", lr=0.1, lr_decay=0.5, lr_step=20,
                        augment=AugmentSpec(scale_lo=0.8, scale_hi=1.2, anisotropic=True, translate=0.1))
        base.update(overrides)
        return cls(**base)


# --- loss ----------------------------------------------------------------------

def cross_entropy(logits, targets):
    """Mean negative log-softmax of the target class, computed with max subtraction."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    if z.ndim != 2 or targets.shape != (z.shape[0],):
        raise ValueError(f"logits {z.shape} and targets {targets.shape} do not align")
    if np.any((targets < 0) | (targets >= z.shape[1])):
        bad = targets[(targets < 0) | (targets >= z.shape[1])][0]
        raise ValueError(f"target {bad} outside [0, {z.shape[1]})")
    rows = np.arange(len(targets))
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[rows, targets]))

    def _bw(g):
        p = np.exp(shifted - log_norm[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / len(targets)),)

    return T.make_op(np.array(loss), (logits,), _bw, "cross_entropy")


# --- optimizers ----------------------------------------------------------------

class SGD:
    def __init__(self, named_params, lr, momentum=0.9):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.state = {}

    def step(self):
        for path, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum:
                buf = self.state.get(f"momentum/{path}")
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.state[f"momentum/{path}"] = buf
                g = buf
            p.data -= self.lr * g


class Adam:
    def __init__(self, named_params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = {}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for path, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = b1 * self.state.get(f"m/{path}", 0.0) + (1 - b1) * g
            v = b2 * self.state.get(f"v/{path}", 0.0) + (1 - b2) * g * g
            self.state[f"m/{path}"] = m
            self.state[f"v/{path}"] = v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(model, cfg):
    if cfg.optimizer == "adam":
        return Adam(model.named_parameters(), cfg.lr, cfg.betas)
    return SGD(model.named_parameters(), cfg.lr, cfg.momentum)


# --- metrics -------------------------------------------------------------------

def _check_aligned(preds, labels):
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"predictions {preds.shape} and labels {labels.shape} differ in shape")
    return preds, labels


def metrics_oa(preds, labels):
    preds, labels = _check_aligned(preds, labels)
    return float(np.mean(preds == labels)) if preds.size else 0.0


def shape_iou(pred, label, parts):
    """Mean part IoU of one shape; a part absent from both prediction and label scores 1."""
    pred, label = _check_aligned(pred, label)
    ious = []
    for p in parts:
        union = np.sum((pred == p) | (label == p))
        ious.append(1.0 if union == 0 else np.sum((pred == p) & (label == p)) / union)
    return float(np.mean(ious))


def metrics_instance_miou(preds, labels, categories, part_structure):
    """Average over shapes of the per-shape mean part IoU."""
    if not (len(preds) == len(labels) == len(categories)):
        raise ValueError("preds, labels and categories must have one entry per shape")
    return float(np.mean([shape_iou(p, l, part_structure[c]) for p, l, c in zip(preds, labels, categories)]))


def metrics_point_miou(preds, labels, num_classes):
    """Mean over classes of IoU accumulated over all points; classes never seen are skipped."""
    preds, labels = _check_aligned(np.concatenate([np.ravel(p) for p in preds]) if isinstance(preds, list) else preds,
                                   np.concatenate([np.ravel(l) for l in labels]) if isinstance(labels, list) else labels)
    conf = np.bincount(labels * num_classes + preds, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    inter = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    seen = union > 0
    return float(np.mean(inter[seen] / union[seen]))


def default_part_structure(clouds, num_parts):
    return {category_of(c): list(range(num_parts)) for c in clouds}


# --- training loop -------------------------------------------------------------

@dataclass
class FitResult:
    model: DUNet
    optimizer: object
    config: TrainConfig
    epoch: int
    log: list

    def log_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for row in self.log:
            w.writerow([row[0], row[1], repr(row[2]), row[3], repr(row[4])])
        return buf.getvalue()


def _targets(model, clouds):
    if model.cfg.task == "classification":
        return np.array([int(c.labels[0]) for c in clouds])
    return np.concatenate([c.labels for c in clouds])


def _score(model, clouds, logits):
    pred = logits.argmax(axis=1)
    if model.cfg.task == "classification":
        return "oa", metrics_oa(pred, _targets(model, clouds))
    preds, labels, start = [], [], 0
    for c in clouds:
        preds.append(pred[start:start + len(c)])
        labels.append(c.labels)
        start += len(c)
    structure = default_part_structure(clouds, model.cfg.num_parts)
    return "instance_miou", metrics_instance_miou(preds, labels, [category_of(c) for c in clouds], structure)


def _batches(order, size, min_size):
    batches = [order[i:i + size] for i in range(0, len(order), size)]
    if len(batches) > 1 and len(batches[-1]) < min_size:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def _first_bad_gradient(model):
    for path, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            return path
    return None


def evaluate(model, clouds, batch_size=16, geometries=None):
    """Eval-mode mean loss and task metric over ``clouds``."""
    model.eval()
    logits_all, losses = [], []
    with T.no_grad():
        for start in range(0, len(clouds), batch_size):
            batch = clouds[start:start + batch_size]
            geos = geometries[start:start + batch_size] if geometries else [cloud_geometry(c.positions, model.cfg) for c in batch]
            logits = model(T.Tensor(np.concatenate([cloud_input(c, model.cfg) for c in batch])), merge_geometry(geos))
            losses.append(cross_entropy(logits, _targets(model, batch)).item() * len(batch))
            logits_all.append(logits.data)
    name, value = _score(model, clouds, np.concatenate(logits_all))
    return float(np.sum(losses) / len(clouds)), name, value


def fit(model, train_clouds, cfg, val_clouds=None, optimizer=None, start_epoch=0):
    """Train ``model`` in place; deterministic given ``cfg.seed`` and the data.

    Returns a :class:`FitResult` whose log holds one ``(epoch, split, loss,
    metric_name, metric_value)`` row per split and epoch.
    """
    if not train_clouds:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg) if optimizer is None else optimizer
    cached = None
    if cfg.augment.is_identity:
        cached = [cloud_geometry(c.positions, model.cfg) for c in train_clouds]
    val_geo = [cloud_geometry(c.positions, model.cfg) for c in val_clouds] if val_clouds else None
    min_batch = 2 if model.cfg.task == "classification" else 1
    log = []
    epoch = start_epoch
    for epoch in range(start_epoch + 1, start_epoch + cfg.epochs + 1):
        if cfg.lr_step:
            optimizer.lr = cfg.lr * cfg.lr_decay ** ((epoch - 1) // cfg.lr_step)
        model.train()
        order = rng.permutation(len(train_clouds))
        total, seen, logits_all, clouds_seen = 0.0, 0, [], []
        for b, idx in enumerate(_batches(order, cfg.batch_size, min_batch)):
            batch = [train_clouds[i] for i in idx]
            if cached is not None:
                geo = merge_geometry([cached[i] for i in idx])
            else:
                batch = [augment(c, cfg.augment, rng) for c in batch]
                geo = merge_geometry([cloud_geometry(c.positions, model.cfg) for c in batch])
            x = T.Tensor(np.concatenate([cloud_input(c, model.cfg) for c in batch]))
            model.zero_grad()
            logits = model(x, geo)
            loss = cross_entropy(logits, _targets(model, batch))
            loss.backward()
            value = loss.item()
            bad = _first_bad_gradient(model)
            if not np.isfinite(value) or bad is not None:
                raise TrainingDiverged(epoch, b, bad, value)
            optimizer.step()
            total += value * len(batch)
            seen += len(batch)
            logits_all.append(logits.data)
            clouds_seen.extend(batch)
        name, value = _score(model, clouds_seen, np.concatenate(logits_all))
        log.append((epoch, "train", total / seen, name, value))
        if val_clouds:
            log.append((epoch, "val", *evaluate(model, val_clouds, geometries=val_geo)))
        logger.info("epoch %d: %s", epoch, log[-1])
    model.eval()
    return FitResult(model, optimizer, cfg, epoch, log)


# --- voting --------------------------------------------------------------------

def evaluate_with_voting(model, cloud, votes, spec=None, seed=0):
    """Mean eval-mode logits over ``votes`` augmented copies of ``cloud``."""
    if votes < 1:
        raise ValueError("need at least one vote")
    spec = AugmentSpec() if spec is None else spec
    rng = np.random.default_rng(seed)
    model.eval()
    total = None
    with T.no_grad():
        for _ in range(votes):
            c = cloud if spec.is_identity else augment(cloud, spec, rng)
            out = model(T.Tensor(cloud_input(c, model.cfg)), cloud_geometry(c.positions, model.cfg)).data
            total = out.copy() if total is None else total + out
    out = total / votes
    return out[0] if model.cfg.task == "classification" else out


def voting_spec(train_spec):
    """Voting reuses the training scale range and nothing else."""
    return AugmentSpec(scale_lo=train_spec.scale_lo, scale_hi=train_spec.scale_hi, anisotropic=train_spec.anisotropic)


# --- checkpoints ---------------------------------------------------------------

def _put_str(out, s):
    b = s.encode("utf-8")
    out.append(struct.pack("<I", len(b)))
    out.append(b)


def _put_array(out, path, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    _put_str(out, path)
    out.append(struct.pack("<I", arr.ndim))
    out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    out.append(arr.tobytes())


def save_checkpoint(path, model, optimizer=None, train_cfg=None, epoch=0):
    """Write parameters, BN running statistics and optimizer state to ``path``."""
    entries = [(f"param/{p}", t.data) for p, t in model.named_parameters()]
    entries += [(f"buffer/{p}", b) for p, b in model.named_buffers()]
    meta = {"model": model.cfg.to_dict(), "train": train_cfg.to_dict() if train_cfg else None}
    if optimizer is not None:
        meta["optimizer"] = {"kind": type(optimizer).__name__, "lr": optimizer.lr,
                             "t": getattr(optimizer, "t", 0)}
        entries += [(f"optim/{k}", np.asarray(v, dtype=np.float64)) for k, v in sorted(optimizer.state.items())]
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, epoch)]
    _put_str(out, json.dumps(meta, sort_keys=True))
    out.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        _put_array(out, name, arr)
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ParseError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


@dataclass
class Checkpoint:
    model: DUNet
    train_config: dict | None
    optimizer_meta: dict | None
    optimizer_state: dict
    epoch: int


def load_checkpoint(path):
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise ParseError(f"{path}: not a DU-Net checkpoint")
    version, epoch = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(r.string())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    model = DUNet(ModelConfig.from_dict(meta["model"]))
    for p, t in model.named_parameters():
        t.data[...] = arrays[f"param/{p}"]
    for p, _ in model.named_buffers():
        module_path, name = p.rsplit("/", 1)
        model.get(module_path).set_buffer(name, arrays[f"buffer/{p}"])
    model.eval()
    optim_state = {k.removeprefix("optim/"): v for k, v in arrays.items() if k.startswith("optim/")}
    return Checkpoint(model, meta.get("train"), meta.get("optimizer"), optim_state, epoch)


def restore_optimizer(ckpt, model, train_cfg):
    """Rebuild the optimizer saved in ``ckpt`` around ``model``'s parameters."""
    opt = make_optimizer(model, train_cfg)
    if ckpt.optimizer_meta:
        opt.lr = ckpt.optimizer_meta["lr"]
        if hasattr(opt, "t"):
            opt.t = ckpt.optimizer_meta.get("t", 0)
    opt.state = {k: v.copy() for k, v in ckpt.optimizer_state.items()}
    return opt
