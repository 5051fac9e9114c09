"""SGD training with the poly schedule, data augmentation and BN folding."""

import copy
import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from icnet import tensor as T
from icnet.errors import ConfigError, NumericError, StructuralError
from icnet.layers import BatchNorm2d, Deconv2d, Identity
from icnet.model import cascade_loss

IGNORE = 255
LOG_COLUMNS = ("iter", "lr", "loss", "loss16", "loss8", "loss4")


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    power: float = 0.9
    max_iter: int = 2000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 8
    crop: int = 96
    resize_range: tuple = (0.5, 2.0)
    mirror_prob: float = 0.5
    seed: int = 0
    decay_bias: bool = False  # also decay biases and BN beta
    checkpoint_every: int = 0

    def validate(self):
        if not self.power > 0:
            raise ConfigError("power must be > 0")
        if not 0 <= self.mirror_prob <= 1:
            raise ConfigError("mirror_prob must lie in [0, 1]")
        lo, hi = self.resize_range
        if not 0 < lo <= hi:
            raise ConfigError("resize_range must be positive with min <= max")
        if self.max_iter < 0 or self.batch < 1 or self.crop < 1:
            raise ConfigError("max_iter must be >= 0, batch and crop >= 1")
        if self.base_lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("base_lr, momentum and weight_decay must be non-negative")
        return self


def poly_lr(it, cfg):
    """``base_lr * (1 - it / max_iter) ** power``; clamps to 0 past ``max_iter``."""
    if it > cfg.max_iter:
        warnings.warn(f"iteration {it} beyond max_iter {cfg.max_iter}; learning rate clamped to 0")
        return 0.0
    if cfg.max_iter == 0:
        return 0.0
    return cfg.base_lr * (1.0 - it / cfg.max_iter) ** cfg.power


def sgd_momentum_step(named_params, velocity, lr, momentum, weight_decay, decay_all=False):
    """In-place momentum SGD over ``[(name, Param)]``.

    ``v <- m v + g + wd p`` (decay only where ``Param.decay`` unless
    ``decay_all``), then ``p <- p - lr v``. Every gradient is checked before
    any parameter moves, so a non-finite gradient leaves the model untouched.
    """
    for name, p in named_params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {name}")
    for name, p in named_params:
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        dt = p.data.dtype.type
        v *= dt(momentum)
        v += p.grad
        if weight_decay and (p.decay or decay_all):
            v += dt(weight_decay) * p.data
        p.data -= dt(lr) * v
    return velocity


def augment_sample(image, label, cfg, rng, factor=None, mirror=None):
    """Random rescale, mirror and crop/pad of one (3, H, W) image and (H, W) label.

    ``factor`` and ``mirror`` override the random draws (the draws are still
    consumed so the RNG stream does not depend on the overrides).
    """
    lo, hi = cfg.resize_range
    f_draw = rng.uniform(lo, hi)
    m_draw = rng.random() < cfg.mirror_prob
    f = f_draw if factor is None else factor
    flip = m_draw if mirror is None else mirror
    _, h, w = image.shape
    nh, nw = max(1, int(round(h * f))), max(1, int(round(w * f)))
    if (nh, nw) != (h, w):
        image = T.bilinear_resize(image[None], nh, nw)[0]
        label = T.nearest_resize(label, nh, nw)
    if flip:
        image, label = image[:, :, ::-1], label[:, ::-1]
    c = cfg.crop
    ph, pw = max(c - nh, 0), max(c - nw, 0)
    if ph or pw:
        mean = image.mean(axis=(1, 2))
        padded = np.empty((3, nh + ph, nw + pw), image.dtype)
        padded[:] = mean[:, None, None]
        padded[:, :nh, :nw] = image
        lab = np.full((nh + ph, nw + pw), IGNORE, label.dtype)
        lab[:nh, :nw] = label
        image, label = padded, lab
    y0 = int(rng.integers(0, image.shape[1] - c + 1))
    x0 = int(rng.integers(0, image.shape[2] - c + 1))
    return (
        np.ascontiguousarray(image[:, y0 : y0 + c, x0 : x0 + c]),
        np.ascontiguousarray(label[y0 : y0 + c, x0 : x0 + c]),
    )


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)  # dicts keyed by LOG_COLUMNS

    def to_csv(self):
        lines = [",".join(LOG_COLUMNS)]
        for row in self.log:
            lines.append(",".join("" if row[k] is None else repr(row[k]) for k in LOG_COLUMNS))
        return "\n".join(lines) + "\n"


def _batch_indices(n, cfg, rng):
    """Infinite stream of sample indices: concatenated seeded permutations."""
    while True:
        yield from rng.permutation(n).tolist()


def train_loop(model, images, labels, cfg, log_path=None, checkpoint_path=None, on_iter=None):
    """Train ``model`` in place for ``cfg.max_iter`` iterations.

    Deterministic given ``cfg.seed``: sample order and augmentation draw from
    one seeded generator. A non-finite loss raises :class:`NumericError`
    before the update; checkpoints already written are left as they were.
    """
    from icnet.checkpoint import save_checkpoint

    cfg.validate()
    if len(images) == 0:
        raise ConfigError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    order = _batch_indices(len(images), cfg, rng)
    params = list(model.named_params())
    velocity = {}
    weights = model.loss_weights()
    n_cls = model.config.num_classes
    result = TrainResult(model)
    log_file = open(log_path, "w", newline="") if log_path else None
    try:
        if log_file:
            log_file.write(",".join(LOG_COLUMNS) + "\n")
        for it in range(cfg.max_iter):
            idx = [next(order) for _ in range(cfg.batch)]
            pairs = [augment_sample(images[i], labels[i], cfg, rng) for i in idx]
            x = np.stack([p[0] for p in pairs])
            y = np.stack([p[1] for p in pairs])
            lr = poly_lr(it, cfg)
            model.zero_grad()
            heads = model.forward_heads(x, train=True)
            loss, losses, grads = cascade_loss(heads, y, weights, IGNORE, n_cls)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss {loss} at iteration {it + 1}")
            model.backward_heads(grads)
            sgd_momentum_step(params, velocity, lr, cfg.momentum, cfg.weight_decay, cfg.decay_bias)
            row = {"iter": it + 1, "lr": lr, "loss": float(loss)}
            for k in (16, 8, 4):
                row[f"loss{k}"] = float(losses[k]) if k in losses else None
            result.log.append(row)
            if log_file:
                log_file.write(",".join("" if row[k] is None else repr(row[k]) for k in LOG_COLUMNS) + "\n")
            if checkpoint_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path, iteration=it + 1)
            if on_iter:
                on_iter(row)
    finally:
        if log_file:
            log_file.close()
    return result


def read_log(path):
    with open(path) as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# BN folding


def fold_bn_into(conv, bn):
    """Fold ``bn`` (inference statistics) into ``conv``'s weight and bias."""
    scale = bn.gamma.data.astype(np.float64) / np.sqrt(bn.running_var.astype(np.float64) + bn.eps)
    w = conv.weight.data.astype(np.float64)
    if isinstance(conv, Deconv2d):
        w = w * scale[None, :, None, None]
    else:
        w = w * scale[:, None, None, None]
    b = np.zeros(len(scale)) if conv.bias is None else conv.bias.data.astype(np.float64)
    b = bn.beta.data.astype(np.float64) + (b - bn.running_mean.astype(np.float64)) * scale
    dt = conv.weight.data.dtype
    conv.weight.data = w.astype(dt)
    conv.weight.grad = np.zeros_like(conv.weight.data)
    conv.set_bias(b.astype(dt))


def merge_bn(model):
    """Copy of ``model`` with every conv+BN pair folded into a single conv."""
    merged = copy.deepcopy(model)
    for _, parent, conv_attr, bn_attr in list(merged.conv_bn_pairs()):
        conv, bn = getattr(parent, conv_attr), getattr(parent, bn_attr)
        if not isinstance(bn, BatchNorm2d):
            continue
        fold_bn_into(conv, bn)
        ident = Identity()
        setattr(parent, bn_attr, ident)
        parent._children[bn_attr] = ident
    leftover = [name for name, layer in merged.named_layers() if isinstance(layer, BatchNorm2d)]
    if leftover:
        raise StructuralError(f"batch norm without a preceding conv: {', '.join(leftover)}")
    return merged
