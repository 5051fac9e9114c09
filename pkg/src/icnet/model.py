"""Image cascade network and the single-branch baseline it is compared against.

Both models expose the same surface used by training, evaluation, pruning
and the cost model:

* ``forward_heads(image, train, branches)`` -> ``{downsample: logits}``
* ``backward_heads(grads)`` accumulates parameter gradients
* ``loss_weights()`` -> ``{downsample: weight}``
* ``predict(image, branches)`` -> full-resolution label map
* ``network_spec(h, w, branches)`` -> :class:`~icnet.cost.NetworkSpec` of the
  ops ``forward_heads`` executes in inference
* ``prune_units()`` -> conv/BN groups eligible for filter pruning
"""

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from icnet import tensor as T
from icnet.cost import LayerSpec, NetworkSpec
from icnet.errors import DataError, ShapeError, StructuralError
from icnet.layers import (
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    Deconv2d,
    Layer,
    PyramidPooling,
    Sequential,
)

FUSIONS = ("cff", "deconv3", "deconv5", "deconv7")
BRANCHES = ("4", "24", "124")


@dataclass
class IcnetConfig:
    num_classes: int = 5
    arch: str = "icnet"  # icnet | baseline
    widths: tuple = (16, 32, 64, 128, 128)
    high_widths: tuple = (8, 16, 32)
    cff_channels: int = 32
    fusion: str = "cff"
    label_guidance: bool = True
    lambdas: tuple = (0.4, 0.4, 1.0)
    pyramid_bins: tuple = (1, 2, 3, 6)
    output_stride: int = 8  # baseline only
    share_trunk: bool = True
    dtype: str = "float32"
    ignore: int = 255
    seed: int = 0

    def validate(self):
        from icnet.errors import ConfigError

        if self.arch not in ("icnet", "baseline"):
            raise ConfigError(f"arch must be icnet or baseline, got {self.arch!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(self.widths) != 5 or len(self.high_widths) != 3:
            raise ConfigError("widths needs 5 entries and high_widths 3")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if len(self.lambdas) != 3 or any(v <= 0 for v in self.lambdas):
            raise ConfigError("lambda needs three positive weights")
        if self.output_stride not in (8, 16, 32):
            raise ConfigError("output_stride must be 8, 16 or 32")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        return self

    def digest(self):
        """Hash of the architecture-defining fields (weights init seed excluded)."""
        d = asdict(self)
        for k in ("seed", "label_guidance", "lambdas", "ignore"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class CascadeOutputs:
    logits16: np.ndarray = None
    logits8: np.ndarray = None
    logits4: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        d = {16: self.logits16, 8: self.logits8, 4: self.logits4}
        return {k: v for k, v in d.items() if v is not None}


def _check_image(image, channels=3, divisor=32):
    if image.ndim != 4 or image.shape[1] != channels:
        raise ShapeError(f"image must be (N, {channels}, H, W), got {image.shape}")
    h, w = image.shape[2:]
    if h % divisor or w % divisor:
        raise ShapeError(f"image dims {h}x{w} must be divisible by {divisor}")


@dataclass
class PruneUnit:
    name: str
    conv: Layer
    bn: BatchNorm2d = None
    consumers: list = field(default_factory=list)  # [(conv layer, input channel offset)]
    exempt: bool = False
    feeds_add: bool = False


# ---------------------------------------------------------------------------
# cascade feature fusion


class CascadeFeatureFusion(Layer):
    """Fuses a coarse map F1 (c1, H, W) with a finer map F2 (c2, 2H, 2W).

    F1 is upsampled x2 and refined by a dilated 3x3 conv (or replaced by a
    stride-2 transposed conv for the deconvolution variants); F2 goes through
    a 1x1 projection. Both are batch-normalised, summed and rectified. The
    auxiliary classifier reads the bilinearly upsampled F1.
    """

    def __init__(self, c1, c2, c3, n_classes, rng, kind="cff", dtype=np.float32):
        super().__init__()
        self.kind = kind
        if kind == "cff":
            self.up_conv = self.add_child("up_conv", Conv2d(c1, c3, 3, rng, dilation=2, bias=False, dtype=dtype))
        else:
            k = int(kind[len("deconv") :])
            self.up_conv = self.add_child("up_conv", Deconv2d(c1, c3, k, rng, dtype=dtype))
        self.bn_low = self.add_child("bn_low", BatchNorm2d(c3, dtype))
        self.proj = self.add_child("proj", Conv2d(c2, c3, 1, rng, bias=False, dtype=dtype))
        self.bn_high = self.add_child("bn_high", BatchNorm2d(c3, dtype))
        self.cls = self.add_child("cls", Conv2d(c1, n_classes, 1, rng, bias=True, dtype=dtype))

    def fusion_param_count(self):
        """Parameters on the F1 path that replaces/implements upsampling."""
        n = self.up_conv.weight.data.size
        if self.up_conv.bias is not None:
            n += self.up_conv.bias.data.size
        return n

    def forward(self, f1, f2, train, aux=True, fuse=True):
        h1, w1 = f1.shape[2:]
        if f2 is not None and f2.shape[2:] != (2 * h1, 2 * w1):
            raise ShapeError(f"CFF expects F2 at twice F1's size, got F1 {f1.shape} and F2 {f2.shape}")
        self._f1_shape = f1.shape
        self._fused = fuse
        self._aux = aux
        u = None
        if aux or (fuse and self.kind == "cff"):
            u = T.bilinear_resize(f1, 2 * h1, 2 * w1)
        aux_logits = self.cls.forward(u, train) if aux else None
        if not fuse:
            return None, aux_logits
        a = self.up_conv.forward(u if self.kind == "cff" else f1, train)
        a = self.bn_low.forward(a, train)
        b = self.bn_high.forward(self.proj.forward(f2, train), train)
        s = T.add(a, b)
        self._sum = s
        self._f2_shape = f2.shape
        return T.relu(s), aux_logits

    def backward(self, dout, daux):
        """Returns ``(dF1, dF2)``; dF2 is None when the fusion was skipped."""
        df1 = np.zeros(self._f1_shape, dtype=self.cls.weight.dtype)
        du = None
        df2 = None
        if dout is not None and self._fused:
            ds = T.relu_grad(self._sum, dout)
            da = self.bn_low.backward(ds)
            df2 = self.proj.backward(self.bn_high.backward(ds))
            if self.kind == "cff":
                du = self.up_conv.backward(da)
            else:
                df1 += self.up_conv.backward(da)
        if daux is not None and self._aux:
            g = self.cls.backward(daux)
            du = g if du is None else du + g
        if du is not None:
            df1 += T.bilinear_resize_grad(self._f1_shape, du)
        return df1, df2


# ---------------------------------------------------------------------------
# shared helpers for building specs


class _SpecBuilder:
    def __init__(self, c, h, w):
        self.net = NetworkSpec((c, h, w))
        self.dims = {"input": (c, h, w)}
        self.last = "input"

    def add(self, stage, name, kind, c_in, c_out, k=1, s=1, d=1, up=1, bins=0, src=None, like=""):
        srcs = (src,) if isinstance(src, str) else tuple(src or ())
        layer = LayerSpec(name, c_in, c_out, k, s, d, kind, up, bins, srcs, like)
        self.net.add(stage, layer)
        ref = srcs[0] if srcs else self.last
        c, h, w = self.dims[ref]
        if kind == "conv" or (kind == "pool" and not bins):
            h, w = -(-h // s), -(-w // s)
        elif kind == "deconv":
            h, w = h * s, w * s
        elif kind == "pool":
            h, w = bins, bins
        elif kind == "resize":
            h, w = self.dims[like][1:] if like else (h * up // s, w * up // s)
        self.dims[name] = (c_out, h, w)
        self.last = name
        return name

    def conv(self, stage, name, conv, src=None):
        k = conv.k
        if isinstance(conv, Deconv2d):
            return self.add(stage, name, "deconv", conv.c_in, conv.c_out, k, 2, 1, src=src)
        return self.add(stage, name, "conv", conv.c_in, conv.c_out, k, conv.stride, conv.dilation, src=src)

    def cbr(self, stage, name, block, src=None):
        self.conv(stage, name + ".conv", block.conv, src)
        c = block.conv.c_out
        self.add(stage, name + ".bn", "pointwise", c, c)
        return self.add(stage, name + ".relu", "pointwise", c, c)

    def resize_to(self, stage, name, src, like):
        """Resize ``src`` onto the spatial size of layer ``like``."""
        c = self.dims[src][0]
        return self.add(stage, name, "resize", c, c, src=src, like=like)

    def ppm(self, stage, prefix, ppm, src):
        c = self.dims[src][0]
        parts = [src]
        for b, conv in zip(ppm.bins, ppm.reduce):
            self.add(stage, f"{prefix}.pool{b}", "pool", c, c, bins=b, src=src)
            self.conv(stage, f"{prefix}.reduce{b}", conv)
            r = self.add(stage, f"{prefix}.reduce{b}.relu", "pointwise", conv.c_out, conv.c_out)
            parts.append(self.resize_to(stage, f"{prefix}.up{b}", r, src))
        total = sum(self.dims[p][0] for p in parts)
        self.add(stage, f"{prefix}.concat", "concat", total, total, src=tuple(parts))
        return self.cbr(stage, f"{prefix}.bottleneck", ppm.bottleneck)


def _bcast_cls_head(builder, stage, prefix, cls, src):
    c, h, w = builder.dims[src]
    builder.add(stage, prefix + ".up", "resize", c, c, up=2, src=src)
    return builder.conv(stage, prefix + ".cls", cls)


# ---------------------------------------------------------------------------
# ICNet


class IcnetModel(Layer):
    """Three-branch cascade.

    * medium: shared trunk on the 1/2 image -> 1/16 feature
    * low: that feature halved, dilated tail + pyramid pooling -> 1/32
    * high: light CNN on the full image -> 1/8
    CFF1 fuses (low, medium) at 1/16, CFF2 fuses (CFF1, high) at 1/8 and the
    final head classifies CFF2's output upsampled to 1/4. Heads 16 and 8 are
    the CFF auxiliary classifiers.
    """

    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.config = cfg
        dt = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(cfg.seed)
        w0, w1, w2, w3, w4 = cfg.widths
        n = cfg.num_classes
        self.trunk = self.add_child(
            "trunk",
            Sequential(
                ConvBNReLU(3, w0, 3, rng, stride=2, dtype=dt),
                ConvBNReLU(w0, w1, 3, rng, stride=2, dtype=dt),
                ConvBNReLU(w1, w2, 3, rng, stride=2, dtype=dt),
            ),
        )
        self.tail = self.add_child(
            "tail",
            Sequential(
                ConvBNReLU(w2, w3, 3, rng, dilation=2, dtype=dt),
                ConvBNReLU(w3, w4, 3, rng, dilation=4, dtype=dt),
            ),
        )
        self.ppm = self.add_child("ppm", PyramidPooling(w4, cfg.pyramid_bins, rng, dtype=dt))
        h0, h1, h2 = cfg.high_widths
        self.high = self.add_child(
            "high",
            Sequential(
                ConvBNReLU(3, h0, 3, rng, stride=2, dtype=dt),
                ConvBNReLU(h0, h1, 3, rng, stride=2, dtype=dt),
                ConvBNReLU(h1, h2, 3, rng, stride=2, dtype=dt),
            ),
        )
        c3 = cfg.cff_channels
        self.cff1 = self.add_child("cff1", CascadeFeatureFusion(w4, w2, c3, n, rng, cfg.fusion, dt))
        self.cff2 = self.add_child("cff2", CascadeFeatureFusion(c3, h2, c3, n, rng, cfg.fusion, dt))
        self.cls4 = self.add_child("cls4", Conv2d(c3, n, 1, rng, bias=True, dtype=dt))
        # the low path reuses the medium path's trunk output unless untied
        self.low_trunk = self.trunk
        if not cfg.share_trunk:
            self.untie_trunk()

    def untie_trunk(self):
        """Give the low path its own copy of the trunk weights (reference model)."""
        self.low_trunk = self.add_child("low_trunk", copy.deepcopy(self.trunk))
        self.config.share_trunk = False
        return self

    @property
    def dtype(self):
        return self.cls4.weight.dtype

    def loss_weights(self):
        l1, l2, l3 = self.config.lambdas
        if not self.config.label_guidance:
            l1 = l2 = 0.0
        return {16: l1, 8: l2, 4: l3}

    # -- forward / backward -------------------------------------------------

    def forward(self, image, train=False, branches="124"):
        return self.forward_cascade(image, train, branches)

    def forward_cascade(self, image, train=False, branches="124"):
        """Returns :class:`CascadeOutputs`; training computes every head."""
        _check_image(image)
        if branches not in BRANCHES:
            raise ValueError(f"branches must be one of {BRANCHES}")
        if train:
            branches = "124"
        image = image.astype(self.dtype, copy=False)
        n, _, h, w = image.shape
        self._image_shape = image.shape
        self._branches = branches
        self._train = train
        half = T.bilinear_resize(image, h // 2, w // 2)
        self._half_shape = half.shape
        t = self.trunk.forward(half, train)
        t_low = t if self.low_trunk is self.trunk else self.low_trunk.forward(half, train)
        self._t_low_shape = t_low.shape
        low_in = T.bilinear_resize(t_low, h // 32, w // 32)
        f1 = self.ppm.forward(self.tail.forward(low_in, train), train)

        out = CascadeOutputs()
        aux16 = train or branches == "4"
        c1, out.logits16 = self.cff1.forward(f1, t, train, aux=aux16, fuse=branches != "4")
        if branches == "4":
            return out
        if branches == "24":
            _, out.logits8 = self.cff2.forward(c1, None, train, aux=True, fuse=False)
            return out
        hi = self.high.forward(image, train)
        c2, out.logits8 = self.cff2.forward(c1, hi, train, aux=train, fuse=True)
        self._c2_shape = c2.shape
        out.logits4 = self.cls4.forward(T.bilinear_resize(c2, 2 * c2.shape[2], 2 * c2.shape[3]), train)
        return out

    def forward_heads(self, image, train=False, branches="124"):
        return self.forward_cascade(image, train, branches).as_dict()

    def backward_heads(self, grads):
        """Backpropagate ``{16|8|4: dlogits}``; returns the image gradient."""
        dt = self.dtype
        d_img = np.zeros(self._image_shape, dtype=dt)
        d4, d8, d16 = grads.get(4), grads.get(8), grads.get(16)
        dc1 = None
        if self._branches == "124":
            dc2 = None
            if d4 is not None:
                du = self.cls4.backward(d4)
                dc2 = T.bilinear_resize_grad(self._c2_shape, du)
            dc1, dhi = self.cff2.backward(dc2, d8)
            if dhi is not None:
                d_img += self.high.backward(dhi)
        elif self._branches == "24":
            dc1, _ = self.cff2.backward(None, d8)
        df1, dt_med = self.cff1.backward(dc1, d16)
        dlow = self.tail.backward(self.ppm.backward(df1))
        dt_low = T.bilinear_resize_grad(self._t_low_shape, dlow)
        if self.low_trunk is self.trunk:
            dt_tot = dt_low if dt_med is None else dt_low + dt_med
            dhalf = self.trunk.backward(dt_tot)
        else:
            dhalf = self.low_trunk.backward(dt_low)
            if dt_med is not None:
                dhalf = dhalf + self.trunk.backward(dt_med)
        d_img += T.bilinear_resize_grad(self._image_shape, dhalf)
        return d_img

    def predict(self, image, branches="124"):
        """Full-resolution label map (N, H, W) from the finest requested head."""
        heads = self.forward_heads(image, train=False, branches=branches)
        logits = heads[min(heads)]
        return upsample_argmax(logits, image.shape[2], image.shape[3])

    # -- structure ------------------------------------------------------------

    def network_spec(self, h, w, branches="124", final_upsample=True):
        """Ops executed by ``forward_cascade(train=False, branches)`` (+ final upsample)."""
        b = _SpecBuilder(3, h, w)
        b.add("trunk", "half", "resize", 3, 3, s=2, src="input")
        for i, blk in enumerate(self.trunk.layers):
            t = b.cbr("trunk", f"trunk.{i}", blk)
        b.add("low", "low_in", "resize", self.trunk.layers[-1].conv.c_out, self.trunk.layers[-1].conv.c_out, s=2)
        for i, blk in enumerate(self.tail.layers):
            b.cbr("low", f"tail.{i}", blk)
        f1 = b.ppm("low", "ppm", self.ppm, b.last)
        if branches == "4":
            head = _bcast_cls_head(b, "head16", "cff1", self.cff1.cls, f1)
        else:
            c1 = self._cff_spec(b, "cff1", self.cff1, f1, t)
            if branches == "24":
                head = _bcast_cls_head(b, "head8", "cff2", self.cff2.cls, c1)
            else:
                hi = "input"
                for i, blk in enumerate(self.high.layers):
                    hi = b.cbr("high", f"high.{i}", blk, src=hi if i == 0 else None)
                c2 = self._cff_spec(b, "cff2", self.cff2, c1, hi)
                head = _bcast_cls_head(b, "head4", "final", self.cls4, c2)
        if final_upsample:
            b.resize_to("upsample", "upsample", head, "input")
        return b.net

    @staticmethod
    def _cff_spec(b, prefix, cff, f1, f2):
        c1, h1, w1 = b.dims[f1]
        if cff.kind == "cff":
            b.add(prefix, prefix + ".up", "resize", c1, c1, up=2, src=f1)
            b.conv(prefix, prefix + ".up_conv", cff.up_conv)
        else:
            b.conv(prefix, prefix + ".up_conv", cff.up_conv, src=f1)
        c3 = cff.proj.c_out
        low = b.add(prefix, prefix + ".bn_low", "pointwise", c3, c3)
        b.conv(prefix, prefix + ".proj", cff.proj, src=f2)
        high = b.add(prefix, prefix + ".bn_high", "pointwise", c3, c3)
        b.add(prefix, prefix + ".sum", "pointwise", c3, c3, src=(low, high))
        return b.add(prefix, prefix + ".relu", "pointwise", c3, c3)

    def prune_units(self):
        if self.low_trunk is not self.trunk:
            raise StructuralError("cannot prune a model with an untied trunk copy")
        tr, tl, hi, ppm = self.trunk.layers, self.tail.layers, self.high.layers, self.ppm
        ppm_consumers = [(c, 0) for c in ppm.reduce] + [(ppm.bottleneck.conv, 0)]
        units = [
            PruneUnit("trunk.0", tr[0].conv, tr[0].bn, [(tr[1].conv, 0)]),
            PruneUnit("trunk.1", tr[1].conv, tr[1].bn, [(tr[2].conv, 0)]),
            PruneUnit("trunk.2", tr[2].conv, tr[2].bn, [(tl[0].conv, 0), (self.cff1.proj, 0)]),
            PruneUnit("tail.0", tl[0].conv, tl[0].bn, [(tl[1].conv, 0)]),
            PruneUnit("tail.1", tl[1].conv, tl[1].bn, ppm_consumers),
        ]
        base = tl[1].conv.c_out
        for i, (b, conv) in enumerate(zip(ppm.bins, ppm.reduce)):
            units.append(PruneUnit(f"ppm.reduce{b}", conv, None, [(ppm.bottleneck.conv, base + i * conv.c_out)]))
        units.append(
            PruneUnit(
                "ppm.bottleneck", ppm.bottleneck.conv, ppm.bottleneck.bn, [(self.cff1.up_conv, 0), (self.cff1.cls, 0)]
            )
        )
        units += [
            PruneUnit("high.0", hi[0].conv, hi[0].bn, [(hi[1].conv, 0)]),
            PruneUnit("high.1", hi[1].conv, hi[1].bn, [(hi[2].conv, 0)]),
            PruneUnit("high.2", hi[2].conv, hi[2].bn, [(self.cff2.proj, 0)]),
        ]
        for cff in ("cff1", "cff2"):
            unit = getattr(self, cff)
            units.append(PruneUnit(f"{cff}.up_conv", unit.up_conv, unit.bn_low, [], exempt=True, feeds_add=True))
            units.append(PruneUnit(f"{cff}.proj", unit.proj, unit.bn_high, [], exempt=True, feeds_add=True))
            units.append(PruneUnit(f"{cff}.cls", unit.cls, None, [], exempt=True))
        units.append(PruneUnit("cls4", self.cls4, None, [], exempt=True))
        return units

    def conv_bn_pairs(self):
        for name, layer in self.named_layers():
            if isinstance(layer, ConvBNReLU):
                yield name, layer, "conv", "bn"
            elif isinstance(layer, CascadeFeatureFusion):
                yield name, layer, "up_conv", "bn_low"
                yield name, layer, "proj", "bn_high"

    def branch_param_counts(self):
        def count(layer):
            return sum(p.data.size for _, p in layer.named_params())

        return {
            "trunk": count(self.trunk),
            "low_tail": count(self.tail) + count(self.ppm),
            "high": count(self.high),
            "cff1": count(self.cff1),
            "cff2": count(self.cff2),
        }


# ---------------------------------------------------------------------------
# single-branch baseline


class BaselineModel(Layer):
    """The low branch's backbone run directly on the full image.

    Output stride 8 keeps the tail dilated; 16 and 32 turn the tail stages
    into stride-2 convolutions (feature-downsampling study).
    """

    def __init__(self, cfg):
        super().__init__()
        cfg.validate()
        self.config = cfg
        dt = np.dtype(cfg.dtype).type
        rng = np.random.default_rng(cfg.seed)
        w0, w1, w2, w3, w4 = cfg.widths
        os_ = cfg.output_stride
        s3, d3 = (1, 2) if os_ == 8 else (2, 1)
        s4, d4 = (1, 4) if os_ == 8 else ((1, 2) if os_ == 16 else (2, 1))
        self.backbone = self.add_child(
            "backbone",
            Sequential(
                ConvBNReLU(3, w0, 3, rng, stride=2, dtype=dt),
                ConvBNReLU(w0, w1, 3, rng, stride=2, dtype=dt),
                ConvBNReLU(w1, w2, 3, rng, stride=2, dtype=dt),
                ConvBNReLU(w2, w3, 3, rng, stride=s3, dilation=d3, dtype=dt),
                ConvBNReLU(w3, w4, 3, rng, stride=s4, dilation=d4, dtype=dt),
            ),
        )
        self.ppm = self.add_child("ppm", PyramidPooling(w4, cfg.pyramid_bins, rng, dtype=dt))
        self.cls = self.add_child("cls", Conv2d(w4, cfg.num_classes, 1, rng, bias=True, dtype=dt))

    @property
    def dtype(self):
        return self.cls.weight.dtype

    @property
    def output_stride(self):
        return self.config.output_stride

    def loss_weights(self):
        return {self.output_stride: 1.0}

    def forward_heads(self, image, train=False, branches=None):
        # any size works: strided convs round up and pooling bins never empty
        _check_image(image, divisor=1)
        image = image.astype(self.dtype, copy=False)
        self._image_shape = image.shape
        f = self.ppm.forward(self.backbone.forward(image, train), train)
        return {self.output_stride: self.cls.forward(f, train)}

    forward = forward_heads

    def backward_heads(self, grads):
        d = self.cls.backward(grads[self.output_stride])
        return self.backbone.backward(self.ppm.backward(d))

    def predict(self, image, branches=None):
        logits = self.forward_heads(image, train=False)[self.output_stride]
        return upsample_argmax(logits, image.shape[2], image.shape[3])

    def network_spec(self, h, w, branches=None, final_upsample=True):
        b = _SpecBuilder(3, h, w)
        for i, blk in enumerate(self.backbone.layers):
            b.cbr("backbone", f"backbone.{i}", blk)
        f = b.ppm("ppm", "ppm", self.ppm, b.last)
        head = b.conv("head", "cls", self.cls, f)
        if final_upsample:
            b.resize_to("upsample", "upsample", head, "input")
        return b.net

    def prune_units(self):
        bb, ppm = self.backbone.layers, self.ppm
        units = [PruneUnit(f"backbone.{i}", bb[i].conv, bb[i].bn, [(bb[i + 1].conv, 0)]) for i in range(4)]
        units.append(
            PruneUnit("backbone.4", bb[4].conv, bb[4].bn, [(c, 0) for c in ppm.reduce] + [(ppm.bottleneck.conv, 0)])
        )
        base = bb[4].conv.c_out
        for i, (b, conv) in enumerate(zip(ppm.bins, ppm.reduce)):
            units.append(PruneUnit(f"ppm.reduce{b}", conv, None, [(ppm.bottleneck.conv, base + i * conv.c_out)]))
        units.append(PruneUnit("ppm.bottleneck", ppm.bottleneck.conv, ppm.bottleneck.bn, [(self.cls, 0)]))
        units.append(PruneUnit("cls", self.cls, None, [], exempt=True))
        return units

    def conv_bn_pairs(self):
        for name, layer in self.named_layers():
            if isinstance(layer, ConvBNReLU):
                yield name, layer, "conv", "bn"


# ---------------------------------------------------------------------------


def build_model(cfg):
    """Deterministic construction from ``cfg`` (seeded He initialisation)."""
    return IcnetModel(cfg) if cfg.arch == "icnet" else BaselineModel(cfg)


def build_icnet(cfg, seed=None):
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return IcnetModel(cfg)


def build_deconv_fusion(kernel, c1, c3, n_classes, c2=None, seed=0, dtype=np.float32):
    """Standalone deconvolution fusion unit (kernel 3, 5 or 7)."""
    if kernel not in (3, 5, 7):
        raise ValueError("deconvolution kernel must be 3, 5 or 7")
    rng = np.random.default_rng(seed)
    return CascadeFeatureFusion(c1, c2 or c3, c3, n_classes, rng, f"deconv{kernel}", dtype)


def upsample_argmax(logits, h, w):
    """Bilinear upsample to (h, w), then per-pixel argmax (ties -> lowest class)."""
    up = T.bilinear_resize(logits, h, w)
    return up.argmax(axis=1).astype(np.int64)


def downsample_labels(gt, h, w):
    return T.nearest_resize(gt, h, w)


def cascade_loss(heads, gt, weights, ignore=255, num_classes=None):
    """Weighted sum of per-head pixel cross-entropies.

    ``heads`` maps downsample factor -> logits; the full-resolution ground
    truth is nearest-downsampled to each head. Returns ``(L, per_head_loss,
    per_head_grad)`` with gradients already scaled by their weights.
    """
    if gt.ndim == 2:
        gt = gt[None]
    n_cls = num_classes or next(iter(heads.values())).shape[1]
    bad = (gt != ignore) & ((gt >= n_cls) | (gt < 0))
    if bad.any():
        raise DataError(f"ground truth contains class {int(gt[bad][0])} >= {n_cls}")
    total = 0.0
    losses, grads = {}, {}
    for key, logits in heads.items():
        if logits.shape[0] != gt.shape[0]:
            raise ShapeError(f"batch mismatch: logits {logits.shape}, labels {gt.shape}")
        lab = downsample_labels(gt, logits.shape[2], logits.shape[3])
        loss, g = T.softmax_xent_map(logits, lab, ignore)
        wt = weights.get(key, 0.0)
        losses[key] = loss
        grads[key] = g * logits.dtype.type(wt)
        total += wt * loss
    return total, losses, grads
