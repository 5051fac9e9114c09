"""Analytic multiply-accumulate (MAC) model of convolutional networks.

Counts are MACs, not FLOPs: a k x k convolution producing one output value
from c input channels costs c*k*k. Non-convolution layers cost one unit per
output element. Shapes follow the same-padding rule ``h' = ceil(h / s)``,
which is what :func:`icnet.tensor.conv2d` produces with
``padding = dilation * (k - 1) / 2``.
"""

import csv
import io
from dataclasses import dataclass, field

from icnet.errors import SpecError

OP_KINDS = ("conv", "deconv", "pool", "resize", "pointwise", "concat")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. ``src`` names the producing layers (empty means the previous
    layer, ``"input"`` the network input); ``up``/``s`` give the resize ratio;
    ``bins`` marks an adaptive pool onto a fixed grid; ``like`` makes a resize
    match the spatial size of the named layer instead of using a ratio."""

    name: str
    c_in: int
    c_out: int
    k: int = 1
    s: int = 1
    d: int = 1
    op_kind: str = "conv"
    up: int = 1
    bins: int = 0
    src: tuple = ()
    like: str = ""

    def __post_init__(self):
        if self.op_kind not in OP_KINDS:
            raise SpecError(f"layer {self.name!r}: unknown op_kind {self.op_kind!r}")
        for attr in ("c_in", "c_out", "k", "s", "d", "up"):
            if getattr(self, attr) < 1:
                raise SpecError(f"layer {self.name!r}: {attr} must be >= 1")


@dataclass
class NetworkSpec:
    input_dims: tuple  # (c, h, w)
    stages: list = field(default_factory=list)  # [(stage_name, [LayerSpec, ...])]

    def layers(self):
        for stage, layers in self.stages:
            for layer in layers:
                yield stage, layer

    def add(self, stage, layer):
        if self.stages and self.stages[-1][0] == stage:
            self.stages[-1][1].append(layer)
        else:
            self.stages.append((stage, [layer]))
        return layer


@dataclass
class LayerCost:
    stage: str
    name: str
    op_kind: str
    out_dims: tuple
    macs: int
    activation_bytes: int


@dataclass
class CostProfile:
    layers: list
    stage_macs: dict
    total_macs: int
    peak_activation_bytes: int
    total_activation_bytes: int

    def to_csv(self):
        buf = io.StringIO()
        buf.write("# counts are multiply-accumulates (MACs), activation_bytes = output elements x dtype size\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["stage", "layer", "macs", "activation_bytes"])
        for lc in self.layers:
            wr.writerow([lc.stage, lc.name, lc.macs, lc.activation_bytes])
        return buf.getvalue()


def _ceil_div(a, b):
    return -(-a // b)


def conv_cost(layer, h, w):
    """Exact MACs of a same-padded conv on an h x w input."""
    ho, wo = _ceil_div(h, layer.s), _ceil_div(w, layer.s)
    return layer.c_out * layer.c_in * layer.k * layer.k * ho * wo


def _out_hw(layer, h, w):
    kind = layer.op_kind
    if kind == "conv":
        return _ceil_div(h, layer.s), _ceil_div(w, layer.s)
    if kind == "deconv":
        return h * layer.s, w * layer.s
    if kind == "pool":
        if layer.bins:
            return layer.bins, layer.bins
        return _ceil_div(h, layer.s), _ceil_div(w, layer.s)
    if kind == "resize":
        return h * layer.up // layer.s, w * layer.up // layer.s
    return h, w


def profile_network(net, dtype_bytes=4):
    """Propagate shapes through ``net`` and tally MACs and activation memory.

    Peak memory is the largest (inputs + output) footprint of any single
    layer; total memory sums every activation, as a framework that keeps all
    intermediate blobs allocated would.
    """
    c0, h0, w0 = net.input_dims
    dims = {"input": (c0, h0, w0)}
    prev = "input"
    rows, stage_macs = [], {}
    peak = 0
    total_elems = c0 * h0 * w0
    for stage, layer in net.layers():
        if layer.name in dims:
            raise SpecError(f"duplicate layer name {layer.name!r}")
        srcs = layer.src or (prev,)
        try:
            in_dims = [dims[s] for s in srcs]
        except KeyError as e:
            raise SpecError(f"layer {layer.name!r}: unknown source {e.args[0]!r}") from None
        if layer.op_kind == "concat":
            c_avail = sum(d[0] for d in in_dims)
        else:
            c_avail = in_dims[0][0]
            if any(d != in_dims[0] for d in in_dims[1:]):
                raise SpecError(f"layer {layer.name!r}: sources disagree on shape {in_dims}")
        if layer.op_kind == "concat" and len({d[1:] for d in in_dims}) != 1:
            raise SpecError(f"layer {layer.name!r}: concat inputs differ spatially {in_dims}")
        if c_avail != layer.c_in:
            raise SpecError(f"layer {layer.name!r}: c_in={layer.c_in} but producer gives {c_avail} channels")
        if layer.op_kind not in ("conv", "deconv", "concat") and layer.c_out != layer.c_in:
            raise SpecError(f"layer {layer.name!r}: {layer.op_kind} cannot change channels")
        h, w = in_dims[0][1:]
        if layer.like:
            if layer.op_kind != "resize" or layer.like not in dims:
                raise SpecError(f"layer {layer.name!r}: 'like' needs a resize and a known layer, got {layer.like!r}")
            ho, wo = dims[layer.like][1:]
        else:
            ho, wo = _out_hw(layer, h, w)
        if ho < 1 or wo < 1:
            raise SpecError(f"layer {layer.name!r}: output collapses to {ho}x{wo}")
        if layer.op_kind == "conv":
            macs = conv_cost(layer, h, w)
        elif layer.op_kind == "deconv":
            macs = layer.c_out * layer.c_in * layer.k * layer.k * h * w
        else:
            macs = layer.c_out * ho * wo
        out_elems = layer.c_out * ho * wo
        in_elems = sum(d[0] * d[1] * d[2] for d in in_dims)
        peak = max(peak, (in_elems + out_elems) * dtype_bytes)
        total_elems += out_elems
        dims[layer.name] = (layer.c_out, ho, wo)
        prev = layer.name
        rows.append(LayerCost(stage, layer.name, layer.op_kind, (layer.c_out, ho, wo), macs, out_elems * dtype_bytes))
        stage_macs[stage] = stage_macs.get(stage, 0) + macs
    return CostProfile(
        layers=rows,
        stage_macs=stage_macs,
        total_macs=sum(r.macs for r in rows),
        peak_activation_bytes=peak,
        total_activation_bytes=total_elems * dtype_bytes,
    )


def receptive_field(chain):
    """Receptive field of a conv/pool chain: 1 + sum (k_i - 1) d_i prod_{j<i} s_j."""
    rf, jump = 1, 1
    for layer in chain:
        rf += (layer.k - 1) * layer.d * jump
        jump *= layer.s
    return rf


# ---------------------------------------------------------------------------
# text interchange

_INT_FIELDS = ("c_in", "c_out", "k", "s", "d", "up", "bins")


def network_to_text(net):
    c, h, w = net.input_dims
    out = [f"[network]\ninput = {c},{h},{w}\n"]
    for stage, layer in net.layers():
        out.append(f"\n[layer {layer.name}]\nstage = {stage}\nop = {layer.op_kind}\n")
        for f in _INT_FIELDS:
            out.append(f"{f} = {getattr(layer, f)}\n")
        if layer.src:
            out.append(f"src = {','.join(layer.src)}\n")
        if layer.like:
            out.append(f"like = {layer.like}\n")
    return "".join(out)


def network_from_text(text):
    """Parse the ``[network]`` / ``[layer NAME]`` format written by :func:`network_to_text`."""
    from icnet.config import tokenize

    net = None
    layer_kv = {}
    order = []
    for section, key, value, lineno in tokenize(text):
        if section == "network":
            if key != "input":
                raise SpecError(f"line {lineno}: unknown network key {key!r}")
            try:
                c, h, w = (int(v) for v in value.split(","))
            except ValueError:
                raise SpecError(f"line {lineno}: input must be c,h,w") from None
            net = NetworkSpec((c, h, w))
        elif section.startswith("layer "):
            name = section[6:].strip()
            if name not in layer_kv:
                layer_kv[name] = {}
                order.append(name)
            layer_kv[name][key] = (value, lineno)
        else:
            raise SpecError(f"line {lineno}: unknown section [{section}]")
    if net is None:
        raise SpecError("missing [network] section")
    for name in order:
        kv = layer_kv[name]
        args = {"name": name}
        for key, (value, lineno) in kv.items():
            if key in _INT_FIELDS:
                try:
                    args[key] = int(value)
                except ValueError:
                    raise SpecError(f"line {lineno}: {key} must be an integer") from None
            elif key == "op":
                args["op_kind"] = value
            elif key == "src":
                args["src"] = tuple(v.strip() for v in value.split(","))
            elif key == "like":
                args["like"] = value
            elif key != "stage":
                raise SpecError(f"line {lineno}: unknown layer key {key!r}")
        stage = kv.get("stage", ("main", 0))[0]
        net.add(stage, LayerSpec(**args))
    return net
