"""One-shot l1-norm filter pruning."""

import copy
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from icnet.cost import profile_network
from icnet.errors import ConfigError, StructuralError
from icnet.layers import Deconv2d


def l1_filter_scores(weight):
    """``score[o] = sum |weight[o, ...]|`` for a (c_out, c_in, k, k) conv weight."""
    w = np.asarray(weight)
    return np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)


def select_filters(scores, rate):
    """Indices of the top ``ceil(rate * c_out)`` scores, ascending.

    Ties go to the lower index (stable sort on the negated scores).
    """
    if not 0 < rate <= 1:
        raise ConfigError(f"keep rate must lie in (0, 1], got {rate}")
    n = len(scores)
    keep = math.ceil(rate * n - 1e-9)
    if keep < 1:
        raise ConfigError(f"keep rate {rate} leaves no filters of {n}")
    order = np.argsort(-np.asarray(scores, np.float64), kind="stable")
    return np.sort(order[:keep])


@dataclass
class PruneRecord:
    layer: str
    kept: np.ndarray
    total: int
    rate: float
    scores: np.ndarray
    macs_before: int = 0
    macs_after: int = 0


@dataclass
class PruneReport:
    records: list = field(default_factory=list)
    macs_before: int = 0
    macs_after: int = 0

    @property
    def mac_ratio(self):
        return self.macs_after / self.macs_before if self.macs_before else 1.0

    def to_csv(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["layer", "kept", "total", "rate", "macs_before", "macs_after"])
        for r in self.records:
            wr.writerow([r.layer, len(r.kept), r.total, r.rate, r.macs_before, r.macs_after])
        wr.writerow(["total", "", "", "", self.macs_before, self.macs_after])
        return buf.getvalue()


def _out_axis(conv):
    return 1 if isinstance(conv, Deconv2d) else 0


def _in_axis(conv):
    return 0 if isinstance(conv, Deconv2d) else 1


def _spec_macs(profile):
    return {lc.name: lc.macs for lc in profile.layers}


def _unit_macs(macs, name):
    for cand in (name + ".conv", name, "final." + name[:-1] if name == "cls4" else None):
        if cand in macs:
            return macs[cand]
    return 0


def prune_network(model, keep_rate, exempt=None, image_hw=(96, 96)):
    """Prune filters of every non-exempt unit; returns ``(pruned copy, report)``.

    ``keep_rate`` is one rate for all prunable units or ``{unit: rate}``
    (missing units keep everything). ``exempt`` defaults to the units the
    model marks exempt (fusion projections and classifiers). Scores are taken
    from the unpruned weights, so the result does not depend on unit order.
    """
    pruned = copy.deepcopy(model)
    units = pruned.prune_units()
    if exempt is None:
        exempt = {u.name for u in units if u.exempt}
    exempt = set(exempt)
    names = {u.name for u in units}
    if isinstance(keep_rate, dict):
        unknown = set(keep_rate) - names
        if unknown:
            raise ConfigError(f"unknown prune units: {sorted(unknown)}")
        rates = {u.name: float(keep_rate.get(u.name, 1.0)) for u in units}
    else:
        rates = {u.name: float(keep_rate) for u in units}
    for u in units:
        if u.name in exempt:
            if isinstance(keep_rate, dict) and keep_rate.get(u.name, 1.0) != 1.0:
                raise ConfigError(f"unit {u.name} is exempt but was given keep rate {keep_rate[u.name]}")
            rates[u.name] = 1.0
        elif u.feeds_add and rates[u.name] < 1.0:
            raise StructuralError(f"unit {u.name} feeds an elementwise sum; its consumers demand a fixed channel count")

    h, w = image_hw
    before = profile_network(model.network_spec(h, w))
    report = PruneReport(macs_before=before.total_macs)

    # choose filters from the unpruned weights, then edit
    keeps = {}
    for u in units:
        scores = l1_filter_scores(np.moveaxis(u.conv.weight.data, _out_axis(u.conv), 0))
        keeps[u.name] = select_filters(scores, rates[u.name])
        report.records.append(PruneRecord(u.name, keeps[u.name], len(scores), rates[u.name], scores))

    in_masks = {}
    for u in units:
        keep = keeps[u.name]
        total = u.conv.weight.shape[_out_axis(u.conv)]
        if len(keep) == total:
            continue
        for consumer, offset in u.consumers:
            mask = in_masks.setdefault(id(consumer), (consumer, np.ones(consumer.weight.shape[_in_axis(consumer)], bool)))[1]
            drop = np.setdiff1d(np.arange(total), keep)
            mask[offset + drop] = False
        conv = u.conv
        conv.weight.data = np.ascontiguousarray(np.take(conv.weight.data, keep, axis=_out_axis(conv)))
        conv.weight.grad = np.zeros_like(conv.weight.data)
        if conv.bias is not None:
            conv.bias.data = np.ascontiguousarray(conv.bias.data[keep])
            conv.bias.grad = np.zeros_like(conv.bias.data)
        if u.bn is not None:
            u.bn.select(keep)
    for consumer, mask in in_masks.values():
        idx = np.flatnonzero(mask)
        consumer.weight.data = np.ascontiguousarray(np.take(consumer.weight.data, idx, axis=_in_axis(consumer)))
        consumer.weight.grad = np.zeros_like(consumer.weight.data)

    after = profile_network(pruned.network_spec(h, w))
    report.macs_after = after.total_macs
    mb, ma = _spec_macs(before), _spec_macs(after)
    for r in report.records:
        r.macs_before, r.macs_after = _unit_macs(mb, r.layer), _unit_macs(ma, r.layer)
    # smoke forward: the pruned graph must be shape-valid end to end
    probe = np.zeros((1, 3, h, w), pruned.dtype)
    pruned.forward_heads(probe, train=False)
    return pruned, report
