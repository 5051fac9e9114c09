"""Benchmark construction, evaluation and the ablation studies.

Every study writes one CSV whose rows are the compared variants. Trained
models are shared between studies run by one :class:`AblationRunner`
(the cascade model serves the branch, fusion and region studies; the
stride-8 baseline serves the input-scale and keep-rate studies).
"""

import csv
import io
import os
from dataclasses import dataclass, field, replace

import numpy as np

from icnet import tensor as T
from icnet.compression import prune_network
from icnet.cost import profile_network
from icnet.data import load_dataset, make_dataset
from icnet.metrics import (
    RegionHistogram,
    confusion_matrix,
    iou_from_confusion,
    mean_iou,
    region_accuracy_histogram,
)
from icnet.model import build_model, upsample_argmax

STUDIES = ("branch", "fusion", "input_scale", "feature_stride", "keep_rate", "region")

# One-shot pruning of the desk-scale baseline collapses to a constant label at
# rate 0.5, so the keep-rate study gives every rate the same short recovery.
PRUNE_FINETUNE = 100


@dataclass
class Benchmark:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def load_benchmark(run):
    """Train/test split from ``data.root`` (``train/`` and ``test/``) or generated.

    Generated test scenes use scene indices after the training ones, so the
    two splits never share a seed.
    """
    n = run.model.num_classes
    if run.data.root:
        tx, ty = load_dataset(os.path.join(run.data.root, "train"), n)
        vx, vy = load_dataset(os.path.join(run.data.root, "test"), n)
        return Benchmark(tx, ty, vx, vy)
    spec = run.scene_spec()
    tx, ty = make_dataset(run.data.train_count, spec)
    vx, vy = make_dataset(run.data.test_count, spec, offset=run.data.train_count)
    return Benchmark(tx, ty, vx, vy)


@dataclass
class EvalResult:
    confusion: np.ndarray
    iou: np.ndarray
    miou: float
    hist: RegionHistogram = None
    preds: np.ndarray = field(default=None, repr=False)


def predict_batch(model, x, branches="124", scale=1.0):
    """Full-resolution labels; ``scale`` < 1 feeds a bilinearly shrunk image."""
    h, w = x.shape[2:]
    if scale != 1.0:
        x = T.bilinear_resize(x, max(1, round(h * scale)), max(1, round(w * scale)))
    heads = model.forward_heads(x, train=False, branches=branches)
    return upsample_argmax(heads[min(heads)], h, w)


def evaluate(model, images, labels, branches="124", eval_cfg=None, scale=1.0, keep_preds=False):
    """mIoU over a dataset (summed confusion matrices) plus the region histogram."""
    from icnet.config import EvalConfig

    ec = eval_cfg or EvalConfig()
    n = model.config.num_classes
    cm = np.zeros((n, n), np.int64)
    hist = RegionHistogram(ec.hist_bins, ec.hist_interval)
    preds = []
    for i in range(0, len(images), ec.batch):
        pred = predict_batch(model, images[i : i + ec.batch], branches, scale)
        gt = labels[i : i + ec.batch]
        cm += confusion_matrix(pred, gt, n)
        region_accuracy_histogram(gt, pred, source=ec.region_source, connectivity=ec.connectivity, hist=hist)
        if keep_preds:
            preds.append(pred)
    iou = iou_from_confusion(cm)
    return EvalResult(cm, iou, mean_iou(iou), hist, np.concatenate(preds) if keep_preds else None)


def train_variant(run, bench, log_path=None, **model_overrides):
    """Build ``run.model`` with overrides, train it on ``bench``; returns (model, result)."""
    from icnet.train import train_loop

    cfg = replace(run.model, **model_overrides)
    model = build_model(cfg)
    result = train_loop(model, bench.train_x, bench.train_y, run.train, log_path=log_path)
    return model, result


def rows_to_csv(rows):
    if not rows:
        return ""
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _macs(model, h, w, branches="124"):
    prof = profile_network(model.network_spec(h, w, branches))
    return prof.total_macs, prof.total_activation_bytes


class AblationRunner:
    """Trains each variant at most once and evaluates it for every study."""

    def __init__(self, run, out_dir=None, bench=None, log=print, prune_finetune=PRUNE_FINETUNE):
        self.run = run
        self.prune_finetune = prune_finetune
        self.out_dir = out_dir
        self.bench = bench or load_benchmark(run)
        self.log = log or (lambda *a: None)
        self.models = {}
        self.train_logs = {}
        self.h, self.w = self.bench.test_x.shape[2:]

    def model(self, key, **overrides):
        if key not in self.models:
            self.log(f"training {key} ...")
            log_path = os.path.join(self.out_dir, f"train_{key}.csv") if self.out_dir else None
            self.models[key], self.train_logs[key] = train_variant(self.run, self.bench, log_path, **overrides)
        return self.models[key]

    def icnet(self, fusion="cff", guidance=True):
        key = f"icnet_{fusion}" + ("" if guidance else "_noclg")
        return self.model(key, arch="icnet", fusion=fusion, label_guidance=guidance)

    def baseline(self, os_=8):
        return self.model(f"baseline_os{os_}", arch="baseline", output_stride=os_)

    def eval(self, model, branches="124", scale=1.0, eval_cfg=None):
        return evaluate(model, self.bench.test_x, self.bench.test_y, branches, eval_cfg or self.run.eval, scale)

    def _write(self, name, text):
        if self.out_dir:
            with open(os.path.join(self.out_dir, name), "w") as f:
                f.write(text)

    # -- studies --------------------------------------------------------------

    def branch_study(self):
        base = self.baseline(8)
        base_macs, base_mem = _macs(base, self.h, self.w)
        rows = [
            {
                "model": "baseline",
                "miou": 100 * self.eval(base).miou,
                "macs": base_macs,
                "activation_bytes": base_mem,
                "speedup": 1.0,
            }
        ]
        net = self.icnet()
        for br in ("4", "24", "124"):
            macs, mem = _macs(net, self.h, self.w, br)
            rows.append(
                {
                    "model": f"sub{br}",
                    "miou": 100 * self.eval(net, br).miou,
                    "macs": macs,
                    "activation_bytes": mem,
                    "speedup": base_macs / macs,
                }
            )
        self._write("branch.csv", rows_to_csv(rows))
        return rows

    def fusion_study(self):
        rows = []
        variants = [("deconv3", True), ("deconv5", True), ("deconv7", True), ("cff", True), ("cff", False)]
        for fusion, guidance in variants:
            net = self.icnet(fusion, guidance)
            rows.append(
                {
                    "fusion": fusion,
                    "label_guidance": guidance,
                    "miou": 100 * self.eval(net).miou,
                    "fusion_params": net.cff1.fusion_param_count() + net.cff2.fusion_param_count(),
                    "macs": _macs(net, self.h, self.w)[0],
                }
            )
        self._write("fusion.csv", rows_to_csv(rows))
        return rows

    def input_scale_study(self, scales=(0.25, 0.5, 1.0)):
        base = self.baseline(8)
        rows = []
        for s in scales:
            h, w = round(self.h * s), round(self.w * s)
            rows.append(
                {
                    "scale": s,
                    "miou": 100 * self.eval(base, scale=s).miou,
                    "macs": profile_network(base.network_spec(h, w, final_upsample=False)).total_macs,
                }
            )
        self._write("input_scale.csv", rows_to_csv(rows))
        return rows

    def feature_stride_study(self, strides=(8, 16, 32)):
        rows = []
        for s in strides:
            m = self.baseline(s)
            rows.append({"output_stride": s, "miou": 100 * self.eval(m).miou, "macs": _macs(m, self.h, self.w)[0]})
        self._write("feature_stride.csv", rows_to_csv(rows))
        return rows

    def keep_rate_study(self, rates=(1.0, 0.5, 0.25)):
        """Prune the stride-8 baseline, then fine-tune each rate for ``prune_finetune`` iterations."""
        from icnet.train import train_loop

        base = self.baseline(8)
        rows = []
        for r in rates:
            pruned, rep = prune_network(base, r, image_hw=(self.h, self.w))
            if self.prune_finetune:
                ft = replace(self.run.train, max_iter=self.prune_finetune)
                train_loop(pruned, self.bench.train_x, self.bench.train_y, ft)
            rows.append(
                {
                    "keep_rate": r,
                    "miou": 100 * self.eval(pruned).miou,
                    "macs": rep.macs_after,
                    "mac_ratio": rep.mac_ratio,
                }
            )
        self._write("keep_rate.csv", rows_to_csv(rows))
        return rows

    def region_study(self, eval_cfg=None):
        """Per-bin region accuracy of sub4 and sub24 and their difference."""
        ec = eval_cfg or self.run.eval
        net = self.icnet()
        h4 = self.eval(net, "4", eval_cfg=ec).hist
        h24 = self.eval(net, "24", eval_cfg=ec).hist
        gain = h24.difference(h4)
        rows = []
        for b in range(h4.bins):
            rows.append(
                {
                    "bin": b,
                    "lo": b * h4.interval + 1,
                    "hi": (b + 1) * h4.interval,
                    "count": int(h4.counts[b]),
                    "acc_sub4": "" if h4.counts[b] == 0 else float(h4.mean_acc[b]),
                    "acc_sub24": "" if h24.counts[b] == 0 else float(h24.mean_acc[b]),
                    "gain": "" if np.isnan(gain[b]) else float(gain[b]),
                }
            )
        self._write("region_hist.csv", rows_to_csv(rows))
        return rows, h4, h24

    def run_all(self, studies=STUDIES):
        out = {}
        for s in studies:
            if s not in STUDIES:
                raise ValueError(f"unknown study {s!r}; choose from {STUDIES}")
            res = getattr(self, f"{s}_study")()
            out[s] = res[0] if s == "region" else res
        return out
