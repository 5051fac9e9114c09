"""Command-line interface.

Every subcommand accepts ``--config FILE``, ``--run-dir DIR`` and one flag
per configuration key (``--train.base_lr 0.01``); flags override the file.
The fully resolved configuration is written to ``<run-dir>/config.ini``
before any work starts and every output lands under the run directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from icnet.config import RunConfig, config_keys, format_value, load_config
from icnet.errors import ConfigError, IcnetError
from icnet.experiments import PRUNE_FINETUNE

HELP_WIDTH = 100


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=36)


def _common_parser():
    p = argparse.ArgumentParser(add_help=False, formatter_class=_formatter)
    p.add_argument("--config", metavar="FILE", help="INI config file ([model] [train] [data] [eval])")
    p.add_argument("--run-dir", metavar="DIR", help="output directory (default: runs/<command>)")
    grp = p.add_argument_group("config keys (override the file)")
    defaults = RunConfig()
    for key in config_keys():
        section, name = key.split(".")
        default = format_value(getattr(getattr(defaults, section), name))
        grp.add_argument(f"--{key}", dest=key, metavar="V", help=f"default: {default or '(empty)'}")
    return p


def build_parser():
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="icnet",
        description="Cascade segmentation networks: data, training, evaluation, cost and ablations.",
        formatter_class=_formatter,
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_, formatter_class=_formatter)

    add("gen-data", "generate the synthetic train/test benchmark as PPM/PGM files")
    add("train", "train a model; writes model.ckpt and train_log.csv")

    p = add("infer", "predict label maps for a dataset directory or a single PPM image")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint written by train")
    p.add_argument("--input", required=True, metavar="PATH", help="dataset directory or .ppm file")
    p.add_argument("--branches", choices=("4", "24", "124"), help="cascade prefix to run (default: eval.branches)")

    p = add("eval", "evaluate a checkpoint; writes metrics.csv and region_hist.csv")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint written by train")
    p.add_argument("--branches", choices=("4", "24", "124"), help="cascade prefix to run (default: eval.branches)")

    p = add("profile", "per-layer MACs and activation memory; writes profile.csv")
    p.add_argument("--branches", choices=("4", "24", "124"), default="124")
    p.add_argument("--spec", metavar="FILE", help="profile a text network spec instead of the configured model")

    p = add("prune", "one-shot l1 filter pruning of a checkpoint; writes prune.csv and metrics.csv")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint written by train")
    p.add_argument("--keep-rate", type=float, default=0.5, metavar="R", help="fraction of filters kept per layer")
    p.add_argument("--finetune", type=int, default=0, metavar="N", help="fine-tune iterations after pruning")

    p = add("analyze", "region-size accuracy histograms of two cascade prefixes and their difference")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="checkpoint written by train")
    p.add_argument("--compare", default="24,4", metavar="A,B", help="prefixes to difference (A minus B)")

    p = add("ablate", "run the ablation studies; one CSV per study")
    p.add_argument("--studies", default="all", metavar="LIST", help="comma list of branch,fusion,input_scale,"
                   "feature_stride,keep_rate,region or 'all'")
    p.add_argument("--finetune", type=int, default=PRUNE_FINETUNE, metavar="N",
                   help="fine-tune iterations after each prune in the keep_rate study")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    for key in config_keys():
        value = getattr(args, key, None)
        if value is not None:
            section, name = key.split(".")
            cfg.set(section, name, value, where="command line")
    return cfg.validate()


def _run_dir(args):
    d = Path(args.run_dir or os.path.join("runs", args.command))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_model(cfg, path):
    from icnet.checkpoint import load_checkpoint
    from icnet.model import build_model

    model = build_model(cfg.model)
    load_checkpoint(model, path)
    return model


def _test_set(cfg):
    from icnet.data import load_dataset, make_dataset

    if cfg.data.root:
        return load_dataset(os.path.join(cfg.data.root, "test"), cfg.model.num_classes)
    return make_dataset(cfg.data.test_count, cfg.scene_spec(), offset=cfg.data.train_count)


def cmd_gen_data(cfg, args, out):
    from icnet.data import make_dataset, write_dataset

    spec = cfg.scene_spec()
    write_dataset(out / "train", *make_dataset(cfg.data.train_count, spec))
    write_dataset(out / "test", *make_dataset(cfg.data.test_count, spec, offset=cfg.data.train_count))
    print(f"wrote {cfg.data.train_count} train and {cfg.data.test_count} test scenes to {out}")


def cmd_train(cfg, args, out):
    from icnet.checkpoint import save_checkpoint
    from icnet.experiments import load_benchmark
    from icnet.model import build_model
    from icnet.train import train_loop

    bench = load_benchmark(cfg)
    model = build_model(cfg.model)
    train_loop(model, bench.train_x, bench.train_y, cfg.train, log_path=out / "train_log.csv",
               checkpoint_path=out / "model.ckpt")
    save_checkpoint(model, out / "model.ckpt", iteration=cfg.train.max_iter)
    print(f"checkpoint: {out / 'model.ckpt'}")


def cmd_infer(cfg, args, out):
    from icnet.data import read_manifest, read_ppm, write_pgm
    from icnet.experiments import predict_batch

    model = _load_model(cfg, args.checkpoint)
    branches = args.branches or cfg.eval.branches
    src = Path(args.input)
    if src.is_dir():
        items = [(sid, src / "images" / f"{sid}.ppm") for sid, _, _ in read_manifest(src)]
    else:
        items = [(src.stem, src)]
    (out / "labels").mkdir(exist_ok=True)
    for sid, path in items:
        pred = predict_batch(model, read_ppm(path)[None], branches)[0]
        write_pgm(out / "labels" / f"{sid}.pgm", pred.astype(np.uint8))
    print(f"wrote {len(items)} label maps to {out / 'labels'}")


def cmd_eval(cfg, args, out):
    from icnet.experiments import evaluate
    from icnet.metrics import metrics_csv

    model = _load_model(cfg, args.checkpoint)
    x, y = _test_set(cfg)
    res = evaluate(model, x, y, args.branches or cfg.eval.branches, cfg.eval)
    (out / "metrics.csv").write_text(metrics_csv(res.iou))
    (out / "region_hist.csv").write_text(res.hist.to_csv())
    print(f"mIoU {100 * res.miou:.2f}")


def cmd_profile(cfg, args, out):
    from icnet.cost import network_from_text, profile_network
    from icnet.model import build_model

    if args.spec:
        net = network_from_text(Path(args.spec).read_text())
    else:
        net = build_model(cfg.model).network_spec(cfg.data.height, cfg.data.width, args.branches)
    prof = profile_network(net, 8 if cfg.model.dtype == "float64" else 4)
    (out / "profile.csv").write_text(prof.to_csv())
    summary = {
        "total_macs": prof.total_macs,
        "stage_macs": prof.stage_macs,
        "peak_activation_bytes": prof.peak_activation_bytes,
        "total_activation_bytes": prof.total_activation_bytes,
    }
    (out / "profile_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"total MACs {prof.total_macs}")


def cmd_prune(cfg, args, out):
    from icnet.compression import prune_network
    from icnet.experiments import evaluate, load_benchmark
    from icnet.metrics import metrics_csv
    from icnet.train import train_loop

    model = _load_model(cfg, args.checkpoint)
    pruned, report = prune_network(model, args.keep_rate, image_hw=(cfg.data.height, cfg.data.width))
    (out / "prune.csv").write_text(report.to_csv())
    if args.finetune:
        bench = load_benchmark(cfg)
        train_loop(pruned, bench.train_x, bench.train_y, replace(cfg.train, max_iter=args.finetune))
    x, y = _test_set(cfg)
    res = evaluate(pruned, x, y, cfg.eval.branches, cfg.eval)
    (out / "metrics.csv").write_text(metrics_csv(res.iou))
    print(f"MAC ratio {report.mac_ratio:.4f}, mIoU {100 * res.miou:.2f}")


def cmd_analyze(cfg, args, out):
    from icnet.experiments import evaluate, rows_to_csv
    from icnet.metrics import front_back_gain

    a, b = (s.strip() for s in args.compare.split(","))
    model = _load_model(cfg, args.checkpoint)
    x, y = _test_set(cfg)
    ha = evaluate(model, x, y, a, cfg.eval).hist
    hb = evaluate(model, x, y, b, cfg.eval).hist
    diff = ha.difference(hb)
    rows = []
    for i in range(ha.bins):
        rows.append({
            "bin": i,
            "lo": i * ha.interval + 1,
            "hi": (i + 1) * ha.interval,
            "count": int(hb.counts[i]),
            f"acc_sub{b}": "" if hb.counts[i] == 0 else float(hb.mean_acc[i]),
            f"acc_sub{a}": "" if ha.counts[i] == 0 else float(ha.mean_acc[i]),
            "gain": "" if np.isnan(diff[i]) else float(diff[i]),
        })
    (out / "region_hist.csv").write_text(rows_to_csv(rows))
    try:
        front, back = front_back_gain(diff, ha.counts, hb.counts)
        print(f"mean gain: smallest-third bins {front:+.4f}, largest-third bins {back:+.4f}")
    except ValueError as e:
        print(f"gain summary unavailable: {e}")


def cmd_ablate(cfg, args, out):
    from icnet.experiments import STUDIES, AblationRunner

    studies = STUDIES if args.studies == "all" else tuple(s.strip() for s in args.studies.split(","))
    unknown = set(studies) - set(STUDIES)
    if unknown:
        raise ConfigError(f"unknown studies {sorted(unknown)}; choose from {', '.join(STUDIES)}")
    AblationRunner(cfg, out_dir=str(out), prune_finetune=args.finetune).run_all(studies)
    print(f"wrote {', '.join(s + '.csv' for s in studies)} to {out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "prune": cmd_prune,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
}


def exit_code(err):
    return getattr(err, "exit_code", 1)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = _run_dir(args)
        (out / "config.ini").write_text(cfg.to_text())
        COMMANDS[args.command](cfg, args, out)
    except IcnetError as e:
        print(f"icnet {args.command}: error: {e}", file=sys.stderr)
        return exit_code(e)
    except OSError as e:
        print(f"icnet {args.command}: error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
