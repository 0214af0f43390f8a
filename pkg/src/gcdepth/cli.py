"""Command-line surface.

Subcommands: gen-synth, train-coarse, train-fine, eval, ablate, render. Every
command writes its artifacts under a timestamped run directory containing the
effective config (with its content hash) and a log file. Exit codes: 0 ok,
2 config/schema violation, 3 missing input files, 4 numerical divergence.

The default output root comes from --out or the GCDEPTH_OUT environment
variable (falling back to ./runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, TrainConfig, build_config, save_effective_config

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4


def _run_dir(root: str | None, name: str) -> Path:
    base = Path(root or os.environ.get("GCDEPTH_OUT", "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / ("%s-%s" % (stamp, name))
    n = 0
    while candidate.exists():
        n += 1
        candidate = base / ("%s-%s-%d" % (stamp, name, n))
    candidate.mkdir(parents=True)
    return candidate


class _Logger:
    def __init__(self, path: Path):
        self.path = path

    def __call__(self, msg: str):
        print(msg)
        with open(self.path, "a") as f:
            f.write(msg + "\n")


def _prepare(args, name: str, **direct) -> tuple[TrainConfig, Path, _Logger]:
    config = build_config(getattr(args, "config", None), args.set or [], **direct)
    run = _run_dir(args.out, name)
    save_effective_config(config, run / "effective_config.yaml")
    log = _Logger(run / "log.txt")
    log("run directory: %s" % run)
    log("config hash: %s" % config.config_hash())
    return config, run, log


def cmd_gen_synth(args) -> int:
    from .data import generate_dataset

    out = Path(args.dataset)
    train = generate_dataset(out / "train", args.clips, args.frames, args.seed,
                             width=args.width, height=args.height)
    test = generate_dataset(out / "test", max(1, args.clips // 5), args.frames,
                            args.seed + 900_001, width=args.width, height=args.height)
    print("wrote %d train samples, %d test samples under %s"
          % (len(train), len(test), out))
    return 0


def cmd_train_coarse(args) -> int:
    from .pipeline import train_coarse

    config, run, log = _prepare(args, "coarse", stage="coarse")
    config = config.replace(out_dir=str(run))
    ckpt = train_coarse(config, log=log)
    log("coarse checkpoint: %s" % ckpt)
    return 0


def cmd_train_fine(args) -> int:
    from .pipeline import train_fine

    if not args.coarse_ckpt:
        raise ConfigError("train-fine requires --coarse-ckpt")
    if not Path(args.coarse_ckpt).exists():
        raise FileNotFoundError("coarse checkpoint %s does not exist" % args.coarse_ckpt)
    config, run, log = _prepare(args, "fine", stage="fine")
    config = config.replace(out_dir=str(run))
    ckpt = train_fine(config, Path(args.coarse_ckpt), log=log)
    log("fine checkpoint: %s" % ckpt)
    return 0


def cmd_eval(args) -> int:
    from .evalviz import format_metrics_table, metrics_to_json
    from .pipeline import evaluate_checkpoint

    for path in (args.checkpoint, args.dataset):
        if not Path(path).exists():
            raise FileNotFoundError("%s does not exist" % path)
    run = _run_dir(args.out, "eval")
    reports = evaluate_checkpoint(Path(args.checkpoint), Path(args.dataset),
                                  scale=not args.no_median_scaling)
    text = metrics_to_json(reports, run / "metrics.json")
    print(format_metrics_table(reports))
    if args.json:
        print(text)
    return 0


def cmd_ablate(args) -> int:
    from .pipeline import run_ablation

    config, run, log = _prepare(args, "ablate-" + args.variant)
    config = config.replace(out_dir=str(run))
    coarse = Path(args.coarse_ckpt) if args.coarse_ckpt else None
    if coarse is not None and not coarse.exists():
        raise FileNotFoundError("coarse checkpoint %s does not exist" % coarse)
    eval_ds = Path(args.eval_dataset) if args.eval_dataset else None
    result = run_ablation(args.variant, config, coarse_ckpt=coarse,
                          eval_dataset=eval_ds, log=log)
    (run / "result.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    log(json.dumps(result.get("metrics", {}), indent=1, sort_keys=True))
    return 0


def cmd_render(args) -> int:
    import numpy as np
    import torch

    from .data import load_manifest, load_sample
    from .evalviz import render_outputs
    from .models import depth_forward, load_checkpoint

    for path in (args.checkpoint, args.dataset):
        if not Path(path).exists():
            raise FileNotFoundError("%s does not exist" % path)
    run = _run_dir(args.out, "render")
    ckpt = load_checkpoint(Path(args.checkpoint))
    net = ckpt.build_depth().eval()
    manifest = load_manifest(Path(args.dataset))
    finest = min(ckpt.depth_spec.scales)
    indices = range(0, len(manifest), max(1, len(manifest) // max(1, args.count)))
    with torch.no_grad():
        for i in list(indices)[:args.count]:
            s = load_sample(manifest, i)
            out = depth_forward(net, s.target, ckpt.depth_spec)
            disp = out["disp"][finest].numpy().astype(np.float64)
            gt = s.gt_depth.numpy().astype(np.float64) if s.gt_depth is not None else None
            render_outputs(run, "%s_%04d" % (s.clip_id, s.frame_index),
                           s.target.numpy(), disp, s.intrinsics, gt_depth=gt)
    print("rendered %d samples into %s" % (args.count, run))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gcdepth",
        description="Coarse-to-fine self-supervised depth training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_file=True):
        p.add_argument("--out", default=None, help="output root (or $GCDEPTH_OUT)")
        if config_file:
            p.add_argument("--config", type=Path, default=None, help="YAML config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="dotted config override, e.g. weights.gamma=10")

    p = sub.add_parser("gen-synth", help="generate a synthetic train/test dataset")
    p.add_argument("--dataset", required=True, help="output dataset directory")
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--width", type=int, default=192)
    p.add_argument("--height", type=int, default=64)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-coarse", help="run the coarse training stage")
    common(p)
    p.set_defaults(func=cmd_train_coarse)

    p = sub.add_parser("train-fine", help="run the fine training stage")
    common(p)
    p.add_argument("--coarse-ckpt", default=None, help="coarse checkpoint to refine")
    p.set_defaults(func=cmd_train_fine)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset with GT")
    common(p, config_file=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--json", action="store_true", help="also print metrics JSON")
    p.add_argument("--no-median-scaling", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + evaluate one ablation variant (a..g)")
    common(p)
    p.add_argument("--variant", required=True, choices=list("abcdefg"))
    p.add_argument("--coarse-ckpt", default=None,
                   help="variant-c checkpoint (required for d..g)")
    p.add_argument("--eval-dataset", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("render", help="export depth maps, error maps, point clouds")
    common(p, config_file=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print("missing input: %s" % exc, file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - map known failures, re-raise the rest
        from .data import DataError
        from .pipeline import DivergenceError

        if isinstance(exc, DivergenceError):
            print("numerical divergence: %s" % exc, file=sys.stderr)
            return EXIT_DIVERGED
        if isinstance(exc, DataError):
            print("bad or missing data: %s" % exc, file=sys.stderr)
            return EXIT_MISSING
        raise


if __name__ == "__main__":
    sys.exit(main())
