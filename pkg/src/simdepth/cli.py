"""Command-line entry point: synth-data, train, calibrate, evaluate, inspect."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, scalecal, trainer
from .config import ConfigError, config_to_dict, load_config

CONFIG_ENV = "SIMDEPTH_CONFIG"


def _config_path(args):
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        raise ConfigError("no config file given (use --config or set $%s)" % CONFIG_ENV)
    return path


def _load_datasets(cfg, domains=("real", "virtual")):
    if not cfg.data_root:
        raise ConfigError("config key data_root is empty")
    out = []
    for domain in domains:
        out.append(data.load_sequence(cfg.data_root, domain,
                                      width=cfg.width, height=cfg.height, d_max=cfg.d_max))
    return out


def cmd_synth_data(args):
    spec = data.SceneSpec(scenes=args.scenes, frames=args.frames,
                          width=args.width, height=args.height)
    rng = np.random.default_rng(args.seed)
    world = data.generate_toy_world(spec, rng, out_dir=args.out)
    print("wrote %d scenes x %d frames per domain to %s"
          % (spec.scenes, spec.frames, args.out))
    print("triplets: %d real, %d virtual" % (len(world.real), len(world.virtual)))
    return 0


def cmd_train(args):
    cfg = load_config(_config_path(args), profile=args.profile)
    if args.seed is not None:
        cfg.seed = args.seed
    real, virtual = _load_datasets(cfg)
    path, history = trainer.train(real, virtual, cfg, cfg.output_dir, resume=args.resume)
    last = history[-1] if history else {}
    print("finished %d steps; checkpoint at %s" % (last.get("step", 0), path))
    if last:
        print("final losses: l_sp=%.4f l_sf=%.4f beta_sf=%.3f da_accuracy=%.3f"
              % (last["l_sp"], last["l_sf"], last["beta_sf"], last["da_accuracy"]))
    return 0


def cmd_calibrate(args):
    cfg = load_config(_config_path(args), profile=args.profile)
    if args.seed is not None:
        cfg.seed = args.seed
    (virtual,) = _load_datasets(cfg, domains=("virtual",))
    scale = scalecal.calibrate_global_scale(virtual, cfg)
    scalecal.save_scale(scale, args.out)
    print("global scale %.6g (gt median %.4g m / prediction median %.4g m) -> %s"
          % (scale.psi, scale.gt_median, scale.pred_median, args.out))
    return 0


def cmd_evaluate(args):
    predict, cfg, embedded_psi = trainer.load_depth_model(args.ckpt)
    dataset = data.load_sequence(args.data, "virtual",
                                 width=cfg.width, height=cfg.height, d_max=cfg.d_max)
    mode = evaluation.RELATIVE if args.mode == "relative" else evaluation.ABSOLUTE
    psi = None
    if mode == evaluation.ABSOLUTE:
        if args.psi_file:
            psi = scalecal.load_scale(args.psi_file)
        elif embedded_psi is not None:
            psi = embedded_psi
        else:
            raise ConfigError("absolute mode needs --psi-file or a checkpoint with an embedded scale")
    crop = tuple(cfg.eval_crop) if cfg.eval_crop else None
    record = evaluation.evaluate(predict, dataset, mode=mode, psi=psi,
                                 cap=args.cap, d_eval_min=cfg.d_eval_min, crop=crop)
    binned = per_class = None
    if args.bins:
        edges = [float(e) for e in args.bins.split(",")]
        binned = evaluation.evaluate_binned(predict, dataset, edges, mode=mode, psi=psi,
                                            cap=args.cap, d_eval_min=cfg.d_eval_min)
    if args.per_class:
        per_class = evaluation.evaluate_per_class(predict, dataset, mode=mode, psi=psi,
                                                  cap=args.cap, d_eval_min=cfg.d_eval_min)
    text = evaluation.write_report(args.report, record, binned, per_class,
                                   extra={"checkpoint": str(args.ckpt), "psi": psi,
                                          "config": config_to_dict(cfg)})
    print(text, end="")
    if args.plots:
        base = Path(args.report)
        if binned:
            evaluation.plot_binned(binned, base.with_name(base.stem + "_binned.png"))
        if per_class:
            evaluation.plot_per_class(per_class, base.with_name(base.stem + "_per_class.png"))
    return 0


def cmd_inspect(args):
    ckpt = trainer.load_checkpoint(args.ckpt)
    print("step: %d" % ckpt["step"])
    print("psi: %s" % (ckpt["psi"] if ckpt["psi"] is not None else "not calibrated"))
    print("weight groups:")
    for group, state in ckpt["model"].items():
        n = sum(int(np.prod(t.shape)) for t in state.values())
        print("  %-8s %9d params, %d tensors" % (group, n, len(state)))
        for name, tensor in state.items():
            print("    %-40s %s" % (name, tuple(tensor.shape)))
    print("config:")
    for key, value in sorted(ckpt["config"].items()):
        print("  %s: %r" % (key, value))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="simdepth",
                                     description="Depth estimation from simulator supervision "
                                                 "and real-video self-supervision")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the procedural toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=96)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train per config")
    p.add_argument("--config")
    p.add_argument("--resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=["desk"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="compute the global scale from virtual data")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--profile", choices=["desk"])
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="run the metric suite on a dataset with GT")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["relative", "absolute"], required=True)
    p.add_argument("--psi-file")
    p.add_argument("--bins", help="comma-separated bin edges in meters")
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--report", required=True)
    p.add_argument("--plots", action="store_true")
    p.add_argument("--cap", type=float, default=80.0)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="print checkpoint contents")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
