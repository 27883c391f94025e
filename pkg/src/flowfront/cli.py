"""Command-line entry point: data generation, pretraining, training,
evaluation, and qualitative visualization as subcommands.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

import argparse
import os
import sys

from .core import Config, parse_config
from .data import build_manifest, export_records, load_manifest, save_manifest
from .eval import dump_qualitative, evaluate_all, recognition_table, save_report
from .nets import save_checkpoint
from . import train as train_mod
from .data import SyntheticDataset


def _load_config(args):
    cfg = Config()
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise FileNotFoundError(args.config)
        cfg = parse_config(args.config)
    return cfg


def _load_data(args):
    path = os.path.join(args.data, "manifest.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    return load_manifest(path)


def cmd_gen_data(args):
    os.makedirs(args.out, exist_ok=True)
    manifest = build_manifest(
        args.out,
        n_identities=args.identities,
        seed=args.seed,
        resolution=args.resolution,
    )
    save_manifest(manifest, os.path.join(args.out, "manifest.json"))
    export_records(manifest, os.path.join(args.out, "images"))
    print(os.path.join(args.out, "manifest.json"))
    return 0


def cmd_pretrain_flow(args):
    manifest = _load_data(args)
    cfg = _load_config(args).replace(resolution=manifest.resolution)
    state = train_mod.build_state(cfg, n_classes=len(manifest.train_ids))
    dataset = SyntheticDataset(manifest)
    train_mod.pretrain_flows(state, dataset)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "flow_pretrain.ckpt")
    save_checkpoint(path, 0, cfg, state.modules(), state.optimizers())
    print(path)
    return 0


def cmd_train(args):
    manifest = _load_data(args)
    cfg = _load_config(args).replace(resolution=manifest.resolution)
    resume = None
    if args.ckpt:
        if not os.path.isfile(args.ckpt):
            raise FileNotFoundError(args.ckpt)
        resume = args.ckpt
    path = train_mod.train_full(cfg, manifest, args.out, resume=resume)
    print(path)
    return 0


def _load_model(args, manifest):
    if args.ckpt:
        if not os.path.isfile(args.ckpt):
            raise FileNotFoundError(args.ckpt)
        return train_mod.load_state(args.ckpt, manifest)
    cfg = _load_config(args).replace(resolution=manifest.resolution)
    return train_mod.build_state(cfg, n_classes=len(manifest.train_ids))


def cmd_eval(args):
    manifest = _load_data(args)
    state = _load_model(args, manifest)
    payload, table = evaluate_all(state, manifest, state.embedder)
    os.makedirs(args.out, exist_ok=True)
    save_report(os.path.join(args.out, "report.json"), payload)
    with open(os.path.join(args.out, "report.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def cmd_visualize(args):
    manifest = _load_data(args)
    state = _load_model(args, manifest)
    dataset = SyntheticDataset(manifest)
    idxs = manifest.indices(split="test", gallery=False)[: args.samples]
    samples = [dataset.sample(i) for i in idxs]
    files = dump_qualitative(state, samples, args.out)
    for f in files:
        print(f)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowfront",
        description="Flow-guided face frontalization at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic identity dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--identities", type=int, default=10,
                   help="number of identities (>= 2; default 10)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed (default 0)")
    p.add_argument("--resolution", type=int, default=64,
                   help="square image size (default 64)")
    p.set_defaults(func=cmd_gen_data)

    def std(p, ckpt_help="checkpoint to load"):
        p.add_argument("--config", default=None, help="config file (key = value)")
        p.add_argument("--data", required=True, help="dataset directory with manifest.json")
        p.add_argument("--ckpt", default=None, help=ckpt_help)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain-flow", help="supervised warmup of both flow nets")
    std(p, ckpt_help="unused; accepted for flag symmetry")
    p.set_defaults(func=cmd_pretrain_flow)

    p = sub.add_parser("train", help="full adversarial training run")
    std(p, ckpt_help="resume from this checkpoint (skips pretraining)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank-1 / verification / illumination report")
    std(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="qualitative dumps for a few test samples")
    std(p)
    p.add_argument("--samples", type=int, default=4,
                   help="number of test samples to render (default 4)")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen-data" and args.identities < 2:
        parser.exit(2, "flowfront gen-data: error: --identities must be >= 2\n")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        name = exc.filename if getattr(exc, "filename", None) else str(exc)
        print(f"error: missing file: {name}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
