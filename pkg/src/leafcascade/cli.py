"""Command line entry point: ``leafcascade <command> ...``."""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import weights_io
from .cascade import CascadeConfig, evaluate, preset, run_cascade
from .imageio import read_manifest
from .netdef import LocalStage, StageUnavailable, build, conv_layer_indices, count_params, export_feature_maps, \
    param_specs
from .preprocess import AugmentPolicy, NO_AUGMENT, PatchShortfall, extract_patches, load_leaf, resize, \
    stage1_input, stage2_input

STAGE_NAMES = {1: "stage 1 (s_leafnet)", 2: "stage 2 (w_leafnet)", 3: "stage 3 (patch model)"}


class CliError(Exception):
    pass


# -- helpers --------------------------------------------------------------


def _load_stage(path, stage: int) -> LocalStage:
    if not path:
        raise CliError(f"{STAGE_NAMES[stage]}: no weights given; pass --stage{stage}-weights PATH")
    path = Path(path)
    if not path.exists():
        raise CliError(f"{STAGE_NAMES[stage]}: weights file {path} does not exist")
    net = weights_io.read_netdef(path)
    if net is None:
        raise CliError(f"{STAGE_NAMES[stage]}: {weights_io.manifest_path(path)} with the network definition "
                       "is missing; archives written by 'leafcascade train' carry one")
    return LocalStage(net, weights_io.load(path))


def _models(args) -> dict:
    from .wire import remote_stage

    s = _load_stage(args.stage1_weights, 1)
    w = _load_stage(args.stage2_weights, 2)
    if args.stage3_remote:
        hw = args.stage3_size
        p = remote_stage(args.stage3_remote, (3, hw, hw), s.class_count, timeout=args.timeout)
    else:
        p = _load_stage(args.stage3_weights, 3)
    return {"s": s, "w": w, "p": p}


def _config(args) -> CascadeConfig:
    cfg = CascadeConfig.load(args.config) if args.config else preset(args.preset)
    if args.set:
        cfg = CascadeConfig.loads("\n".join(args.set), base=cfg)
    if args.seed is not None:
        cfg = replace(cfg, patch_seed=args.seed)
    return cfg


def _add_cascade_args(p):
    p.add_argument("--config", help="key=value cascade config file")
    p.add_argument("--preset", default="mk", choices=["mk", "flavia"], help="used when --config is absent")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry (repeatable)")
    p.add_argument("--stage1-weights")
    p.add_argument("--stage2-weights")
    p.add_argument("--stage3-weights")
    p.add_argument("--stage3-remote", metavar="HOST:PORT")
    p.add_argument("--stage3-size", type=int, default=96, help="patch size expected by the remote stage")
    p.add_argument("--timeout", type=float, default=5.0, help="remote stage timeout, seconds")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)


# -- commands -------------------------------------------------------------


def cmd_params(args) -> int:
    kwargs = {"input_hw": args.input_size} if args.input_size else {}
    net = build(args.net, args.classes, **kwargs)
    shapes = net.trace()
    specs = {}
    for name, shape, _ in param_specs(net):
        specs.setdefault(int(name.split(".")[-2]), []).append(shape)
    print(f"{net.name}: input {'x'.join(map(str, net.input_dims))}, {net.class_count} classes")
    print(f"{'#':>3}  {'layer':<14}{'output':<16}{'params':>10}")
    for i, spec in enumerate(net.layers):
        n = sum(int(np.prod(s)) for s in specs.get(i, []))
        print(f"{i:>3}  {spec.describe():<14}{'x'.join(map(str, shapes[i + 1])):<16}{n:>10,}")
    total, trainable, frozen = count_params(net)
    print(f"total {total:,}  trainable {trainable:,}  non-trainable {frozen:,}")
    return 0


def _stage_sample(net_kind, leaf, hw, seed, min_leaf_fraction):
    if net_kind == "s":
        return stage1_input(leaf, hw)
    if net_kind == "w":
        return stage2_input(leaf, hw)
    try:
        return extract_patches(leaf, 1, hw, min_leaf_fraction, seed).patches[0]
    except PatchShortfall:
        return resize(leaf.rgb, hw, hw)


def _load_split(manifest, net_kind, hw, seed, min_leaf_fraction):
    entries = read_manifest(manifest)
    if not entries:
        raise CliError(f"{manifest} is empty")
    xs, ys = [], []
    for i, (path, cls) in enumerate(entries):
        xs.append(_stage_sample(net_kind, load_leaf(path), hw, seed + i, min_leaf_fraction))
        ys.append(cls)
    return np.stack(xs).astype(np.float32), np.asarray(ys)


def cmd_train(args) -> int:
    from .trainer import BATCH_SIZES, TrainConfig, train

    kwargs = {}
    if args.input_size:
        kwargs["input_hw"] = args.input_size
    if args.channels:
        kwargs["channels"] = tuple(int(c) for c in args.channels.split(","))
    net = build(args.net, args.classes, **kwargs)
    hw = net.input_dims[1]
    tx, ty = _load_split(args.train, args.net, hw, args.seed, args.min_leaf_fraction)
    vx, vy = _load_split(args.val, args.net, hw, args.seed + 10**6, args.min_leaf_fraction)
    cfg = TrainConfig(batch_size=args.batch_size or BATCH_SIZES[args.net], max_epochs=args.epochs,
                      max_steps=args.max_steps, seed=args.seed,
                      augment=AugmentPolicy() if args.augment else NO_AUGMENT)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{net.name}.swpl"
    result = train(net, tx, ty, vx, vy, cfg, checkpoint=str(ckpt), history_csv=str(out / "history.csv"),
                   log=logging.getLogger("leafcascade.train").info)
    print(f"best validation accuracy {result.best_val_acc:.4f} at epoch {result.best_epoch}; weights: {ckpt}")
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args)
    outcome = run_cascade(load_leaf(args.image), _models(args), cfg, jobs=args.jobs)
    print(outcome.to_json(indent=2))
    return 0 if outcome.decided else 2


def cmd_eval(args) -> int:
    cfg = _config(args)
    samples = read_manifest(args.manifest)
    report = evaluate(samples, _models(args), cfg, standalone=args.standalone, jobs=args.jobs)
    print(report.format_table())
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_serve(args) -> int:
    from .wire import parse_address, serve

    model = _load_stage(args.weights, args.stage)
    host, port = parse_address(args.bind)
    print(f"serving {model.net.name} on {host}:{port}", flush=True)
    try:
        serve(model, host, port, background=False)
    except KeyboardInterrupt:
        pass
    return 0


def cmd_inspect(args) -> int:
    model = _load_stage(args.weights, args.stage)
    net = model.net
    leaf = load_leaf(args.image)
    x = stage1_input(leaf, net.input_dims[1]) if net.input_dims[0] == 1 else stage2_input(leaf, net.input_dims[1])
    if args.layers:
        idx = [int(i) for i in args.layers.split(",")]
    else:
        idx = conv_layer_indices(net)[:4]
    paths = export_feature_maps(net, model.weights, x, idx, args.out)
    print(f"wrote {len(paths)} feature maps to {args.out}")
    return 0


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leafcascade", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="per-layer shapes and parameter counts")
    p.add_argument("--net", required=True, choices=["s", "w", "p"])
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--input-size", type=int)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="train one stage network")
    p.add_argument("--net", required=True, choices=["s", "w", "p"])
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=10_000)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--channels", help="comma-separated conv widths")
    p.add_argument("--min-leaf-fraction", type=float, default=1.0)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify one image; exit 0 decided, 2 plausible list, 1 error")
    p.add_argument("image")
    _add_cascade_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="per-stage accuracy report over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--standalone", action="store_true", help="also score each stage model on every sample")
    p.add_argument("--json", help="write the report as JSON here")
    _add_cascade_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="serve a stage model over TCP")
    p.add_argument("--weights", required=True)
    p.add_argument("--stage", type=int, default=3, choices=[1, 2, 3])
    p.add_argument("--bind", default="127.0.0.1:7700", metavar="HOST:PORT")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("inspect", help="export conv feature maps as PGM files")
    p.add_argument("image")
    p.add_argument("--weights", required=True)
    p.add_argument("--stage", type=int, default=1, choices=[1, 2, 3])
    p.add_argument("--layers", help="comma-separated conv layer indices (default: first four)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, StageUnavailable, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
