"""Command line entry point: ``homotopy-attack {train,attack,batch,render,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..homotopy import MODES, homotopy_attack
from ..oracle import AttackGoal, SyntheticDataset, load_model, save_model, train_model
from ..tensor_core import load_tensor, save_tensor
from .batch import read_reports, run_batch, summarize
from .config import ConfigError, RunConfig, parse_sparsity
from .imaging import build_tile_partition, read_image, render_position_map


def _load_input(spec: str, dataset_seed: int):
    """``builtin:INDEX`` picks a test image of the built-in set; anything else is a file path."""
    if spec.startswith("builtin:"):
        ds = SyntheticDataset(seed=dataset_seed)
        i = int(spec.split(":", 1)[1])
        return ds.x_test[i], int(ds.y_test[i])
    return read_image(spec), None


def cmd_train(args) -> int:
    ds = SyntheticDataset(seed=args.dataset_seed)
    res = train_model(ds, arch=args.arch, seed=args.seed, epochs=args.epochs)
    save_model(res.model, args.out)
    print(f"test accuracy {res.test_accuracy:.4f}  final loss {res.final_loss:.4f}  -> {args.out}")
    return 0


def cmd_attack(args) -> int:
    model = load_model(args.model)
    x0, label = _load_input(args.image, args.dataset_seed)
    if args.target is not None:
        goal = AttackGoal.targeted(args.target)
    else:
        y0 = label if label is not None else model.predict(x0)
        goal = AttackGoal.nontargeted(y0, args.kappa)
    tile = parse_sparsity(args.sparsity)
    partition = None if tile is None else build_tile_partition(x0.shape, tile)
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    rep = homotopy_attack(
        model, x0, goal, args.epsilon,
        cfg.homotopy_params(), cfg.nmapg_params(), cfg.post_attack_params(),
        mode=args.mode, partition=partition, keep_traces=args.trace,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(rep.to_json() + "\n")
    save_tensor(out / "delta.tsr", rep.delta)
    if rep.delta.ndim == 3 and rep.delta.shape[2] == 3:
        render_position_map(rep.delta, out / "map.png")
    if args.trace:
        with open(out / "trace.jsonl", "w") as fh:
            for stage, trace in enumerate(rep.traces):
                for row in trace:
                    fh.write(json.dumps(dict(row, stage=stage), sort_keys=True) + "\n")
    n = rep.norms
    print(
        f"success {rep.success}  predicted {rep.predicted}  l0 {n.l0}  l1 {n.l1:.4f}"
        f"  l2 {n.l2:.4f}  linf {n.linf:.4f}  outer {rep.outer_iterations}"
        f"  time {rep.wall_time:.3f}s"
    )
    return 0 if rep.success else 1


def _overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise ConfigError({key: "override must be KEY=VALUE"})
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def cmd_batch(args) -> int:
    overrides = _overrides(args.set)
    if args.config:
        base = json.loads(Path(args.config).read_text())
        if not isinstance(base, dict):
            raise ConfigError({"<file>": "top level must be an object"})
    else:
        base = {}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    cfg = RunConfig.from_dict(base)
    summary = run_batch(cfg)
    print(summary.table())
    print(f"wall time {summary.wall_time:.1f}s  -> {cfg.out_dir}")
    return 0


def cmd_render(args) -> int:
    delta = load_tensor(args.delta)
    render_position_map(delta, args.out, scale=args.scale)
    return 0


def cmd_report(args) -> int:
    summary = summarize(read_reports(args.dir))
    if args.json:
        print(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    else:
        print(summary.table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="homotopy-attack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on the built-in dataset")
    p.add_argument("--arch", choices=["mlp", "conv"], default="mlp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="PNG, TSR1 file or builtin:INDEX")
    p.add_argument("--target", type=int, default=None, help="target class; omit for nontargeted")
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--mode", choices=MODES, default="full")
    p.add_argument("--sparsity", default="element", help="element or group:TILE")
    p.add_argument("--config", default=None, help="JSON config supplying solver parameters")
    p.add_argument("--dataset-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", action="store_true", help="write per-iteration solver traces")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("batch", help="run a configured batch")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. --set mode=pure_homotopy or --set homotopy.v=5")
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("render", help="render a perturbation position map")
    p.add_argument("--delta", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", type=int, default=1)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("report", help="summarize a batch output directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for key, msg in exc.errors.items():
            print(f"config error: {key}: {msg}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
