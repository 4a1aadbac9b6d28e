"""Command-line driver.

Subcommands: gen-data, train, eval, export-masks, compare. All take
``--config <path>`` (key=value file), repeated ``--set key=value``
overrides, and ``--seed``. Exit codes: 0 success, 1 usage/config error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config
from .data import generate_dataset
from .model import ConfigError, build
from .optim import CheckpointError, NesterovSgd, PlateauScheduler, checkpoint_restore
from .report import (
    confusion_figure,
    convergence_figure,
    mask_figure,
    normalize_to_bytes,
    read_metrics,
    write_pgm,
)
from .tensor import ContractError, ShapeError
from .train import (
    dataset_params_from,
    derived_seed,
    ensure_dataset,
    evaluate,
    model_config_from,
    run_training,
    _branch_inputs,
    _eval_batch,
)

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, help="override the run seed")


def _config_from(args) -> RunConfig:
    cfg = load_config(args.config)
    apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="tstcnn", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="render the synthetic corpus to data_dir")
    _add_common(p)

    p = subs.add_parser("train", help="train a model; writes metrics and checkpoints")
    _add_common(p)

    p = subs.add_parser("eval", help="evaluate a checkpoint on one split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))

    p = subs.add_parser("export-masks", help="dump soft-mask volumes for one clip")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip-index", type=int, default=0,
                   help="index into the validation split (default 0)")
    p.add_argument("--channels", default="0,1,2", help="comma-separated channel list")

    p = subs.add_parser("compare", help="convergence comparison between two block modes")
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    params = dataset_params_from(cfg)
    out = Path(cfg.data_dir)
    if (out / "manifest.csv").exists():
        print(f"dataset already present at {out}")
        return 0
    generate_dataset(params, out)
    print(f"wrote {params.n_classes * params.per_class} clips to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    result = run_training(cfg)
    print(
        f"done: {result['epochs_run']} epochs, best val acc {result['best_val_acc']:.4f} "
        f"at epoch {result['best_epoch']}, artifacts in {result['out_dir']}"
    )
    return 0


def _restore_for_inference(cfg: RunConfig, checkpoint: str):
    net = build(model_config_from(cfg), seed=derived_seed(cfg.seed, "init"))
    opt = NesterovSgd(net.named_params(), lr=cfg.lr, momentum=cfg.momentum)
    sched = PlateauScheduler(base_lr=cfg.lr, floor=cfg.lr_floor, patience=cfg.patience,
                             recent_window=cfg.recent_window,
                             previous_window=cfg.previous_window,
                             drop_factor=cfg.drop_factor)
    checkpoint_restore(checkpoint, net, opt, sched)
    return net


def cmd_eval(cfg: RunConfig, checkpoint: str, split: str) -> int:
    ds = ensure_dataset(cfg)
    net = _restore_for_inference(cfg, checkpoint)
    idx = ds.split_indices(split)
    acc, confusion = evaluate(net, ds, idx, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [f"class{c}" for c in range(cfg.n_classes)]
    csv_path = out / f"eval_{split}.csv"
    with open(csv_path, "w", encoding="utf-8") as fp:
        fp.write(f"# accuracy,{acc:.10g}\n")
        fp.write("true\\pred," + ",".join(names) + "\n")
        for c, row in enumerate(confusion):
            fp.write(names[c] + "," + ",".join(str(int(v)) for v in row) + "\n")
    confusion_figure(out / f"eval_{split}_confusion.png", confusion, names)
    print(f"{split} accuracy: {acc:.4f} ({int(confusion.trace())}/{int(confusion.sum())})")
    print(f"wrote {csv_path} and {out / f'eval_{split}_confusion.png'}")
    return 0


def cmd_export_masks(cfg: RunConfig, checkpoint: str, clip_index: int, channels: str) -> int:
    ds = ensure_dataset(cfg)
    net = _restore_for_inference(cfg, checkpoint)
    if net.config.block_mode != "attention":
        raise ConfigError("checkpointed model has no attention blocks to export masks from")
    val_idx = ds.split_indices("val")
    if not 0 <= clip_index < len(val_idx):
        raise ConfigError(f"clip index {clip_index} outside the validation split (0..{len(val_idx)-1})")
    sel = [int(c) for c in channels.split(",") if c != ""]
    rgb, flow, labels = _eval_batch(ds, val_idx[clip_index : clip_index + 1], cfg)
    _, masks = net.forward(train=False, **_branch_inputs(net, rgb, flow))
    if not masks:
        raise ConfigError("forward pass produced no masks")
    out = Path(cfg.out_dir) / "masks"
    out.mkdir(parents=True, exist_ok=True)
    global_min, global_max = np.inf, -np.inf
    montage, titles = [], []
    from .tensor import write_tensor

    for block_idx, (name, mask) in enumerate(masks, start=1):
        vol = mask.data[0]  # (C, T, H, W)
        global_min = min(global_min, float(vol.min()))
        global_max = max(global_max, float(vol.max()))
        raw_path = out / f"{name.replace('.', '_')}.tnsr"
        with open(raw_path, "wb") as fp:
            write_tensor(fp, vol)
        t_mid = vol.shape[1] // 2
        for c in sel:
            if c >= vol.shape[0]:
                continue
            plane = normalize_to_bytes(vol[c, t_mid])
            write_pgm(out / f"{name.replace('.', '_')}_c{c}_t{t_mid}.pgm", plane)
            if len(montage) < 6:
                montage.append(plane)
                titles.append(f"{name} c{c}")
    mask_figure(out / "masks_overview.png", montage, titles)
    print(f"clip label: {int(labels[0])}; blocks exported: {len(masks)}")
    print(f"raw mask value range: [{global_min:.4f}, {global_max:.4f}] "
          f"(reference observation band: [0.35, 0.65])")
    print(f"wrote mask dumps to {out}")
    return 0


def cmd_compare(cfg: RunConfig) -> int:
    modes = [m.strip() for m in cfg.compare_modes.split(",")]
    if len(modes) != 2 or any(m not in ("none", "residual", "attention") for m in modes):
        raise ConfigError(f"compare_modes must name two block modes, got {cfg.compare_modes!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    curves = []
    for mode in modes:
        for s in range(cfg.compare_seeds):
            seed = cfg.seed + s
            sub = RunConfig(**vars(cfg))
            sub.blocks = mode
            sub.n_blocks = 0 if mode == "none" else max(cfg.n_blocks, 1)
            sub.seed = seed
            sub.out_dir = str(out / f"{mode}_seed{seed}")
            sub.stop_at_val_acc = cfg.threshold
            result = run_training(sub)
            accs = [h["val_acc"] for h in result["history"]]
            reached = next((i + 1 for i, a in enumerate(accs) if a >= cfg.threshold), None)
            rows.append((mode, seed, reached, result["best_val_acc"]))
            curves.append((f"{mode} seed {seed}", accs))
            shown = reached if reached is not None else "inf"
            print(f"{mode} seed {seed}: epochs-to-{cfg.threshold:g} = {shown} "
                  f"(best val {result['best_val_acc']:.3f})")

    def median_epochs(mode):
        vals = [r[2] if r[2] is not None else np.inf for r in rows if r[0] == mode]
        return float(np.median(vals))

    med_a, med_b = median_epochs(modes[0]), median_epochs(modes[1])
    csv_path = out / "compare.csv"
    with open(csv_path, "w", encoding="utf-8") as fp:
        fp.write("mode,seed,epochs_to_threshold,best_val_acc\n")
        for mode, seed, reached, best in rows:
            fp.write(f"{mode},{seed},{reached if reached is not None else 'inf'},{best:.10g}\n")
        fp.write(f"# median_{modes[0]},{med_a}\n")
        fp.write(f"# median_{modes[1]},{med_b}\n")
    convergence_figure(out / "compare_val_acc.png", curves, threshold=cfg.threshold)
    print(f"median epochs-to-threshold: {modes[0]}={med_a:g} {modes[1]}={med_b:g}")
    print(f"wrote {csv_path} and {out / 'compare_val_acc.png'}")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config_from(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        if args.command == "export-masks":
            return cmd_export_masks(cfg, args.checkpoint, args.clip_index, args.channels)
        if args.command == "compare":
            return cmd_compare(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (CheckpointError, ShapeError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR if isinstance(exc, CheckpointError) else RUNTIME_ERROR
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
