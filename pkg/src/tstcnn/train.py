"""Training driver: seeded, reproducible runs with on-the-fly augmentation.

An epoch is one full pass over the training split; temporal and spatial
augmentation are re-randomized each epoch from seeds derived from the run
seed, so the entire run (metrics file and checkpoints) is a pure function
of the config.
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RunConfig
from .data import (
    AugmentParams,
    Clip,
    Dataset,
    DatasetParams,
    augment_spatial,
    augment_temporal,
    generate_dataset,
    load_dataset,
)
from .layers import cross_entropy_logits
from .model import ConfigError, ModelConfig, Network, build, check_block_geometry
from .optim import (
    ACTION_CONTINUE,
    NesterovSgd,
    PlateauScheduler,
    checkpoint_save,
    restore_snapshot,
    take_snapshot,
)
from .report import MetricsWriter
from .tensor import Tape, Tensor

__all__ = ["dataset_params_from", "model_config_from", "ensure_dataset", "evaluate",
           "run_training", "derived_seed"]


def derived_seed(*parts) -> int:
    """Stable 64-bit seed from a tuple of integers/strings."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.append(int.from_bytes(p.encode("utf-8")[:8].ljust(8, b"\x00"), "little"))
        else:
            ints.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    state = np.random.SeedSequence(ints).generate_state(2, dtype=np.uint64)
    return int(state[0])


def dataset_params_from(cfg: RunConfig) -> DatasetParams:
    return DatasetParams(
        n_classes=cfg.n_classes,
        per_class=cfg.per_class,
        frames=cfg.frames,
        height=cfg.height,
        width=cfg.width,
        jitter=cfg.jitter,
        split=cfg.split_ratios(),
        seed=derived_seed(cfg.seed, "data"),
    )


def model_config_from(cfg: RunConfig) -> ModelConfig:
    if cfg.blocks == "none":
        n_blocks = 0
    else:
        n_blocks = cfg.n_blocks if cfg.n_blocks > 0 else 1
    mc = ModelConfig(
        kind=cfg.model,
        frames=cfg.frames,
        height=cfg.height,
        width=cfg.width,
        filters=cfg.filter_schedule(),
        fc_width=cfg.fc_width,
        n_classes=cfg.n_classes,
        block_mode=cfg.blocks,
        n_blocks=n_blocks,
        batch_size=cfg.batch_size,
    )
    mc.validate()
    check_block_geometry(mc)
    return mc


def ensure_dataset(cfg: RunConfig) -> Dataset:
    """Load the dataset directory, generating it first when absent."""
    root = Path(cfg.data_dir)
    params = dataset_params_from(cfg)
    if (root / "manifest.csv").exists():
        ds = load_dataset(root)
        if ds.params != params:
            raise ConfigError(
                f"dataset at {root} was generated with {ds.params}, "
                f"but the run config implies {params}; use a fresh data_dir"
            )
        return ds
    return generate_dataset(params, root)


def _augment_params(cfg: RunConfig) -> AugmentParams:
    return AugmentParams(
        rotation_deg=cfg.rotation_deg,
        scale_min=cfg.scale_min,
        scale_max=cfg.scale_max,
        translate_frac=cfg.translate_frac,
    )


def _clip_of(ds: Dataset, index: int) -> Clip:
    rec = ds.records[index]
    return Clip(rgb=ds.rgb[index], flow=ds.flow[index], label=rec.class_id, seed=rec.seed)


def _preprocess(rgb: np.ndarray, flow: np.ndarray, cfg: RunConfig):
    rgb = (rgb - np.float32(cfg.rgb_center)) * np.float32(cfg.rgb_scale)
    flow = flow * np.float32(cfg.flow_scale)
    return rgb, flow


def _training_batch(ds: Dataset, indices, cfg: RunConfig, epoch: int):
    aug = _augment_params(cfg)
    rgbs, flows, labels = [], [], []
    for i in indices:
        clip = _clip_of(ds, int(i))
        window = augment_temporal(clip, cfg.frames, cfg.jitter if cfg.augment else 0,
                                  derived_seed(cfg.seed, "taug", epoch, int(i)))
        if cfg.augment:
            window = augment_spatial(window, aug, derived_seed(cfg.seed, "saug", epoch, int(i)))
        rgbs.append(window.rgb)
        flows.append(window.flow)
        labels.append(window.label)
    rgb, flow = _preprocess(np.stack(rgbs), np.stack(flows), cfg)
    return rgb, flow, np.array(labels)


def _eval_batch(ds: Dataset, indices, cfg: RunConfig):
    rgbs, flows, labels = [], [], []
    for i in indices:
        clip = _clip_of(ds, int(i))
        window = augment_temporal(clip, cfg.frames, 0, 0)  # centered window
        rgbs.append(window.rgb)
        flows.append(window.flow)
        labels.append(window.label)
    rgb, flow = _preprocess(np.stack(rgbs), np.stack(flows), cfg)
    return rgb, flow, np.array(labels)


def _branch_inputs(net: Network, rgb: np.ndarray, flow: np.ndarray):
    kwargs = {}
    if "rgb" in net.branches:
        kwargs["rgb"] = Tensor(rgb)
    if "flow" in net.branches:
        kwargs["flow"] = Tensor(flow)
    return kwargs


def clip_gradients(opt: NesterovSgd, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, t in opt.params:
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = np.float32(max_norm / norm)
        for _, t in opt.params:
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


def evaluate(net: Network, ds: Dataset, indices, cfg: RunConfig, batch_size: int = 12):
    """Accuracy and confusion matrix on centered windows, eval-mode BN."""
    n_classes = cfg.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    correct = 0
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        rgb, flow, labels = _eval_batch(ds, chunk, cfg)
        probs, _ = net.forward(train=False, **_branch_inputs(net, rgb, flow))
        pred = probs.data.argmax(axis=1)
        correct += int((pred == labels).sum())
        for t, p in zip(labels, pred):
            confusion[t, p] += 1
    acc = correct / max(1, len(indices))
    return acc, confusion


def run_training(cfg: RunConfig, log=print) -> dict:
    """Full training run; writes metrics.csv, best.ckpt and last.ckpt."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = ensure_dataset(cfg)
    model_cfg = model_config_from(cfg)
    net = build(model_cfg, seed=derived_seed(cfg.seed, "init"))
    opt = NesterovSgd(net.named_params(), lr=cfg.lr, momentum=cfg.momentum)
    sched = PlateauScheduler(
        base_lr=cfg.lr,
        floor=cfg.lr_floor,
        patience=cfg.patience,
        recent_window=cfg.recent_window,
        previous_window=cfg.previous_window,
        drop_factor=cfg.drop_factor,
    )
    train_idx = ds.split_indices("train")
    val_idx = ds.split_indices("val")
    best_snap = take_snapshot(net, opt, val_acc=-1.0, epoch=0)
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    checkpoint_save(last_path, net, opt, sched)
    ckpt_log = open(out / "checkpoints.log", "w", encoding="utf-8")
    ckpt_log.write("epoch 0 saved last (initial)\n")
    ckpt_log.flush()

    history = []
    t_start = time.time()
    with MetricsWriter(out / "metrics.csv") as metrics:
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.Generator(np.random.PCG64(derived_seed(cfg.seed, "order", epoch)))
            order = train_idx[rng.permutation(len(train_idx))]
            lr_in_effect = sched.lr
            opt.lr = lr_in_effect
            total_loss = 0.0
            total_correct = 0
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start : start + cfg.batch_size]
                rgb, flow, labels = _training_batch(ds, chunk, cfg, epoch)
                with Tape() as tape:
                    logits, _ = net.forward_logits(train=True, **_branch_inputs(net, rgb, flow))
                    loss = cross_entropy_logits(logits, labels)
                    tape.backward(loss)
                if cfg.clip_grad_norm > 0:
                    clip_gradients(opt, cfg.clip_grad_norm)
                opt.step()
                opt.zero_grad()
                total_loss += loss.item() * len(chunk)
                total_correct += int((logits.data.argmax(axis=1) == labels).sum())
            train_loss = total_loss / len(order)
            train_acc = total_correct / len(order)
            val_acc, _ = evaluate(net, ds, val_idx, cfg)

            action, new_best = sched.update(train_loss, val_acc)
            if new_best:
                best_snap = take_snapshot(net, opt, val_acc=val_acc, epoch=epoch)
                checkpoint_save(best_path, net, opt, sched)
                sched.note_best_ref(str(best_path))
                ckpt_log.write(f"epoch {epoch} saved best (val_acc {val_acc:.10g})\n")
            if action != ACTION_CONTINUE:
                restore_snapshot(net, opt, best_snap)
                opt.lr = sched.lr
                ckpt_log.write(f"epoch {epoch} {action}: restored best from epoch "
                               f"{best_snap.epoch}, lr {sched.lr:.10g}\n")
            ckpt_log.flush()
            metrics.append(epoch, train_loss, train_acc, val_acc, lr_in_effect, action)
            checkpoint_save(last_path, net, opt, sched)
            history.append(dict(epoch=epoch, train_loss=train_loss, train_acc=train_acc,
                                val_acc=val_acc, lr=lr_in_effect, action=action))
            log(f"epoch {epoch:4d}  loss {train_loss:.4f}  train {train_acc:.3f}  "
                f"val {val_acc:.3f}  lr {lr_in_effect:g}  {action}")
            if cfg.stop_at_val_acc > 0 and val_acc >= cfg.stop_at_val_acc:
                break
    ckpt_log.close()
    if not (best_path.exists()):
        checkpoint_save(best_path, net, opt, sched)
    return dict(
        history=history,
        best_val_acc=sched.best_acc if sched.best_acc > -np.inf else 0.0,
        best_epoch=sched.best_epoch + 1 if sched.best_epoch >= 0 else 0,
        epochs_run=len(history),
        wall_seconds=time.time() - t_start,
        out_dir=str(out),
    )
