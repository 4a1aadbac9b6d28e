"""Nesterov-momentum SGD, the plateau rescheduler, and checkpointing.

The scheduler implements the training protocol: start at lr 0.01; once at
least 60 epochs of loss history exist since the last reload and at least
``patience`` epochs have passed since the last lr change, compare the mean
training loss of the last 25 epochs against the 35 epochs before them. If
the recent mean is higher, reload the best snapshot and divide the lr by 10,
wrapping from the 1e-5 floor back to 0.01. Independently, a validation
accuracy below 0.7x the best triggers an immediate emergency reload of the
best snapshot without waiting for patience; the emergency reload does not
change the learning rate (only the plateau rule owns the lr ladder). Every
reload resets the windows and the patience counter.
"""

from __future__ import annotations

import io
import os
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import ContractError, Tensor, read_tensor, write_tensor

__all__ = [
    "NesterovSgd",
    "PlateauScheduler",
    "Snapshot",
    "take_snapshot",
    "restore_snapshot",
    "checkpoint_save",
    "checkpoint_restore",
    "CheckpointError",
    "ACTION_CONTINUE",
    "ACTION_RELOAD_DECAY",
    "ACTION_RELOAD_RESET",
    "ACTION_EMERGENCY",
]

ACTION_CONTINUE = "continue"
ACTION_RELOAD_DECAY = "reload_decay"
ACTION_RELOAD_RESET = "reload_reset"
ACTION_EMERGENCY = "emergency_reload"


class CheckpointError(ValueError):
    """Checkpoint file malformed or incompatible with the model."""


class NesterovSgd:
    """SGD with Nesterov momentum over named parameters.

    Update rule (lookahead-equivalent form):
        v <- mu * v - lr * g
        theta <- theta + mu * v - lr * g
    With mu = 0 this reduces to plain SGD.
    """

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], lr: float = 0.01,
                 momentum: float = 0.9):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = list(named_params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity: Dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in self.params
        }

    def step(self) -> None:
        mu = self.momentum
        lr = self.lr
        for name, t in self.params:
            if t.grad is None:
                raise ContractError(f"missing gradient for parameter '{name}'")
            g = t.grad
            v = self.velocity[name]
            dt = t.data.dtype.type
            v_new = dt(mu) * v - dt(lr) * g
            t.data += dt(mu) * v_new - dt(lr) * g
            self.velocity[name] = v_new

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None


class PlateauScheduler:
    """Plateau-driven lr ladder with best-checkpoint reload decisions.

    ``update`` appends the epoch observations and returns one of the four
    actions; the caller performs the actual snapshot restore. The lr only
    takes values base_lr / 10^k down to the floor, exactly.
    """

    def __init__(self, base_lr: float = 0.01, floor: float = 1e-5, patience: int = 50,
                 recent_window: int = 25, previous_window: int = 35, drop_factor: float = 0.7):
        self.base_lr = float(base_lr)
        self.floor = float(floor)
        self.patience = int(patience)
        self.recent_window = int(recent_window)
        self.previous_window = int(previous_window)
        self.drop_factor = float(drop_factor)
        self.max_exp = int(round(np.log10(self.base_lr / self.floor)))
        self._exp = 0
        self.loss_history: List[float] = []
        self.val_history: List[float] = []
        self.best_acc: float = -np.inf
        self.best_epoch: int = -1
        self.best_ref: Optional[str] = None
        self._segment_start = 0  # loss-history index where the current windows begin
        self._since_lr_change = 0

    @property
    def lr(self) -> float:
        return self.base_lr / (10.0 ** self._exp)

    def note_best_ref(self, ref: str) -> None:
        self.best_ref = ref

    def _advance_ladder(self) -> None:
        self._exp = 0 if self._exp >= self.max_exp else self._exp + 1

    def _plateau(self) -> bool:
        seg = self.loss_history[self._segment_start:]
        need = self.recent_window + self.previous_window
        if len(seg) < need or self._since_lr_change < self.patience:
            return False
        recent = np.mean(seg[-self.recent_window:])
        previous = np.mean(seg[-need:-self.recent_window])
        return bool(recent > previous)

    def update(self, epoch_loss: float, epoch_val_acc: float) -> Tuple[str, bool]:
        """Record one epoch; returns (action, is_new_best)."""
        self.loss_history.append(float(epoch_loss))
        self.val_history.append(float(epoch_val_acc))
        self._since_lr_change += 1

        new_best = epoch_val_acc > self.best_acc
        if new_best:
            self.best_acc = float(epoch_val_acc)
            self.best_epoch = len(self.val_history) - 1

        action = ACTION_CONTINUE
        if not new_best and self.best_acc > 0 and epoch_val_acc < self.drop_factor * self.best_acc:
            action = ACTION_EMERGENCY
        elif self._plateau():
            if self._exp >= self.max_exp:
                action = ACTION_RELOAD_RESET
                self._exp = 0
            else:
                action = ACTION_RELOAD_DECAY
                self._exp += 1

        if action != ACTION_CONTINUE:
            self._segment_start = len(self.loss_history)
            self._since_lr_change = 0
        return action, new_best


# ---------------------------------------------------------------------------
# In-memory snapshots (the "best checkpoint" the scheduler reloads)


class Snapshot:
    __slots__ = ("params", "velocity", "state", "val_acc", "epoch")

    def __init__(self, params, velocity, state, val_acc, epoch):
        self.params = params
        self.velocity = velocity
        self.state = state
        self.val_acc = val_acc
        self.epoch = epoch


def take_snapshot(net, opt: NesterovSgd, val_acc: float = float("nan"), epoch: int = -1) -> Snapshot:
    return Snapshot(
        params={name: t.data.copy() for name, t in net.named_params()},
        velocity={name: v.copy() for name, v in opt.velocity.items()},
        state={name: a.copy() for name, a in net.named_state()},
        val_acc=val_acc,
        epoch=epoch,
    )


def restore_snapshot(net, opt: NesterovSgd, snap: Snapshot) -> None:
    for name, t in net.named_params():
        np.copyto(t.data, snap.params[name])
        t.grad = None
    for name, v in opt.velocity.items():
        np.copyto(v, snap.velocity[name])
    for name, a in net.named_state():
        np.copyto(a, snap.state[name])


# ---------------------------------------------------------------------------
# Checkpoint files: versioned magic, architecture manifest, named tensors for
# parameters / velocities / running stats, then the scheduler record.

CHECKPOINT_MAGIC = b"TSCKPT01"


def _write_named(fp, items) -> None:
    items = list(items)
    fp.write(struct.pack("<I", len(items)))
    for name, arr in items:
        blob = name.encode("utf-8")
        fp.write(struct.pack("<H", len(blob)))
        fp.write(blob)
        write_tensor(fp, arr)


def _read_named(fp):
    (count,) = struct.unpack("<I", fp.read(4))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fp.read(2))
        name = fp.read(nlen).decode("utf-8")
        out.append((name, read_tensor(fp)))
    return out


def _write_floats(fp, values) -> None:
    fp.write(struct.pack("<I", len(values)))
    if values:
        fp.write(struct.pack(f"<{len(values)}d", *values))


def _read_floats(fp):
    (count,) = struct.unpack("<I", fp.read(4))
    return list(struct.unpack(f"<{count}d", fp.read(8 * count))) if count else []


def checkpoint_save(path, net, opt: NesterovSgd, sched: PlateauScheduler) -> None:
    """Write atomically: manifest, params, velocities, running stats, scheduler."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    manifest = net.manifest().encode("utf-8")
    buf.write(struct.pack("<I", len(manifest)))
    buf.write(manifest)
    _write_named(buf, ((n, t.data) for n, t in net.named_params()))
    _write_named(buf, opt.velocity.items())
    _write_named(buf, net.named_state())
    buf.write(struct.pack("<dd", opt.lr, opt.momentum))
    buf.write(struct.pack("<ddIIId", sched.base_lr, sched.floor, sched.patience,
                          sched.recent_window, sched.previous_window, sched.drop_factor))
    buf.write(struct.pack("<IIi", sched._exp, sched._segment_start, sched._since_lr_change))
    buf.write(struct.pack("<di", sched.best_acc, sched.best_epoch))
    _write_floats(buf, sched.loss_history)
    _write_floats(buf, sched.val_history)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fp:
        fp.write(buf.getvalue())
        fp.flush()
        os.fsync(fp.fileno())
    os.replace(tmp, path)


def checkpoint_restore(path, net, opt: NesterovSgd, sched: PlateauScheduler) -> None:
    """In-place restore; the checkpoint manifest must match the model exactly."""
    with open(path, "rb") as fp:
        magic = fp.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (mlen,) = struct.unpack("<I", fp.read(4))
        manifest = fp.read(mlen).decode("utf-8")
        if manifest != net.manifest():
            raise CheckpointError(
                f"{path}: checkpoint manifest does not match the model architecture"
            )
        params = dict(_read_named(fp))
        velocity = dict(_read_named(fp))
        state = dict(_read_named(fp))
        opt.lr, opt.momentum = struct.unpack("<dd", fp.read(16))
        (sched.base_lr, sched.floor, sched.patience, sched.recent_window,
         sched.previous_window, sched.drop_factor) = struct.unpack("<ddIIId", fp.read(8 + 8 + 12 + 8))
        sched.max_exp = int(round(np.log10(sched.base_lr / sched.floor)))
        sched._exp, sched._segment_start, sched._since_lr_change = struct.unpack("<IIi", fp.read(12))
        sched.best_acc, sched.best_epoch = struct.unpack("<di", fp.read(12))
        sched.loss_history = _read_floats(fp)
        sched.val_history = _read_floats(fp)
    for name, t in net.named_params():
        src = params.get(name)
        if src is None or src.shape != t.data.shape:
            raise CheckpointError(f"{path}: parameter {name!r} missing or mis-shaped")
        np.copyto(t.data, src.astype(t.data.dtype, copy=False))
        t.grad = None
    for name, v in opt.velocity.items():
        np.copyto(v, velocity[name].astype(v.dtype, copy=False))
    for name, a in net.named_state():
        np.copyto(a, state[name].astype(a.dtype, copy=False))
