import numpy as np
import pytest

from tstcnn.tensor import ContractError, Tensor
from tstcnn.model import ModelConfig, build
from tstcnn.optim import (
    ACTION_CONTINUE,
    ACTION_EMERGENCY,
    ACTION_RELOAD_DECAY,
    ACTION_RELOAD_RESET,
    CheckpointError,
    NesterovSgd,
    PlateauScheduler,
    checkpoint_restore,
    checkpoint_save,
    restore_snapshot,
    take_snapshot,
)

LR_LADDER = (0.01, 0.001, 1e-4, 1e-5)


def tiny_net(seed=0, **kw):
    cfg = dict(kind="rgb", frames=8, height=8, width=8, filters=(4, 4, 4), fc_width=5, n_classes=2)
    cfg.update(kw)
    return build(ModelConfig(**cfg), seed=seed)


# ---------------------------------------------------------------------------
# Nesterov SGD


def test_zero_gradient_zero_velocity_keeps_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    opt = NesterovSgd([("p", p)], lr=0.1, momentum=0.9)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_zero_momentum_reduces_to_plain_sgd():
    p = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    opt = NesterovSgd([("p", p)], lr=0.5, momentum=0.0)
    p.grad = np.array([2.0])
    opt.step()
    np.testing.assert_allclose(p.data, [1.0 - 0.5 * 2.0])


def test_two_step_hand_iteration_frozen():
    # mu=0.9, lr=0.1, g=1 from theta=0:
    #   step1: v=-0.1, theta=0.9*(-0.1)-0.1 = -0.19
    #   step2: v=-0.19, theta=-0.19+0.9*(-0.19)-0.1 = -0.461
    p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    opt = NesterovSgd([("p", p)], lr=0.1, momentum=0.9)
    p.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.19], rtol=1e-12)
    np.testing.assert_allclose(opt.velocity["p"], [-0.1], rtol=1e-12)
    p.grad = np.array([1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.461], rtol=1e-12)
    np.testing.assert_allclose(opt.velocity["p"], [-0.19], rtol=1e-12)


def test_missing_gradient_names_parameter():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = NesterovSgd([("branch.conv.weight", p)], lr=0.1)
    with pytest.raises(ContractError) as exc:
        opt.step()
    assert "branch.conv.weight" in str(exc.value)


# ---------------------------------------------------------------------------
# Plateau scheduler traces


def drive(sched, losses, accs):
    actions = []
    lrs = []
    for l, a in zip(losses, accs):
        action, _ = sched.update(l, a)
        actions.append(action)
        lrs.append(sched.lr)
    return actions, lrs


def test_monotone_decreasing_loss_always_continues():
    sched = PlateauScheduler()
    n = 200
    losses = [1.0 / (e + 1) for e in range(n)]
    accs = [min(0.99, 0.2 + 0.004 * e) for e in range(n)]
    actions, lrs = drive(sched, losses, accs)
    assert set(actions) == {ACTION_CONTINUE}
    assert set(lrs) == {0.01}


def plateau_trace(rise_at, n, base=2.0, fall=0.01, rise=0.02):
    """Loss decreasing until ``rise_at``, then increasing."""
    out = []
    for e in range(n):
        if e < rise_at:
            out.append(base - fall * e)
        else:
            out.append(base - fall * rise_at + rise * (e - rise_at))
    return out


def first_plateau_epoch(losses, recent=25, previous=35, patience=50, start=0):
    """Independent oracle: first index where the window inequality holds."""
    for e in range(len(losses)):
        seg = losses[start : e + 1]
        if len(seg) < recent + previous or (e + 1 - start) < patience:
            continue
        if np.mean(seg[-recent:]) > np.mean(seg[-(recent + previous) : -recent]):
            return e
    return None


def test_plateau_fires_at_oracle_epoch_and_decays():
    losses = plateau_trace(rise_at=90, n=140)
    accs = [0.5] * len(losses)
    accs[0] = 0.51  # fix the best early so emergency never fires (0.5 > 0.7*0.51)
    expected = first_plateau_epoch(losses)
    assert expected is not None
    sched = PlateauScheduler()
    actions, lrs = drive(sched, losses, accs)
    assert actions[expected] == ACTION_RELOAD_DECAY
    assert all(a == ACTION_CONTINUE for a in actions[:expected])
    assert lrs[expected] == 0.001


def test_plateau_before_window_or_patience_never_fires():
    # rising loss from the very start: the 60-epoch window gate holds it back
    losses = [1.0 + 0.01 * e for e in range(59)]
    sched = PlateauScheduler()
    actions, _ = drive(sched, losses, [0.5] * len(losses))
    assert set(actions) == {ACTION_CONTINUE}


def test_full_ladder_walk_and_reset():
    # keep the loss rising forever: the plateau refires every 60 epochs
    n = 60 * 5
    losses = [1.0 + 0.01 * e for e in range(n)]
    accs = [0.5] * n
    accs[0] = 0.51
    sched = PlateauScheduler()
    actions, lrs = drive(sched, losses, accs)
    fired = [(e, a) for e, (a, l) in enumerate(zip(actions, lrs)) if a != ACTION_CONTINUE]
    assert [a for _, a in fired] == [
        ACTION_RELOAD_DECAY,
        ACTION_RELOAD_DECAY,
        ACTION_RELOAD_DECAY,
        ACTION_RELOAD_RESET,
        ACTION_RELOAD_DECAY,  # ladder continues after wrapping back to 0.01
    ]
    # windows reset after each action: firings exactly 60 epochs apart
    epochs = [e for e, _ in fired]
    assert epochs == [59, 119, 179, 239, 299]
    assert [lrs[e] for e in epochs] == [0.001, 1e-4, 1e-5, 0.01, 0.001]
    assert set(lrs) <= set(LR_LADDER)


def test_emergency_reload_fires_immediately():
    sched = PlateauScheduler()
    sched.update(1.0, 0.8)  # best = 0.8
    action, _ = sched.update(0.9, 0.5)  # 0.5 < 0.7 * 0.8 = 0.56
    assert action == ACTION_EMERGENCY
    assert sched.lr == 0.01  # reloads the best state; the lr ladder is untouched
    assert sched.best_acc == 0.8


def test_emergency_requires_drastic_drop():
    sched = PlateauScheduler()
    sched.update(1.0, 0.8)
    action, _ = sched.update(0.9, 0.57)  # 0.57 >= 0.56: no reload
    assert action == ACTION_CONTINUE
    assert sched.lr == 0.01


def test_patience_gating_with_larger_patience():
    # patience 100 > 60: the window inequality holds from epoch 60 on, but the
    # lr must not change before 100 epochs have elapsed
    losses = [1.0 + 0.01 * e for e in range(120)]
    sched = PlateauScheduler(patience=100)
    actions, _ = drive(sched, losses, [0.5] * 120)
    fired = [e for e, a in enumerate(actions) if a != ACTION_CONTINUE]
    assert fired == [99]


def test_lr_values_stay_on_ladder_under_random_traces():
    rng = np.random.default_rng(0)
    for _ in range(5):
        sched = PlateauScheduler()
        losses = rng.uniform(0.5, 1.5, size=400)
        accs = rng.uniform(0.4, 0.9, size=400)
        _, lrs = drive(sched, losses, accs)
        assert set(lrs) <= set(LR_LADDER)


def test_update_is_pure_in_state_and_inputs():
    losses = plateau_trace(rise_at=70, n=130)
    accs = [0.5] * 130
    accs[0] = 0.51
    a1 = drive(PlateauScheduler(), losses, accs)
    a2 = drive(PlateauScheduler(), losses, accs)
    assert a1 == a2


# ---------------------------------------------------------------------------
# Snapshots and checkpoint files


def test_snapshot_roundtrip_bit_exact():
    net = tiny_net(seed=1)
    opt = NesterovSgd(net.named_params(), lr=0.01)
    rng = np.random.default_rng(2)
    for name, v in opt.velocity.items():
        v += rng.normal(size=v.shape).astype(v.dtype)
    snap = take_snapshot(net, opt, val_acc=0.5, epoch=3)
    before = {n: t.data.copy() for n, t in net.named_params()}
    for _, t in net.named_params():
        t.data += 1.0
    restore_snapshot(net, opt, snap)
    for n, t in net.named_params():
        assert np.array_equal(t.data, before[n])


def test_checkpoint_file_roundtrip_bit_exact(tmp_path):
    net = tiny_net(seed=3)
    opt = NesterovSgd(net.named_params(), lr=0.01)
    sched = PlateauScheduler()
    sched.update(1.5, 0.3)
    sched.update(1.2, 0.4)
    rng = np.random.default_rng(4)
    for _, v in opt.velocity.items():
        v += rng.normal(size=v.shape).astype(v.dtype)
    for _, a in net.named_state():
        a += rng.normal(size=a.shape).astype(a.dtype) * 0.01
    path = tmp_path / "ck.bin"
    checkpoint_save(path, net, opt, sched)

    params = {n: t.data.copy() for n, t in net.named_params()}
    vel = {n: v.copy() for n, v in opt.velocity.items()}
    state = {n: a.copy() for n, a in net.named_state()}
    lr = opt.lr

    # perturb everything, then restore
    for _, t in net.named_params():
        t.data += 2.0
    for _, v in opt.velocity.items():
        v *= 0.0
    for _, a in net.named_state():
        a += 1.0
    opt.lr = 123.0
    sched2 = PlateauScheduler(patience=7)
    checkpoint_restore(path, net, opt, sched2)

    for n, t in net.named_params():
        assert np.array_equal(t.data, params[n])
    for n, v in opt.velocity.items():
        assert np.array_equal(v, vel[n])
    for n, a in net.named_state():
        assert np.array_equal(a, state[n])
    assert opt.lr == lr
    assert sched2.patience == 50
    assert sched2.loss_history == [1.5, 1.2]
    assert sched2.val_history == [0.3, 0.4]
    assert sched2.best_acc == 0.4


def test_checkpoint_architecture_mismatch(tmp_path):
    net = tiny_net(seed=5)
    opt = NesterovSgd(net.named_params())
    sched = PlateauScheduler()
    path = tmp_path / "ck.bin"
    checkpoint_save(path, net, opt, sched)
    other = tiny_net(seed=5, fc_width=6)
    with pytest.raises(CheckpointError):
        checkpoint_restore(path, other, NesterovSgd(other.named_params()), PlateauScheduler())


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    net = tiny_net()
    with pytest.raises(CheckpointError):
        checkpoint_restore(path, net, NesterovSgd(net.named_params()), PlateauScheduler())


def test_lr_ladder_floats_are_exact():
    sched = PlateauScheduler()
    seen = []
    for _ in range(4):
        seen.append(sched.lr)
        sched._advance_ladder()
    assert seen == [0.01, 0.001, 1e-4, 1e-5]
    assert sched.lr == 0.01  # wrapped
