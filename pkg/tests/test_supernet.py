from dataclasses import replace

import numpy as np
import pytest

from tamnas.adversarial import AttackSpec, TradesConfig, yopo_trades_step
from tamnas.data import generate_synthetic
from tamnas.errors import CheckpointError, InfeasibleWindowError, NonFiniteError, TamNasError
from tamnas.optim import SGD
from tamnas.space import FULL, MINI, Genome, build_param_table, count_params, random_genome
from tamnas.supernet import (
    BLOCK_ONLY,
    JOINT,
    MAX_ATTEMPTS,
    SamplerState,
    TrainSchedule,
    build_weight_store,
    checkpoint_bytes,
    clone_subnet,
    enter_joint_phase,
    initial_sampler_state,
    load_checkpoint,
    parse_checkpoint,
    path_momentum,
    path_network,
    phase_window,
    sample_architecture,
    save_checkpoint,
    train_supernet,
    widen_channel_space,
)

TABLE_MINI = build_param_table(MINI)
TABLE_FULL = build_param_table(FULL)


@pytest.fixture(scope="module")
def store():
    return build_weight_store(MINI, np.random.default_rng(0))


def snapshot(store):
    return {k: v.copy() for k, v in store.named_params().items()}


def test_store_covers_every_legal_pair(store):
    assert len(store.choices) == 2 * 18 + 4 * 22
    for (i, b), inst in store.choices.items():
        assert inst.mid_channels == MINI.layers[i].out_channels  # ratio 2.0 of out/2


def test_windows():
    assert phase_window(FULL, BLOCK_ONLY) == (1_823_000, 2_375_000)
    assert phase_window(FULL, JOINT) == (1_610_000, 2_370_000)
    lo, hi = phase_window(MINI, JOINT)
    assert lo < hi


def test_clone_full_width_is_whole_tensor(store):
    g = Genome((0, 1, 2, 3, 4, 5), (9,) * 6)
    net = clone_subnet(store, g)
    np.testing.assert_array_equal(net.blocks[0].params["pw1.w"].data, store.choices[(0, 0)].params["pw1.w"].data)


def test_clone_is_pure_and_detached(store):
    g = random_genome(MINI, np.random.default_rng(1))
    before = snapshot(store)
    a, b = clone_subnet(store, g), clone_subnet(store, g)
    for k, t in a.parameters().items():
        assert t.data.tobytes() == b.parameters()[k].data.tobytes()
    for t in a.parameters().values():
        t.data += 1.0
    after = snapshot(store)
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_clone_equals_path_forward(store):
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (4, 3, 16, 16)).astype(np.float32)
    for _ in range(5):
        g = random_genome(MINI, rng)
        a = clone_subnet(store, g)(x).data
        b = path_network(store, g)(x).data
        assert a.tobytes() == b.tobytes()


def test_update_isolation():
    store = build_weight_store(MINI, np.random.default_rng(3))
    g = Genome((0, 19, 7, 2, 21, 12), (2, 3, 4, 5, 6, 7))
    before = snapshot(store)
    net = path_network(store, g)
    mom = path_momentum(store, net)
    ds = generate_synthetic(4, 16, 16, 0.3, 0)
    yopo_trades_step(net, ds.x, ds.y, TradesConfig(m=1, n=1), AttackSpec(), SGD(), 0.1, mom, np.random.default_rng(0))
    after = snapshot(store)
    changed = {k for k in before if before[k].tobytes() != after[k].tobytes()}
    on_path = {store.key(i, b, "") for i, b in enumerate(g.blocks)}
    for k in changed:
        assert k.startswith(("stem", "tail", "head")) or any(k.startswith(p) for p in on_path), k
    assert any(k.startswith("L1.b19.") for k in changed)
    assert "stem.conv.w" in changed
    # channels beyond the selected prefix are untouched
    inst = store.choices[(0, 0)]
    mid = net.blocks[0].mid_channels
    full_before = before[store.key(0, 0, "pw1.w")]
    np.testing.assert_array_equal(inst.params["pw1.w"].data[mid:], full_before[mid:])


def test_sampling_block_phase_channels_fixed():
    state = initial_sampler_state(FULL, 0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert set(sample_architecture(state, TABLE_FULL, rng).channels) == {4}


def test_sampling_joint_start_channels():
    state = enter_joint_phase(initial_sampler_state(FULL, 0), FULL)
    state = widen_channel_space(state, 500)
    rng = np.random.default_rng(1)
    for _ in range(50):
        assert set(sample_architecture(state, TABLE_FULL, rng).channels) <= {8, 9}


def test_samples_inside_window_mini():
    rng = np.random.default_rng(4)
    for phase_state in (initial_sampler_state(MINI, 0), enter_joint_phase(initial_sampler_state(MINI, 0), MINI)):
        lo, hi = phase_state.window
        for _ in range(200):
            assert lo <= count_params(sample_architecture(phase_state, TABLE_MINI, rng), TABLE_MINI) <= hi


def test_infeasible_window_reports_bounds():
    state = replace(initial_sampler_state(MINI, 0), window=(1, 10))
    with pytest.raises(InfeasibleWindowError) as info:
        sample_architecture(state, TABLE_MINI, np.random.default_rng(0))
    assert info.value.achievable == TABLE_MINI.bounds([4])
    assert str(MAX_ATTEMPTS) in str(info.value)


def test_widening_schedule():
    s = enter_joint_phase(initial_sampler_state(FULL, 0), FULL)
    assert widen_channel_space(s, 519).active_channels == (8, 9)
    assert widen_channel_space(s, 540).active_channels == (7, 8, 9)
    assert widen_channel_space(s, 520 + 20 * 8).active_channels == tuple(range(10))
    assert widen_channel_space(s, 999).active_channels == tuple(range(10))
    block = initial_sampler_state(FULL, 0)
    assert widen_channel_space(block, 700) == block
    # monotone growth
    prev = set()
    for e in range(500, 1000, 10):
        s = widen_channel_space(s, e)
        assert prev <= set(s.active_channels)
        prev = set(s.active_channels)


def test_full_learning_rate_schedule():
    sched = TrainSchedule()
    assert sched.lr_at(0) == 0.1 and sched.lr_at(199) == 0.1
    assert sched.lr_at(200) == pytest.approx(0.01)
    assert sched.lr_at(400) == pytest.approx(0.001)
    assert sched.lr_at(450) == pytest.approx(0.0001)
    assert (sched.momentum, sched.weight_decay, sched.batch_size, sched.refresh) == (0.9, 5e-4, 512, 20)


def test_refresh_must_divide_phases():
    with pytest.raises(TamNasError):
        TrainSchedule(block_epochs=10, joint_epochs=10, refresh=3)


def test_sampler_state_roundtrip():
    s = initial_sampler_state(MINI, 7)
    assert SamplerState.from_dict(s.to_dict()) == s


def _tiny(seed=0):
    return generate_synthetic(4, 32, 16, 0.3, seed)


TINY = TrainSchedule(block_epochs=2, joint_epochs=2, refresh=1, block_milestones=(1,), joint_milestones=(3,), batch_size=16, checkpoint_every=1)
LIGHT = TradesConfig(m=1, n=1)


def test_checkpoint_roundtrip_and_crc(tmp_path):
    store = build_weight_store(MINI, np.random.default_rng(5))
    state = initial_sampler_state(MINI, 5)
    path = save_checkpoint(tmp_path / "a.tamn", store, state, {"note": "x"})
    blob = path.read_bytes()
    assert blob[:4] == b"TAMN"
    loaded, st, meta = load_checkpoint(path, MINI)
    assert st == state and meta == {"note": "x"}
    assert checkpoint_bytes(loaded, st, meta) == blob
    corrupt = bytearray(blob)
    corrupt[len(blob) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        parse_checkpoint(bytes(corrupt))
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"NOPE" + blob[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path, FULL)
    with pytest.raises(CheckpointError):
        parse_checkpoint(blob[:-10])


def test_training_is_deterministic_and_resumable(tmp_path):
    def run(stop, store=None, state=None, out=None):
        store = store or build_weight_store(MINI, np.random.default_rng(6))
        state = state or initial_sampler_state(MINI, 6)
        res = train_supernet(store, state, TINY, _tiny(), LIGHT, AttackSpec(), TABLE_MINI, out, stop_epoch=stop)
        return store, res

    s1, r1 = run(2)
    s2, r2 = run(2)
    assert checkpoint_bytes(s1, r1.state) == checkpoint_bytes(s2, r2.state)
    # stop after one epoch, reload from disk, continue
    _, r3 = run(1, out=tmp_path)
    loaded, state, _ = load_checkpoint(r3.checkpoints[-1], MINI)
    s4, r4 = run(2, store=loaded, state=state)
    assert checkpoint_bytes(s4, r4.state) == checkpoint_bytes(s1, r1.state)


def test_training_history_respects_windows_and_phases(tmp_path):
    store = build_weight_store(MINI, np.random.default_rng(7))
    res = train_supernet(store, initial_sampler_state(MINI, 7), TINY, _tiny(), LIGHT, AttackSpec(), TABLE_MINI, tmp_path)
    phases = [r["phase"] for r in res.history]
    assert phases == [BLOCK_ONLY, BLOCK_ONLY, JOINT, JOINT]
    for r in res.history:
        lo, hi = phase_window(MINI, r["phase"])
        assert lo <= r["params"] <= hi
        if r["phase"] == BLOCK_ONLY:
            assert r["genome"].split("/")[1].split() == ["4"] * 6
    assert [p.name for p in res.checkpoints] == [f"supernet_e{i:04d}.tamn" for i in (1, 2, 3, 4)]


def test_nonfinite_aborts_with_checkpoint_reference(tmp_path):
    store = build_weight_store(MINI, np.random.default_rng(8))
    ds = _tiny()
    res = train_supernet(store, initial_sampler_state(MINI, 8), TINY, ds, LIGHT, AttackSpec(), TABLE_MINI, tmp_path, stop_epoch=1)
    bad = _tiny()
    bad.x[:] = np.nan
    with pytest.raises(NonFiniteError) as info:
        train_supernet(store, res.state, TINY, bad, LIGHT, AttackSpec(), TABLE_MINI, tmp_path, stop_epoch=2)
    assert info.value.batch_index == 0
    assert info.value.checkpoint == res.checkpoints[-1]
