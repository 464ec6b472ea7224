import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from fedmtl import nn
from fedmtl.data import ClientDataset, WindowedSample
from fedmtl.federation import (CheckpointError, ClientUpdate, FreezeViolation, GlobalState, RoundPlan,
                               derive_seed, fedavg_aggregate, load_checkpoint, local_train, read_manifest,
                               run_round, save_checkpoint)
from fedmtl.model import LayerGroup, ModelConfig, build_model, tensor_layout, trainable_mask
from fedmtl.nn import LayerSpec


def brute_force_mean(updates):
    total = sum(u.n_k for u in updates)
    return {k: sum(u.n_k * u.params[k] for u in updates) / total for k in updates[0].params}


def random_updates(rng, m, shapes=((3,), (2, 4))):
    return [ClientUpdate(f"c{i}", {f"t{j}": rng.normal(size=s) for j, s in enumerate(shapes)},
                         int(rng.integers(1, 50))) for i in range(m)]


# --- fedavg -------------------------------------------------------------------------

def test_fedavg_hand_example():
    ups = [ClientUpdate("a", {"w": np.array([2.0])}, 1), ClientUpdate("b", {"w": np.array([4.0])}, 3)]
    assert fedavg_aggregate(ups)["w"][0] == 3.5


def test_fedavg_single_client_identity(rng):
    (u,) = random_updates(rng, 1)
    out = fedavg_aggregate([u])
    assert all(out[k].tobytes() == u.params[k].tobytes() for k in out)


def test_fedavg_identical_updates_idempotent(rng):
    base = {"w": rng.normal(size=7)}
    ups = [ClientUpdate(f"c{i}", {"w": base["w"].copy()}, n) for i, n in enumerate((3, 11, 5))]
    assert fedavg_aggregate(ups)["w"].tobytes() == base["w"].tobytes()


def test_fedavg_five_random_any_order(rng):
    ups = random_updates(rng, 5)
    ref = brute_force_mean(ups)
    first = fedavg_aggregate(ups)
    for k in ref:
        np.testing.assert_allclose(first[k], ref[k], rtol=0, atol=1e-12)
    for perm in itertools.islice(itertools.permutations(ups), 0, 120, 7):
        out = fedavg_aggregate(list(perm))
        assert all(out[k].tobytes() == first[k].tobytes() for k in out)


@settings(max_examples=40, deadline=None)
@given(m=st.integers(1, 8), seed=st.integers(0, 2**32 - 1), data=st.data())
def test_fedavg_property(m, seed, data):
    rng = np.random.default_rng(seed)
    ups = random_updates(rng, m)
    ref = brute_force_mean(ups)
    out = fedavg_aggregate(ups)
    for k in ref:
        np.testing.assert_allclose(out[k], ref[k], rtol=0, atol=1e-12)
    perm = data.draw(st.permutations(ups))
    again = fedavg_aggregate(perm)
    assert all(again[k].tobytes() == out[k].tobytes() for k in out)


def test_fedavg_scale_invariant_weights(rng):
    ups = random_updates(rng, 4)
    scaled = [ClientUpdate(u.client_id, u.params, 4 * u.n_k) for u in ups]
    a, b = fedavg_aggregate(ups), fedavg_aggregate(scaled)
    for k in a:
        np.testing.assert_allclose(a[k], b[k], rtol=0, atol=1e-12)


def test_fedavg_frozen_passthrough_and_violation(rng):
    frozen = rng.normal(size=3)
    ups = [ClientUpdate(f"c{i}", {"f": frozen.copy(), "w": rng.normal(size=3)}, 2) for i in range(3)]
    out = fedavg_aggregate(ups, {"f": False, "w": True})
    assert out["f"].tobytes() == frozen.tobytes()
    ups[1].params["f"] = frozen + 1e-15
    with pytest.raises(FreezeViolation, match="f"):
        fedavg_aggregate(ups, {"f": False, "w": True})


@pytest.mark.parametrize("bad", ["empty", "dup", "shape", "keys", "weight"])
def test_fedavg_rejects_bad_updates(bad, rng):
    ups = random_updates(rng, 2)
    if bad == "empty":
        ups = []
    elif bad == "dup":
        ups[1].client_id = ups[0].client_id
    elif bad == "shape":
        ups[1].params["t0"] = np.zeros(4)
    elif bad == "keys":
        ups[1].params = {"zz": np.zeros(3), "t1": ups[1].params["t1"]}
    else:
        ups[1].n_k = 0
    with pytest.raises(ValueError):
        fedavg_aggregate(ups)


def test_derive_seed_stable():
    assert derive_seed(7, "a", 1) == derive_seed(7, "a", 1)
    assert len({derive_seed(7, "a", 1), derive_seed(7, "a", 2), derive_seed(7, "b", 1),
                derive_seed(8, "a", 1)}) == 4
    assert 0 <= derive_seed(1) < 2**63


# --- local training ------------------------------------------------------------------

def _client(cid, rng, n=10, L=8, pos=True):
    samples = []
    for i in range(n):
        labels = {"activity": int(rng.integers(0, 3))}
        if pos:
            labels["position"] = int(rng.integers(0, 2))
        samples.append(WindowedSample(rng.normal(size=(L, 3)), labels, cid))
    return ClientDataset(cid, samples[: n - 2], samples[n - 2:], {"activity": True, "position": pos})


def test_local_train_zero_epochs_identity(rng):
    cfg = tiny_config()
    start = build_model(cfg, 0).params
    upd = local_train(cfg, _client("a", rng), start, None, 0, 0.1, 4, 0)
    assert all(upd.params[k] is start[k] for k in start)
    assert upd.n_k == 8


def test_local_train_all_frozen_identity(rng):
    cfg = tiny_config()
    start = build_model(cfg, 0).params
    upd = local_train(cfg, _client("a", rng), start, {k: False for k in start}, 3, 0.1, 4, 0)
    assert all(upd.params[k].tobytes() == start[k].tobytes() for k in start)


def test_local_train_masked_tensors_untouched(rng):
    cfg = tiny_config()
    m = build_model(cfg, 0)
    mask = trainable_mask(m, LayerGroup.PERSONALIZED)
    upd = local_train(cfg, _client("a", rng), m.params, mask, 2, 0.1, 4, 1)
    for k, on in mask.items():
        same = upd.params[k].tobytes() == m.params[k].tobytes()
        assert same != on, k


def test_local_train_empty_raises(rng):
    cfg = tiny_config()
    with pytest.raises(ValueError, match="empty train"):
        local_train(cfg, ClientDataset("e", [], [], {}), build_model(cfg, 0).params, None, 1, 0.1, 4, 0)


def _hand_step(params, x, y, lr):
    """One SGD step of conv -> relu -> lstm -> dense -> CE composed from nn primitives."""
    pre = nn.conv1d_forward(x, params["conv1.W"], params["conv1.b"])
    h = nn.relu(pre)
    hs, cache = nn.lstm_forward(h[None], params["activity.lstm1.W"], params["activity.lstm1.U"],
                                params["activity.lstm1.b"], return_cache=True)
    last = hs[0, -1]
    logits = nn.dense_forward(last, params["activity.head.W"], params["activity.head.b"])
    _, dlogits = nn.softmax_cross_entropy(logits, y)
    dlast, dHW, dHb = nn.dense_backward(last[None], params["activity.head.W"], dlogits[None])
    dhs = np.zeros_like(hs)
    dhs[0, -1] = dlast[0]
    dseq, dW, dU, db = nn.lstm_backward(dhs, cache)
    _, dCW, dCb = nn.conv1d_backward(x[None], params["conv1.W"], dseq * (pre > 0)[None])
    grads = {"conv1.W": dCW, "conv1.b": dCb, "activity.lstm1.W": dW, "activity.lstm1.U": dU,
             "activity.lstm1.b": db, "activity.head.W": dHW, "activity.head.b": dHb}
    return {k: params[k] - lr * grads[k] for k in params}


def test_local_train_single_step_oracle(rng):
    cfg = ModelConfig(heads={"activity": 3}, conv_layers=[LayerSpec("conv1d", out_channels=3, kernel_size=3)],
                      lstm_layers=[LayerSpec("lstm", hidden_size=4)], window_length=6,
                      group_partition={"conv1": "pretrained", "lstm1": "task_specific", "head": "personalized"})
    start = build_model(cfg, 3).params
    x = rng.normal(size=(6, 3))
    client = ClientDataset("solo", [WindowedSample(x, {"activity": 2}, "solo")], [], {"activity": True})
    upd = local_train(cfg, client, start, None, 1, 0.1, 16, 0)
    expected = _hand_step(start, x, 2, 0.1)
    for k in start:
        np.testing.assert_allclose(upd.params[k], expected[k], rtol=0, atol=1e-12, err_msg=k)


def test_local_train_deterministic(rng):
    cfg = tiny_config()
    client = _client("a", rng)
    start = build_model(cfg, 0).params
    a = local_train(cfg, client, start, None, 2, 0.1, 3, 42)
    b = local_train(cfg, client, start, None, 2, 0.1, 3, 42)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in start)


# --- global state --------------------------------------------------------------------

def test_state_parts_disjoint_and_cover(rng):
    cfg = ModelConfig(heads={"activity": 3, "position": 3})
    params = build_model(cfg, 1).params
    st_ = GlobalState.from_params(cfg, params, ["a", "b"])
    shared, task = set(st_.shared), set().union(*map(set, st_.per_task.values()))
    client = set(st_.per_client["a"])
    assert not (shared & task or shared & client or task & client)
    assert shared | task | client == set(params)
    mat = st_.materialize("a")
    assert all(mat[k] is params[k] for k in params)


def test_materialize_unknown_client_mean(rng):
    cfg = tiny_config()
    params = build_model(cfg, 1).params
    st_ = GlobalState.from_params(cfg, params, ["a", "b"])
    st_.per_client["b"] = {k: v + 2.0 for k, v in st_.per_client["b"].items()}
    held = st_.materialize("zzz")
    np.testing.assert_allclose(held["activity.head.W"], params["activity.head.W"] + 1.0, atol=1e-12)


# --- rounds -----------------------------------------------------------------------------

def _three_clients(rng):
    return {cid: _client(cid, rng, n=9, pos=(cid != "c0")) for cid in ("c2", "c0", "c1")}


def test_run_round_matches_scripted_composition(rng):
    cfg = tiny_config()
    clients = _three_clients(rng)
    params = build_model(cfg, 2).params
    state = GlobalState.from_params(cfg, params, sorted(clients))
    mask = trainable_mask(build_model(cfg, 2), LayerGroup.COMMON)
    plan = RoundPlan(list(clients), mask, 2, 0.05, 4)
    got = run_round(state, plan, clients, seed=99)
    updates = [local_train(cfg, clients[c], params, mask, 2, 0.05, 4, derive_seed(99, c))
               for c in ("c1", "c0", "c2")]
    agg = fedavg_aggregate(updates, mask)
    for cid in clients:
        mat = got.materialize(cid)
        assert all(mat[k].tobytes() == agg[k].tobytes() for k in agg)


def test_run_round_workers_bit_identical(rng):
    cfg = tiny_config()
    clients = _three_clients(rng)
    state = GlobalState.from_params(cfg, build_model(cfg, 2).params, sorted(clients))
    plan = RoundPlan(sorted(clients), trainable_mask(build_model(cfg, 2), LayerGroup.PRETRAINED), 1, 0.05, 4)
    a = run_round(state, plan, clients, 5, workers=1)
    b = run_round(state, plan, clients, 5, workers=3)
    assert [(s, n, v.tobytes()) for s, n, v in a.entries()] == [(s, n, v.tobytes()) for s, n, v in b.entries()]


def test_run_round_checks_participants(rng):
    cfg = tiny_config()
    clients = _three_clients(rng)
    state = GlobalState.from_params(cfg, build_model(cfg, 2).params, sorted(clients))
    mask = trainable_mask(build_model(cfg, 2), LayerGroup.TASK_SPECIFIC, "position")
    with pytest.raises(ValueError, match="lacks task"):
        run_round(state, RoundPlan(["c0", "c1"], mask, 1, 0.1, 4, ["position"], "position"), clients, 0)
    with pytest.raises(KeyError):
        run_round(state, RoundPlan(["nobody"], mask, 1, 0.1), clients, 0)
    with pytest.raises(ValueError):
        RoundPlan([], mask, 1, 0.1)
    with pytest.raises(ValueError, match="incongruent"):
        run_round(state, RoundPlan(["c1"], {"x": True}, 1, 0.1), clients, 0)


def test_run_round_keeps_frozen_bits(rng):
    cfg = tiny_config()
    clients = _three_clients(rng)
    state = GlobalState.from_params(cfg, build_model(cfg, 2).params, sorted(clients))
    mask = trainable_mask(build_model(cfg, 2), LayerGroup.PERSONALIZED)
    new = run_round(state, RoundPlan(sorted(clients), mask, 1, 0.1, 4), clients, 0)
    for k, v in state.shared.items():
        assert new.shared[k].tobytes() == v.tobytes()


# --- checkpoints ------------------------------------------------------------------------

def _state(cfg, seed=1, clients=("a", "b")):
    return GlobalState.from_params(cfg, build_model(cfg, seed).params, list(clients))


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(heads={"activity": 3, "position": 3})
    st_ = _state(cfg)
    save_checkpoint(st_, tmp_path / "s.ckpt")
    back = load_checkpoint(tmp_path / "s.ckpt", cfg)
    assert [(s, n, v.tobytes()) for s, n, v in back.entries()] == \
        [(s, n, v.tobytes()) for s, n, v in st_.entries()]
    assert all(back.materialize("a")[k].tobytes() == st_.materialize("a")[k].tobytes()
               for k in tensor_layout(cfg))


def test_checkpoint_manifest_counts(tmp_path):
    cfg = ModelConfig(heads={"activity": 3, "position": 3})
    save_checkpoint(_state(cfg, clients=["a"]), tmp_path / "s.ckpt")
    version, digest, entries, _ = read_manifest(tmp_path / "s.ckpt")
    assert version == 1 and digest == cfg.digest()
    assert len(entries) == 24
    assert {e["group"] for e in entries} == {"pretrained", "common", "task_specific:activity",
                                                "task_specific:position", "personalized"}


def test_checkpoint_wrong_config(tmp_path):
    save_checkpoint(_state(tiny_config()), tmp_path / "s.ckpt")
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(tmp_path / "s.ckpt", tiny_config(heads={"activity": 4, "position": 2}))


@pytest.mark.parametrize("cut", [5, 60, -8])
def test_checkpoint_truncated(tmp_path, cut):
    p = tmp_path / "s.ckpt"
    save_checkpoint(_state(tiny_config()), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(p, tiny_config())


def test_checkpoint_trailing_bytes_and_magic(tmp_path):
    p = tmp_path / "s.ckpt"
    save_checkpoint(_state(tiny_config()), p)
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p, tiny_config())
    p.write_bytes(b"NOTACKPT" + bytes(100))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p, tiny_config())


def test_checkpoint_bytes_deterministic(tmp_path):
    cfg = tiny_config()
    save_checkpoint(_state(cfg), tmp_path / "a.ckpt")
    save_checkpoint(_state(cfg), tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
