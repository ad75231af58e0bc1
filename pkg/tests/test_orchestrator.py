from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from sparsefed.autoencoder import LayerSpec, ParameterVector, ProximalConfig, SparsityMask, init_model, sgd
from sparsefed.data import TimeSeries, partition
from sparsefed.fusion import FusionConfig, admm_sparse_fuse, extract_mask, masked_average_fuse
from sparsefed.orchestrator import (
    COMPRESSION,
    FINETUNE,
    Checkpointer,
    FederationTopology,
    InProcessTransport,
    Message,
    ProtocolError,
    RoundRecord,
    RoundSchedule,
    client_seed,
    initial_global_model,
    run_compression_stage,
    run_finetune_stage,
)

W = 6
SIZES = (5, 3, 5)


def series(d=2, t=80, seed=0):
    rng = np.random.default_rng(seed)
    t_idx = np.arange(t)
    values = np.vstack([np.sin(t_idx / (3 + k)) for k in range(d)]) + 0.1 * rng.normal(size=(d, t))
    return TimeSeries.from_values(values)


def topology(d=2, cfg=None, t=80):
    clients = partition(series(d, t), "univariate", W)
    cfg = cfg or ProximalConfig(mu=0.05, epochs=2, learning_rate=0.05, batch_size=8)
    return FederationTopology(clients, LayerSpec(SIZES), "univariate", [cfg] * len(clients))


def replay_compression(topo, schedule, fusion_cfg, seed):
    """Compression stage written out directly from the primitives."""
    glob = init_model(topo.input_dim, SIZES, seed)
    history = []
    for m in range(1, schedule.compression_rounds + 1):
        locals_ = []
        for data, cfg in zip(topo.clients, topo.configs):
            windows, masks = data.select("train")
            local, _ = sgd(glob, windows, masks, glob, cfg, None, client_seed(seed, data.client_id, m, COMPRESSION))
            locals_.append(local)
        glob = admm_sparse_fuse(locals_, fusion_cfg).model
        history.append(glob)
    return history


def replay_finetune(topo, glob, rounds, seed):
    mask = extract_mask(glob)
    history = []
    for j in range(1, rounds + 1):
        locals_ = []
        for data, cfg in zip(topo.clients, topo.configs):
            windows, masks = data.select("train")
            local, _ = sgd(glob, windows, masks, glob, cfg, mask, client_seed(seed, data.client_id, j, FINETUNE))
            locals_.append(local)
        glob = masked_average_fuse(locals_, mask)
        history.append(glob)
    return history


def collect(into):
    def cb(rec, model, mask):
        into.append((rec, model.copy()))
    return cb


# --- compression stage ------------------------------------------------------

def test_trivial_round_returns_initial_model():
    topo = topology(cfg=ProximalConfig(mu=0.0, epochs=1, learning_rate=0.0))
    model, records = run_compression_stage(topo, RoundSchedule(1), FusionConfig(lam=0.0), seed=3)
    init = initial_global_model(topo, 3)
    np.testing.assert_allclose(model.flat, init.flat, atol=1e-12)
    assert len(records) == 1 and records[0].stage == COMPRESSION


def test_large_lambda_compresses_everything():
    topo = topology()
    model, records = run_compression_stage(topo, RoundSchedule(2), FusionConfig(lam=1e4), seed=0)
    assert records[-1].compression_rate == 1.0
    assert not model.flat.any()


def test_compression_matches_replay():
    topo = topology()
    schedule = RoundSchedule(3)
    fusion = FusionConfig(lam=0.05)
    seen = []
    run_compression_stage(topo, schedule, fusion, seed=11, on_round=collect(seen))
    expected = replay_compression(topo, schedule, fusion, 11)
    assert len(seen) == 3
    for (rec, got), want in zip(seen, expected):
        np.testing.assert_allclose(got.flat, want.flat, atol=1e-9)


def test_compression_is_deterministic_under_threads():
    topo = topology(d=4)
    fusion = FusionConfig(lam=0.05)
    a, rec_a = run_compression_stage(topo, RoundSchedule(2), fusion, seed=2)
    with ThreadPoolExecutor(4) as pool:
        b, rec_b = run_compression_stage(topo, RoundSchedule(2), fusion, seed=2, executor=pool)
    assert a.flat.tobytes() == b.flat.tobytes()
    assert rec_a == rec_b


# --- fine-tuning stage ------------------------------------------------------

def test_no_finetune_rounds_keeps_model():
    topo = topology()
    glob = init_model(topo.input_dim, SIZES, 0)
    out, records = run_finetune_stage(topo, glob, RoundSchedule(1, 0), seed=0)
    assert out.flat.tobytes() == glob.flat.tobytes() and records == []


def test_all_false_mask_keeps_model():
    topo = topology()
    glob = init_model(topo.input_dim, SIZES, 0)
    glob = glob.with_flat(np.zeros(len(glob)))
    out, records = run_finetune_stage(topo, glob, RoundSchedule(1, 3), seed=0)
    assert not out.flat.any()
    assert [r.compression_rate for r in records] == [1.0] * 3


def test_finetune_matches_replay_and_preserves_zeros():
    topo = topology()
    glob = init_model(topo.input_dim, SIZES, 4)
    glob.flat[::3] = 0.0
    zero = glob.flat == 0.0
    transport = InProcessTransport(keep_history=True)
    seen = []
    run_finetune_stage(topo, glob, RoundSchedule(1, 2), seed=5, transport=transport, on_round=collect(seen))
    expected = replay_finetune(topo, glob, 2, 5)
    for (rec, got), want in zip(seen, expected):
        np.testing.assert_allclose(got.flat, want.flat, atol=1e-9)
        assert got.flat[zero].tobytes() == np.zeros(zero.sum()).tobytes()
    for msg in transport.history:
        assert msg.model.flat[zero].tobytes() == np.zeros(zero.sum()).tobytes()


def test_support_never_grows_during_finetune():
    topo = topology(d=3)
    glob, _ = run_compression_stage(topo, RoundSchedule(3), FusionConfig(lam=0.1), seed=0)
    seen = []
    run_finetune_stage(topo, glob, RoundSchedule(1, 4), seed=0, on_round=collect(seen))
    support = extract_mask(glob).bits
    for _, model in seen:
        now = extract_mask(model).bits
        assert not (now & ~support).any()
        support = now


# --- protocol, barrier and privacy ------------------------------------------

def _msg(stage, r, sender, n=4):
    return Message(stage, r, sender, ParameterVector(np.zeros(n), ((n, 1, 0),)))


def test_transport_rejects_mistagged_uploads():
    t = InProcessTransport()
    t.broadcast(_msg(COMPRESSION, 2, "server"))
    t.upload(_msg(COMPRESSION, 2, "client-0"))
    t.upload(_msg(COMPRESSION, 1, "client-1"))
    with pytest.raises(ProtocolError, match="mistagged"):
        t.gather(COMPRESSION, 2, 2)


def test_transport_requires_every_client():
    t = InProcessTransport()
    t.broadcast(_msg(FINETUNE, 1, "server"))
    t.upload(_msg(FINETUNE, 1, "client-0"))
    with pytest.raises(ProtocolError, match="got 1 models for 2 clients"):
        t.gather(FINETUNE, 1, 2)
    t.upload(_msg(FINETUNE, 1, "client-0"))
    with pytest.raises(ProtocolError, match="duplicate"):
        t.gather(FINETUNE, 1, 2)


def test_client_cannot_fetch_stale_global():
    t = InProcessTransport()
    t.broadcast(_msg(COMPRESSION, 3, "server"))
    with pytest.raises(ProtocolError):
        t.fetch_global(0, COMPRESSION, 4)


def test_gather_orders_by_client_id():
    t = InProcessTransport()
    t.broadcast(_msg(COMPRESSION, 1, "server"))
    for name in ("client-10", "client-2", "client-0"):
        t.upload(_msg(COMPRESSION, 1, name))
    assert [m.sender for m in t.gather(COMPRESSION, 1, 3)] == ["client-0", "client-2", "client-10"]


def test_uploaded_models_are_immutable_snapshots():
    t = InProcessTransport()
    t.broadcast(_msg(COMPRESSION, 1, "server"))
    original = _msg(COMPRESSION, 1, "client-0")
    t.upload(original)
    original.model.flat[0] = 9.0
    got = t.gather(COMPRESSION, 1, 1)[0]
    assert got.model.flat[0] == 0.0
    with pytest.raises(ValueError):
        got.model.flat[0] = 1.0


def test_only_owning_client_reads_windows():
    topo = topology(d=3)
    with ThreadPoolExecutor(3) as pool:
        glob, _ = run_compression_stage(topo, RoundSchedule(2), FusionConfig(lam=0.05), seed=0, executor=pool)
    run_finetune_stage(topo, glob, RoundSchedule(1, 1), seed=0)
    for data in topo.clients:
        assert data.access_log, "client never trained"
        assert set(data.access_log) == {f"client-{data.client_id}"}


def test_topology_rejects_mixed_architectures():
    ts = series(2, 80)
    a = partition(ts, "univariate", W)
    b = partition(ts, "centralized", W)
    with pytest.raises(ValueError, match="disagree"):
        FederationTopology([a[0], b[0]], LayerSpec(SIZES))


def test_schedule_validation():
    with pytest.raises(ValueError):
        RoundSchedule(0)
    with pytest.raises(ValueError):
        RoundSchedule(1, -1)


# --- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    ck = Checkpointer(tmp_path)
    assert ck.load() is None
    model = init_model(4, (3,), 0)
    rec = RoundRecord(2, FINETUNE, 0.5, [0.1, 0.2], 0.3, 0, True)
    ck(rec, model, SparsityMask(model.flat > 0), [rec])
    stage, rnd, loaded, records = ck.load()
    assert (stage, rnd) == (FINETUNE, 2)
    assert loaded.flat.tobytes() == model.flat.tobytes()
    assert records == [rec]
    assert np.load(tmp_path / "mask.npy").tolist() == (model.flat > 0).tolist()
