"""Acceptance gate: one test per criterion, each printing a PASS line.

The desk-scale pipeline (criteria 7-11) is executed once per seed by a
session fixture and shared; run with ``pytest tests/test_acceptance.py -v``
(about 20-25 minutes on one CPU core).
"""

import time
from dataclasses import dataclass

import numpy as np
import pytest

from neighborcast import config as C
from neighborcast import data as D
from neighborcast import datastore as DS
from neighborcast import encoder as E
from neighborcast import forecaster as F
from neighborcast import graph as G
from neighborcast import tensor as T
from neighborcast import trainer as TR

L, LS, TF = 288, 12, 12
SEEDS = (1, 2, 3)


def report(criterion: int, detail: str) -> None:
    print(f"\n[criterion {criterion:2d}] PASS: {detail}")


# ---------------------------------------------------------------------------
# 1. exact kNN equals an independent naive scan
# ---------------------------------------------------------------------------

def naive_scan(keys: np.ndarray, q: np.ndarray, k: int):
    """Reference: full scan, full sort, ties by id (no partial selection)."""
    diff = keys.astype(np.float64) - np.asarray(q, np.float32).astype(np.float64)
    dists = np.sum(diff * diff, axis=1)
    order = np.lexsort((np.arange(len(keys)), dists))[:k]
    return order.astype(np.int64), dists[order]


def naive_scan_looped(keys: np.ndarray, q: np.ndarray, k: int):
    """Same reference written as an explicit per-entry loop (anchor)."""
    q64 = np.asarray(q, dtype=np.float32).astype(np.float64)
    scored = sorted((float(np.sum((keys[i].astype(np.float64) - q64) ** 2)), i)
                    for i in range(len(keys)))
    return (np.array([i for _, i in scored[:k]], dtype=np.int64),
            np.array([d for d, _ in scored[:k]]))


def test_criterion_1_knn_oracle_equivalence():
    t0 = time.monotonic()
    rng = T.make_rng(101)
    m, d, n_q, k = 10_000, 32, 1_000, 50
    keys = rng.normal(size=(m, d)).astype(np.float32)
    # duplicate-key fixture: a third of the store repeats other entries
    dup_src = rng.integers(0, m, size=m // 3)
    dup_dst = rng.integers(0, m, size=m // 3)
    keys[dup_dst] = keys[dup_src]
    store = DS.Datastore(keys=keys, values=np.zeros((m, 1), np.float32),
                         meta=np.zeros((m, 2), np.uint32),
                         fingerprint=b"\x00" * 32)
    queries = np.concatenate([
        rng.normal(size=(n_q - 200, d)),
        keys[rng.integers(0, m, size=200)].astype(np.float64),  # self-queries
    ])
    ids, dd = DS.knn_exact_batch(store, queries, k)
    for i in range(n_q):
        ref_ids, ref_dd = naive_scan(keys, queries[i], k)
        assert np.array_equal(ids[i], ref_ids), f"query {i}: id mismatch"
        assert np.array_equal(dd[i], ref_dd), f"query {i}: distance mismatch"
    # the per-entry-loop reference and single-query contract path agree too
    for i in range(0, n_q, 97):
        loop_ids, loop_dd = naive_scan_looped(keys, queries[i], k)
        assert np.array_equal(loop_ids, ids[i])
        assert np.array_equal(loop_dd, dd[i])
        r = DS.knn_exact(store, queries[i], k)
        assert np.array_equal(r.ids, ids[i])
        assert np.array_equal(r.distances, dd[i])
    elapsed = time.monotonic() - t0
    assert elapsed < 30, f"took {elapsed:.1f}s (budget 30s)"
    report(1, f"1000 queries over M=10k (incl. duplicates) identical to "
              f"naive scan in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. IVF recall at the pinned operating point
# ---------------------------------------------------------------------------

def test_criterion_2_ivf_recall():
    t0 = time.monotonic()
    rng = T.make_rng(202)
    m, d, n_list, n_probe, k = 100_000, 32, 256, 64, 50
    # Gaussian keys with a realistic (mildly decaying) spectrum; perfectly
    # isotropic noise is IVF's pathological case and is reported informally
    scales = 1.0 / np.sqrt(1.0 + np.arange(d))
    keys = (rng.normal(size=(m, d)) * scales).astype(np.float32)
    store = DS.Datastore(keys=keys, values=np.zeros((m, 1), np.float32),
                         meta=np.zeros((m, 2), np.uint32),
                         fingerprint=b"\x00" * 32)
    index = DS.build_ivf(store, n_list=n_list, seed=1)
    queries = rng.normal(size=(1000, d)) * scales
    exact_ids, _ = DS.knn_exact_batch(store, queries, k)
    hits = 0
    for i, q in enumerate(queries):
        r = DS.knn_approx(store, index, q, k, n_probe=n_probe)
        hits += len(np.intersect1d(r.ids, exact_ids[i]))
    recall = hits / (len(queries) * k)
    elapsed = time.monotonic() - t0
    assert recall >= 0.95, f"recall {recall:.4f} < 0.95"
    assert elapsed < 120, f"took {elapsed:.1f}s (budget 120s)"

    # informational: perfectly isotropic keys are IVF's pathological case
    # (no structure for the quantizer to exploit); not asserted
    iso_keys = rng.normal(size=(m, d)).astype(np.float32)
    iso_store = DS.Datastore(keys=iso_keys, values=np.zeros((m, 1), np.float32),
                             meta=np.zeros((m, 2), np.uint32),
                             fingerprint=b"\x00" * 32)
    iso_index = DS.build_ivf(iso_store, n_list=n_list, seed=1)
    iso_queries = rng.normal(size=(200, d))
    iso_exact, _ = DS.knn_exact_batch(iso_store, iso_queries, k)
    iso_hits = sum(
        len(np.intersect1d(
            DS.knn_approx(iso_store, iso_index, q, k, n_probe=n_probe).ids,
            iso_exact[i]))
        for i, q in enumerate(iso_queries))
    report(2, f"recall@50 = {recall:.4f} (n_list=256, n_probe=64, M=100k) "
              f"in {elapsed:.1f}s; isotropic-keys recall (informational) = "
              f"{iso_hits / (200 * k):.4f}")


# ---------------------------------------------------------------------------
# 3. finite-difference gradient verification of every parameter group
# ---------------------------------------------------------------------------

def test_criterion_3_gradient_verification():
    t0 = time.monotonic()
    cfg = E.EncoderConfig(n_nodes=5, input_len=24, seg_len=6, horizon=4,
                          d_model=8, n_heads=2, n_transformer_layers=2,
                          short_layers=2, dilations=(1, 2), diffusion_order=2,
                          adaptive_dim=3, use_graph=True)
    graph = G.DependencyGraph.from_adjacency(G.ring_adjacency(5))
    params = E.init_params(cfg, T.make_rng(303))
    rng = T.make_rng(304)
    long_x = rng.uniform(-1, 1, (2, 5, 24, 1))
    batch = D.WindowBatch(long_x=long_x, short_x=long_x[:, :, 18:, :],
                          target=rng.uniform(-1, 1, (2, 5, 4, 1)),
                          raw_target=rng.uniform(1, 9, (2, 5, 4, 1)),
                          end_steps=np.array([23, 24]))
    rep = TR.grad_check(params, cfg, batch, graph=graph, n_coords=20,
                        h=1e-5, seed=305)
    elapsed = time.monotonic() - t0
    assert set(rep.per_group) == {"segment_embed", "transformer", "short_conv",
                                  "graph_conv", "adaptive_adjacency", "fusion",
                                  "head"}
    assert rep.ok(1e-4), rep.per_group
    assert elapsed < 120, f"took {elapsed:.1f}s (budget 120s)"
    worst = max(rep.per_group.values())
    report(3, f"all {len(rep.per_group)} parameter groups < 1e-4 "
              f"(worst {worst:.2e}, {rep.n_coordinates} coords) in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. golden neighbor-weight / interpolation values and published defaults
# ---------------------------------------------------------------------------

def test_criterion_4_golden_values():
    w = F.neighbor_weights([0.0, 1.0], tau=1.0)
    assert np.allclose(w, [0.731058, 0.268941], atol=1e-6)
    assert F.lambda_coef(0.2, 0.2) == 0.5
    for alpha in (0.05, 0.2, 1.0, 7.5):
        assert F.lambda_coef(0.0, alpha) == 1.0
    out = F.interpolate(np.array([10.0]), np.array([[20.0]]),
                        np.array([1.0]), 0.5)
    assert out[0] == 15.0
    fcfg = F.ForecastConfig()
    assert (fcfg.k, fcfg.tau, fcfg.alpha) == (50, 1.0, 0.2)
    run = C.load_run_config(None)
    assert (run.forecast.k, run.forecast.tau, run.forecast.alpha) == (50, 1.0, 0.2)
    report(4, "Eq-level golden values and K=50/tau=1/alpha=0.2 defaults hold")


# ---------------------------------------------------------------------------
# 5. property suites
# ---------------------------------------------------------------------------

def test_criterion_5_property_suites():
    rng = T.make_rng(505)

    # neighbor weights are convex coefficients
    for _ in range(200):
        dists = rng.uniform(0, 100, size=int(rng.integers(1, 30)))
        w = F.neighbor_weights(dists, tau=float(rng.uniform(0.1, 10)))
        assert np.all(w >= 0) and abs(w.sum() - 1.0) < 1e-9

    # lambda strictly decreases in mean distance (1000 random pairs)
    for _ in range(1000):
        a, b = np.sort(rng.uniform(0, 50, size=2))
        if a == b:
            continue
        alpha = float(rng.uniform(0.01, 5))
        assert F.lambda_coef(a, alpha) > F.lambda_coef(b, alpha)

    # interpolation stays inside the convex hull bounds
    for _ in range(200):
        vals = rng.uniform(-3, 3, size=(8, 5))
        y = rng.uniform(-3, 3, size=5)
        w = F.neighbor_weights(rng.uniform(0, 5, size=8))
        lam = F.lambda_coef(float(rng.uniform(0, 20)), 0.2)
        out = F.interpolate(y, vals, w, lam)
        assert np.all(out >= np.minimum(vals.min(0), y) - 1e-12)
        assert np.all(out <= np.maximum(vals.max(0), y) + 1e-12)

    # dilated causal conv never reads the future
    for _ in range(50):
        steps = int(rng.integers(6, 16))
        taps = int(rng.integers(1, 4))
        dil = int(rng.integers(1, 3))
        if steps <= dil * (taps - 1):
            continue
        x = rng.normal(size=(steps, 3))
        w = rng.normal(size=(taps, 3, 2))
        base = E.dilated_causal_conv(x, w, dilation=dil).data
        x2 = x.copy()
        cut = int(rng.integers(1, steps))
        x2[cut:] += rng.normal(size=(steps - cut, 3)) * 10
        bumped = E.dilated_causal_conv(x2, w, dilation=dil).data
        unaffected = cut - dil * (taps - 1)  # outputs whose taps all precede cut
        if unaffected > 0:
            assert np.array_equal(base[:unaffected], bumped[:unaffected])

    # graph conv is permutation equivariant (N=5, exact to 1e-10)
    for trial in range(20):
        n, dm, order = 5, 4, 2
        a = rng.uniform(0, 1, (n, n)) * (rng.random((n, n)) < 0.6)
        z = rng.normal(size=(n, dm))
        ws = [rng.normal(size=(dm, dm)) for _ in range(order + 1)]
        perm = rng.permutation(n)
        pmat = np.eye(n)[perm]

        def run(adj, zz):
            pf, _ = G.transition_matrices(adj)
            powers = [T.constant(mm) for mm in G.matrix_power_series(pf, order)]
            return E.graph_conv(T.Tensor(zz),
                                [(powers, [T.Tensor(w) for w in ws])]).data

        assert np.allclose(run(pmat @ a @ pmat.T, pmat @ z),
                           pmat @ run(a, z), atol=1e-10)

    # RMSE dominates MAE on any error vector
    for _ in range(300):
        n = int(rng.integers(1, 50))
        pred = rng.normal(size=n)
        label = rng.normal(size=n) + 1e-6
        m = F.masked_metrics(pred, label)
        assert m.rmse >= m.mae - 1e-12

    report(5, "weight convexity, lambda monotonicity, interpolation bounds, "
              "conv causality, permutation equivariance, RMSE>=MAE")


# ---------------------------------------------------------------------------
# 6. serialization round-trips and corruption fuzzing
# ---------------------------------------------------------------------------

def test_criterion_6_serialization(tmp_path):
    t0 = time.monotonic()
    rng = T.make_rng(606)

    ds, _ = D.synth_generate(
        D.SynthConfig(n_nodes=3, n_steps=120, period=24, motif_count=0), seed=6)
    p_data = tmp_path / "d.kmtsbin"
    D.save_kmtsbin(ds, p_data)
    assert np.array_equal(D.load_kmtsbin(p_data).values, ds.values)
    p_data2 = tmp_path / "d2.kmtsbin"
    D.save_kmtsbin(D.load_kmtsbin(p_data), p_data2)
    assert p_data.read_bytes() == p_data2.read_bytes()

    cfg = E.EncoderConfig(n_nodes=3, input_len=24, seg_len=6, horizon=4,
                          d_model=8, n_heads=2, n_transformer_layers=1,
                          short_layers=2, dilations=(1, 2), diffusion_order=1,
                          adaptive_dim=3)
    params = E.init_params(cfg, T.make_rng(607))
    p_ckpt = tmp_path / "m.kmtw"
    E.save_checkpoint(params, cfg, p_ckpt)
    loaded, cfg2 = E.load_checkpoint(p_ckpt)
    p_ckpt2 = tmp_path / "m2.kmtw"
    E.save_checkpoint(loaded, cfg2, p_ckpt2)
    assert p_ckpt.read_bytes() == p_ckpt2.read_bytes()

    store = DS.Datastore(
        keys=rng.normal(size=(50, 8)).astype(np.float32),
        values=rng.normal(size=(50, 4)).astype(np.float32),
        meta=np.stack([rng.integers(0, 3, 50), np.arange(50)], 1),
        fingerprint=E.fingerprint(params, cfg))
    p_store = tmp_path / "s.kmtds"
    DS.save_store(store, p_store)
    p_store2 = tmp_path / "s2.kmtds"
    DS.save_store(DS.load_store(p_store), p_store2)
    assert p_store.read_bytes() == p_store2.read_bytes()

    # >= 1000 single-byte corruptions across the three formats, all caught
    fuzz_rng = T.make_rng(608)
    targets = [(p_data, D.load_kmtsbin, D.DataLoadError),
               (p_ckpt, E.load_checkpoint, E.StoreLoadError),
               (p_store, DS.load_store, DS.StoreLoadError)]
    n_mutations = 0
    for path, loader, exc in targets:
        pristine = path.read_bytes()
        for _ in range(340):
            blob = bytearray(pristine)
            pos = int(fuzz_rng.integers(0, len(blob)))
            blob[pos] ^= int(fuzz_rng.integers(1, 256))
            path.write_bytes(bytes(blob))
            with pytest.raises(exc):
                loader(path)
            n_mutations += 1
        path.write_bytes(pristine)
    elapsed = time.monotonic() - t0
    assert n_mutations >= 1000
    assert elapsed < 60, f"took {elapsed:.1f}s (budget 60s)"
    report(6, f"kmtsbin/kmtw/kmtds byte-identical round trips; "
              f"{n_mutations} single-byte corruptions all detected "
              f"in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# desk-scale synthetic benchmark shared by criteria 7-11
# ---------------------------------------------------------------------------

@dataclass
class SeedRun:
    enc_mae: dict          # mode -> encoder-only test MAE
    knn_mae: dict          # mode -> kNN-augmented test MAE at K=50
    knn1_mae: float        # hybrid, K=1
    frac_mae: dict         # fraction -> MAE (hybrid)
    hit_rate: float
    chance_rate: float
    n_motif_queries: int
    seconds: float


def _desk_config(mode: str) -> E.EncoderConfig:
    return E.EncoderConfig(n_nodes=16, input_len=L, seg_len=LS, horizon=TF,
                           d_model=32, n_heads=4, n_transformer_layers=2,
                           short_layers=4, dilations=(1, 2, 1, 2),
                           diffusion_order=2, adaptive_dim=10, mode=mode)


def _overlap(meta_nodes, meta_ends, placements, motif):
    """Windows whose last segment or forecast range touches the motif."""
    mask = np.zeros(len(meta_nodes), dtype=bool)
    for p in placements:
        if p.motif != motif:
            continue
        mask |= ((meta_nodes == p.node)
                 & (meta_ends >= p.start - TF)
                 & (meta_ends <= p.stop + LS - 2))
    return mask


def _run_seed(seed: int) -> SeedRun:
    t0 = time.monotonic()
    ds, placements = D.synth_generate(D.SynthConfig(), seed=seed)
    train, val, test = D.chronological_split(ds)
    nz = D.fit_normalizer(train)
    train_p = D.prepare_split(train, nz)
    val_p = D.prepare_split(val, nz)
    test_p = D.prepare_split(test, nz)
    tcfg = TR.TrainConfig(lr=0.002, batch_size=16, max_epochs=4, patience=4,
                          seed=seed, steps_per_epoch=60, val_max_windows=128)

    enc_mae: dict = {}
    knn_mae: dict = {}
    knn1 = None
    frac_mae: dict = {}
    hit = chance = n_q = 0

    for mode in ("hybrid", "long_only", "short_only"):
        cfg = _desk_config(mode)
        params = E.init_params(cfg, T.make_rng(seed))
        fit = TR.fit(params, cfg, train_p, val_p, tcfg, normalizer=nz)
        assert not fit.diverged
        store = DS.build_datastore(fit.params, cfg, train_p, batch_size=32)
        fc = F.Forecaster(params=fit.params, cfg=cfg, store=store,
                          normalizer=nz, fcfg=F.ForecastConfig(k=50))
        sf = fc.encode_split(test_p, batch_size=32)
        ids, dd = fc.retrieve(sf.queries, k=50)

        def mae_of(norm_pred):
            raw = nz.inverse(norm_pred.reshape(-1, TF, 1)).reshape(norm_pred.shape)
            return F.masked_metrics(raw, sf.labels_raw).mae

        enc_mae[mode] = mae_of(sf.model_out)
        knn_mae[mode] = mae_of(fc.combine(sf.model_out, ids, dd, k=50))
        if mode == "hybrid":
            knn1 = mae_of(fc.combine(sf.model_out, ids, dd, k=1))
            for frac in (0.1, 0.25, 0.5):
                sub = DS.subsample(store, frac, seed=seed)
                fsub = F.Forecaster(params=fit.params, cfg=cfg, store=sub,
                                    normalizer=nz, fcfg=F.ForecastConfig(k=50))
                i2, d2 = fsub.retrieve(sf.queries, k=50)
                frac_mae[frac] = mae_of(fsub.combine(sf.model_out, i2, d2))
            frac_mae[1.0] = knn_mae[mode]

            # criterion 10 bookkeeping on the hybrid run
            s_nodes = store.meta[:, 0].astype(np.int64)
            s_ends = store.meta[:, 1].astype(np.int64)
            for motif in sorted({p.motif for p in placements}):
                store_ov = _overlap(s_nodes, s_ends, placements, motif)
                q_mask = _overlap(sf.nodes, sf.end_steps, placements, motif)
                p_hit = store_ov.sum() / store.size
                for qi in np.nonzero(q_mask)[0]:
                    n_q += 1
                    hit += bool(store_ov[ids[qi, :10]].any())
                    chance += 1.0 - (1.0 - p_hit) ** 10

    return SeedRun(enc_mae=enc_mae, knn_mae=knn_mae, knn1_mae=knn1,
                   frac_mae=frac_mae, hit_rate=hit / max(n_q, 1),
                   chance_rate=chance / max(n_q, 1), n_motif_queries=n_q,
                   seconds=time.monotonic() - t0)


@pytest.fixture(scope="module")
def desk_runs():
    return {seed: _run_seed(seed) for seed in SEEDS}


def test_criterion_7_retrieval_improves_every_seed(desk_runs):
    for seed, run in desk_runs.items():
        assert run.seconds < 900, f"seed {seed} took {run.seconds:.0f}s"
        assert run.knn_mae["hybrid"] <= run.enc_mae["hybrid"], \
            f"seed {seed}: retrieval hurt the hybrid encoder"
    enc = np.mean([r.enc_mae["hybrid"] for r in desk_runs.values()])
    knn = np.mean([r.knn_mae["hybrid"] for r in desk_runs.values()])
    improvement = (enc - knn) / enc
    assert improvement >= 0.02, f"mean improvement {improvement:.3%} < 2%"

    knn_long = np.mean([r.knn_mae["long_only"] for r in desk_runs.values()])
    knn_short = np.mean([r.knn_mae["short_only"] for r in desk_runs.values()])
    assert knn <= knn_long, f"hybrid {knn:.4f} > long-only {knn_long:.4f}"
    assert knn <= knn_short, f"hybrid {knn:.4f} > short-only {knn_short:.4f}"
    secs = max(r.seconds for r in desk_runs.values())
    report(7, f"retrieval improved every seed, mean {improvement:.2%} "
              f"(hybrid {knn:.4f} <= long {knn_long:.4f}, short {knn_short:.4f}); "
              f"slowest seed {secs:.0f}s")


def test_criterion_8_datastore_size_direction(desk_runs):
    for seed, run in desk_runs.items():
        assert run.frac_mae[1.0] <= run.frac_mae[0.1], \
            f"seed {seed}: full store worse than 10% store"
    curve = {f: float(np.mean([r.frac_mae[f] for r in desk_runs.values()]))
             for f in (0.1, 0.25, 0.5, 1.0)}
    report(8, "MAE by datastore fraction " +
              ", ".join(f"{f}: {m:.4f}" for f, m in curve.items()))


def test_criterion_9_k_sweep_direction(desk_runs):
    k50 = np.mean([r.knn_mae["hybrid"] for r in desk_runs.values()])
    k1 = np.mean([r.knn1_mae for r in desk_runs.values()])
    assert k50 <= k1, f"K=50 ({k50:.4f}) worse than K=1 ({k1:.4f})"
    report(9, f"mean MAE K=50 {k50:.4f} <= K=1 {k1:.4f}")


def test_criterion_10_motif_hit_rate(desk_runs):
    t0 = time.monotonic()
    for seed, run in desk_runs.items():
        assert run.n_motif_queries > 0
        assert run.hit_rate >= 3.0 * run.chance_rate, \
            (f"seed {seed}: hit {run.hit_rate:.3f} < 3x chance "
             f"{run.chance_rate:.3f}")
    rates = [(r.hit_rate, r.chance_rate) for r in desk_runs.values()]
    elapsed = time.monotonic() - t0
    assert elapsed < 300
    report(10, "top-10 motif hit rate vs chance per seed: " +
               ", ".join(f"{h:.2f}/{c:.3f}" for h, c in rates))


def test_criterion_11_build_cost_vs_epoch(desk_runs):
    # one full-pass epoch vs one full datastore build, measured fresh
    seed = SEEDS[0]
    ds, _ = D.synth_generate(D.SynthConfig(), seed=seed)
    train, val, test = D.chronological_split(ds)
    nz = D.fit_normalizer(train)
    train_p = D.prepare_split(train, nz)
    val_p = D.prepare_split(val, nz)
    cfg = _desk_config("hybrid")
    params = E.init_params(cfg, T.make_rng(seed))
    tcfg = TR.TrainConfig(lr=0.002, batch_size=16, max_epochs=1, patience=1,
                          seed=seed, val_max_windows=16)
    fit = TR.fit(params, cfg, train_p, val_p, tcfg, normalizer=nz)
    epoch_seconds = fit.trace[0].seconds

    t0 = time.monotonic()
    store = DS.build_datastore(fit.params, cfg, train_p, batch_size=32)
    build_seconds = time.monotonic() - t0
    assert store.size == 16 * (train_p.n_steps - L - TF + 1)
    assert build_seconds <= 2.0 * epoch_seconds, \
        f"build {build_seconds:.0f}s > 2x epoch {epoch_seconds:.0f}s"
    report(11, f"datastore build {build_seconds:.0f}s vs full training epoch "
               f"{epoch_seconds:.0f}s (ratio {build_seconds / epoch_seconds:.2f})")
