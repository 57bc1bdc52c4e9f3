#!/usr/bin/env python3
"""The full loop: train, cache every training window, forecast by
interpolating the encoder output with retrieved futures.

Run: python3 demos/05_retrieval_forecasting.py   (~1 minute on one core)
"""

import numpy as np

from neighborcast import data as D
from neighborcast import datastore as DS
from neighborcast import encoder as E
from neighborcast import forecaster as F
from neighborcast import tensor as T
from neighborcast import trainer as TR

ds, placements = D.synth_generate(
    D.SynthConfig(n_nodes=8, n_steps=4032, period=144, motif_len=36,
                  motif_count=4, motif_repeats=6, noise_std=0.1), seed=11)
train, val, test = D.chronological_split(ds)
nz = D.fit_normalizer(train)
train_p, val_p, test_p = (D.prepare_split(s, nz) for s in (train, val, test))

cfg = E.EncoderConfig(n_nodes=8, input_len=144, seg_len=12, horizon=12,
                      d_model=24, n_heads=4, n_transformer_layers=2,
                      short_layers=4, dilations=(1, 2, 1, 2))
params = E.init_params(cfg, T.make_rng(11))
tcfg = TR.TrainConfig(lr=0.003, batch_size=16, max_epochs=3, patience=3,
                      seed=11, steps_per_epoch=40, val_max_windows=64)
result = TR.fit(params, cfg, train_p, val_p, tcfg, normalizer=nz)
print(f"trained: best val MAE {result.best_val_mae:.4f}")

store = DS.build_datastore(result.params, cfg, train_p, batch_size=32)
print(f"datastore: M={store.size} entries of d={store.dim} keys")

fc = F.Forecaster(params=result.params, cfg=cfg, store=store, normalizer=nz,
                  fcfg=F.ForecastConfig(k=50, tau=1.0, alpha=0.2))

plain, _ = fc.evaluate_split(test_p, with_store=False, batch_size=32)
mixed, dump = fc.evaluate_split(test_p, with_store=True, batch_size=32)
print(f"\nencoder-only  test MAE {plain.averaged.mae:.4f}")
print(f"kNN-augmented test MAE {mixed.averaged.mae:.4f}  "
      f"({100 * (plain.averaged.mae - mixed.averaged.mae) / plain.averaged.mae:+.1f}%)")
print(f"throughput {dump.points_per_second_per_node():.0f} points/sec/node")

# how the mixing coefficient reacts to neighbor distance
sf = fc.encode_split(test_p, batch_size=32)
ids, dd = fc.retrieve(sf.queries)
lam = F.lambda_coef(dd.mean(axis=1), alpha=0.2)
print(f"\nlambda over the test set: median {np.median(lam):.3f}, "
      f"p10 {np.percentile(lam, 10):.3f}, p90 {np.percentile(lam, 90):.3f}")
print("(1 = trust retrieval fully, 0 = trust the encoder)")

# one window in detail
raw, result = fc.forecast_window(test_p, node=2, end_step=test_p.offset + 200)
print(f"\nwindow (node 2): nearest distances {np.round(result.distances[:3], 4)},"
      f" lambda {result.lam:.3f}")
print("forecast (raw units):", np.round(raw.values[:6], 3))
