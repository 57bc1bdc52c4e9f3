"""Inference pipeline: encode queries, retrieve neighbors, interpolate.

The encoder forecast and the weighted neighbor aggregate are mixed with a
distance-adaptive coefficient lambda = alpha / (mean_distance + alpha):
near-exact matches pull the forecast toward the retrieved futures, far
ones leave the model output alone. Everything happens in normalized
space; inverse-normalization is the final step and every metric insists
on raw-space inputs via the TaggedArray space tag.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import datastore as DS
from . import encoder as enc
from . import tensor as T
from .data import Normalizer, PreparedSplit, TaggedArray, gather_batch, valid_end_positions
from .errors import ConfigError, DimensionError, RequestError, StoreLoadError
from .graph import DependencyGraph


@dataclass(frozen=True)
class ForecastConfig:
    k: int = 50
    tau: float = 1.0        # softmax temperature over negative distances
    alpha: float = 0.2      # lambda scaling
    index: str = "exact"    # exact | ivf
    n_probe: int | None = None
    exclude_self: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if self.tau <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.tau}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.index not in ("exact", "ivf"):
            raise ConfigError(f"index must be exact or ivf, got {self.index!r}")


def neighbor_weights(distances, tau: float = 1.0) -> np.ndarray:
    """Softmax over negative distances / tau, max-subtracted for stability."""
    d = np.asarray(distances, dtype=np.float64)
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    z = -d / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def lambda_coef(mean_distance, alpha: float) -> np.ndarray | float:
    """alpha / (d_bar + alpha): 1 at distance 0, -> 0 as neighbors recede."""
    d = np.asarray(mean_distance, dtype=np.float64)
    if alpha <= 0:
        raise ConfigError(f"alpha must be > 0, got {alpha}")
    if np.any(d < 0):
        raise ConfigError("mean distance must be >= 0")
    out = alpha / (d + alpha)
    return float(out) if out.ndim == 0 else out


def interpolate(model_out, retrieved_values, weights, lam) -> np.ndarray:
    """(1 - lam) * model + lam * sum_j w_j * value_j, elementwise."""
    y = np.asarray(model_out, dtype=np.float64)
    v = np.asarray(retrieved_values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if v.shape[:-1] != w.shape or v.shape[-1:] != y.shape[-1:]:
        raise DimensionError(
            f"shapes disagree: model {y.shape}, values {v.shape}, weights {w.shape}")
    knn = np.einsum("...k,...kt->...t", w, v)
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim:
        lam = lam.reshape(lam.shape + (1,) * (y.ndim - lam.ndim))
    return (1.0 - lam) * y + lam * knn


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    mae: float | None
    rmse: float | None
    mape: float | None
    count: int


def masked_metrics(pred: np.ndarray, label: np.ndarray,
                   null_value: float = 0.0) -> Metrics:
    """MAE / RMSE / MAPE over entries whose label differs from null_value."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise DimensionError(f"pred {pred.shape} vs label {label.shape}")
    mask = label != null_value
    n = int(mask.sum())
    if n == 0:
        return Metrics(None, None, None, 0)
    err = pred[mask] - label[mask]
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    mape = float(np.mean(np.abs(err) / np.abs(label[mask])))
    return Metrics(mae, rmse, mape, n)


REPORT_HORIZONS = (3, 6, 12)


@dataclass
class EvalReport:
    horizons: dict[int, Metrics]
    averaged: Metrics
    per_node: dict[int, Metrics] | None = None

    def rows(self) -> list[tuple]:
        out = [(f"horizon_{h}", m) for h, m in sorted(self.horizons.items())]
        out.append(("averaged", self.averaged))
        return out


def evaluate(predictions: TaggedArray, labels: TaggedArray,
             null_value: float = 0.0, nodes: np.ndarray | None = None,
             per_node: bool = False) -> EvalReport:
    """Per-horizon (3/6/12, 1-based) and averaged metrics in raw units."""
    if predictions.space != "raw" or labels.space != "raw":
        raise ConfigError("evaluate requires raw-space predictions and labels")
    pred = np.asarray(predictions.values, dtype=np.float64)
    lab = np.asarray(labels.values, dtype=np.float64)
    if pred.shape != lab.shape:
        raise DimensionError(f"pred {pred.shape} vs label {lab.shape}")
    t_f = pred.shape[-1]
    horizons = {h: masked_metrics(pred[..., h - 1], lab[..., h - 1], null_value)
                for h in REPORT_HORIZONS if h <= t_f}
    report = EvalReport(horizons=horizons,
                        averaged=masked_metrics(pred, lab, null_value))
    if per_node:
        if nodes is None:
            raise ConfigError("per_node breakdown needs the node index array")
        report.per_node = {
            int(nd): masked_metrics(pred[nodes == nd], lab[nodes == nd], null_value)
            for nd in np.unique(nodes)}
    return report


# ---------------------------------------------------------------------------
# the pipeline
# ---------------------------------------------------------------------------

@dataclass
class SplitForecast:
    """Everything produced by one pass over a split, normalized space."""

    queries: np.ndarray       # (n, d) float64 keys
    model_out: np.ndarray     # (n, T_f) encoder forecast
    labels_norm: np.ndarray   # (n, T_f)
    labels_raw: np.ndarray    # (n, T_f)
    nodes: np.ndarray         # (n,)
    end_steps: np.ndarray     # (n,) global
    encode_seconds: float


@dataclass
class Forecaster:
    params: dict[str, T.Tensor]
    cfg: enc.EncoderConfig
    store: DS.Datastore | None
    normalizer: Normalizer
    fcfg: ForecastConfig = field(default_factory=ForecastConfig)
    graph: DependencyGraph | None = None
    index: DS.IvfIndex | None = None

    def __post_init__(self):
        if self.store is not None:
            own = enc.fingerprint(self.params, self.cfg)
            if bytes(self.store.fingerprint) != own:
                raise StoreLoadError(
                    "datastore fingerprint does not match the encoder "
                    "checkpoint; rebuild the store")
        if self.fcfg.index == "ivf" and self.store is not None and self.index is None:
            raise ConfigError("index='ivf' needs a built or loaded IvfIndex")

    # -- encoding -------------------------------------------------------
    def encode_split(self, split: PreparedSplit, batch_size: int = 64,
                     local_ends: np.ndarray | None = None) -> SplitForecast:
        cfg = self.cfg
        ends = (valid_end_positions(split.n_steps, cfg.input_len, cfg.horizon)
                if local_ends is None else np.asarray(local_ends))
        if ends.size == 0:
            raise RequestError(f"split {split.name!r} yields no windows")
        n = split.n_nodes
        total = ends.size * n
        queries = np.empty((total, cfg.d_model))
        model_out = np.empty((total, cfg.horizon * cfg.channels))
        labels_norm = np.empty_like(model_out)
        labels_raw = np.empty_like(model_out)
        t0 = time.perf_counter()
        with T.no_grad():
            for lo in range(0, ends.size, batch_size):
                chunk = ends[lo:lo + batch_size]
                batch = gather_batch(split, chunk, cfg.input_len, cfg.seg_len,
                                     cfg.horizon)
                out = enc.encode_and_predict(self.params, cfg, batch,
                                             graph=self.graph)
                rows = slice(lo * n, (lo + len(chunk)) * n)
                queries[rows] = out.key.data
                model_out[rows] = out.forecast.data
                labels_norm[rows] = batch.target.reshape(len(chunk) * n, -1)
                labels_raw[rows] = batch.raw_target.reshape(len(chunk) * n, -1)
        return SplitForecast(
            queries=queries, model_out=model_out,
            labels_norm=labels_norm, labels_raw=labels_raw,
            nodes=np.tile(np.arange(n), ends.size),
            end_steps=np.repeat(split.offset + ends, n),
            encode_seconds=time.perf_counter() - t0,
        )

    # -- retrieval ------------------------------------------------------
    def retrieve(self, queries: np.ndarray, k: int | None = None
                 ) -> tuple[np.ndarray, np.ndarray]:
        if self.store is None:
            raise RequestError("no datastore attached to this forecaster")
        k = self.fcfg.k if k is None else k
        if self.fcfg.index == "ivf":
            rows = [DS.knn_approx(self.store, self.index, q, k, self.fcfg.n_probe)
                    for q in np.atleast_2d(queries)]
            return (np.stack([r.ids for r in rows]),
                    np.stack([r.distances for r in rows]))
        return DS.knn_exact_batch(self.store, queries, k)

    # -- interpolation ----------------------------------------------------
    def combine(self, model_out: np.ndarray, ids: np.ndarray,
                distances: np.ndarray, k: int | None = None,
                tau: float | None = None, alpha: float | None = None
                ) -> np.ndarray:
        """Mix encoder output with neighbor values; normalized space in/out.

        ``ids``/``distances`` may hold more than ``k`` columns (sorted); the
        first ``k`` are used, which lets one retrieval serve a whole K-grid.
        """
        k = self.fcfg.k if k is None else k
        tau = self.fcfg.tau if tau is None else tau
        alpha = self.fcfg.alpha if alpha is None else alpha
        ids = ids[:, :k]
        dd = distances[:, :k]
        w = neighbor_weights(dd, tau)
        lam = lambda_coef(dd.mean(axis=1), alpha)
        return interpolate(model_out, self.store.values[ids], w, lam)

    # -- single-sample forecast -----------------------------------------
    def forecast_window(self, split: PreparedSplit, node: int, end_step: int
                        ) -> tuple[TaggedArray, DS.RetrievalResult]:
        """Forecast one (node, global end step) window with its retrieval trace."""
        local = end_step - split.offset
        sf = self.encode_split(split, local_ends=np.array([local]))
        row = int(np.nonzero(sf.nodes == node)[0][0])
        q = sf.queries[row]
        k = self.fcfg.k
        fetch = k + 1 if self.fcfg.exclude_self else k
        fetch = min(fetch, self.store.size)
        ids, dd = self.retrieve(q[None, :], fetch)
        ids, dd = ids[0], dd[0]
        if self.fcfg.exclude_self:
            own = (self.store.meta[ids, 0] == node) \
                & (self.store.meta[ids, 1] == end_step)
            ids, dd = ids[~own][:k], dd[~own][:k]
        else:
            ids, dd = ids[:k], dd[:k]
        w = neighbor_weights(dd, self.fcfg.tau)
        dbar = float(dd.mean())
        lam = lambda_coef(dbar, self.fcfg.alpha)
        final_norm = interpolate(sf.model_out[row], self.store.values[ids], w, lam)
        result = DS.RetrievalResult(ids=ids, distances=dd, weights=w,
                                    mean_distance=dbar, lam=lam)
        raw = self.normalizer.inverse(
            final_norm.reshape(self.cfg.horizon, self.cfg.channels)).reshape(-1)
        return TaggedArray(raw, "raw"), result

    # -- split evaluation -------------------------------------------------
    def evaluate_split(
        self, split: PreparedSplit, with_store: bool = True,
        batch_size: int = 64, null_value: float = 0.0, per_node: bool = False,
    ) -> tuple[EvalReport, "ForecastDump"]:
        sf = self.encode_split(split, batch_size=batch_size)
        t0 = time.perf_counter()
        if with_store:
            ids, dd = self.retrieve(sf.queries)
            final_norm = self.combine(sf.model_out, ids, dd)
        else:
            final_norm = sf.model_out
        retrieve_seconds = time.perf_counter() - t0

        c = self.cfg.channels
        pred_raw = self.normalizer.inverse(
            final_norm.reshape(-1, self.cfg.horizon, c)).reshape(final_norm.shape)
        report = evaluate(TaggedArray(pred_raw, "raw"),
                          TaggedArray(sf.labels_raw, "raw"),
                          null_value=null_value, nodes=sf.nodes,
                          per_node=per_node)
        dump = ForecastDump(
            predictions=pred_raw, labels=sf.labels_raw, nodes=sf.nodes,
            end_steps=sf.end_steps,
            encode_seconds=sf.encode_seconds,
            retrieve_seconds=retrieve_seconds,
        )
        return report, dump

    # -- interpretability dumps -------------------------------------------
    def inspect_neighbors(self, split: PreparedSplit, node: int, end_step: int,
                          out_path) -> None:
        """Write the retrieval trace for one window as CSV files.

        <out> gets one row per neighbor (rank, id, meta, distance, weight
        and the raw retrieved value series); <out>_query.csv the query's
        raw history tail and true future; <out>_keys.csv the raw query and
        neighbor key vectors for external embedding plots.
        """
        _, result = self.forecast_window(split, node, end_step)
        t_f = self.cfg.horizon
        c = self.cfg.channels
        raw_values = self.normalizer.inverse(
            self.store.values[result.ids].reshape(-1, t_f, c)).reshape(-1, t_f)

        out_path = str(out_path)
        with open(out_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["rank", "entry_id", "node", "end_step",
                             "distance", "weight"]
                            + [f"value_{h}" for h in range(1, t_f + 1)])
            for rank, (eid, dist, w) in enumerate(
                    zip(result.ids, result.distances, result.weights), 1):
                meta = self.store.meta[eid]
                writer.writerow(
                    [rank, int(eid), int(meta[0]), int(meta[1]),
                     repr(float(dist)), repr(float(w))]
                    + [repr(float(v)) for v in raw_values[rank - 1]])

        stem = out_path[:-4] if out_path.endswith(".csv") else out_path
        local = end_step - split.offset
        tail = self.cfg.seg_len
        with open(f"{stem}_query.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "kind", "value"])
            for s in range(local - tail + 1, local + 1):
                writer.writerow([split.offset + s, "history",
                                 repr(float(split.raw[s, node, 0]))])
            for s in range(local + 1, min(local + 1 + t_f, split.n_steps)):
                writer.writerow([split.offset + s, "label",
                                 repr(float(split.raw[s, node, 0]))])

        sf = self.encode_split(split, local_ends=np.array([local]))
        row = int(np.nonzero(sf.nodes == node)[0][0])
        q32 = sf.queries[row].astype(np.float32)
        with open(f"{stem}_keys.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["label", "entry_id"]
                            + [f"k_{i}" for i in range(self.cfg.d_model)])
            writer.writerow(["query", -1] + [repr(float(v)) for v in q32])
            for rank, eid in enumerate(result.ids, 1):
                writer.writerow([f"rank_{rank}", int(eid)]
                                + [repr(float(v)) for v in self.store.keys[eid]])


@dataclass
class ForecastDump:
    predictions: np.ndarray   # (n, T_f) raw
    labels: np.ndarray        # (n, T_f) raw
    nodes: np.ndarray
    end_steps: np.ndarray
    encode_seconds: float
    retrieve_seconds: float

    @property
    def total_seconds(self) -> float:
        return self.encode_seconds + self.retrieve_seconds

    def points_per_second_per_node(self) -> float:
        n_nodes = len(np.unique(self.nodes))
        points = self.predictions.size
        if self.total_seconds <= 0:
            return float("inf")
        return points / self.total_seconds / n_nodes

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["node", "end_step", "horizon", "prediction", "label"])
            t_f = self.predictions.shape[1]
            for i in range(len(self.predictions)):
                for h in range(t_f):
                    writer.writerow([
                        int(self.nodes[i]), int(self.end_steps[i]), h + 1,
                        repr(float(self.predictions[i, h])),
                        repr(float(self.labels[i, h])),
                    ])
