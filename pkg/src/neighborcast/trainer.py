"""Supervised training of the encoder.

Masked MAE on normalized targets (mask decided by the raw-space labels),
bias-corrected Adam, seeded epoch shuffling, early stopping on raw-space
validation MAE, and a central-finite-difference gradient checker that
doubles as the verification harness for the whole encoder.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import tensor as T
from .data import PreparedSplit, WindowBatch, gather_batch, valid_end_positions
from .errors import ConfigError, DimensionError, NumericError, RequestError
from .forecaster import masked_metrics
from .graph import DependencyGraph
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 16          # end positions per step; every node rides along
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    loss: str = "masked_mae"
    mask_null_value: float = 0.0
    grad_clip: float | None = None     # global norm; None disables
    steps_per_epoch: int | None = None  # cap optimizer steps per epoch
    val_max_windows: int | None = None  # cap validation end positions

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be >= 0")
        if self.patience > self.max_epochs:
            raise ConfigError(
                f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.loss != "masked_mae":
            raise ConfigError(f"unknown loss {self.loss!r}")


def masked_mae_loss(pred: Tensor, target: np.ndarray,
                    raw_labels: np.ndarray | None = None,
                    null_value: float = 0.0) -> Tensor:
    """Mean |pred - target| over entries whose raw label != null_value.

    ``raw_labels`` defaults to ``target`` itself (already-raw callers).
    Returns a constant zero (with a warning) when everything is masked.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionError(f"pred {pred.shape} vs target {target.shape}")
    basis = target if raw_labels is None else np.asarray(raw_labels)
    if basis.shape != target.shape:
        raise DimensionError(f"labels {basis.shape} vs target {target.shape}")
    mask = basis != null_value
    n = int(mask.sum())
    if n == 0:
        log.warning("masked_mae_loss: every entry masked; loss pinned to 0")
        return T.constant(0.0)
    weights = mask.astype(np.float64) / n
    return T.reduce_sum(T.mul(T.absolute(pred - T.constant(target)),
                              T.constant(weights)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(m={k: np.zeros_like(t.data) for k, t in params.items()},
                     v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              grad_clip: float | None = None) -> None:
    """Standard bias-corrected update; missing grads count as zero."""
    grads: dict[str, np.ndarray] = {}
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"NaN/Inf gradient in parameter {name!r}")
        grads[name] = g
    if grad_clip is not None:
        total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if total > grad_clip:
            scale = grad_clip / total
            grads = {k: g * scale for k, g in grads.items()}

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / bc1
        vhat = state.v[name] / bc2
        t.data = t.data - lr * mhat / (np.sqrt(vhat) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.zero_grad()


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float | None
    val_rmse: float | None
    val_mape: float | None
    seconds: float


@dataclass
class FitResult:
    params: dict[str, Tensor]     # best checkpoint
    trace: list[EpochRecord]
    best_val_mae: float
    best_epoch: int
    diverged: bool = False


def write_trace(trace: list[EpochRecord], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_mae", "val_rmse",
                         "val_mape", "seconds"])
        for r in trace:
            writer.writerow([r.epoch, repr(r.train_loss),
                             "" if r.val_mae is None else repr(r.val_mae),
                             "" if r.val_rmse is None else repr(r.val_rmse),
                             "" if r.val_mape is None else repr(r.val_mape),
                             repr(r.seconds)])


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def _restore(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(a.copy(), requires_grad=True) for k, a in arrays.items()}


def fit(
    params: dict[str, Tensor],
    cfg: enc.EncoderConfig,
    train: PreparedSplit,
    val: PreparedSplit,
    tcfg: TrainConfig,
    graph: DependencyGraph | None = None,
    normalizer=None,
) -> FitResult:
    """Train in place, early-stop on validation MAE, return the best weights.

    Validation metrics are raw-space (inverse-normalized through
    ``normalizer``); training loss is normalized-space masked MAE. The run
    is a pure function of (data, config, seed).
    """
    if normalizer is None:
        raise ConfigError("fit needs the normalizer to report raw-space metrics")
    ends = valid_end_positions(train.n_steps, cfg.input_len, cfg.horizon)
    if ends.size == 0:
        raise RequestError("training split yields no windows")
    val_ends = valid_end_positions(val.n_steps, cfg.input_len, cfg.horizon)
    if val_ends.size == 0:
        raise RequestError("validation split yields no windows")
    if tcfg.val_max_windows is not None and val_ends.size > tcfg.val_max_windows:
        stride = int(np.ceil(val_ends.size / tcfg.val_max_windows))
        val_ends = val_ends[::stride]

    rng = T.make_rng(tcfg.seed)
    dropout_rng = T.make_rng(tcfg.seed + 1) if cfg.dropout > 0 else None
    state = init_adam(params)
    best = _snapshot(params)
    best_mae = float("inf")
    best_epoch = -1
    trace: list[EpochRecord] = []
    diverged = False
    since_best = 0

    for epoch in range(tcfg.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(ends)
        n_steps = int(np.ceil(order.size / tcfg.batch_size))
        if tcfg.steps_per_epoch is not None:
            n_steps = min(n_steps, tcfg.steps_per_epoch)
        losses = []
        for s in range(n_steps):
            chunk = order[s * tcfg.batch_size:(s + 1) * tcfg.batch_size]
            batch = gather_batch(train, chunk, cfg.input_len, cfg.seg_len,
                                 cfg.horizon)
            out = enc.encode_and_predict(params, cfg, batch, graph=graph,
                                         rng=dropout_rng)
            flat = batch.target.reshape(out.forecast.shape)
            raw = batch.raw_target.reshape(out.forecast.shape)
            loss = masked_mae_loss(out.forecast, flat, raw_labels=raw,
                                   null_value=tcfg.mask_null_value)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                log.error("loss diverged at epoch %d step %d; keeping last "
                          "good checkpoint", epoch, s)
                diverged = True
                break
            losses.append(loss_val)
            if loss.requires_grad:
                T.backward(loss)
                try:
                    adam_step(params, state, tcfg.lr, tcfg.grad_clip)
                except NumericError:
                    log.exception("aborting: non-finite gradients")
                    diverged = True
                    break
                zero_grads(params)
        if diverged:
            break

        val_mets = _validate(params, cfg, val, val_ends, graph, normalizer,
                             tcfg)
        seconds = time.perf_counter() - t0
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_mae=val_mets.mae, val_rmse=val_mets.rmse, val_mape=val_mets.mape,
            seconds=seconds)
        trace.append(record)
        log.info("epoch %d: train %.5f, val MAE %s, %.1fs", epoch,
                 record.train_loss, record.val_mae, seconds)

        current = float("inf") if val_mets.mae is None else val_mets.mae
        if current < best_mae:
            best_mae = current
            best = _snapshot(params)
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= tcfg.patience > 0:
                break

    return FitResult(params=_restore(best), trace=trace,
                     best_val_mae=best_mae, best_epoch=best_epoch,
                     diverged=diverged)


def _validate(params, cfg, val, val_ends, graph, normalizer, tcfg):
    preds = []
    raws = []
    with T.no_grad():
        for lo in range(0, val_ends.size, tcfg.batch_size):
            chunk = val_ends[lo:lo + tcfg.batch_size]
            batch = gather_batch(val, chunk, cfg.input_len, cfg.seg_len,
                                 cfg.horizon)
            out = enc.encode_and_predict(params, cfg, batch, graph=graph)
            preds.append(out.forecast.data)
            raws.append(batch.raw_target.reshape(out.forecast.shape))
    pred_norm = np.concatenate(preds)
    raw_labels = np.concatenate(raws)
    pred_raw = normalizer.inverse(
        pred_norm.reshape(-1, cfg.horizon, cfg.channels)).reshape(pred_norm.shape)
    return masked_metrics(pred_raw, raw_labels, tcfg.mask_null_value)


# ---------------------------------------------------------------------------
# gradient verification harness
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    per_group: dict[str, float]    # group -> max relative error
    n_coordinates: int
    h: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_group.values())

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def relative_error(a: float, b: float, floor: float = 1e-5) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    params: dict[str, Tensor],
    cfg: enc.EncoderConfig,
    batch: WindowBatch,
    graph: DependencyGraph | None = None,
    n_coords: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Central differences vs reverse-mode, ``n_coords`` coordinates per group.

    Uses a smooth squared-error objective so the finite difference is valid
    everywhere (the training MAE has kinks).
    """
    target = batch.target.reshape(-1, cfg.horizon * cfg.channels)

    def loss_tensor() -> Tensor:
        out = enc.encode_and_predict(params, cfg, batch, graph=graph)
        diff = out.forecast - T.constant(target)
        return T.reduce_mean(T.mul(diff, diff))

    def loss_value() -> float:
        with T.no_grad():
            return loss_tensor().item()

    zero_grads(params)
    T.backward(loss_tensor())
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in params.items()}
    zero_grads(params)

    rng = T.make_rng(seed)
    report: dict[str, float] = {}
    total = 0
    for group, names in enc.parameter_groups(params).items():
        sizes = np.array([params[n].size for n in names])
        cum = np.cumsum(sizes)
        worst = 0.0
        picks = rng.integers(0, cum[-1], size=min(n_coords, int(cum[-1])))
        for flat_idx in picks:
            which = int(np.searchsorted(cum, flat_idx, side="right"))
            name = names[which]
            local = int(flat_idx - (cum[which] - sizes[which]))
            arr = params[name].data.reshape(-1)
            orig = arr[local]
            arr[local] = orig + h
            fp = loss_value()
            arr[local] = orig - h
            fm = loss_value()
            arr[local] = orig
            numeric = (fp - fm) / (2.0 * h)
            worst = max(worst, relative_error(
                float(analytic[name].reshape(-1)[local]), numeric))
            total += 1
        report[group] = worst
    return GradCheckReport(per_group=report, n_coordinates=total, h=h)
