"""Dataset ingestion, windowing, splits, and the synthetic benchmark generator.

A dataset is a (T, N, C) float32 array of raw values plus sampling metadata.
Splits are chronological views; windows are zero-copy views into a split's
(normalized) value array. The synthetic generator plants cross-node motifs
so that retrieval quality can be measured against known ground truth.
"""

from __future__ import annotations

import csv
import logging
import struct
import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataLoadError, DegenerateDataError, DimensionError

log = logging.getLogger(__name__)

KMTSBIN_MAGIC = b"KMTS"
KMTSBIN_VERSION = 1


@dataclass
class MtsDataset:
    """Raw multivariate series: values[t, n, c] in original units."""

    values: np.ndarray              # (T, N, C) float32, no NaN
    node_ids: list[str]
    sample_rate_minutes: int
    name: str = "dataset"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise DimensionError(f"dataset values must be (T, N, C), got {v.shape}")
        t, n, c = v.shape
        if t < 1 or n < 1 or c < 1:
            raise DimensionError(f"dataset dims must all be >= 1, got {v.shape}")
        if len(self.node_ids) != n:
            raise DimensionError(f"{len(self.node_ids)} node ids for {n} nodes")
        if np.isnan(v).any():
            raise DataLoadError("dataset contains NaN values")
        if self.sample_rate_minutes <= 0:
            raise ConfigError("sample_rate_minutes must be positive")
        self.values = v

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class TaggedArray:
    """An array tagged with the space its values live in.

    Metrics accept only ``space == "raw"``; training losses only
    ``space == "normalized"``. The tag travels with the data so the
    assertion happens where it matters instead of by convention.
    """

    values: np.ndarray
    space: str  # "raw" | "normalized"

    def __post_init__(self):
        if self.space not in ("raw", "normalized"):
            raise ConfigError(f"unknown value space {self.space!r}")


@dataclass(frozen=True)
class Normalizer:
    """Per-channel z-score fit on the training split only."""

    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def inverse_tagged(self, x: TaggedArray) -> TaggedArray:
        if x.space != "normalized":
            raise ConfigError("inverse_tagged expects a normalized-space array")
        return TaggedArray(self.inverse(x.values), "raw")


def fit_normalizer(split: "DataSplit") -> Normalizer:
    vals = split.values.astype(np.float64)
    mean = vals.mean(axis=(0, 1))
    std = vals.std(axis=(0, 1))
    if np.any(std <= 0.0):
        raise DegenerateDataError(
            f"zero std in channel(s) {np.nonzero(std <= 0.0)[0].tolist()}; "
            "cannot z-score constant data")
    return Normalizer(mean=mean, std=std)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological (train, val, test) fractions; must sum to 1."""

    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        r = self.ratios
        if len(r) != 3 or any(x <= 0 for x in r):
            raise ConfigError(f"split ratios must be three positive fractions, got {r}")
        if abs(sum(r) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {sum(r)}")


@dataclass
class DataSplit:
    """A contiguous chronological slice of a dataset (raw units)."""

    values: np.ndarray  # (T_split, N, C) float32 view
    offset: int         # global index of row 0 in the source dataset
    name: str

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]


def chronological_split(
    dataset: MtsDataset, spec: SplitSpec = SplitSpec()
) -> tuple[DataSplit, DataSplit, DataSplit]:
    """Contiguous, ordered train/val/test; floor-rounded, remainder to train."""
    t = dataset.n_steps
    n_val = int(t * spec.ratios[1])
    n_test = int(t * spec.ratios[2])
    n_train = t - n_val - n_test
    if n_train < 1:
        raise ConfigError(f"train split would be empty for T={t}, ratios={spec.ratios}")
    v = dataset.values
    return (
        DataSplit(v[:n_train], 0, "train"),
        DataSplit(v[n_train:n_train + n_val], n_train, "val"),
        DataSplit(v[n_train + n_val:], n_train + n_val, "test"),
    )


@dataclass
class PreparedSplit:
    """A split plus its normalized float64 values, ready for windowing."""

    raw: np.ndarray     # (T_split, N, C) float32
    norm: np.ndarray    # (T_split, N, C) float64 z-scored
    offset: int
    name: str

    @property
    def n_steps(self) -> int:
        return self.raw.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.raw.shape[1]


def prepare_split(split: DataSplit, normalizer: Normalizer) -> PreparedSplit:
    return PreparedSplit(
        raw=split.values,
        norm=normalizer.apply(split.values),
        offset=split.offset,
        name=split.name,
    )


@dataclass(frozen=True)
class Sample:
    """One forecasting unit: history window, its tail segment, and the target.

    ``short_input`` is a view of the last L_s rows of ``long_input``;
    ``end_step`` indexes the last history row in *global* dataset time.
    Inputs and ``target`` are normalized; ``raw_target`` keeps the original
    units for masking and metrics.
    """

    long_input: np.ndarray   # (L, C) float64 normalized
    short_input: np.ndarray  # (L_s, C) view of long_input tail
    target: np.ndarray       # (T_f, C) float64 normalized
    raw_target: np.ndarray   # (T_f, C) float32 raw
    node: int
    end_step: int
    space: str = "normalized"


def n_windows(split_steps: int, input_len: int, horizon: int) -> int:
    return max(0, split_steps - input_len - horizon + 1)


def valid_end_positions(split_steps: int, input_len: int, horizon: int) -> np.ndarray:
    """Split-local indices of the last history row of every valid window."""
    return np.arange(input_len - 1, split_steps - horizon)


def make_windows(
    split: PreparedSplit, input_len: int, seg_len: int, horizon: int
) -> Iterator[Sample]:
    """Yield one Sample per (node, end position), node-major order, stride 1."""
    if not (input_len >= seg_len >= 1):
        raise ConfigError(f"need L >= L_s >= 1, got L={input_len}, L_s={seg_len}")
    if horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {horizon}")
    ends = valid_end_positions(split.n_steps, input_len, horizon)
    if ends.size == 0:
        log.warning(
            "split %r too short for windows: %d steps < L+T_f = %d",
            split.name, split.n_steps, input_len + horizon)
        return
    for node in range(split.n_nodes):
        for e in ends:
            x = split.norm[e - input_len + 1:e + 1, node, :]
            yield Sample(
                long_input=x,
                short_input=x[input_len - seg_len:],
                target=split.norm[e + 1:e + 1 + horizon, node, :],
                raw_target=split.raw[e + 1:e + 1 + horizon, node, :],
                node=node,
                end_step=split.offset + int(e),
            )


@dataclass(frozen=True)
class WindowBatch:
    """All N nodes at a batch of end positions, laid out for the encoder."""

    long_x: np.ndarray      # (B, N, L, C) normalized
    short_x: np.ndarray     # (B, N, L_s, C) normalized
    target: np.ndarray      # (B, N, T_f, C) normalized
    raw_target: np.ndarray  # (B, N, T_f, C) raw
    end_steps: np.ndarray   # (B,) global end steps
    space: str = "normalized"


def gather_batch(
    split: PreparedSplit,
    local_ends: np.ndarray,
    input_len: int,
    seg_len: int,
    horizon: int,
) -> WindowBatch:
    """Materialize a node-complete batch for the given split-local end rows."""
    lo = np.asarray(local_ends)
    long_x = np.stack([split.norm[e - input_len + 1:e + 1] for e in lo])
    target = np.stack([split.norm[e + 1:e + 1 + horizon] for e in lo])
    raw_target = np.stack([split.raw[e + 1:e + 1 + horizon] for e in lo])
    # (B, L, N, C) -> (B, N, L, C)
    long_x = np.ascontiguousarray(long_x.transpose(0, 2, 1, 3))
    target = np.ascontiguousarray(target.transpose(0, 2, 1, 3))
    raw_target = np.ascontiguousarray(raw_target.transpose(0, 2, 1, 3))
    return WindowBatch(
        long_x=long_x,
        short_x=long_x[:, :, input_len - seg_len:, :],
        target=target,
        raw_target=raw_target,
        end_steps=split.offset + lo,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sHQIII")  # magic, version, T, N, C, sample_rate


def save_kmtsbin(dataset: MtsDataset, path) -> None:
    t, n, c = dataset.values.shape
    payload = bytearray()
    payload += _HEADER.pack(KMTSBIN_MAGIC, KMTSBIN_VERSION, t, n, c,
                            dataset.sample_rate_minutes)
    payload += dataset.values.astype("<f4").tobytes()
    payload += struct.pack("<I", zlib.crc32(bytes(payload)))
    with open(path, "wb") as f:
        f.write(payload)


def load_kmtsbin(path, name: str | None = None) -> MtsDataset:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size + 4:
        raise DataLoadError(f"{path}: truncated file ({len(blob)} bytes)")
    magic, version, t, n, c, rate = _HEADER.unpack_from(blob, 0)
    if magic != KMTSBIN_MAGIC:
        raise DataLoadError(f"{path}: bad magic {magic!r} at offset 0")
    if version != KMTSBIN_VERSION:
        raise DataLoadError(f"{path}: unsupported version {version}")
    want = _HEADER.size + t * n * c * 4 + 4
    if len(blob) != want:
        raise DataLoadError(f"{path}: expected {want} bytes, found {len(blob)}")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    crc_actual = zlib.crc32(blob[:-4])
    if crc_stored != crc_actual:
        raise DataLoadError(
            f"{path}: CRC mismatch at offset {len(blob) - 4} "
            f"(stored {crc_stored:#010x}, computed {crc_actual:#010x})")
    values = np.frombuffer(blob, dtype="<f4", count=t * n * c,
                           offset=_HEADER.size).reshape(t, n, c)
    return MtsDataset(
        values=values.copy(),
        node_ids=[str(i) for i in range(n)],
        sample_rate_minutes=rate,
        name=name or str(path),
    )


def load_csv(path, sample_rate_minutes: int = 5, name: str | None = None) -> MtsDataset:
    """CSV with a node-id header row and one timestep per data row (C=1)."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataLoadError(f"{path}: empty file") from None
        n = len(header)
        for i, row in enumerate(reader):
            if len(row) != n:
                raise DataLoadError(
                    f"{path}: row {i + 1} has {len(row)} cells, header has {n}")
            try:
                vals = [float(x) for x in row]
            except ValueError as e:
                raise DataLoadError(f"{path}: row {i + 1}: {e}") from None
            if any(np.isnan(vals)):
                raise DataLoadError(f"{path}: row {i + 1} contains NaN")
            rows.append(vals)
    if not rows:
        raise DataLoadError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float32)[:, :, None]
    return MtsDataset(values=values, node_ids=[h.strip() for h in header],
                      sample_rate_minutes=sample_rate_minutes,
                      name=name or str(path))


def save_csv(dataset: MtsDataset, path) -> None:
    if dataset.n_channels != 1:
        raise ConfigError("CSV export supports single-channel datasets only")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(dataset.node_ids)
        for t in range(dataset.n_steps):
            writer.writerow([repr(float(x)) for x in dataset.values[t, :, 0]])


def load_dataset(path, fmt: str, sample_rate_minutes: int = 5) -> MtsDataset:
    if fmt == "csv":
        return load_csv(path, sample_rate_minutes=sample_rate_minutes)
    if fmt == "kmtsbin":
        return load_kmtsbin(path)
    raise ConfigError(f"unknown dataset format {fmt!r} (expected csv or kmtsbin)")


# ---------------------------------------------------------------------------
# synthetic benchmark with planted motifs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale benchmark: daily/weekly sinusoids plus pasted motif shapes.

    Every motif is a fixed random curve overwritten into the base signal of
    2-3 nodes at ``motif_repeats`` non-overlapping random times, so the same
    future follows similar histories at different nodes and times.
    """

    n_nodes: int = 16
    n_steps: int = 8064
    period: int = 288             # steps per day
    motif_len: int = 36
    motif_count: int = 8          # number of distinct motif shapes
    motif_repeats: int = 8        # pasted instances per motif
    noise_std: float = 0.1
    ring_graph: bool = False      # emit a ring adjacency alongside the data
    name: str = "synthetic"

    def __post_init__(self):
        if self.n_nodes < 1 or self.n_steps < 1 or self.period < 2:
            raise ConfigError("n_nodes/n_steps/period out of range")
        if self.motif_count > 0 and not (1 <= self.motif_len <= self.n_steps):
            raise ConfigError("motif_len out of range")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


@dataclass(frozen=True)
class MotifPlacement:
    motif: int
    node: int
    start: int   # global timestep of the first pasted value
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length


def _motif_shape(rng: np.random.Generator, length: int) -> np.ndarray:
    # smoothed random walk, rescaled into the signal's value range
    steps = rng.normal(size=length + 8)
    walk = np.cumsum(steps)
    kernel = np.ones(9) / 9.0
    smooth = np.convolve(walk, kernel, mode="valid")[:length]
    smooth = smooth - smooth.mean()
    peak = np.max(np.abs(smooth))
    if peak > 0:
        smooth = smooth / peak
    return 5.0 + 2.0 * smooth


def synth_generate(
    cfg: SynthConfig, seed: int
) -> tuple[MtsDataset, list[MotifPlacement]]:
    """Deterministically generate the benchmark dataset and motif ground truth."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n, t = cfg.n_nodes, cfg.n_steps
    steps = np.arange(t, dtype=np.float64)

    offset = rng.uniform(4.0, 6.0, size=n)
    amp_day = rng.uniform(1.0, 1.3, size=n)
    amp_week = rng.uniform(0.10, 0.15, size=n)
    phase_day = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phase_week = rng.uniform(0.0, 2.0 * np.pi, size=n)

    base = (
        offset[None, :]
        + amp_day[None, :] * np.sin(2.0 * np.pi * steps[:, None] / cfg.period
                                    + phase_day[None, :])
        + amp_week[None, :] * np.sin(2.0 * np.pi * steps[:, None] / (7 * cfg.period)
                                     + phase_week[None, :])
    )

    placements: list[MotifPlacement] = []
    if cfg.motif_count > 0:
        occupied = [np.zeros(t, dtype=bool) for _ in range(n)]
        budget = 10 * cfg.motif_count
        for m in range(cfg.motif_count):
            shape = _motif_shape(rng, cfg.motif_len)
            n_hosts = int(rng.integers(2, 4)) if n >= 3 else min(2, n)
            hosts = rng.choice(n, size=n_hosts, replace=False)
            for _ in range(cfg.motif_repeats):
                placed = False
                for _attempt in range(budget):
                    node = int(rng.choice(hosts))
                    start = int(rng.integers(0, t - cfg.motif_len + 1))
                    if not occupied[node][start:start + cfg.motif_len].any():
                        occupied[node][start:start + cfg.motif_len] = True
                        base[start:start + cfg.motif_len, node] = shape
                        placements.append(
                            MotifPlacement(m, node, start, cfg.motif_len))
                        placed = True
                        break
                if not placed:
                    raise ConfigError(
                        f"could not place motif {m} without overlap after "
                        f"{budget} attempts; reduce motif_count/motif_len")

    values = base
    if cfg.noise_std > 0:
        values = values + rng.normal(0.0, cfg.noise_std, size=(t, n))

    dataset = MtsDataset(
        values=values[:, :, None].astype(np.float32),
        node_ids=[f"node{i}" for i in range(n)],
        sample_rate_minutes=24 * 60 // cfg.period,
        name=cfg.name,
    )
    _check_motif_separation(dataset, placements, rng)
    return dataset, placements


def _check_motif_separation(
    dataset: MtsDataset, placements: list[MotifPlacement],
    rng: np.random.Generator,
) -> None:
    """Pasted same-motif segments must sit closer than typical segment pairs."""
    by_motif: dict[int, list[MotifPlacement]] = {}
    for p in placements:
        by_motif.setdefault(p.motif, []).append(p)
    pairs = [(a, b) for ps in by_motif.values() for a, b in zip(ps, ps[1:])]
    if not pairs:
        return
    length = pairs[0][0].length
    vals = dataset.values[:, :, 0]

    def seg(p: MotifPlacement) -> np.ndarray:
        return vals[p.start:p.stop, p.node].astype(np.float64)

    motif_d = np.array([np.linalg.norm(seg(a) - seg(b)) for a, b in pairs])

    t, n = vals.shape
    starts = rng.integers(0, t - length + 1, size=(200, 2))
    nodes = rng.integers(0, n, size=(200, 2))
    rand_d = np.array([
        np.linalg.norm(vals[s0:s0 + length, n0].astype(np.float64)
                       - vals[s1:s1 + length, n1].astype(np.float64))
        for (s0, s1), (n0, n1) in zip(starts, nodes)
    ])
    if np.median(motif_d) >= np.median(rand_d):
        raise ConfigError(
            "planted motifs are not separable from background "
            f"(motif median {np.median(motif_d):.3f} >= "
            f"random median {np.median(rand_d):.3f}); lower noise_std")


def save_placements_csv(placements: list[MotifPlacement], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["motif", "node", "start", "length"])
        for p in placements:
            writer.writerow([p.motif, p.node, p.start, p.length])


def load_placements_csv(path) -> list[MotifPlacement]:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            out.append(MotifPlacement(int(row[0]), int(row[1]),
                                      int(row[2]), int(row[3])))
    return out
