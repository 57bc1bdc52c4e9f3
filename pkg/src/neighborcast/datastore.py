"""Key-value datastore over encoder representations with squared-L2 search.

Keys are float32 (halving the footprint); every distance is accumulated in
float64 over the float32 bit patterns, so exact search is reproducible to
the bit regardless of batching. Exact search pre-selects candidates with a
BLAS-friendly |k|^2 - 2kq + |q|^2 scan, then recomputes the candidates'
distances with the plain sum((k - q)^2) formula, which keeps reported
distances identical to a naive reference scan while staying fast.

Ties are broken by ascending entry id everywhere.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from . import tensor as T
from .data import PreparedSplit, gather_batch, valid_end_positions
from .errors import RequestError, StoreLoadError
from .graph import DependencyGraph

KMTDS_MAGIC = b"KMTD"
KMTDX_MAGIC = b"KMTX"
STORE_VERSION = 1


@dataclass
class Datastore:
    keys: np.ndarray          # (M, d) float32
    values: np.ndarray        # (M, T_f) float32, normalized space
    meta: np.ndarray          # (M, 2) uint32: (node, end_step)
    fingerprint: bytes        # sha256 of the producing checkpoint

    def __post_init__(self):
        if not (len(self.keys) == len(self.values) == len(self.meta)):
            raise RequestError("keys/values/meta leading dimensions differ")
        self.keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.meta = np.ascontiguousarray(self.meta, dtype=np.uint32)

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    @property
    def horizon(self) -> int:
        return self.values.shape[1]


@dataclass
class RetrievalResult:
    """K neighbors, nearest first; weighting fields are filled at forecast time."""

    ids: np.ndarray                   # (K,) int64
    distances: np.ndarray             # (K,) float64, ascending
    weights: np.ndarray | None = None
    mean_distance: float | None = None
    lam: float | None = None
    widened: bool = False


# ---------------------------------------------------------------------------
# datastore construction
# ---------------------------------------------------------------------------

def build_datastore(
    params: dict[str, T.Tensor],
    cfg: enc.EncoderConfig,
    split: PreparedSplit,
    graph: DependencyGraph | None = None,
    batch_size: int = 32,
) -> Datastore:
    """One entry per (node, window) of the split, in (node, end_step) order."""
    ends = valid_end_positions(split.n_steps, cfg.input_len, cfg.horizon)
    if ends.size == 0:
        raise RequestError(
            f"split {split.name!r} yields no windows for L={cfg.input_len}, "
            f"T_f={cfg.horizon}")
    n = split.n_nodes
    keys = np.empty((ends.size * n, cfg.d_model), dtype=np.float32)
    values = np.empty((ends.size * n, cfg.horizon * cfg.channels), dtype=np.float32)
    nodes = np.tile(np.arange(n, dtype=np.uint32), ends.size)
    end_steps = np.repeat(split.offset + ends.astype(np.uint32), n)

    with T.no_grad():
        for lo in range(0, ends.size, batch_size):
            chunk = ends[lo:lo + batch_size]
            batch = gather_batch(split, chunk, cfg.input_len, cfg.seg_len,
                                 cfg.horizon)
            out = enc.encode_and_predict(params, cfg, batch, graph=graph)
            rows = slice(lo * n, (lo + len(chunk)) * n)
            keys[rows] = out.key.data.astype(np.float32)
            values[rows] = batch.target.reshape(len(chunk) * n, -1)

    order = np.lexsort((end_steps, nodes))
    return Datastore(
        keys=keys[order],
        values=values[order],
        meta=np.stack([nodes[order], end_steps[order]], axis=1),
        fingerprint=enc.fingerprint(params, cfg),
    )


def subsample(store: Datastore, fraction: float, seed: int) -> Datastore:
    """Uniform without-replacement subset, original entry order preserved."""
    if not (0.0 < fraction <= 1.0):
        raise RequestError(f"fraction must be in (0, 1], got {fraction}")
    count = int(store.size * fraction)
    if count < 1:
        raise RequestError(
            f"fraction {fraction} of {store.size} entries selects nothing")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = np.sort(rng.choice(store.size, size=count, replace=False))
    return Datastore(keys=store.keys[idx], values=store.values[idx],
                     meta=store.meta[idx], fingerprint=store.fingerprint)


# ---------------------------------------------------------------------------
# exact search
# ---------------------------------------------------------------------------

def _exact_distances(keys: np.ndarray, q32: np.ndarray) -> np.ndarray:
    diff = keys.astype(np.float64) - q32.astype(np.float64)
    return np.sum(diff * diff, axis=1)


def _select_k(dists: np.ndarray, ids: np.ndarray, k: int
              ) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((ids, dists))[:k]
    return ids[order], dists[order]


def _as_query(q) -> np.ndarray:
    # queries are downcast to float32 exactly like stored keys
    return np.asarray(q, dtype=np.float32)


def knn_exact(store: Datastore, q, k: int) -> RetrievalResult:
    """Exact K nearest entries by squared L2, ties by ascending id."""
    _check_k(store, k)
    q32 = _as_query(q)
    dists = _exact_distances(store.keys, q32)
    if k < store.size:
        part = np.argpartition(dists, k - 1)[:k]
        kth = dists[part].max()
        cand = np.nonzero(dists <= kth)[0]
    else:
        cand = np.arange(store.size)
    ids, dd = _select_k(dists[cand], cand.astype(np.int64), k)
    return RetrievalResult(ids=ids, distances=dd)


def knn_exact_batch(store: Datastore, queries, k: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exact search; identical output to per-query knn_exact.

    Candidates are pre-selected with the GEMM-form scores, then their
    distances are recomputed with the direct formula, so results match
    knn_exact bit for bit. Rows with score ties near the K-th boundary
    fall back to a full per-row scan. Returns (ids, distances) of shape
    (n_queries, K).
    """
    _check_k(store, k)
    q32 = np.atleast_2d(_as_query(queries))
    nq = q32.shape[0]
    all_ids = np.empty((nq, k), dtype=np.int64)
    all_d = np.empty((nq, k), dtype=np.float64)

    if k >= store.size:
        for row in range(nq):
            r = knn_exact(store, q32[row], k)
            all_ids[row], all_d[row] = r.ids, r.distances
        return all_ids, all_d

    # float32 GEMM scores pre-select candidates; candidates are re-scored
    # with the exact float64 formula. A row joins the fast path only when
    # the K/K+1 score gap clears the float32 error margin; otherwise the
    # candidate set is widened by that margin and rescored exactly, which
    # keeps the output identical to knn_exact in both paths.
    kk32 = np.einsum("ij,ij->i", store.keys, store.keys, dtype=np.float32)
    kk_top = float(kk32.max(initial=0.0))
    chunk = max(1, int(3e7 // max(1, store.size)))
    for lo in range(0, nq, chunk):
        qc = q32[lo:lo + chunk]
        n_rows = qc.shape[0]
        scores = kk32[None, :] - 2.0 * (qc @ store.keys.T)
        # per-row introselect; axis-wise argpartition is much slower here
        part = np.empty((n_rows, k + 1), dtype=np.int64)
        for row in range(n_rows):
            part[row] = np.argpartition(scores[row], k)[:k + 1]
        rows = np.arange(n_rows)[:, None]
        sub = scores[rows, part]
        order = np.argsort(sub, axis=1)
        sub_sorted = np.take_along_axis(sub, order, axis=1)
        ids_sorted = np.take_along_axis(part, order, axis=1)
        margin = 1e-4 * np.maximum(1.0, np.einsum("ij,ij->i", qc, qc) + kk_top)
        safe = sub_sorted[:, k] > sub_sorted[:, k - 1] + margin

        exact = _gathered_distances(store.keys, ids_sorted[:, :k], qc)
        for row in range(n_rows):
            if safe[row]:
                ids, dd = _select_k(exact[row],
                                    ids_sorted[row, :k].astype(np.int64), k)
            else:
                bound = sub_sorted[row, k] + 2.0 * margin[row]
                cand = np.nonzero(scores[row] <= bound)[0]
                dd = _exact_distances(store.keys[cand], q32[lo + row])
                ids, dd = _select_k(dd, cand.astype(np.int64), k)
            all_ids[lo + row] = ids
            all_d[lo + row] = dd
    return all_ids, all_d


def _gathered_distances(keys: np.ndarray, idx: np.ndarray, q32: np.ndarray
                        ) -> np.ndarray:
    """Direct-formula distances for per-row candidate sets (rows, k)."""
    gathered = keys[idx].astype(np.float64)            # (rows, k, d)
    diff = gathered - q32.astype(np.float64)[:, None, :]
    return np.sum(diff * diff, axis=2)


def _check_k(store: Datastore, k: int) -> None:
    if k < 1:
        raise RequestError(f"K must be >= 1, got {k}")
    if k > store.size:
        raise RequestError(f"K={k} exceeds datastore size M={store.size}")


# ---------------------------------------------------------------------------
# inverted-file approximate search
# ---------------------------------------------------------------------------

@dataclass
class IvfIndex:
    centroids: np.ndarray          # (n_list, d) float32
    lists: list[np.ndarray]        # int64 entry ids, one array per list
    default_probes: int = 8

    @property
    def n_list(self) -> int:
        return self.centroids.shape[0]


def build_ivf(
    store: Datastore, n_list: int, seed: int,
    max_iters: int = 25, tol: float = 1e-6, default_probes: int = 8,
) -> IvfIndex:
    """K-means over the keys; every entry lands in exactly one posting list."""
    if n_list < 1 or n_list > store.size:
        raise RequestError(f"n_list={n_list} invalid for M={store.size}")
    rng = np.random.Generator(np.random.PCG64(seed))
    keys = store.keys.astype(np.float64)
    centroids = keys[np.sort(rng.choice(store.size, n_list, replace=False))].copy()

    assign = np.zeros(store.size, dtype=np.int64)
    for _ in range(max_iters):
        assign = _assign_chunked(keys, centroids)
        shift = 0.0
        for c in range(n_list):
            members = assign == c
            if members.any():
                new = keys[members].mean(axis=0)
                shift = max(shift, float(np.max(np.abs(new - centroids[c]))))
                centroids[c] = new
        if shift < tol:
            break

    lists = [np.nonzero(assign == c)[0].astype(np.int64) for c in range(n_list)]
    return IvfIndex(centroids=centroids.astype(np.float32), lists=lists,
                    default_probes=min(default_probes, n_list))


def _assign_chunked(keys: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    cc = np.einsum("ij,ij->i", centroids, centroids)
    out = np.empty(len(keys), dtype=np.int64)
    chunk = max(1, int(2e7 // max(1, len(centroids))))
    for lo in range(0, len(keys), chunk):
        kc = keys[lo:lo + chunk]
        scores = cc[None, :] - 2.0 * (kc @ centroids.T)
        out[lo:lo + chunk] = np.argmin(scores, axis=1)
    return out


def knn_approx(
    store: Datastore, index: IvfIndex, q, k: int, n_probe: int | None = None,
) -> RetrievalResult:
    """Scan the n_probe nearest posting lists exactly.

    Widens the probe set automatically (and flags it) when the scanned
    lists hold fewer than K candidates. n_probe == n_list degenerates to
    exact search.
    """
    _check_k(store, k)
    n_probe = index.default_probes if n_probe is None else n_probe
    if n_probe < 1:
        raise RequestError(f"n_probe must be >= 1, got {n_probe}")
    n_probe = min(n_probe, index.n_list)
    q32 = _as_query(q)
    cd = _exact_distances(index.centroids, q32)
    ranked = np.lexsort((np.arange(index.n_list), cd))

    widened = False
    probes = n_probe
    while True:
        cand_lists = [index.lists[c] for c in ranked[:probes] if index.lists[c].size]
        count = sum(len(c) for c in cand_lists)
        if count >= k or probes >= index.n_list:
            break
        probes += 1
        widened = True
    if count < k:
        raise RequestError(
            f"index holds {count} reachable entries, cannot return K={k}")
    cand = np.concatenate(cand_lists)
    exact = _exact_distances(store.keys[cand], q32)
    ids, dd = _select_k(exact, cand, k)
    return RetrievalResult(ids=ids, distances=dd, widened=widened)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_STORE_HEADER = struct.Struct("<4sHQII32s")


def save_store(store: Datastore, path) -> None:
    out = bytearray()
    out += _STORE_HEADER.pack(KMTDS_MAGIC, STORE_VERSION, store.size,
                              store.dim, store.horizon, store.fingerprint)
    out += store.keys.astype("<f4").tobytes()
    out += store.values.astype("<f4").tobytes()
    out += store.meta.astype("<u4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_store(path) -> Datastore:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _STORE_HEADER.size + 4:
        raise StoreLoadError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, m, d, tf, fp = _STORE_HEADER.unpack_from(blob, 0)
    if magic != KMTDS_MAGIC:
        raise StoreLoadError(f"{path}: bad magic {magic!r} at offset 0")
    if version != STORE_VERSION:
        raise StoreLoadError(f"{path}: unsupported version {version}")
    want = _STORE_HEADER.size + m * d * 4 + m * tf * 4 + m * 8 + 4
    if len(blob) != want:
        raise StoreLoadError(f"{path}: expected {want} bytes, found {len(blob)}")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    crc_actual = zlib.crc32(blob[:-4])
    if crc_stored != crc_actual:
        raise StoreLoadError(
            f"{path}: CRC mismatch at offset {len(blob) - 4} "
            f"(stored {crc_stored:#010x}, computed {crc_actual:#010x})")
    off = _STORE_HEADER.size
    keys = np.frombuffer(blob, "<f4", m * d, off).reshape(m, d)
    off += m * d * 4
    values = np.frombuffer(blob, "<f4", m * tf, off).reshape(m, tf)
    off += m * tf * 4
    meta = np.frombuffer(blob, "<u4", m * 2, off).reshape(m, 2)
    return Datastore(keys=keys.copy(), values=values.copy(), meta=meta.copy(),
                     fingerprint=fp)


def peek_store_fingerprint(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(_STORE_HEADER.size)
    if len(head) < _STORE_HEADER.size or head[:4] != KMTDS_MAGIC:
        raise StoreLoadError(f"{path}: not a datastore file")
    return _STORE_HEADER.unpack(head)[-1]


_INDEX_HEADER = struct.Struct("<4sHIII")


def save_ivf(index: IvfIndex, path) -> None:
    out = bytearray()
    out += _INDEX_HEADER.pack(KMTDX_MAGIC, STORE_VERSION, index.n_list,
                              index.centroids.shape[1], index.default_probes)
    out += index.centroids.astype("<f4").tobytes()
    for lst in index.lists:
        out += struct.pack("<Q", len(lst))
        out += lst.astype("<i8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_ivf(path) -> IvfIndex:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _INDEX_HEADER.size + 4:
        raise StoreLoadError(f"{path}: truncated index file")
    magic, version, n_list, d, probes = _INDEX_HEADER.unpack_from(blob, 0)
    if magic != KMTDX_MAGIC:
        raise StoreLoadError(f"{path}: bad magic {magic!r} at offset 0")
    if version != STORE_VERSION:
        raise StoreLoadError(f"{path}: unsupported version {version}")
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if crc_stored != zlib.crc32(blob[:-4]):
        raise StoreLoadError(f"{path}: CRC mismatch at offset {len(blob) - 4}")
    off = _INDEX_HEADER.size
    centroids = np.frombuffer(blob, "<f4", n_list * d, off).reshape(n_list, d)
    off += n_list * d * 4
    lists = []
    for _ in range(n_list):
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        lists.append(np.frombuffer(blob, "<i8", count, off).copy())
        off += count * 8
    if off != len(blob) - 4:
        raise StoreLoadError(f"{path}: {len(blob) - 4 - off} trailing bytes")
    return IvfIndex(centroids=centroids.copy(), lists=lists,
                    default_probes=probes)
