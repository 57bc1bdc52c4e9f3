"""Dependency-graph machinery for the spatial convolution.

A predefined adjacency yields fixed forward/backward transition matrices
(row-normalized A and Aᵀ). When no graph is available, a learned
self-adaptive adjacency — row-softmax of relu(E1·E2ᵀ) over trainable node
embeddings — stands in and is trained end to end.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataLoadError, DimensionError
from .tensor import Tensor


def transition_matrices(adjacency: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize A and Aᵀ; all-zero rows stay all-zero."""
    a = np.asarray(adjacency, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"adjacency must be square, got {a.shape}")
    if np.any(a < 0):
        raise DataLoadError("adjacency has negative entries")

    def normalize(m: np.ndarray) -> np.ndarray:
        rowsum = m.sum(axis=1, keepdims=True)
        out = np.divide(m, rowsum, out=np.zeros_like(m), where=rowsum > 0)
        return out

    return normalize(a), normalize(a.T)


@dataclass
class DependencyGraph:
    """Fixed transition matrices plus their cached power series."""

    adjacency: np.ndarray
    forward: np.ndarray
    backward: np.ndarray
    _powers: dict[int, tuple[list[np.ndarray], list[np.ndarray]]] = field(
        default_factory=dict, repr=False)

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray) -> "DependencyGraph":
        fwd, bwd = transition_matrices(adjacency)
        return cls(adjacency=np.asarray(adjacency, dtype=np.float64),
                   forward=fwd, backward=bwd)

    @property
    def n_nodes(self) -> int:
        return self.forward.shape[0]

    def power_series(self, order: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """[P⁰ … P^order] for the forward and backward matrices, cached."""
        if order not in self._powers:
            self._powers[order] = (matrix_power_series(self.forward, order),
                                   matrix_power_series(self.backward, order))
        return self._powers[order]


def matrix_power_series(p: np.ndarray, order: int) -> list[np.ndarray]:
    """[P⁰, P¹, …, P^order] with P⁰ = I."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise DimensionError(f"matrix must be square, got {p.shape}")
    powers = [np.eye(p.shape[0])]
    for _ in range(order):
        powers.append(powers[-1] @ p)
    return powers


def adaptive_adjacency(e1: Tensor, e2: Tensor) -> Tensor:
    """Learned row-stochastic adjacency: row-softmax(relu(E1·E2ᵀ))."""
    if e1.shape[1] != e2.shape[1]:
        raise DimensionError(
            f"embedding widths differ: {e1.shape} vs {e2.shape}")
    scores = T.relu(T.matmul(e1, T.transpose(e2, (1, 0))))
    return T.softmax(scores, axis=-1)


def tensor_power_series(p: Tensor, order: int) -> list[Tensor]:
    """Differentiable [P⁰ … P^order] for a Tensor matrix."""
    n = p.shape[0]
    powers: list[Tensor] = [T.constant(np.eye(n))]
    for _ in range(order):
        powers.append(T.matmul(powers[-1], p))
    return powers


def ring_adjacency(n_nodes: int) -> np.ndarray:
    """Cycle graph used by the synthetic benchmark when a graph is requested."""
    a = np.zeros((n_nodes, n_nodes))
    for i in range(n_nodes):
        a[i, (i + 1) % n_nodes] = 1.0
        a[i, (i - 1) % n_nodes] = 1.0
    return a


def load_adjacency(path) -> np.ndarray:
    """Read a dense N×N CSV or a (src, dst, weight) edge list."""
    with open(path, newline="") as f:
        rows = [row for row in csv.reader(f) if row]
    if not rows:
        raise DataLoadError(f"{path}: empty adjacency file")

    header_like = any(not _is_number(x) for x in rows[0])
    if header_like and [h.strip().lower() for h in rows[0][:2]] == ["src", "dst"]:
        rows = rows[1:]
        return _edges_to_dense(rows, path)
    if len(rows[0]) == 3 and len(rows) != 3:
        return _edges_to_dense(rows, path)
    n = len(rows[0])
    if len(rows) != n:
        raise DataLoadError(f"{path}: dense adjacency must be square, "
                            f"got {len(rows)} rows of {n} columns")
    try:
        a = np.array([[float(x) for x in row] for row in rows])
    except ValueError as e:
        raise DataLoadError(f"{path}: {e}") from None
    if np.any(a < 0):
        raise DataLoadError(f"{path}: negative adjacency entries")
    return a


def _is_number(x: str) -> bool:
    try:
        float(x)
        return True
    except ValueError:
        return False


def _edges_to_dense(rows, path) -> np.ndarray:
    try:
        edges = [(int(r[0]), int(r[1]), float(r[2])) for r in rows]
    except (ValueError, IndexError) as e:
        raise DataLoadError(f"{path}: bad edge row: {e}") from None
    n = 1 + max(max(s, d) for s, d, _ in edges)
    a = np.zeros((n, n))
    for s, d, w in edges:
        if w < 0:
            raise DataLoadError(f"{path}: negative weight on edge ({s}, {d})")
        a[s, d] = w
    return a
