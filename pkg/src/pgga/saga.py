"""Self-adaptive graph attention over the five local feature vectors.

Builds a similarity graph from two learned linear maps, row-normalizes it
into an adjacency matrix, and projects to one scalar contribution weight
per local feature. Global features bypass this module with weight 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _apply, as_tensor, div, logistic, matmul, mul, reshape, transpose

__all__ = ["NUM_NODES", "SagaParams", "SagaOutput", "edge_matrix", "adjacency", "zero_row_flags", "saga_apply"]

logger = logging.getLogger(__name__)

NUM_NODES = 5  # coarse-local-1, coarse-local-2, fine-local-1, fine-local-2, fine-local-3

ZERO_ROW_EPS = 1e-12


@dataclass
class SagaParams:
    """Two edge-transform matrices (d x d, no bias) and the weight projection (d)."""

    phi_a: Tensor
    phi_b: Tensor
    w: Tensor

    def __post_init__(self):
        d = self.phi_a.shape[0]
        if self.phi_a.shape != (d, d) or self.phi_b.shape != (d, d):
            raise ValueError("edge transforms must be square matrices of equal size")
        if self.w.shape != (d,):
            raise ValueError(f"weight projection must have shape ({d},), got {self.w.shape}")


@dataclass
class SagaOutput:
    theta: Tensor  # (5,)
    weighted: Tensor  # (5, d), row i is theta[i] * v_i


def _check_nodes(nodes: Tensor) -> Tensor:
    nodes = as_tensor(nodes)
    if nodes.data.ndim != 2 or nodes.data.shape[0] != NUM_NODES:
        raise ValueError(f"expected {NUM_NODES} node vectors stacked as rows, got shape {nodes.data.shape}")
    return nodes


def edge_matrix(nodes: Tensor, params: SagaParams) -> Tensor:
    """E[i][j] = (phi_a v_i) . (phi_b v_j) over the 5 x d node stack."""
    nodes = _check_nodes(nodes)
    a = matmul(nodes, transpose(params.phi_a))
    b = matmul(nodes, transpose(params.phi_b))
    return matmul(a, transpose(b))


def zero_row_flags(e: Tensor | np.ndarray) -> np.ndarray:
    """Rows whose L2 norm falls below the degeneracy threshold."""
    ed = e.data if isinstance(e, Tensor) else np.asarray(e)
    return np.linalg.norm(ed, axis=1) < ZERO_ROW_EPS


def _row_l2_norms(e: Tensor) -> Tensor:
    """Per-row norms with exactly-rounded sums, so permuting columns of a row
    cannot change the result and node-permutation equivariance stays bitwise."""
    ed = e.data
    norms = np.array([[math.sqrt(math.fsum(x * x for x in row))] for row in ed])
    safe = np.where(norms > 0.0, norms, 1.0)

    def bw(g):
        return (g * ed / safe,)

    return _apply("row_l2_norms", (e,), norms, bw)


def _exact_matvec(a: Tensor, v: Tensor) -> Tensor:
    """Matrix-vector product with exactly-rounded row sums (see _row_l2_norms)."""
    ad, vd = a.data, v.data
    out = np.array([math.fsum(ai * vi for ai, vi in zip(row, vd)) for row in ad])

    def bw(g):
        return np.outer(g, vd), ad.T @ g

    return _apply("exact_matvec", (a, v), out, bw)


def adjacency(e: Tensor) -> Tensor:
    """Row-wise L2 normalization; near-zero rows are kept as zeros and flagged."""
    e = as_tensor(e)
    flags = zero_row_flags(e)
    norms = _row_l2_norms(e)
    if flags.any():
        logger.warning("adjacency: %d near-zero edge row(s) left unnormalized", int(flags.sum()))
        keep = (~flags).astype(float)[:, None]
        e = mul(e, Tensor(keep))
        norms = norms + Tensor(flags.astype(float)[:, None])  # avoid 0/0; rows are zeroed anyway
    return div(e, norms)


def saga_apply(nodes: Tensor, params: SagaParams, activation: str = "logistic") -> SagaOutput:
    """Contribution weights theta = act(A N w) and the re-weighted node rows."""
    nodes = _check_nodes(nodes)
    a = adjacency(edge_matrix(nodes, params))
    raw = _exact_matvec(a, matmul(nodes, params.w))
    if activation == "logistic":
        theta = logistic(raw)
    elif activation == "none":
        theta = raw
    else:
        raise ValueError(f"unknown saga activation {activation!r}")
    weighted = mul(nodes, reshape(theta, (NUM_NODES, 1)))
    return SagaOutput(theta=theta, weighted=weighted)
