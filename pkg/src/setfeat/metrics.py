"""Set-to-set distances between feature sets.

Three parallel routes live here on purpose:

  * a numpy fast path (evaluation, ablations),
  * `metric_oracle`, a straight-line double-loop reference sharing no code
    with the fast path, used by the equivalence tests,
  * differentiable twins built from tensor-engine ops so meta-training can
    backpropagate through the chosen metric (min handled as a subgradient
    routed to the first argmin).

The elementary distance is negative cosine similarity with an epsilon guard
so zero vectors produce ~0 distance instead of NaN.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as te
from .nn import l2_normalize
from .tensor import ShapeError, Tensor

EPS = 1e-12

METRIC_KINDS = ("match-sum", "min-min", "sum-min", "top-m", "hausdorff", "concat")


# ----------------------------------------------------------- numpy fast path


def neg_cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"neg_cosine: expects equal-length vectors, got {u.shape}, {v.shape}")
    nu = max(float(np.linalg.norm(u)), EPS)
    nv = max(float(np.linalg.norm(v)), EPS)
    return float(-(u @ v) / (nu * nv))


def class_centroids(support: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """(S, M, D) support sets + labels -> (n_classes, M, D) per-mapper means."""
    support = np.asarray(support, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.empty((n_classes, support.shape[1], support.shape[2]), dtype=np.float64)
    for n in range(n_classes):
        members = support[labels == n]
        if members.shape[0] == 0:
            raise ValueError(f"class {n} has no support examples")
        out[n] = members.mean(axis=0)
    return out


def _normalize_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(norms, EPS)


def pairwise(q: np.ndarray, c: np.ndarray) -> np.ndarray:
    """(M, D) x (M2, D) -> (M, M2) negative-cosine distance matrix."""
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if q.ndim != 2 or c.ndim != 2 or q.shape[1] != c.shape[1]:
        raise ShapeError(f"pairwise: incompatible set shapes {q.shape} and {c.shape}")
    return -(_normalize_rows(q) @ _normalize_rows(c).T)


def match_sum(dm: np.ndarray) -> float:
    dm = np.asarray(dm)
    if dm.ndim != 2 or dm.shape[0] != dm.shape[1]:
        raise ShapeError(f"match_sum: needs a square matrix, got {dm.shape}")
    return float(np.trace(dm))


def min_min(dm: np.ndarray) -> float:
    return float(np.asarray(dm).min())


def sum_min(dm: np.ndarray) -> float:
    return float(np.asarray(dm).min(axis=1).sum())


def top_m(dm: np.ndarray, m: int) -> float:
    dm = np.asarray(dm)
    if not 1 <= m <= dm.shape[0]:
        raise ValueError(f"top_m: m={m} out of range [1, {dm.shape[0]}]")
    row_mins = dm.min(axis=1)
    if m == dm.shape[0]:
        # all rows selected: skip the sort so the sum matches sum_min bit for bit
        return float(row_mins.sum())
    return float(np.sort(row_mins, kind="stable")[:m].sum())


def hausdorff(q: np.ndarray, c: np.ndarray, directed: bool = False) -> float:
    dm = pairwise(q, c)
    forward = float(dm.min(axis=1).max())
    if directed:
        return forward
    backward = float(dm.min(axis=0).max())
    return max(forward, backward)


def concat_cosine(q: np.ndarray, c: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if q.shape != c.shape:
        raise ShapeError(f"concat_cosine: shapes differ: {q.shape} vs {c.shape}")
    return neg_cosine(q.reshape(-1), c.reshape(-1))


def set_distance(kind: str, q: np.ndarray, c: np.ndarray, m: int | None = None) -> float:
    """Distance of one query set to one class centroid set under `kind`."""
    if kind == "hausdorff":
        return hausdorff(q, c)
    if kind == "concat":
        return concat_cosine(q, c)
    dm = pairwise(q, c)
    if kind == "match-sum":
        return match_sum(dm)
    if kind == "min-min":
        return min_min(dm)
    if kind == "sum-min":
        return sum_min(dm)
    if kind == "top-m":
        if m is None:
            raise ValueError("top-m metric needs its m parameter")
        return top_m(dm, m)
    raise ValueError(f"unknown metric kind {kind!r}; choose from {METRIC_KINDS}")


def set_distance_batch(
    kind: str, qs: np.ndarray, c: np.ndarray, m: int | None = None
) -> np.ndarray:
    """Vectorized set_distance of B query sets (B, M, D) against one centroid set."""
    qs = np.asarray(qs, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if qs.ndim != 3 or c.ndim != 2 or qs.shape[2] != c.shape[1]:
        raise ShapeError(f"set_distance_batch: got {qs.shape} vs {c.shape}")
    if kind == "concat":
        return -(_normalize_rows(qs.reshape(qs.shape[0], -1)) @ _normalize_rows(c.reshape(-1)))
    dm = -(_normalize_rows(qs) @ _normalize_rows(c).T)  # (B, M, M2)
    if kind == "match-sum":
        if qs.shape[1] != c.shape[0]:
            raise ShapeError(f"match-sum needs equal set sizes, got {qs.shape[1]} vs {c.shape[0]}")
        return np.trace(dm, axis1=1, axis2=2)
    if kind == "min-min":
        return dm.min(axis=(1, 2))
    row_mins = dm.min(axis=2)
    if kind == "sum-min":
        return row_mins.sum(axis=1)
    if kind == "top-m":
        if m is None:
            raise ValueError("top-m metric needs its m parameter")
        if not 1 <= m <= qs.shape[1]:
            raise ValueError(f"top-m: m={m} out of range [1, {qs.shape[1]}]")
        if m == qs.shape[1]:
            return row_mins.sum(axis=1)
        return np.sort(row_mins, axis=1, kind="stable")[:, :m].sum(axis=1)
    if kind == "hausdorff":
        return np.maximum(row_mins.max(axis=1), dm.min(axis=1).max(axis=1))
    raise ValueError(f"unknown metric kind {kind!r}; choose from {METRIC_KINDS}")


# ------------------------------------------------------- brute-force oracle


def metric_oracle(kind: str, q, c, m: int | None = None) -> float:
    """Independent reference: plain double loops, no shared helpers."""

    def cos_d(a, b):
        dot = 0.0
        na = 0.0
        nb = 0.0
        for x, y in zip(a, b):
            dot += float(x) * float(y)
            na += float(x) * float(x)
            nb += float(y) * float(y)
        na = math.sqrt(na)
        nb = math.sqrt(nb)
        if na < 1e-12:
            na = 1e-12
        if nb < 1e-12:
            nb = 1e-12
        return -dot / (na * nb)

    rows_q = [list(row) for row in np.asarray(q)]
    rows_c = [list(row) for row in np.asarray(c)]
    table = [[cos_d(a, b) for b in rows_c] for a in rows_q]

    if kind == "match-sum":
        return sum(table[i][i] for i in range(len(table)))
    if kind == "min-min":
        best = table[0][0]
        for row in table:
            for v in row:
                if v < best:
                    best = v
        return best
    if kind == "sum-min":
        total = 0.0
        for row in table:
            total += min(row)
        return total
    if kind == "top-m":
        mins = sorted(min(row) for row in table)
        return sum(mins[:m])
    if kind == "hausdorff":
        d_qc = max(min(row) for row in table)
        d_cq = max(
            min(table[i][j] for i in range(len(rows_q))) for j in range(len(rows_c))
        )
        return max(d_qc, d_cq)
    if kind == "concat":
        flat_q = [x for row in rows_q for x in row]
        flat_c = [x for row in rows_c for x in row]
        return cos_d(flat_q, flat_c)
    raise ValueError(f"unknown metric kind {kind!r}")


# ------------------------------------------------------ differentiable path


def pairwise_t(q: Tensor, c: Tensor) -> Tensor:
    """Differentiable (M, M2) distance matrix between two 2-d sets."""
    qn = l2_normalize(q)
    cn = l2_normalize(c)
    return te.scale(te.matmul(qn, te.transpose(cn)), -1.0)


def _select_tops(row_mins: Tensor, m: int) -> Tensor:
    """Sum of the m smallest entries along axis 1 of a (B, M) tensor."""
    order = np.argsort(row_mins.data, axis=1, kind="stable")
    mask = np.zeros_like(row_mins.data)
    np.put_along_axis(mask, order[:, :m], 1.0, axis=1)
    return te.sum_axis(te.mul(row_mins, Tensor(mask)), 1)


def set_distance_batch_t(kind: str, q: Tensor, c: Tensor, m: int | None = None) -> Tensor:
    """Differentiable distances of a batch of query sets to one centroid set.

    q is (B, M, D), c is (M2, D); returns a (B,) tensor.
    """
    if q.ndim != 3 or c.ndim != 2 or q.shape[2] != c.shape[1]:
        raise ShapeError(f"set_distance_batch_t: incompatible {q.shape} and {c.shape}")
    b, mq, d = q.shape
    m2 = c.shape[0]

    if kind == "concat":
        qf = l2_normalize(te.reshape(q, (b, mq * d)))
        cf = l2_normalize(te.reshape(c, (1, m2 * d)))
        return te.reshape(te.scale(te.matmul(qf, te.transpose(cf)), -1.0), (b,))

    qn = l2_normalize(q)
    cn = l2_normalize(c)
    flat = te.matmul(te.reshape(qn, (b * mq, d)), te.transpose(cn))
    dm = te.scale(te.reshape(flat, (b, mq, m2)), -1.0)

    if kind == "match-sum":
        if mq != m2:
            raise ShapeError(f"match-sum needs equal set sizes, got {mq} and {m2}")
        eye = Tensor(np.broadcast_to(np.eye(mq), (b, mq, mq)).copy())  # constant mask
        return te.sum_axis(te.sum_axis(te.mul(dm, eye), 2), 1)
    if kind == "min-min":
        return te.min_axis(te.min_axis(dm, 2), 1)
    if kind == "sum-min":
        return te.sum_axis(te.min_axis(dm, 2), 1)
    if kind == "top-m":
        if m is None:
            raise ValueError("top-m metric needs its m parameter")
        if not 1 <= m <= mq:
            raise ValueError(f"top_m: m={m} out of range [1, {mq}]")
        return _select_tops(te.min_axis(dm, 2), m)
    if kind == "hausdorff":
        fwd = te.max_axis(te.min_axis(dm, 2), 1)
        bwd = te.max_axis(te.min_axis(dm, 1), 1)
        both = te.concat_axis(
            [te.reshape(fwd, (b, 1)), te.reshape(bwd, (b, 1))], axis=1
        )
        return te.max_axis(both, 1)
    raise ValueError(f"unknown metric kind {kind!r}; choose from {METRIC_KINDS}")


def set_distance_t(kind: str, q: Tensor, c: Tensor, m: int | None = None) -> Tensor:
    """Differentiable scalar distance between one query set and one centroid set."""
    batched = set_distance_batch_t(kind, te.reshape(q, (1,) + q.shape), c, m)
    return te.reshape(batched, (1,))
