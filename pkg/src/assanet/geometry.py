"""Point-cloud containers and neighborhood kernels.

All kernels are pure functions of their inputs: same arrays in, same arrays
out, regardless of thread count or call order. Distances are Euclidean;
comparisons happen on squared distances to avoid needless square roots.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .nn import DTYPE


@dataclass
class PointCloud:
    """Positions (N, 3) float32, features (N, C) float32, optional label."""

    positions: np.ndarray
    features: np.ndarray
    label: int | None = None

    def __post_init__(self) -> None:
        self.positions = np.ascontiguousarray(self.positions, dtype=DTYPE)
        self.features = np.ascontiguousarray(self.features, dtype=DTYPE)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.features.ndim != 2:
            raise ValueError(f"features must be (N, C), got {self.features.shape}")
        if self.features.shape[0] != self.positions.shape[0]:
            raise ValueError(
                f"feature rows {self.features.shape[0]} != positions rows "
                f"{self.positions.shape[0]}"
            )
        if not np.isfinite(self.positions).all():
            raise ValueError("positions contain NaN or Inf")

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    def subsample(self, indices: np.ndarray) -> "PointCloud":
        return replace(
            self, positions=self.positions[indices], features=self.features[indices]
        )


@dataclass
class NeighborTable:
    """Fixed-width neighbor lists from a ball query.

    ``indices[i]`` holds up to ``k`` support indices within the radius, in
    ascending support-index order, padded by repeating the first entry.
    ``pad_mask[i, j]`` is True where slot j is padding. ``fallback[i]`` is
    True when the ball was empty and the nearest support point was
    substituted as the single real entry.
    """

    indices: np.ndarray   # (M, K) int64
    pad_mask: np.ndarray  # (M, K) bool
    fallback: np.ndarray  # (M,) bool

    @property
    def query_count(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def fallback_count(self) -> int:
        return int(self.fallback.sum())


@dataclass
class GroupedTensor:
    """Per-query neighborhoods ready for reduction.

    ``rel_positions`` are (neighbor - query) / radius, so non-pad entries lie
    inside the unit ball. Pad slots repeat the first real neighbor exactly.
    """

    features: np.ndarray       # (M, K, C)
    rel_positions: np.ndarray  # (M, K, 3)
    pad_mask: np.ndarray       # (M, K) bool
    radius: float


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (len(a), len(b))."""
    diff = a[:, None, :].astype(np.float64) - b[None, :, :].astype(np.float64)
    return np.einsum("ijk,ijk->ij", diff, diff)


def farthest_point_sample(
    positions: np.ndarray, m: int, start_index: int = 0
) -> np.ndarray:
    """Greedy max-min subsampling; returns m unique indices, start first.

    Each round picks the point with the largest squared distance to the set
    selected so far; ties resolve to the lowest index. Deterministic for a
    given start_index.
    """
    positions = np.asarray(positions, dtype=DTYPE)
    n = positions.shape[0]
    if positions.ndim != 2 or positions.shape[1] != 3:
        raise ValueError(f"positions must be (N, 3), got {positions.shape}")
    if not 1 <= m <= n:
        raise ValueError(f"m must be in [1, {n}], got {m}")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range [0, {n})")
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start_index
    # min squared distance from each point to the selected set so far
    min_d2 = ((positions - positions[start_index]) ** 2).sum(axis=1)
    # coordinate-major layout and preallocated buffers: the loop runs m-1
    # times and row-reduction overhead, not arithmetic, dominates it; the
    # (x*x + y*y) + z*z order matches the row-wise sum bit for bit
    pos_t = np.ascontiguousarray(positions.T)  # (3, N)
    diff = np.empty_like(pos_t)
    d2 = np.empty(n, dtype=DTYPE)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))  # argmax takes the lowest index on ties
        selected[i] = nxt
        np.subtract(pos_t, pos_t[:, nxt : nxt + 1], out=diff)
        np.square(diff, out=diff)
        np.add(diff[0], diff[1], out=d2)
        np.add(d2, diff[2], out=d2)
        np.minimum(min_d2, d2, out=min_d2)
    return selected


def _ball_query_checks(
    query: np.ndarray, support: np.ndarray, radius: float, k: int
) -> tuple[np.ndarray, np.ndarray]:
    query = np.asarray(query, dtype=DTYPE)
    support = np.asarray(support, dtype=DTYPE)
    if query.ndim != 2 or query.shape[1] != 3:
        raise ValueError(f"query must be (M, 3), got {query.shape}")
    if support.ndim != 2 or support.shape[1] != 3:
        raise ValueError(f"support must be (N, 3), got {support.shape}")
    if support.shape[0] == 0:
        raise ValueError("support set is empty")
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return query, support


def _pack_rows(
    rows: list[np.ndarray],
    nearest: np.ndarray,
    k: int,
) -> NeighborTable:
    m = len(rows)
    indices = np.empty((m, k), dtype=np.int64)
    pad_mask = np.zeros((m, k), dtype=bool)
    fallback = np.zeros(m, dtype=bool)
    for i, found in enumerate(rows):
        if found.size == 0:
            found = nearest[i : i + 1]
            fallback[i] = True
        found = found[:k]
        indices[i, : found.size] = found
        if found.size < k:
            indices[i, found.size :] = found[0]
            pad_mask[i, found.size :] = True
    return NeighborTable(indices=indices, pad_mask=pad_mask, fallback=fallback)


def ball_query_brute(
    query: np.ndarray, support: np.ndarray, radius: float, k: int
) -> NeighborTable:
    """Reference all-pairs ball query; the oracle the fast path is tested against."""
    query, support = _ball_query_checks(query, support, radius, k)
    d2 = pairwise_sq_dists(query, support)  # (M, N)
    r2 = float(radius) ** 2
    rows = [np.nonzero(d2[i] <= r2)[0] for i in range(query.shape[0])]
    nearest = np.argmin(d2, axis=1).astype(np.int64)
    return _pack_rows(rows, nearest, k)


def ball_query(
    query: np.ndarray, support: np.ndarray, radius: float, k: int
) -> NeighborTable:
    """Grid-hash accelerated ball query.

    Support points are bucketed into cells of side ``radius``; each query
    only examines the 27 surrounding cells. Output is identical to
    :func:`ball_query_brute`: up to k in-radius support indices per query in
    ascending index order, pads repeating the first entry, with a
    nearest-neighbor fallback for empty balls.
    """
    query, support = _ball_query_checks(query, support, radius, k)
    m = query.shape[0]
    cells = np.floor(support / radius).astype(np.int64)  # (N, 3)
    # bucket support indices per cell; argsort is stable so each bucket
    # stays in ascending support-index order
    cell_keys, inverse = np.unique(cells, axis=0, return_inverse=True)
    by_cell = np.argsort(inverse, kind="stable")
    bounds = np.concatenate(
        ([0], np.cumsum(np.bincount(inverse, minlength=cell_keys.shape[0])))
    )
    bucket_arrays = {
        tuple(cell_keys[ci]): by_cell[bounds[ci]:bounds[ci + 1]]
        for ci in range(cell_keys.shape[0])
    }

    qcells = np.floor(query / radius).astype(np.int64)
    r2 = float(radius) ** 2
    offsets = [
        (dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
    ]

    # one merged candidate list per distinct query cell, shared by every
    # query that falls in it
    qkeys, qinverse = np.unique(qcells, axis=0, return_inverse=True)
    cell_cands: list[np.ndarray] = []
    for cx, cy, cz in qkeys:
        parts = [
            bucket_arrays[key]
            for key in ((cx + ox, cy + oy, cz + oz) for ox, oy, oz in offsets)
            if key in bucket_arrays
        ]
        if parts:
            cand = np.concatenate(parts)
            cand.sort()  # ascending support-index order
        else:
            cand = np.empty(0, dtype=np.int64)
        cell_cands.append(cand)

    max_nc = max(c.size for c in cell_cands)
    nearest = np.zeros(m, dtype=np.int64)
    fallback = np.zeros(m, dtype=bool)
    indices = np.zeros((m, k), dtype=np.int64)
    pad_mask = np.zeros((m, k), dtype=bool)
    if max_nc == 0:
        counts = np.zeros(m, dtype=np.int64)
    else:
        # densify candidates to (M, max_nc) so one distance pass covers
        # every query
        cand_pad = np.zeros((m, max_nc), dtype=np.int64)
        cand_valid = np.zeros((m, max_nc), dtype=bool)
        for ci, cand in enumerate(cell_cands):
            rows = np.nonzero(qinverse == ci)[0]
            if rows.size == 0 or cand.size == 0:
                continue
            cand_pad[rows, : cand.size] = cand
            cand_valid[rows, : cand.size] = True
        diff = support[cand_pad] - query[:, None, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        mask = cand_valid & (d2 <= r2)
        csum = np.cumsum(mask, axis=1)
        counts = csum[:, -1]
        # keep the k lowest support indices per row: candidates are already
        # ascending, so positions with running count <= k are the keepers
        sel = mask & (csum <= k)
        row_ids, col_ids = np.nonzero(sel)
        indices[row_ids, csum[row_ids, col_ids] - 1] = cand_pad[row_ids, col_ids]
        kept = np.minimum(counts, k)
        pad_mask[:] = np.arange(k)[None, :] >= kept[:, None]
        found_any = counts > 0
        # pads repeat the first real neighbor
        indices[found_any] = np.where(
            pad_mask[found_any], indices[found_any, :1], indices[found_any]
        )

    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        # fall back to a full scan only for queries whose ball came up empty
        d2_full = pairwise_sq_dists(query[empty], support)
        nearest[empty] = np.argmin(d2_full, axis=1).astype(np.int64)
        fallback[empty] = True
        indices[empty] = nearest[empty, None]
        pad_mask[empty, 0] = False
        pad_mask[empty, 1:] = True
    return NeighborTable(indices=indices, pad_mask=pad_mask, fallback=fallback)


def group(
    query_positions: np.ndarray,
    support: PointCloud,
    table: NeighborTable,
    radius: float,
) -> GroupedTensor:
    """Gather neighbor features and radius-normalized relative positions.

    Pad slots replicate the first real neighbor exactly (the table already
    repeats its index), so reductions that include pads see the documented
    repeat weighting.
    """
    query_positions = np.asarray(query_positions, dtype=DTYPE)
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if table.query_count != query_positions.shape[0]:
        raise ValueError(
            f"table has {table.query_count} queries, positions have "
            f"{query_positions.shape[0]}"
        )
    feats = support.features[table.indices]  # (M, K, C)
    rel = support.positions[table.indices] - query_positions[:, None, :]
    rel = rel / DTYPE(radius)
    return GroupedTensor(
        features=feats,
        rel_positions=rel.astype(DTYPE, copy=False),
        pad_mask=table.pad_mask,
        radius=float(radius),
    )


def scatter_grouped_grad(
    table: NeighborTable, d_grouped: np.ndarray, n_support: int
) -> np.ndarray:
    """Backward of the feature gather: scatter-add slot grads to support rows.

    Pad slots carry real gradient contributions when a reduction included
    them; they flow to the repeated index, which matches the forward math.
    """
    m, k, c = d_grouped.shape
    out = np.zeros((n_support, c), dtype=DTYPE)
    np.add.at(out, table.indices.reshape(-1), d_grouped.reshape(m * k, c))
    return out


def save_point_cloud_csv(path: str, cloud: PointCloud) -> None:
    """Write ``x,y,z,f0,...,f{C-1}[,label]`` rows with a header line."""
    c = cloud.n_channels
    header = ["x", "y", "z"] + [f"f{i}" for i in range(c)]
    if cloud.label is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(cloud.n_points):
            row = [repr(float(v)) for v in cloud.positions[i]]
            row += [repr(float(v)) for v in cloud.features[i]]
            if cloud.label is not None:
                row.append(str(cloud.label))
            writer.writerow(row)


def load_point_cloud_csv(path: str) -> PointCloud:
    """Inverse of :func:`save_point_cloud_csv`; validates the header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty point-cloud file") from None
        if header[:3] != ["x", "y", "z"]:
            raise ValueError(f"{path}: header must start with x,y,z, got {header[:3]}")
        has_label = header[-1] == "label"
        feat_names = header[3 : -1 if has_label else len(header)]
        for i, name in enumerate(feat_names):
            if name != f"f{i}":
                raise ValueError(f"{path}: feature column {i} named {name!r}, want f{i}")
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = 3 + len(feat_names) + (1 if has_label else 0)
    data = np.empty((len(rows), width), dtype=np.float64)
    label: int | None = None
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: row {i + 2} has {len(row)} columns, want {width}")
        data[i] = [float(v) for v in row]
    if has_label:
        labels = data[:, -1]
        if not np.all(labels == labels[0]):
            raise ValueError(f"{path}: label column is not constant")
        label = int(labels[0])
        data = data[:, :-1]
    return PointCloud(
        positions=data[:, :3].astype(DTYPE),
        features=data[:, 3:].astype(DTYPE),
        label=label,
    )
