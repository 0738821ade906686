"""Neighborhood reductions: plain pooling and geometry-weighted variants.

Every reduction maps a :class:`~assanet.geometry.GroupedTensor` with features
(M, K, C) to one row per query. The weighted variants scale each neighbor's
features by its radius-normalized offset before pooling:

* ``anisotropic_reduce``: three scaled copies (by dx, dy, dz) concatenated
  along channels, output (M, 3C). Channel order is all-x, then all-y, then
  all-z.
* ``pospool_reduce``: channels split into three contiguous groups (remainder
  to the earlier groups), group g scaled by offset component g, output (M, C).
* ``relpos_sum_reduce``: every channel scaled by dx + dy + dz, output (M, C).

Pad slots are included by default (they repeat the first real neighbor, so
max pooling is unaffected and mean/sum see the repeat weighting); pass
``include_pads=False`` to mask them out. Max pooling ties route their
subgradient to the first attaining slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import GroupedTensor
from .nn import DTYPE

REDUCTION_MODES = ("max", "mean", "sum")
REDUCTION_KINDS = ("isotropic", "anisotropic", "pospool", "relpos_sum")


@dataclass(frozen=True)
class ReductionSpec:
    """Which reduction backend an aggregation block uses."""

    kind: str = "isotropic"
    mode: str = "max"
    include_pads: bool = True

    def __post_init__(self) -> None:
        if self.kind not in REDUCTION_KINDS:
            raise ValueError(f"unknown reduction kind {self.kind!r}")
        if self.mode not in REDUCTION_MODES:
            raise ValueError(f"unknown reduction mode {self.mode!r}")

    def out_channels(self, in_channels: int) -> int:
        return 3 * in_channels if self.kind == "anisotropic" else in_channels


def _pool(
    values: np.ndarray, mode: str, pad_mask: np.ndarray, include_pads: bool
) -> tuple[np.ndarray, dict]:
    """Pool (M, K, D) over K. Returns (out, cache) for :func:`_pool_backward`."""
    m, k, d = values.shape
    cache: dict = {"mode": mode, "shape": values.shape, "include_pads": include_pads}
    if include_pads:
        if mode == "max":
            arg = values.argmax(axis=1)  # first max on ties
            out = np.take_along_axis(values, arg[:, None, :], axis=1)[:, 0, :]
            cache["arg"] = arg
        elif mode == "sum":
            out = values.sum(axis=1)
        else:
            out = values.mean(axis=1)
    else:
        keep = ~pad_mask  # (M, K); every row has >= 1 real slot
        if mode == "max":
            masked = np.where(keep[:, :, None], values, -np.inf)
            arg = masked.argmax(axis=1)
            out = np.take_along_axis(values, arg[:, None, :], axis=1)[:, 0, :]
            cache["arg"] = arg
        else:
            masked = np.where(keep[:, :, None], values, 0.0)
            out = masked.sum(axis=1)
            if mode == "mean":
                counts = keep.sum(axis=1, keepdims=True).astype(DTYPE)  # (M, 1)
                out = out / counts
                cache["counts"] = counts
        cache["keep"] = keep
    return out.astype(DTYPE, copy=False), cache


def _pool_backward(cache: dict, d_out: np.ndarray) -> np.ndarray:
    m, k, d = cache["shape"]
    mode = cache["mode"]
    grad = np.zeros((m, k, d), dtype=DTYPE)
    if mode == "max":
        np.put_along_axis(grad, cache["arg"][:, None, :], d_out[:, None, :], axis=1)
        return grad
    if cache["include_pads"]:
        if mode == "sum":
            grad[:] = d_out[:, None, :]
        else:
            grad[:] = d_out[:, None, :] / DTYPE(k)
    else:
        keep = cache["keep"][:, :, None]
        if mode == "sum":
            grad[:] = np.where(keep, d_out[:, None, :], 0.0)
        else:
            grad[:] = np.where(keep, d_out[:, None, :] / cache["counts"][:, None, :], 0.0)
    return grad


def _scaled_pool(
    grouped: GroupedTensor, scale: np.ndarray | None, mode: str, include_pads: bool
) -> tuple[np.ndarray, dict]:
    feats = grouped.features
    if scale is None:
        values = feats
    else:
        values = feats * scale
    m, k = feats.shape[:2]
    values = values.reshape(m, k, -1)
    out, pool_cache = _pool(values, mode, grouped.pad_mask, include_pads)
    cache = {"pool": pool_cache, "scale": scale, "feat_shape": feats.shape}
    return out, cache


def _scaled_pool_backward(cache: dict, d_out: np.ndarray) -> np.ndarray:
    d_values = _pool_backward(cache["pool"], d_out)
    d_values = d_values.reshape(cache["feat_shape"])
    scale = cache["scale"]
    if scale is None:
        return d_values
    return (d_values * scale).astype(DTYPE, copy=False)


def _expanded_pool(
    grouped: GroupedTensor, mode: str, include_pads: bool
) -> tuple[np.ndarray, dict]:
    # (M, K, 3, C): neighbor features scaled by each offset component
    feats = grouped.features
    m, k, c = feats.shape
    weighted = grouped.rel_positions[:, :, :, None] * feats[:, :, None, :]
    out, pool_cache = _pool(weighted.reshape(m, k, 3 * c), mode, grouped.pad_mask, include_pads)
    cache = {"pool": pool_cache, "rel": grouped.rel_positions, "feat_shape": feats.shape}
    return out, cache


def _expanded_pool_backward(cache: dict, d_out: np.ndarray) -> np.ndarray:
    m, k, c = cache["feat_shape"]
    d_weighted = _pool_backward(cache["pool"], d_out).reshape(m, k, 3, c)
    # d feature = sum over the three scaled copies
    return np.einsum("mkac,mka->mkc", d_weighted, cache["rel"]).astype(DTYPE)


def apply_reduction(
    grouped: GroupedTensor, spec: ReductionSpec
) -> tuple[np.ndarray, dict]:
    """Dispatch a reduction; returns (output, cache) for :func:`reduction_backward`."""
    if spec.kind == "isotropic":
        out, cache = _scaled_pool(grouped, None, spec.mode, spec.include_pads)
    elif spec.kind == "anisotropic":
        out, cache = _expanded_pool(grouped, spec.mode, spec.include_pads)
    elif spec.kind == "pospool":
        c = grouped.features.shape[2]
        if c < 3:
            raise ValueError(f"pospool needs >= 3 channels to partition, got {c}")
        scale = np.empty_like(grouped.features)
        for g, cols in enumerate(np.array_split(np.arange(c), 3)):
            scale[:, :, cols] = grouped.rel_positions[:, :, g : g + 1]
        out, cache = _scaled_pool(grouped, scale, spec.mode, spec.include_pads)
    elif spec.kind == "relpos_sum":
        scale = grouped.rel_positions.sum(axis=2, keepdims=True)  # (M, K, 1)
        out, cache = _scaled_pool(grouped, scale, spec.mode, spec.include_pads)
    else:  # pragma: no cover - ReductionSpec validates
        raise ValueError(f"unknown reduction kind {spec.kind!r}")
    cache["kind"] = spec.kind
    return out, cache


def reduction_backward(cache: dict, d_out: np.ndarray) -> np.ndarray:
    """Gradient of a reduction w.r.t. grouped.features, shape (M, K, C)."""
    if cache["kind"] == "anisotropic":
        return _expanded_pool_backward(cache, d_out)
    return _scaled_pool_backward(cache, d_out)


def reduce_features(
    grouped: GroupedTensor, mode: str = "max", include_pads: bool = True
) -> np.ndarray:
    """Plain per-channel pooling over the neighborhood, output (M, C)."""
    out, _ = apply_reduction(
        grouped, ReductionSpec(kind="isotropic", mode=mode, include_pads=include_pads)
    )
    return out

def anisotropic_reduce(
    grouped: GroupedTensor, mode: str = "max", include_pads: bool = True
) -> np.ndarray:
    """Offset-weighted pooling, one scaled copy per axis, output (M, 3C)."""
    out, _ = apply_reduction(
        grouped, ReductionSpec(kind="anisotropic", mode=mode, include_pads=include_pads)
    )
    return out


def pospool_reduce(
    grouped: GroupedTensor, mode: str = "max", include_pads: bool = True
) -> np.ndarray:
    """Channel-partitioned offset weighting (three groups), output (M, C)."""
    out, _ = apply_reduction(
        grouped, ReductionSpec(kind="pospool", mode=mode, include_pads=include_pads)
    )
    return out


def relpos_sum_reduce(
    grouped: GroupedTensor, mode: str = "max", include_pads: bool = True
) -> np.ndarray:
    """Scalar offset-sum weighting per neighbor, output (M, C)."""
    out, _ = apply_reduction(
        grouped, ReductionSpec(kind="relpos_sum", mode=mode, include_pads=include_pads)
    )
    return out
