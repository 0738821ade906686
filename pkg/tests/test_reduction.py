import numpy as np
import pytest

from assanet.geometry import GroupedTensor
from assanet.reduction import (
    REDUCTION_MODES,
    ReductionSpec,
    anisotropic_reduce,
    apply_reduction,
    pospool_reduce,
    reduce_features,
    reduction_backward,
    relpos_sum_reduce,
)


def grouped(features, rel=None, pad_mask=None, radius=1.0):
    features = np.asarray(features, dtype=np.float32)
    m, k, _ = features.shape
    if rel is None:
        rel = np.zeros((m, k, 3), dtype=np.float32)
    if pad_mask is None:
        pad_mask = np.zeros((m, k), dtype=bool)
    return GroupedTensor(
        features=features,
        rel_positions=np.asarray(rel, dtype=np.float32),
        pad_mask=np.asarray(pad_mask, dtype=bool),
        radius=radius,
    )


def random_grouped(rng, m, k, c, pads=False):
    pad_mask = np.zeros((m, k), dtype=bool)
    feats = rng.standard_normal((m, k, c)).astype(np.float32)
    rel = rng.uniform(-1, 1, (m, k, 3)).astype(np.float32)
    if pads:
        for i in range(m):
            real = int(rng.integers(1, k + 1))
            pad_mask[i, real:] = True
            feats[i, real:] = feats[i, 0]
            rel[i, real:] = rel[i, 0]
    return grouped(feats, rel, pad_mask)


def test_single_neighbor_passes_through_all_modes():
    g = grouped([[[1.5, -2.0, 0.25]], [[4.0, 0.0, -1.0]]])
    for mode in REDUCTION_MODES:
        out = reduce_features(g, mode=mode)
        assert np.array_equal(out, g.features[:, 0, :])


def test_hand_values_for_max_sum_mean():
    g = grouped([[[1.0, 2.0], [3.0, 0.0]]])
    assert reduce_features(g, mode="max").tolist() == [[3.0, 2.0]]
    assert reduce_features(g, mode="sum").tolist() == [[4.0, 2.0]]
    assert reduce_features(g, mode="mean").tolist() == [[2.0, 1.0]]


def test_isotropic_matches_scalar_loop_oracle():
    rng = np.random.default_rng(13)
    g = random_grouped(rng, 8, 16, 4, pads=True)
    for mode in REDUCTION_MODES:
        for include_pads in (True, False):
            out = reduce_features(g, mode=mode, include_pads=include_pads)
            for i in range(8):
                for c in range(4):
                    vals = [
                        float(g.features[i, j, c])
                        for j in range(16)
                        if include_pads or not g.pad_mask[i, j]
                    ]
                    want = {
                        "max": max(vals),
                        "sum": sum(vals),
                        "mean": sum(vals) / len(vals),
                    }[mode]
                    assert abs(out[i, c] - want) <= 1e-5, (mode, include_pads)


def test_mean_counts_pads_by_default():
    g = grouped([[[6.0], [6.0], [6.0]]], pad_mask=[[False, True, True]])
    assert reduce_features(g, mode="sum").tolist() == [[18.0]]
    assert reduce_features(g, mode="sum", include_pads=False).tolist() == [[6.0]]
    assert reduce_features(g, mode="mean").tolist() == [[6.0]]
    assert reduce_features(g, mode="mean", include_pads=False).tolist() == [[6.0]]


def test_anisotropic_zero_offsets_give_zero_output():
    rng = np.random.default_rng(0)
    g = grouped(rng.standard_normal((3, 5, 4)).astype(np.float32))
    for mode in REDUCTION_MODES:
        assert not anisotropic_reduce(g, mode=mode).any()


def test_anisotropic_single_axis_aligned_neighbor():
    g = grouped([[[5.0, -2.0]]], rel=[[[1.0, 0.0, 0.0]]])
    out = anisotropic_reduce(g, mode="sum")
    assert out.tolist() == [[5.0, -2.0, 0.0, 0.0, 0.0, 0.0]]


def test_anisotropic_matches_triple_loop_oracle():
    rng = np.random.default_rng(17)
    g = random_grouped(rng, 4, 8, 3)
    out = anisotropic_reduce(g, mode="sum")
    assert out.shape == (4, 9)
    for i in range(4):
        for axis in range(3):
            for c in range(3):
                want = 0.0
                for j in range(8):
                    want += float(g.rel_positions[i, j, axis]) * float(
                        g.features[i, j, c]
                    )
                assert abs(out[i, axis * 3 + c] - want) <= 1e-6


def test_reduction_output_widths():
    rng = np.random.default_rng(1)
    g = random_grouped(rng, 2, 4, 5)
    assert anisotropic_reduce(g, mode="max").shape == (2, 15)
    assert pospool_reduce(g, mode="max").shape == (2, 5)
    assert relpos_sum_reduce(g, mode="max").shape == (2, 5)
    spec = ReductionSpec(kind="anisotropic", mode="sum")
    assert spec.out_channels(5) == 15
    assert ReductionSpec(kind="pospool").out_channels(5) == 5


def test_pospool_three_channels_pick_out_offsets():
    g = grouped([[[1.0, 1.0, 1.0]]], rel=[[[0.2, -0.4, 0.9]]])
    out = pospool_reduce(g, mode="sum")
    assert np.allclose(out, [[0.2, -0.4, 0.9]], atol=1e-7)


def test_pospool_zero_offsets_give_zero_output():
    rng = np.random.default_rng(2)
    g = grouped(rng.standard_normal((2, 3, 6)).astype(np.float32))
    assert not pospool_reduce(g, mode="sum").any()


def test_pospool_rejects_fewer_than_three_channels():
    rng = np.random.default_rng(3)
    g = random_grouped(rng, 2, 3, 2)
    with pytest.raises(ValueError):
        pospool_reduce(g, mode="sum")


def test_pospool_matches_partitioned_scalar_oracle():
    rng = np.random.default_rng(19)
    g = random_grouped(rng, 3, 5, 7)
    # 7 channels split 3/2/2, remainder to the earlier groups
    bounds = [(0, 3), (3, 5), (5, 7)]
    for mode in ("sum", "max"):
        out = pospool_reduce(g, mode=mode)
        for i in range(3):
            for axis, (lo, hi) in enumerate(bounds):
                for c in range(lo, hi):
                    vals = [
                        float(g.rel_positions[i, j, axis]) * float(g.features[i, j, c])
                        for j in range(5)
                    ]
                    want = max(vals) if mode == "max" else sum(vals)
                    assert abs(out[i, c] - want) <= 1e-6


def test_relpos_sum_cancellation():
    g = grouped(
        [[[7.0], [2.0]]],
        rel=[[[1.0, -1.0, 0.0], [0.5, 0.0, 0.0]]],
    )
    out = relpos_sum_reduce(g, mode="sum")
    # first neighbor's weight is 1 - 1 + 0 = 0, second contributes 0.5 * 2
    assert np.allclose(out, [[1.0]], atol=1e-7)


def test_relpos_sum_unit_weight_passthrough():
    g = grouped([[[10.0]]], rel=[[[0.2, 0.3, 0.5]]])
    assert np.allclose(relpos_sum_reduce(g, mode="sum"), [[10.0]], atol=1e-6)


def test_relpos_sum_matches_scalar_oracle():
    rng = np.random.default_rng(23)
    g = random_grouped(rng, 4, 6, 3)
    out = relpos_sum_reduce(g, mode="sum")
    for i in range(4):
        for c in range(3):
            want = 0.0
            for j in range(6):
                w = float(g.rel_positions[i, j].sum())
                want += w * float(g.features[i, j, c])
            assert abs(out[i, c] - want) <= 1e-6


def test_all_reductions_invariant_to_slot_permutation():
    rng = np.random.default_rng(29)
    fns = {
        "isotropic": reduce_features,
        "anisotropic": anisotropic_reduce,
        "pospool": pospool_reduce,
        "relpos_sum": relpos_sum_reduce,
    }
    for trial in range(30):
        g = random_grouped(rng, 3, 7, 4)
        perm = rng.permutation(7)
        shuffled = grouped(
            g.features[:, perm], g.rel_positions[:, perm], g.pad_mask[:, perm]
        )
        for kind, fn in fns.items():
            for mode in REDUCTION_MODES:
                a = fn(g, mode=mode)
                b = fn(shuffled, mode=mode)
                if mode == "max":
                    assert np.array_equal(a, b), (kind, trial)
                else:
                    assert np.allclose(a, b, atol=1e-6), (kind, trial)


def oracle64(g, kind, mode, feats64):
    rel = g.rel_positions.astype(np.float64)
    if kind == "isotropic":
        vals = feats64
    elif kind == "anisotropic":
        m, k, c = feats64.shape
        vals = (rel[:, :, :, None] * feats64[:, :, None, :]).reshape(m, k, 3 * c)
    elif kind == "pospool":
        c = feats64.shape[2]
        scale = np.empty_like(feats64)
        for axis, cols in enumerate(np.array_split(np.arange(c), 3)):
            scale[:, :, cols] = rel[:, :, axis : axis + 1]
        vals = scale * feats64
    else:
        vals = rel.sum(axis=2, keepdims=True) * feats64
    if mode == "max":
        return vals.max(axis=1)
    if mode == "sum":
        return vals.sum(axis=1)
    return vals.mean(axis=1)


def test_reduction_gradients_match_finite_differences():
    rng = np.random.default_rng(31)
    for kind in ("isotropic", "anisotropic", "pospool", "relpos_sum"):
        c = 4 if kind == "pospool" else 2
        g = random_grouped(rng, 3, 4, c)
        spec0 = ReductionSpec(kind=kind, mode="sum")
        width = spec0.out_channels(c)
        d_out = rng.standard_normal((3, width)).astype(np.float32)
        for mode in REDUCTION_MODES:
            out, cache = apply_reduction(g, ReductionSpec(kind=kind, mode=mode))
            analytic = reduction_backward(cache, d_out)

            feats64 = g.features.astype(np.float64)
            h = 1e-3
            fd = np.zeros_like(feats64)
            it = np.nditer(feats64, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                feats64[i] += h
                hi = float((oracle64(g, kind, mode, feats64) * d_out).sum())
                feats64[i] -= 2 * h
                lo = float((oracle64(g, kind, mode, feats64) * d_out).sum())
                feats64[i] += h
                fd[i] = (hi - lo) / (2 * h)
            scale = max(np.max(np.abs(fd)), 1.0)
            assert np.allclose(analytic, fd, rtol=1e-4, atol=1e-4 * scale), (kind, mode)


def test_reduction_spec_validates_names():
    with pytest.raises(ValueError):
        ReductionSpec(kind="median")
    with pytest.raises(ValueError):
        ReductionSpec(mode="min")
