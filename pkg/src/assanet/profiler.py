"""Cost accounting and measurement for aggregation blocks.

Three tools live here:

* :func:`count_flops`: analytic multiply-add counts per bucket
  (``pre_mlp``, ``grouping_gather``, ``reduction``, ``post_mlp``,
  ``shortcut``, plus ``bn_relu`` tracked separately), derived from layer
  shapes. ``ratio_vs_vanilla`` is the family-level closed form
  ``(C*C*N*K*L) / (C*C*N*L + C*N*K)``: the cost of transforming every
  gathered neighbor divided by the cost of transforming points once and
  paying a weighted aggregation, which approaches K for wide layers.
* :func:`measure_latency`: wall-clock decomposition into ``subsampling``,
  ``grouping`` and ``computation`` buckets with warmup, run statistics and
  automatic batching when a bucket is too fast for the clock.
* :func:`extract_feature_patterns`: voxel-grid vote maps of where in space a
  first-stage neuron's strongest neighborhoods sit.
"""

from __future__ import annotations

import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, farthest_point_sample
from .network import BackboneConfig, ClassifierModel, _stage_counts, run_stage
from .set_abstraction import SaBlock, SaConfig, SaVariant, phase

MAC_BUCKETS = ("pre_mlp", "grouping_gather", "reduction", "post_mlp", "shortcut")
LATENCY_BUCKETS = ("subsampling", "grouping", "computation")


# -- analytic FLOPs ----------------------------------------------------------


@dataclass
class FlopsReport:
    buckets: dict[str, int]
    per_stage: list[dict[str, int]]
    total: int
    ratio_vs_vanilla: float


def flops_ratio_closed_form(c: int, n: int, k: int, layers: int) -> float:
    """Neighbor-transform cost over point-transform-plus-aggregation cost."""
    return (c * c * n * k * layers) / (c * c * n * layers + c * n * k)


def _pairs_cost(widths: list[int], rows: int) -> int:
    return rows * sum(widths[i] * widths[i + 1] for i in range(len(widths) - 1))


def count_sa_flops(
    cfg: SaConfig, n_queries: int, n_support: int | None = None
) -> dict[str, int]:
    """Multiply-add counts for one block, by bucket.

    Conventions: a linear layer over R rows costs R*in*out; gathers cost one
    op per moved value (features plus the 3 position components); reductions
    cost one op per scanned value of the reduced width; batch norm costs 2
    and ReLU 1 per element, tracked under ``bn_relu`` and excluded from the
    closed-form ratio.
    """
    if n_support is None:
        n_support = n_queries
    k = cfg.k
    kind = cfg.variant.kind
    out = cfg.out_ch
    counts = {b: 0 for b in MAC_BUCKETS}
    counts["bn_relu"] = 0
    if kind == "vanilla":
        in0 = cfg.in_ch + (3 if cfg.use_edge_concat else 0)
        widths = [in0] + [out] * cfg.mlp_layers
        counts["grouping_gather"] = n_queries * k * (cfg.in_ch + 3)
        counts["pre_mlp"] = _pairs_cost(widths, n_queries * k)
        counts["reduction"] = n_queries * k * out
        counts["bn_relu"] = n_queries * k * out * 3 * cfg.mlp_layers
    elif kind == "preconv":
        widths = [cfg.in_ch] + [out] * cfg.mlp_layers
        counts["pre_mlp"] = _pairs_cost(widths, n_support)
        counts["grouping_gather"] = n_queries * k * (out + 3)
        counts["reduction"] = n_queries * k * out
        counts["bn_relu"] = n_support * out * 3 * cfg.mlp_layers
    else:
        n_src = n_queries if cfg.support_from_subsampled else n_support
        pre_n = cfg.resolved_pre_layers
        post_n = cfg.mlp_layers - pre_n
        res_w = cfg.residual_channels
        pre_widths = [cfg.in_ch] + [out] * (pre_n - 1) + [res_w]
        counts["pre_mlp"] = _pairs_cost(pre_widths, n_src)
        counts["grouping_gather"] = n_queries * k * (res_w + 3)
        reduced_w = cfg.variant.reduction.out_channels(res_w)
        counts["reduction"] = n_queries * k * reduced_w
        bn_relu = n_src * sum(pre_widths[1:]) * 3
        if post_n > 0:
            post_widths = [reduced_w] + [out] * post_n
            counts["post_mlp"] = _pairs_cost(post_widths, n_queries)
            bn_relu += n_queries * sum(post_widths[1:]) * 3
        if kind == "assa":
            counts["shortcut"] = n_queries * res_w * out
        bn_relu += n_queries * out  # final ReLU after the residual add
        counts["bn_relu"] = bn_relu
    return counts


def _merge(into: dict[str, int], other: dict[str, int]) -> None:
    for key, val in other.items():
        into[key] = into.get(key, 0) + val


def count_flops(
    cfg: SaConfig | BackboneConfig, n_points: int
) -> FlopsReport:
    """Analytic cost report for a single block or a full backbone.

    For a single block ``n_points`` is the query count and the support is
    taken to be the same size, matching the closed form's convention. For a
    backbone the per-stage counts use the actual farthest-point-sampling
    cascade, and the head's two linear layers are appended as a final
    pseudo-stage under ``post_mlp``.
    """
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    if isinstance(cfg, SaConfig):
        buckets = count_sa_flops(cfg, n_points)
        ratio = flops_ratio_closed_form(cfg.out_ch, n_points, cfg.k, cfg.mlp_layers)
        if cfg.variant.kind == "vanilla":
            ratio = 1.0
        total = sum(buckets.values())
        return FlopsReport(
            buckets=buckets, per_stage=[dict(buckets)], total=total,
            ratio_vs_vanilla=ratio,
        )
    counts = _stage_counts(cfg, n_points)
    per_stage: list[dict[str, int]] = []
    totals = {b: 0 for b in MAC_BUCKETS}
    totals["bn_relu"] = 0
    numerator = 0.0
    denominator = 0.0
    in_ch = cfg.in_features
    n_in = n_points
    for s in range(len(counts)):
        m = counts[s]
        w = cfg.stage_width(s)
        stage = {b: 0 for b in MAC_BUCKETS}
        stage["bn_relu"] = 0
        for b in range(cfg.depth):
            block_cfg = SaConfig(
                variant=cfg.variant,
                in_ch=in_ch if b == 0 else w,
                out_ch=w,
                mlp_layers=cfg.mlp_layers,
                radius=cfg.stage_radii[s],
                k=cfg.stage_k[s],
            )
            _merge(stage, count_sa_flops(block_cfg, m, n_in if b == 0 else m))
            numerator += w * w * m * cfg.stage_k[s] * cfg.mlp_layers
            denominator += w * w * m * cfg.mlp_layers + w * m * cfg.stage_k[s]
        per_stage.append(stage)
        _merge(totals, stage)
        in_ch = cfg.stage_out_width(s)
        n_in = m
    head = {b: 0 for b in MAC_BUCKETS}
    head["bn_relu"] = cfg.head_hidden
    head["post_mlp"] = in_ch * cfg.head_hidden + cfg.head_hidden * cfg.num_classes
    per_stage.append(head)
    _merge(totals, head)
    ratio = 1.0 if cfg.variant.kind == "vanilla" else numerator / denominator
    return FlopsReport(
        buckets=totals, per_stage=per_stage, total=sum(totals.values()),
        ratio_vs_vanilla=ratio,
    )


# -- latency -----------------------------------------------------------------


@dataclass
class BucketStats:
    mean_us: float
    p50_us: float
    p95_us: float
    min_us: float
    max_us: float
    batch: int = 1  # >1 when runs were batched to beat clock resolution


@dataclass
class LatencyReport:
    input_size: int
    runs: int
    warmup: int
    threads: int
    buckets: dict[str, BucketStats] = field(default_factory=dict)


def current_thread_count() -> int:
    try:
        from threadpoolctl import threadpool_info

        infos = threadpool_info()
        return max((int(i.get("num_threads", 1)) for i in infos), default=1)
    except Exception:
        return int(os.environ.get("OMP_NUM_THREADS", os.cpu_count() or 1))


def pin_threads(n: int):
    """Best-effort cap on BLAS threads; returns a context manager."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=n)
    except Exception:
        import contextlib

        os.environ.setdefault("OMP_NUM_THREADS", str(n))
        warnings.warn(
            "threadpoolctl unavailable; thread cap not enforced for already "
            "loaded BLAS libraries",
            RuntimeWarning,
        )
        return contextlib.nullcontext()


def _clock_resolution_ns() -> float:
    return max(time.get_clock_info("perf_counter").resolution * 1e9, 1.0)


def measure_latency(
    make_runner,
    input_sizes: list[int],
    runs: int = 10,
    warmup: int = 3,
) -> list[LatencyReport]:
    """Time one runner per input size, splitting wall time into buckets.

    ``make_runner(n)`` must return a zero-argument callable producing a dict
    of bucket name to elapsed nanoseconds for one pass. Warmup passes are
    discarded. If any bucket of a probe pass lands under 10 clock ticks, the
    measured passes are batched (summed over ``batch`` calls and divided) so
    the numbers stay above the timer floor; the batch factor is reported.
    """
    if runs < 1 or warmup < 0:
        raise ValueError(f"need runs >= 1 and warmup >= 0, got {runs}, {warmup}")
    floor_ns = 10.0 * _clock_resolution_ns()
    reports = []
    for n in input_sizes:
        run = make_runner(n)
        for _ in range(warmup):
            run()
        probe = run()
        batch = 1
        smallest = min(probe.values()) if probe else floor_ns
        while smallest * batch < floor_ns and batch < 4096:
            batch *= 2
        samples: dict[str, list[float]] = {}
        for _ in range(runs):
            if batch == 1:
                t = run()
            else:
                t: dict[str, int] = {}
                for _ in range(batch):
                    for key, val in run().items():
                        t[key] = t.get(key, 0) + val
                t = {key: val / batch for key, val in t.items()}
            for key, val in t.items():
                samples.setdefault(key, []).append(val / 1000.0)  # ns -> us
        report = LatencyReport(
            input_size=n, runs=runs, warmup=warmup, threads=current_thread_count()
        )
        for key, vals in samples.items():
            arr = np.asarray(vals)
            report.buckets[key] = BucketStats(
                mean_us=float(arr.mean()),
                p50_us=float(np.percentile(arr, 50)),
                p95_us=float(np.percentile(arr, 95)),
                min_us=float(arr.min()),
                max_us=float(arr.max()),
                batch=batch,
            )
        reports.append(report)
    return reports


def make_sa_latency_runner(
    variant: SaVariant,
    channels: int = 64,
    k: int = 32,
    mlp_layers: int = 3,
    radius: float = 0.15,
    subsample_ratio: float = 0.25,
    seed: int = 0,
):
    """Runner factory for one block over a random uniform cloud.

    The returned factory regenerates a seeded cloud per input size and times
    the three phases of one subsample-group-compute pass.
    """

    def factory(n: int):
        rng = np.random.default_rng(seed + n)
        positions = rng.random((n, 3)).astype(np.float32)
        feats = rng.standard_normal((n, channels)).astype(np.float32)
        cloud = PointCloud(positions=positions, features=feats)
        cfg = SaConfig(
            variant=variant, in_ch=channels, out_ch=channels,
            mlp_layers=mlp_layers, radius=radius, k=k,
        )
        block = SaBlock(cfg, rng)
        m = max(1, int(np.floor(n * subsample_ratio + 0.5)))

        def run() -> dict[str, int]:
            t: dict[str, int] = {}
            with phase(t, "subsampling"):
                idx = farthest_point_sample(cloud.positions, m)
            sub = cloud.subsample(idx)
            block.forward(sub, cloud, query_index=idx, timings=t)
            for key in LATENCY_BUCKETS:
                t.setdefault(key, 0)
            return t

        return run

    return factory


def write_latency_csv(path: str, reports: list[LatencyReport]) -> None:
    """The documented report schema, one row per bucket and input size."""
    with open(path, "w") as fh:
        fh.write("bucket,input_size,mean_us,p50_us,p95_us,runs,threads\n")
        for rep in reports:
            for bucket in LATENCY_BUCKETS:
                stats = rep.buckets.get(bucket)
                if stats is None:
                    continue
                fh.write(
                    f"{bucket},{rep.input_size},{stats.mean_us:.3f},"
                    f"{stats.p50_us:.3f},{stats.p95_us:.3f},{rep.runs},{rep.threads}\n"
                )


# -- activation patterns -----------------------------------------------------


@dataclass
class NeuronPattern:
    neuron: int
    points: np.ndarray  # (P, 3) positions inside retained voxels
    cell_votes: dict[tuple[int, int, int], int]
    top_activation: float


def vote_compactness(cell_votes: dict) -> float:
    """Fraction of all votes held by the top decile of occupied cells."""
    if not cell_votes:
        return 0.0
    counts = sorted(cell_votes.values(), reverse=True)
    top = max(1, int(np.ceil(len(counts) / 10)))
    return float(sum(counts[:top]) / sum(counts))


def _stage0_activations(model: ClassifierModel, cloud: PointCloud):
    """First-stage output features plus each query's neighborhood positions."""
    cache: dict = {}
    out = run_stage(model, 0, cloud, training=False, cache_out=cache)
    block0 = cache["blocks"][0]
    table = block0["tables"][0]
    if model.cfg.variant.kind in ("vanilla", "preconv"):
        support_positions = cloud.positions
    else:
        support_positions = cloud.positions[cache["idxs"][0]]
    members = support_positions[table.indices]  # (m, k, 3)
    return out.features, members, table.pad_mask


def extract_feature_patterns(
    model: ClassifierModel,
    clouds: list[PointCloud],
    neuron_count: int = 8,
    top_m: int = 20,
    voxel_size: float = 0.1,
    keep_fraction: float = 0.25,
    neurons: list[int] | None = None,
) -> list[NeuronPattern]:
    """Spatial vote maps for the strongest first-stage activations.

    For each selected neuron, the ``top_m`` query neighborhoods with the
    highest (strictly positive) activation across all clouds vote their
    member positions into a voxel grid of side ``voxel_size`` over the unit
    cube; cells with at least ``keep_fraction`` of the busiest cell's votes
    are retained. Neurons default to the ``neuron_count`` channels with the
    highest activation variance. A neuron that never activates yields an
    empty pattern and a warning.
    """
    if not clouds:
        raise ValueError("need at least one cloud")
    if voxel_size <= 0 or not 0 < keep_fraction <= 1:
        raise ValueError("voxel_size must be positive and keep_fraction in (0, 1]")
    acts = []      # per cloud: (m, W)
    members = []   # per cloud: (m, k, 3)
    masks = []     # per cloud: (m, k) pad mask
    for cloud in clouds:
        a, mem, pad = _stage0_activations(model, cloud)
        acts.append(a)
        members.append(mem)
        masks.append(pad)
    all_acts = np.concatenate(acts, axis=0)  # (sum m, W)
    width = all_acts.shape[1]
    if neurons is None:
        order = np.argsort(all_acts.var(axis=0))[::-1]
        neurons = [int(i) for i in order[: min(neuron_count, width)]]
    else:
        for i in neurons:
            if not 0 <= i < width:
                raise ValueError(f"neuron {i} out of range [0, {width})")
    patterns = []
    for neuron in neurons:
        scored = []  # (activation, cloud_idx, query_idx)
        for ci, a in enumerate(acts):
            col = a[:, neuron]
            for qi in np.nonzero(col > 0)[0]:
                scored.append((float(col[qi]), ci, int(qi)))
        if not scored:
            warnings.warn(
                f"neuron {neuron} never activates; empty pattern", RuntimeWarning
            )
            patterns.append(
                NeuronPattern(neuron=neuron, points=np.zeros((0, 3), dtype=np.float32),
                              cell_votes={}, top_activation=0.0)
            )
            continue
        scored.sort(key=lambda t: -t[0])
        votes: dict[tuple[int, int, int], int] = {}
        cell_points: dict[tuple[int, int, int], list[np.ndarray]] = {}
        for act, ci, qi in scored[:top_m]:
            pts = members[ci][qi][~masks[ci][qi]]  # non-pad members
            cells = np.floor(np.clip(pts, 0.0, 1.0 - 1e-6) / voxel_size).astype(int)
            for pt, cell in zip(pts, map(tuple, cells)):
                votes[cell] = votes.get(cell, 0) + 1
                cell_points.setdefault(cell, []).append(pt)
        cutoff = max(1, int(np.ceil(keep_fraction * max(votes.values()))))
        kept = [c for c, v in votes.items() if v >= cutoff]
        pts = (
            np.concatenate([np.stack(cell_points[c]) for c in kept])
            if kept
            else np.zeros((0, 3), dtype=np.float32)
        )
        patterns.append(
            NeuronPattern(
                neuron=neuron, points=pts, cell_votes=votes,
                top_activation=scored[0][0],
            )
        )
    return patterns


def write_pattern_csv(path: str, pattern: NeuronPattern) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,z\n")
        for p in pattern.points:
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r}\n")
