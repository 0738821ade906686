"""Four-stage classification encoder over set-abstraction blocks.

Stage s subsamples its input cloud by ``stage_subsample_ratio`` with farthest
point sampling and runs ``depth`` aggregation blocks at width
``initial_width * 2**s``. The first block of a stage aggregates from the
stage's full input cloud onto the subsampled one; later blocks run on the
subsampled cloud alone. A global channel-wise max pool feeds a two-layer
classifier head (hidden ReLU layer, then a zero-initialized output layer so
an untrained model emits uniform logits).

With ``uniform_block_width`` every block in a stage keeps the stage width
and the stage output is the channel concatenation of all block outputs;
otherwise the blocks chain and the last block's output is the stage output.

Training is plain SGD with momentum on the softmax cross-entropy loss,
gradients accumulated across each mini-batch by the blocks' hand-written
backward passes. Everything is deterministic for a given seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import PointCloud, farthest_point_sample
from .nn import (
    DTYPE,
    MlpLayer,
    SgdOptimizer,
    init_mlp_layer,
    load_checkpoint,
    save_checkpoint,
    softmax_cross_entropy,
)
from .reduction import ReductionSpec
from .set_abstraction import (
    BlockInput,
    ConfigError,
    SaBlock,
    SaConfig,
    SaVariant,
    phase,
)

N_STAGES = 4


@dataclass(frozen=True)
class BackboneConfig:
    variant: SaVariant
    initial_width: int = 16
    depth: int = 1
    mlp_layers: int = 3
    stage_radii: tuple[float, ...] = (0.15, 0.3, 0.6, 1.2)
    stage_k: tuple[int, ...] = (16, 16, 16, 16)
    stage_subsample_ratio: float = 0.25
    num_classes: int = 4
    uniform_block_width: bool = False
    in_features: int = 3
    head_hidden: int = 128

    def __post_init__(self) -> None:
        if len(self.stage_radii) != N_STAGES:
            raise ConfigError(f"need exactly {N_STAGES} stage radii, got {len(self.stage_radii)}")
        if len(self.stage_k) != N_STAGES:
            raise ConfigError(f"need exactly {N_STAGES} stage k values, got {len(self.stage_k)}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.mlp_layers < 1:
            raise ConfigError(f"mlp_layers must be >= 1, got {self.mlp_layers}")
        if not 0 < self.stage_subsample_ratio < 1:
            raise ConfigError(
                f"stage_subsample_ratio must be in (0, 1), got {self.stage_subsample_ratio}"
            )
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.initial_width, self.in_features, self.head_hidden) < 1:
            raise ConfigError("widths must be >= 1")

    def stage_width(self, s: int) -> int:
        return self.initial_width * (2**s)

    def stage_out_width(self, s: int) -> int:
        w = self.stage_width(s)
        return w * self.depth if self.uniform_block_width else w


def scale_width(cfg: BackboneConfig, new_width: int) -> BackboneConfig:
    """New config whose first stage is ``new_width`` channels wide."""
    if new_width < 1:
        raise ConfigError(f"width must be >= 1, got {new_width}")
    return replace(cfg, initial_width=int(new_width))


def scale_depth(cfg: BackboneConfig, new_depth: int) -> BackboneConfig:
    """New config with ``new_depth`` aggregation blocks per stage."""
    if new_depth < 1:
        raise ConfigError(f"depth must be >= 1, got {new_depth}")
    return replace(cfg, depth=int(new_depth))


class ClassifierModel:
    """Backbone stages plus the pooled classification head."""

    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stages: list[list[SaBlock]] = []
        in_ch = cfg.in_features
        for s in range(N_STAGES):
            w = cfg.stage_width(s)
            blocks = []
            for b in range(cfg.depth):
                block_cfg = SaConfig(
                    variant=cfg.variant,
                    in_ch=in_ch if b == 0 else w,
                    out_ch=w,
                    mlp_layers=cfg.mlp_layers,
                    radius=cfg.stage_radii[s],
                    k=cfg.stage_k[s],
                )
                blocks.append(SaBlock(block_cfg, rng))
            self.stages.append(blocks)
            in_ch = cfg.stage_out_width(s)
        self.head_hidden = init_mlp_layer(
            in_ch, cfg.head_hidden, rng, activation="relu", use_bn=False
        )
        self.head_out = init_mlp_layer(
            cfg.head_hidden, cfg.num_classes, rng, activation="none", use_bn=False
        )
        # zero-init the output layer: fresh models emit uniform logits
        self.head_out.weight[...] = 0
        self.head_out.bias[...] = 0

    def named_layers(self) -> list[tuple[str, MlpLayer]]:
        named = []
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                named += block.named_layers(prefix=f"stage{s}.block{b}")
        named.append(("head.hidden", self.head_hidden))
        named.append(("head.out", self.head_out))
        return named

    def min_points(self, training: bool = False) -> int:
        """Smallest input size whose last stage keeps enough rows."""
        need = 2 if training else 1
        n = need
        for _ in range(N_STAGES):
            # invert m = floor(n * ratio + 0.5)
            n = int(np.ceil((n - 0.5) / self.cfg.stage_subsample_ratio))
            n = max(n, need)
        return n


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> ClassifierModel:
    return ClassifierModel(cfg, seed=seed)


def _stage_counts(cfg: BackboneConfig, n_points: int) -> list[int]:
    counts = []
    n = n_points
    for _ in range(N_STAGES):
        n = max(1, int(np.floor(n * cfg.stage_subsample_ratio + 0.5)))
        counts.append(n)
    return counts


def run_stage_batch(
    model: ClassifierModel,
    stage: int,
    clouds: list[PointCloud],
    *,
    training: bool = False,
    cache_out: dict | None = None,
    timings: dict | None = None,
) -> list[PointCloud]:
    """One encoder stage over a batch: subsample, then depth blocks.

    Each block call concatenates the batch's rows, so in training mode the
    normalization statistics are computed over the whole mini-batch.
    """
    cfg = model.cfg
    idxs, subs = [], []
    for cloud in clouds:
        m = max(1, int(np.floor(cloud.n_points * cfg.stage_subsample_ratio + 0.5)))
        with phase(timings, "subsampling"):
            idx = farthest_point_sample(cloud.positions, m)
        idxs.append(idx)
        subs.append(cloud.subsample(idx))
    block_caches: list[dict] = []
    per_block_outs: list[list[PointCloud]] = []
    current = subs
    for b, block in enumerate(model.stages[stage]):
        bcache: dict | None = {} if cache_out is not None else None
        if b == 0:
            inputs = [
                BlockInput(query=sub, support=cloud, query_index=idx)
                for sub, cloud, idx in zip(subs, clouds, idxs)
            ]
        else:
            inputs = [BlockInput(query=c) for c in current]
        outs = block.forward_batch(
            inputs, training=training, cache_out=bcache, timings=timings
        )
        per_block_outs.append(outs)
        current = outs
        if bcache is not None:
            block_caches.append(bcache)
    if cfg.uniform_block_width and cfg.depth > 1:
        results = [
            PointCloud(
                positions=sub.positions,
                features=np.concatenate(
                    [per_block_outs[b][i].features for b in range(cfg.depth)], axis=1
                ),
                label=clouds[i].label,
            )
            for i, sub in enumerate(subs)
        ]
    else:
        results = current
    if cache_out is not None:
        cache_out.update(
            idxs=idxs,
            n_in=[c.n_points for c in clouds],
            in_ch=clouds[0].n_channels,
            blocks=block_caches,
            out_widths=[outs[0].n_channels for outs in per_block_outs],
        )
    return results


def run_stage(
    model: ClassifierModel,
    stage: int,
    cloud: PointCloud,
    *,
    training: bool = False,
    cache_out: dict | None = None,
    timings: dict | None = None,
) -> PointCloud:
    """One encoder stage on a single cloud (batch of one)."""
    return run_stage_batch(
        model, stage, [cloud], training=training, cache_out=cache_out,
        timings=timings,
    )[0]


def _stage_backward_batch(
    model: ClassifierModel, stage: int, cache: dict, d_outs: list[np.ndarray]
) -> list[np.ndarray]:
    cfg = model.cfg
    blocks = model.stages[stage]
    batch = len(d_outs)
    if cfg.uniform_block_width and cfg.depth > 1:
        splits = np.cumsum(cache["out_widths"][:-1])
        per_cloud = [np.split(d, splits, axis=1) for d in d_outs]
        d_blocks = [[per_cloud[i][b] for i in range(batch)] for b in range(cfg.depth)]
    else:
        d_blocks = [[None] * batch for _ in range(len(blocks) - 1)] + [list(d_outs)]
    grads = d_blocks[-1]
    for b in range(len(blocks) - 1, 0, -1):
        d_ins = blocks[b].backward_batch(cache["blocks"][b], grads)
        prev = d_blocks[b - 1]
        grads = [
            d if p is None else p + d for p, d in zip(prev, d_ins)
        ]
    d0s = blocks[0].backward_batch(cache["blocks"][0], grads)
    out = []
    for i, d0 in enumerate(d0s):
        if d0.shape[0] == cache["n_in"][i]:
            out.append(d0)
        else:
            # separable family consumed the subsampled rows; scatter back
            d_full = np.zeros((cache["n_in"][i], cache["in_ch"]), dtype=DTYPE)
            np.add.at(d_full, cache["idxs"][i], d0)
            out.append(d_full)
    return out


def forward_classify_batch(
    model: ClassifierModel,
    clouds: list[PointCloud],
    *,
    training: bool = False,
    cache_out: dict | None = None,
    timings: dict | None = None,
) -> np.ndarray:
    """Logits (batch, num_classes).

    With two or more clouds the per-cloud size requirement relaxes to the
    eval minimum: normalization rows come from the whole batch.
    """
    if not clouds:
        raise ValueError("empty batch")
    need = model.min_points(training=training and len(clouds) == 1)
    for cloud in clouds:
        if cloud.n_points < need:
            raise ValueError(
                f"cloud has {cloud.n_points} points; this backbone needs >= {need}"
            )
        if cloud.n_channels != model.cfg.in_features:
            raise ValueError(
                f"cloud has {cloud.n_channels} feature channels, model expects "
                f"{model.cfg.in_features}"
            )
    stage_caches: list[dict] = []
    current = clouds
    for s in range(N_STAGES):
        scache: dict | None = {} if cache_out is not None else None
        current = run_stage_batch(
            model, s, current, training=training, cache_out=scache, timings=timings
        )
        if scache is not None:
            stage_caches.append(scache)
    with phase(timings, "computation"):
        pool_args, pooled_rows = [], []
        for cloud in current:
            feats = cloud.features  # (n_last, C)
            pool_arg = feats.argmax(axis=0)  # first max on ties
            pool_args.append(pool_arg)
            pooled_rows.append(feats[pool_arg, np.arange(feats.shape[1])])
        pooled = np.stack(pooled_rows, axis=0)
        h, hid_cache = model.head_hidden.forward(pooled, training=training)
        logits, out_cache = model.head_out.forward(h, training=training)
    if cache_out is not None:
        cache_out.update(
            stages=stage_caches, pool_args=pool_args,
            n_last=[c.n_points for c in current],
            head_hidden=hid_cache, head_out=out_cache,
        )
    return logits


def forward_classify(
    model: ClassifierModel,
    cloud: PointCloud,
    *,
    training: bool = False,
    cache_out: dict | None = None,
    timings: dict | None = None,
) -> np.ndarray:
    """Logits (num_classes,) for one cloud."""
    logits = forward_classify_batch(
        model, [cloud], training=training, cache_out=cache_out, timings=timings
    )
    return logits[0]


def backward_classify_batch(
    model: ClassifierModel, cache: dict, d_logits: np.ndarray
) -> list[np.ndarray]:
    """Accumulate parameter grads; returns per-cloud input-feature grads."""
    d_h = model.head_out.backward(cache["head_out"], d_logits)
    d_pooled = model.head_hidden.backward(cache["head_hidden"], d_h)
    d_feats = []
    for i, (pool_arg, n_last) in enumerate(zip(cache["pool_args"], cache["n_last"])):
        c = d_pooled.shape[1]
        d_f = np.zeros((n_last, c), dtype=DTYPE)
        d_f[pool_arg, np.arange(c)] = d_pooled[i]
        d_feats.append(d_f)
    for s in range(N_STAGES - 1, -1, -1):
        d_feats = _stage_backward_batch(model, s, cache["stages"][s], d_feats)
    return d_feats


def backward_classify(
    model: ClassifierModel, cache: dict, d_logits: np.ndarray
) -> np.ndarray:
    """Single-cloud wrapper: grad w.r.t. that cloud's input features."""
    return backward_classify_batch(model, cache, d_logits[None, :])[0]


# -- training ---------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    final_test_acc: float = 0.0
    wall_seconds: float = 0.0


def evaluate(model: ClassifierModel, clouds: list[PointCloud], batch_size: int = 32) -> float:
    """Top-1 accuracy over labeled clouds.

    Eval-mode normalization is point-wise, so batching only changes speed.
    """
    if not clouds:
        raise ValueError("empty evaluation set")
    correct = 0
    for start in range(0, len(clouds), batch_size):
        chunk = clouds[start : start + batch_size]
        logits = forward_classify_batch(model, chunk)
        preds = np.argmax(logits, axis=1)
        correct += sum(int(p) == c.label for p, c in zip(preds, chunk))
    return correct / len(clouds)


def train_classifier(
    model: ClassifierModel,
    train_set: list[PointCloud],
    test_set: list[PointCloud],
    epochs: int,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-3,
    batch_size: int = 8,
    seed: int = 0,
    lr_drop_epoch: int | None = None,
    lr_drop_factor: float = 0.1,
    log: "callable | None" = None,
) -> TrainReport:
    """Mini-batch SGD; deterministic for a given seed and dataset order.

    ``lr_drop_epoch`` multiplies the rate by ``lr_drop_factor`` once, at the
    start of that epoch; it settles the late-training accuracy wobble.
    """
    if not train_set:
        raise ValueError("empty training set")
    opt = SgdOptimizer(
        model.named_layers(), lr=lr, momentum=momentum, weight_decay=weight_decay
    )
    rng = np.random.default_rng(seed)
    report = TrainReport()
    t_start = time.perf_counter()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        if lr_drop_epoch is not None and epoch == lr_drop_epoch:
            opt.lr *= lr_drop_factor
        order = rng.permutation(len(train_set))
        losses = []
        correct = 0
        for start in range(0, len(order), batch_size):
            batch = [train_set[int(i)] for i in order[start : start + batch_size]]
            opt.zero_grads()
            cache: dict = {}
            logits = forward_classify_batch(model, batch, training=True, cache_out=cache)
            d_logits = np.empty_like(logits)
            for row, cloud in enumerate(batch):
                loss, d_row = softmax_cross_entropy(logits[row], cloud.label)
                if not np.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss {loss} at epoch {epoch}, batch row {row} "
                        f"(label {cloud.label}, logits {logits[row]}); "
                        f"lower the learning rate"
                    )
                d_logits[row] = d_row
                losses.append(loss)
                correct += int(np.argmax(logits[row])) == cloud.label
            backward_classify_batch(model, cache, d_logits)
            opt.step(grad_scale=1.0 / len(batch))
        test_acc = evaluate(model, test_set) if test_set else float("nan")
        stats = EpochStats(
            epoch=epoch,
            train_loss=float(np.mean(losses)),
            train_acc=correct / len(order),
            test_acc=test_acc,
            seconds=time.perf_counter() - t0,
        )
        report.epochs.append(stats)
        if log is not None:
            log(stats)
    report.final_test_acc = report.epochs[-1].test_acc if report.epochs else float("nan")
    report.wall_seconds = time.perf_counter() - t_start
    return report


def write_train_csv(path: str, report: TrainReport) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,train_acc,test_acc,seconds\n")
        for e in report.epochs:
            fh.write(
                f"{e.epoch},{e.train_loss:.6f},{e.train_acc:.4f},"
                f"{e.test_acc:.4f},{e.seconds:.3f}\n"
            )


# -- config and model serialization ------------------------------------------


def backbone_config_to_dict(cfg: BackboneConfig) -> dict:
    return {
        "variant": cfg.variant.kind,
        "reduction_kind": cfg.variant.reduction.kind,
        "reduction_mode": cfg.variant.reduction.mode,
        "include_pads": cfg.variant.reduction.include_pads,
        "initial_width": cfg.initial_width,
        "depth": cfg.depth,
        "mlp_layers": cfg.mlp_layers,
        "stage_radii": list(cfg.stage_radii),
        "stage_k": list(cfg.stage_k),
        "stage_subsample_ratio": cfg.stage_subsample_ratio,
        "num_classes": cfg.num_classes,
        "uniform_block_width": cfg.uniform_block_width,
        "in_features": cfg.in_features,
        "head_hidden": cfg.head_hidden,
    }


DEFAULT_REDUCTION_KIND = {
    "vanilla": "isotropic",
    "preconv": "isotropic",
    "separable": "isotropic",
    "assa": "anisotropic",
}


def backbone_config_from_dict(d: dict) -> BackboneConfig:
    d = dict(d)
    kind = d.pop("variant", "assa")
    if kind not in DEFAULT_REDUCTION_KIND:
        raise ConfigError(f"unknown variant {kind!r}")
    red = ReductionSpec(
        kind=d.pop("reduction_kind", DEFAULT_REDUCTION_KIND[kind]),
        mode=d.pop("reduction_mode", "max"),
        include_pads=bool(d.pop("include_pads", True)),
    )
    variant = SaVariant(kind=kind, reduction=red)
    fields = {}
    for key in (
        "initial_width", "depth", "mlp_layers", "num_classes",
        "in_features", "head_hidden",
    ):
        if key in d:
            fields[key] = int(d.pop(key))
    if "stage_radii" in d:
        fields["stage_radii"] = tuple(float(v) for v in d.pop("stage_radii"))
    if "stage_k" in d:
        raw = d.pop("stage_k")
        fields["stage_k"] = tuple(int(v) for v in raw)
    if "stage_subsample_ratio" in d:
        fields["stage_subsample_ratio"] = float(d.pop("stage_subsample_ratio"))
    if "uniform_block_width" in d:
        fields["uniform_block_width"] = bool(d.pop("uniform_block_width"))
    if d:
        raise ConfigError(f"unknown config keys: {sorted(d)}")
    return BackboneConfig(variant=variant, **fields)


_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False}


def _parse_scalar(text: str):
    low = text.lower()
    if low in _BOOL_WORDS:
        return _BOOL_WORDS[low]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip("\"'")


def parse_flat_config(path: str) -> dict:
    """Read ``key = value`` lines; ``#`` comments; commas make lists."""
    out: dict = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not key or not value:
                raise ConfigError(f"{path}:{lineno}: empty key or value")
            if "," in value:
                out[key] = [_parse_scalar(v.strip()) for v in value.split(",") if v.strip()]
            else:
                out[key] = _parse_scalar(value)
    return out


TRAINING_KEYS = (
    "epochs", "lr", "momentum", "weight_decay", "batch_size", "seed",
    "lr_drop_epoch", "lr_drop_factor",
)


def split_train_config(raw: dict) -> tuple[dict, dict]:
    """Separate training hyperparameters from backbone keys."""
    train = {k: raw.pop(k) for k in list(raw) if k in TRAINING_KEYS}
    return raw, train


def save_model(path: str, model: ClassifierModel) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, layer in model.named_layers():
        for key, arr in layer.state_arrays().items():
            arrays[f"{name}.{key}"] = arr
    save_checkpoint(path, arrays, {"backbone": backbone_config_to_dict(model.cfg)})


def load_model(path: str) -> ClassifierModel:
    arrays, meta = load_checkpoint(path)
    cfg = backbone_config_from_dict(meta["backbone"])
    model = ClassifierModel(cfg, seed=0)
    for name, layer in model.named_layers():
        for key, arr in layer.state_arrays().items():
            stored = arrays.get(f"{name}.{key}")
            if stored is None:
                raise ConfigError(f"checkpoint missing array {name}.{key}")
            if stored.shape != arr.shape:
                raise ConfigError(
                    f"checkpoint array {name}.{key} has shape {stored.shape}, "
                    f"model expects {arr.shape}"
                )
            arr[...] = stored
    return model
