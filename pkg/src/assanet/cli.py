"""Command-line interface.

Subcommands: ``bench``, ``flops``, ``equiv-check``, ``train``, ``eval``,
``gen-data``, ``patterns``. Exit codes are stable: 0 on success, 1 when a
requested check fails at runtime (equivalence mismatch, training blow-up) or
a required input (dataset, checkpoint) is missing, 2 on bad usage or bad
config. ``ASSA_SEED`` supplies the default seed wherever ``--seed`` is
omitted.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import datagen, network, profiler
from .nn import CheckpointError
from .reduction import REDUCTION_KINDS, REDUCTION_MODES, ReductionSpec
from .set_abstraction import (
    ConfigError,
    SaVariant,
    VARIANT_KINDS,
    preconv_vanilla_max_error,
)

DEFAULT_BENCH_SIZES = (1024, 4096, 10000, 15000)


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("ASSA_SEED")
    if env is None or not env.strip():
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"ASSA_SEED must be an integer, got {env!r}") from None


def _variant(kind: str, reduction_kind: str | None, mode: str) -> SaVariant:
    if reduction_kind is None:
        reduction_kind = network.DEFAULT_REDUCTION_KIND[kind]
    return SaVariant(kind=kind, reduction=ReductionSpec(kind=reduction_kind, mode=mode))


def cmd_bench(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    kinds = [args.variant]
    if args.compare and args.compare != args.variant:
        kinds.append(args.compare)
    results: dict[str, list[profiler.LatencyReport]] = {}
    with profiler.pin_threads(args.threads):
        for kind in kinds:
            factory = profiler.make_sa_latency_runner(
                _variant(kind, None, args.reduction_mode),
                channels=args.channels,
                k=args.k,
                mlp_layers=args.layers,
                radius=args.radius,
                seed=seed,
            )
            reports = profiler.measure_latency(
                factory, args.sizes, runs=args.runs, warmup=args.warmup
            )
            path = args.out
            if kind != args.variant:
                stem, dot, ext = args.out.rpartition(".")
                path = f"{stem}_{kind}{dot}{ext}" if dot else f"{args.out}_{kind}"
            profiler.write_latency_csv(path, reports)
            results[kind] = reports
            print(f"[{kind}] wrote {path}")
            for rep in reports:
                total = sum(s.mean_us for s in rep.buckets.values())
                parts = "  ".join(
                    f"{b}={rep.buckets[b].mean_us:.1f}us"
                    for b in profiler.LATENCY_BUCKETS
                    if b in rep.buckets
                )
                print(
                    f"  n={rep.input_size:<6d} total={total:.1f}us  {parts}  "
                    f"(runs={rep.runs}, threads={rep.threads})"
                )
    if args.compare:
        base_by_size = {
            r.input_size: r for r in results.get(args.compare, results[args.variant])
        }
        print(
            f"computation bucket, {args.variant} vs {args.compare} "
            f"(speedup = {args.compare} / {args.variant}):"
        )
        print(f"  {'n':>6s}  {args.variant:>14s}  {args.compare:>14s}  speedup")
        for rep in results[args.variant]:
            base = base_by_size[rep.input_size]
            mine = rep.buckets["computation"].mean_us
            theirs = base.buckets["computation"].mean_us
            ratio = theirs / max(mine, 1e-9)
            print(
                f"  {rep.input_size:>6d}  {mine:>12.1f}us  {theirs:>12.1f}us  "
                f"{ratio:>6.2f}x"
            )
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    if args.config:
        raw = network.parse_flat_config(args.config)
        raw, _ = network.split_train_config(raw)
        cfg = network.backbone_config_from_dict(raw)
        report = profiler.count_flops(cfg, args.n)
        label = f"backbone ({cfg.variant.kind})"
    else:
        from .set_abstraction import SaConfig

        cfg = SaConfig(
            variant=_variant(args.variant, None, args.reduction_mode),
            in_ch=args.channels,
            out_ch=args.channels,
            mlp_layers=args.layers,
            radius=args.radius,
            k=args.k,
        )
        report = profiler.count_flops(cfg, args.n)
        label = f"single block ({args.variant})"
    print(f"{label}, n={args.n}")
    for bucket, val in report.buckets.items():
        print(f"  {bucket:<16s} {val:>14,d}")
    print(f"  {'total':<16s} {report.total:>14,d}")
    print(f"  ratio_vs_vanilla {report.ratio_vs_vanilla:.4f}")
    return 0


def cmd_equiv_check(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    worst: dict = {}
    err = preconv_vanilla_max_error(
        instances=args.seeds,
        n_points=args.points,
        channels=args.channels,
        k=args.k,
        seed=seed,
        use_edge_concat=args.use_edge_concat,
        worst_out=worst,
    )
    ok = err <= args.tolerance
    label = "vanilla+edge-concat" if args.use_edge_concat else "vanilla"
    print(
        f"preconv vs {label}: max |difference| = {err:.3e} over "
        f"{args.seeds} instance(s) (tolerance {args.tolerance:g}): "
        f"{'OK' if ok else 'MISMATCH'}"
    )
    if not ok:
        print("worst instance:")
        for key, val in worst.items():
            print(f"  {key} = {val}")
    return 0 if ok else 1


def _load_backbone_args(args: argparse.Namespace) -> tuple[network.BackboneConfig, dict]:
    raw: dict = {}
    train_keys: dict = {}
    if args.config:
        raw = network.parse_flat_config(args.config)
        raw, train_keys = network.split_train_config(raw)
    if args.variant is not None:
        raw["variant"] = args.variant
        raw.pop("reduction_kind", None)
    if args.width is not None:
        raw["initial_width"] = args.width
    if args.depth is not None:
        raw["depth"] = args.depth
    return network.backbone_config_from_dict(raw), train_keys


def _pick(cli_value, file_train: dict, key: str, default, cast):
    """CLI flag beats config file beats built-in default."""
    if cli_value is not None:
        return cli_value
    if key in file_train:
        return cast(file_train[key])
    return default


def cmd_train(args: argparse.Namespace) -> int:
    cfg, file_train = _load_backbone_args(args)
    if args.scale_width is not None:
        cfg = network.scale_width(cfg, int(round(cfg.initial_width * args.scale_width)))
    if args.scale_depth is not None:
        cfg = network.scale_depth(cfg, args.scale_depth)
    epochs = _pick(args.epochs, file_train, "epochs", 30, int)
    lr = _pick(args.lr, file_train, "lr", 0.05, float)
    batch = _pick(args.batch_size, file_train, "batch_size", 8, int)
    momentum = _pick(args.momentum, file_train, "momentum", 0.9, float)
    weight_decay = _pick(args.weight_decay, file_train, "weight_decay", 1e-3, float)
    lr_drop_epoch = _pick(args.lr_drop_epoch, file_train, "lr_drop_epoch", None, int)
    lr_drop_factor = _pick(args.lr_drop_factor, file_train, "lr_drop_factor", 0.1, float)
    seed = resolve_seed(
        args.seed if args.seed is not None else file_train.get("seed")
    )
    try:
        train_set = datagen.load_dataset(args.data, "train")
        test_set = datagen.load_dataset(args.data, "test")
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    labels = {c.label for c in train_set}
    if max(labels) >= cfg.num_classes:
        raise ConfigError(
            f"dataset has label {max(labels)} but num_classes={cfg.num_classes}"
        )
    model = network.build_backbone(cfg, seed=seed)
    print(
        f"training {cfg.variant.kind} (width={cfg.initial_width}, depth={cfg.depth}) "
        f"on {len(train_set)} clouds, {epochs} epochs, lr={lr}, seed={seed}"
    )
    try:
        report = network.train_classifier(
            model, train_set, test_set, epochs=epochs, lr=lr, momentum=momentum,
            weight_decay=weight_decay, batch_size=batch, seed=seed,
            lr_drop_epoch=lr_drop_epoch, lr_drop_factor=lr_drop_factor,
            log=lambda e: print(
                f"  epoch {e.epoch:>3d}  loss={e.train_loss:.4f}  "
                f"train={e.train_acc:.3f}  test={e.test_acc:.3f}  ({e.seconds:.1f}s)"
            ),
        )
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"final test accuracy: {report.final_test_acc:.4f}")
    if args.checkpoint:
        network.save_model(args.checkpoint, model)
        print(f"saved checkpoint to {args.checkpoint}")
    if args.report:
        network.write_train_csv(args.report, report)
        print(f"wrote training report to {args.report}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    try:
        model = network.load_model(args.checkpoint)
        clouds = datagen.load_dataset(args.data, args.split)
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    acc = network.evaluate(model, clouds)
    print(f"{args.split} accuracy: {acc:.4f} ({len(clouds)} clouds)")
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    seed = resolve_seed(args.seed)
    train, test = datagen.make_splits(
        args.per_class, args.test_per_class, n_points=args.points,
        noise_sigma=args.noise, seed=seed, variant=args.variant,
    )
    names = datagen.DATASET_VARIANTS[args.variant]
    datagen.save_dataset(args.out, "train", train, names)
    datagen.save_dataset(args.out, "test", test, names)
    print(
        f"wrote {len(train)} train + {len(test)} test clouds "
        f"({args.variant}, {args.points} pts) under {args.out}"
    )
    return 0


def cmd_patterns(args: argparse.Namespace) -> int:
    try:
        model = network.load_model(args.checkpoint)
        clouds = datagen.load_dataset(args.data, args.split)
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    patterns = profiler.extract_feature_patterns(
        model, clouds, neuron_count=args.neurons, top_m=args.top_m,
        voxel_size=args.voxel_size,
    )
    os.makedirs(args.out, exist_ok=True)
    for pat in patterns:
        path = os.path.join(args.out, f"neuron_{pat.neuron:03d}.csv")
        profiler.write_pattern_csv(path, pat)
        print(
            f"neuron {pat.neuron:>3d}: {pat.points.shape[0]:>5d} points in "
            f"{len(pat.cell_votes)} cells, compactness="
            f"{profiler.vote_compactness(pat.cell_votes):.3f} -> {path}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="assanet",
        description="Point-cloud aggregation kernels: benchmarks, cost "
        "accounting, and a small classification trainer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="latency decomposition over input sizes")
    p.add_argument("--variant", choices=VARIANT_KINDS, default="assa")
    p.add_argument(
        "--compare", choices=VARIANT_KINDS, default=None, metavar="BASELINE",
        help="also run BASELINE and print per-size computation-bucket speedups",
    )
    p.add_argument("--sizes", type=int, nargs="+", default=list(DEFAULT_BENCH_SIZES))
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--radius", type=float, default=0.15)
    p.add_argument("--reduction-mode", choices=REDUCTION_MODES, default="max")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default 1)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="analytic multiply-add counts")
    p.add_argument("--variant", choices=VARIANT_KINDS, default="assa")
    p.add_argument("--n", type=int, default=1024, help="query count")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--k", type=int, default=32)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--radius", type=float, default=0.15)
    p.add_argument("--reduction-mode", choices=REDUCTION_MODES, default="max")
    p.add_argument("--config", default=None, help="backbone config file instead")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser(
        "equiv-check",
        help="verify the point-transform block matches the neighbor-transform "
        "block with shared weights",
    )
    p.add_argument(
        "--seeds", type=int, default=100, help="number of randomized instances"
    )
    p.add_argument("--points", type=int, default=64)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument(
        "--use-edge-concat", action="store_true",
        help="negative control: concat relative positions on the "
        "neighbor-transform side, which breaks the equivalence",
    )
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_equiv_check)

    p = sub.add_parser("train", help="train the classifier on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--variant", choices=VARIANT_KINDS, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument(
        "--scale-width", type=float, default=None, metavar="FACTOR",
        help="multiply the first-stage width by FACTOR before building",
    )
    p.add_argument(
        "--scale-depth", type=int, default=None, metavar="BLOCKS",
        help="use BLOCKS aggregation blocks per stage",
    )
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--lr-drop-epoch", type=int, default=None)
    p.add_argument("--lr-drop-factor", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--report", default=None, help="per-epoch CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=32)
    p.add_argument("--test-per-class", type=int, default=8)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--variant", choices=sorted(datagen.DATASET_VARIANTS), default="surfaces")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("patterns", help="voxel vote maps of first-stage neurons")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--neurons", type=int, default=8)
    p.add_argument("--top-m", type=int, default=20)
    p.add_argument("--voxel-size", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patterns)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
