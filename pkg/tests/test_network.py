import math
import os

import numpy as np
import pytest

from assanet.datagen import make_splits
from assanet.geometry import PointCloud
from assanet.network import (
    BackboneConfig,
    ClassifierModel,
    ConfigError,
    N_STAGES,
    TRAINING_KEYS,
    backbone_config_from_dict,
    backbone_config_to_dict,
    build_backbone,
    evaluate,
    forward_classify,
    forward_classify_batch,
    load_model,
    parse_flat_config,
    run_stage,
    save_model,
    scale_depth,
    scale_width,
    split_train_config,
    train_classifier,
    write_train_csv,
)
from assanet.reduction import ReductionSpec
from assanet.set_abstraction import SaVariant

ASSA = SaVariant(
    kind="assa", reduction=ReductionSpec(kind="anisotropic", mode="max")
)
VANILLA = SaVariant(
    kind="vanilla", reduction=ReductionSpec(kind="isotropic", mode="max")
)


def tiny_cfg(variant=ASSA, **kw):
    kw.setdefault("initial_width", 16)
    kw.setdefault("depth", 1)
    return BackboneConfig(variant=variant, **kw)


def random_cloud(rng, n, label=None):
    pts = rng.random((n, 3)).astype(np.float32)
    return PointCloud(positions=pts, features=pts.copy(), label=label)


def test_stage_widths_double_each_stage():
    cfg = tiny_cfg()
    assert [cfg.stage_width(s) for s in range(N_STAGES)] == [16, 32, 64, 128]
    model = build_backbone(cfg, seed=0)
    for s, blocks in enumerate(model.stages):
        assert blocks[0].cfg.out_ch == 16 * 2**s


def test_parameter_count_matches_closed_form():
    # vanilla, depth 1, edge concat adds 3 input channels to the first layer
    cfg = tiny_cfg(variant=VANILLA, mlp_layers=2)
    model = build_backbone(cfg, seed=0)
    expected = 0
    in_ch = 3
    for s in range(N_STAGES):
        w = 16 * 2**s
        widths = [in_ch + 3] + [w, w]
        for a, b in zip(widths[:-1], widths[1:]):
            expected += a * b + b + 2 * b  # weight, bias, gamma, beta
        in_ch = w
    expected += in_ch * 128 + 128  # head hidden (no BN)
    expected += 128 * 4 + 4  # head out
    got = sum(
        arr.size
        for _, layer in model.named_layers()
        for arr in layer.parameters().values()
    )
    assert got == expected


def test_scale_width_doubles_every_stage():
    cfg = tiny_cfg()
    wide = scale_width(cfg, 32)
    assert [wide.stage_width(s) for s in range(N_STAGES)] == [32, 64, 128, 256]
    with pytest.raises(ConfigError):
        scale_width(cfg, 0)


def test_scale_depth_adds_blocks():
    deep = scale_depth(tiny_cfg(), 3)
    model = build_backbone(deep, seed=0)
    assert all(len(blocks) == 3 for blocks in model.stages)
    with pytest.raises(ConfigError):
        scale_depth(tiny_cfg(), 0)


def test_large_config_builds():
    cfg = BackboneConfig(variant=ASSA, initial_width=128, depth=3)
    model = build_backbone(cfg, seed=0)
    assert model.stages[3][2].cfg.out_ch == 1024


def test_min_points_inverts_subsampling():
    model = build_backbone(tiny_cfg(), seed=0)
    need = model.min_points()
    rng = np.random.default_rng(0)
    forward_classify(model, random_cloud(rng, need))  # no raise
    with pytest.raises(ValueError):
        forward_classify(model, random_cloud(rng, need - 1))


def test_run_stage_subsamples_by_ratio():
    model = build_backbone(tiny_cfg(), seed=0)
    rng = np.random.default_rng(1)
    out = run_stage(model, 0, random_cloud(rng, 512))
    assert out.n_points == 128
    assert out.n_channels == 16


def test_fresh_model_emits_uniform_logits():
    model = build_backbone(tiny_cfg(), seed=3)
    rng = np.random.default_rng(3)
    logits = forward_classify(model, random_cloud(rng, 256))
    assert logits.shape == (4,)
    assert np.array_equal(logits, np.zeros(4, dtype=np.float32))


def test_same_seed_builds_identical_models():
    a = build_backbone(tiny_cfg(), seed=5)
    b = build_backbone(tiny_cfg(), seed=5)
    for (na, la), (nb, lb) in zip(a.named_layers(), b.named_layers()):
        assert na == nb
        for key, arr in la.state_arrays().items():
            assert np.array_equal(arr, lb.state_arrays()[key]), (na, key)


def test_identical_clouds_share_logits_in_a_batch():
    model = build_backbone(tiny_cfg(), seed=7)
    # randomize biases and normalization state so eval activations are alive
    # (a freshly built model decays to zero by the last stage) and the check
    # is not vacuous
    rng = np.random.default_rng(7)
    for _, layer in model.named_layers():
        layer.bias[...] = rng.standard_normal(layer.out_channels).astype(
            np.float32
        ) * 0.1
        if layer.use_bn:
            layer.running_mean[...] = rng.standard_normal(layer.out_channels) * 0.2
            layer.running_var[...] = rng.uniform(0.5, 2.0, layer.out_channels)
            layer.beta[...] = rng.standard_normal(layer.out_channels) * 0.1
    model.head_out.weight[...] = rng.standard_normal(
        model.head_out.weight.shape
    ).astype(np.float32)
    cloud = random_cloud(rng, 128)
    logits = forward_classify_batch(model, [cloud, cloud])
    assert np.array_equal(logits[0], logits[1])
    assert not np.array_equal(logits[0], np.zeros(4))


def test_wrong_channel_count_rejected():
    model = build_backbone(tiny_cfg(), seed=0)
    rng = np.random.default_rng(0)
    bad = PointCloud(
        positions=rng.random((128, 3)).astype(np.float32),
        features=rng.random((128, 5)).astype(np.float32),
    )
    with pytest.raises(ValueError):
        forward_classify(model, bad)


def make_two_class_sets(rng, n_per=6, n_points=96):
    train, test = [], []
    for bucket, count in ((train, n_per), (test, 4)):
        for label in (0, 1):
            for _ in range(count):
                pts = rng.random((n_points, 3)).astype(np.float32)
                if label == 1:
                    pts[:, 2] = pts[:, 2] * 0.05  # squashed slab vs full cube
                bucket.append(
                    PointCloud(positions=pts, features=pts.copy(), label=label)
                )
    return train, test


def test_training_reduces_loss_and_zero_lr_does_nothing():
    rng = np.random.default_rng(11)
    train, test = make_two_class_sets(rng)
    cfg = tiny_cfg(num_classes=2)

    model = build_backbone(cfg, seed=0)
    frozen = {
        name + "." + k: arr.copy()
        for name, layer in model.named_layers()
        for k, arr in layer.parameters().items()
    }
    train_classifier(model, train, [], epochs=1, lr=0.0, momentum=0.0, seed=0)
    for name, layer in model.named_layers():
        for k, arr in layer.parameters().items():
            assert np.array_equal(arr, frozen[name + "." + k]), (name, k)

    model = build_backbone(cfg, seed=0)
    report = train_classifier(
        model, train, test, epochs=4, lr=0.05, seed=0, batch_size=4
    )
    assert report.epochs[0].train_loss <= math.log(2) + 0.1
    assert report.epochs[-1].train_loss < report.epochs[0].train_loss
    assert report.final_test_acc == report.epochs[-1].test_acc
    assert report.wall_seconds > 0


def test_training_is_deterministic_per_seed():
    rng = np.random.default_rng(13)
    train, test = make_two_class_sets(rng, n_per=3)
    cfg = tiny_cfg(num_classes=2)
    reports = []
    for _ in range(2):
        model = build_backbone(cfg, seed=2)
        reports.append(
            train_classifier(model, train, test, epochs=2, lr=0.05, seed=9)
        )
    a, b = reports
    assert [e.train_loss for e in a.epochs] == [e.train_loss for e in b.epochs]
    assert [e.test_acc for e in a.epochs] == [e.test_acc for e in b.epochs]


def test_lr_drop_takes_effect_at_epoch():
    rng = np.random.default_rng(17)
    train, _ = make_two_class_sets(rng, n_per=3)
    cfg = tiny_cfg(num_classes=2)
    model = build_backbone(cfg, seed=0)
    # drop to zero after the first epoch: epochs 1+ must not move the weights
    train_classifier(
        model, train, [], epochs=1, lr=0.05, momentum=0.0, seed=0
    )
    snapshot = {
        name + "." + k: arr.copy()
        for name, layer in model.named_layers()
        for k, arr in layer.parameters().items()
    }
    model2 = build_backbone(cfg, seed=0)
    train_classifier(
        model2, train, [], epochs=3, lr=0.05, momentum=0.0, seed=0,
        lr_drop_epoch=1, lr_drop_factor=0.0,
    )
    for name, layer in model2.named_layers():
        for k, arr in layer.parameters().items():
            assert np.array_equal(arr, snapshot[name + "." + k]), (name, k)


def test_non_finite_loss_raises_with_guidance():
    rng = np.random.default_rng(19)
    train, _ = make_two_class_sets(rng, n_per=2)
    model = build_backbone(tiny_cfg(num_classes=2), seed=0)
    model.head_out.weight[...] = np.nan
    with pytest.raises(RuntimeError, match="non-finite"):
        train_classifier(model, train, [], epochs=1, lr=0.01, seed=0)


def test_evaluate_is_batch_size_invariant():
    rng = np.random.default_rng(23)
    _, test = make_two_class_sets(rng, n_per=2)
    model = build_backbone(tiny_cfg(num_classes=2), seed=1)
    model.head_out.weight[...] = rng.standard_normal(
        model.head_out.weight.shape
    ).astype(np.float32)
    assert evaluate(model, test, batch_size=3) == evaluate(model, test, batch_size=32)


def test_uniform_block_width_concatenates_blocks():
    cfg = tiny_cfg(depth=2, uniform_block_width=True)
    assert cfg.stage_out_width(0) == 32
    model = build_backbone(cfg, seed=0)
    rng = np.random.default_rng(0)
    out = run_stage(model, 0, random_cloud(rng, 256))
    assert out.n_channels == 32
    # stage 1 consumes the concatenated width
    assert model.stages[1][0].cfg.in_ch == 32


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(29)
    model = build_backbone(tiny_cfg(), seed=4)
    model.head_out.weight[...] = rng.standard_normal(
        model.head_out.weight.shape
    ).astype(np.float32)
    cloud = random_cloud(rng, 128)
    want = forward_classify(model, cloud)
    path = str(tmp_path / "model.ckpt")
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.cfg == model.cfg
    assert np.array_equal(forward_classify(loaded, cloud), want)


def test_config_dict_round_trip():
    cfg = tiny_cfg(depth=2, mlp_layers=2, head_hidden=64)
    again = backbone_config_from_dict(backbone_config_to_dict(cfg))
    assert again == cfg


def test_config_from_dict_rejects_unknowns():
    with pytest.raises(ConfigError):
        backbone_config_from_dict({"variant": "assa", "bogus": 1})
    with pytest.raises(ConfigError):
        backbone_config_from_dict({"variant": "pointnet"})


def test_config_defaults_pick_matching_reduction():
    cfg = backbone_config_from_dict({"variant": "assa"})
    assert cfg.variant.reduction.kind == "anisotropic"
    cfg = backbone_config_from_dict({"variant": "separable"})
    assert cfg.variant.reduction.kind == "isotropic"


def test_flat_config_parsing(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(
        "# comment line\n"
        "variant = assa\n"
        "initial_width = 32  # trailing comment\n"
        "stage_radii = 0.1, 0.2, 0.4, 0.8\n"
        "uniform_block_width = true\n"
        "lr = 0.05\n"
        "epochs = 3\n"
        "lr_drop_epoch = 2\n"
    )
    raw = parse_flat_config(str(path))
    model_keys, train_keys = split_train_config(raw)
    assert set(train_keys) == {"lr", "epochs", "lr_drop_epoch"}
    assert train_keys["lr"] == 0.05
    cfg = backbone_config_from_dict(model_keys)
    assert cfg.initial_width == 32
    assert cfg.stage_radii == (0.1, 0.2, 0.4, 0.8)
    assert cfg.uniform_block_width is True
    assert set(TRAINING_KEYS) >= {"lr_drop_epoch", "lr_drop_factor"}


def test_flat_config_rejects_garbage(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("just some words\n")
    with pytest.raises(ConfigError):
        parse_flat_config(str(path))


def test_write_train_csv(tmp_path):
    rng = np.random.default_rng(31)
    train, test = make_two_class_sets(rng, n_per=2)
    model = build_backbone(tiny_cfg(num_classes=2), seed=0)
    report = train_classifier(model, train, test, epochs=2, lr=0.05, seed=0)
    path = tmp_path / "log.csv"
    write_train_csv(str(path), report)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,test_acc,seconds"
    assert len(lines) == 3


def test_backbone_on_real_datagen_smoke():
    train, test = make_splits(
        2, 1, n_points=128, noise_sigma=0.01, seed=0, variant="sheets"
    )
    model = build_backbone(tiny_cfg(), seed=0)
    report = train_classifier(model, train, test, epochs=1, lr=0.03, seed=0)
    assert 0.0 <= report.final_test_acc <= 1.0
