"""Synthetic point-cloud datasets.

Two families, both living in the unit cube with positions copied into the
feature channels (the network sees raw geometry):

* ``surfaces``: sphere, cube, torus, plane. Globally distinct silhouettes;
  any reasonable pooling separates them.
* ``sheets``: flat, wave, grid, rough height fields over a disc. The three
  non-flat classes share the same wavelength and the same height variance,
  and every cloud gets a random heading and phase, so what separates them is
  the number of crest directions a neighbourhood contains: one, two crossed,
  or many. Reductions that discard offset directions have little to work
  with.

Sampling is uniform over each surface's area, then isotropic Gaussian jitter
of ``noise_sigma`` is added. Everything is deterministic per seed.

Disk layout: ``<root>/<split>/<class>/<id>.csv`` plus a ``manifest.txt`` at
the root listing ``relative_path,label`` for every file present.
"""

from __future__ import annotations

import os
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .geometry import PointCloud, load_point_cloud_csv, save_point_cloud_csv
from .nn import DTYPE

SURFACE_CLASSES = ("sphere", "cube", "torus", "plane")
SHEET_CLASSES = ("flat", "wave", "grid", "rough")
DATASET_VARIANTS = {"surfaces": SURFACE_CLASSES, "sheets": SHEET_CLASSES}

_CENTER = np.array([0.5, 0.5, 0.5])


def _sample_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return _CENTER + 0.5 * v


def _sample_cube(n: int, rng: np.random.Generator) -> np.ndarray:
    # surface of the axis-aligned cube [0.1, 0.9]^3, faces weighted equally
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(0.1, 0.9, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    side = np.where(face % 2 == 0, 0.1, 0.9)
    for a in range(3):
        sel = axis == a
        others = [i for i in range(3) if i != a]
        pts[sel, a] = side[sel]
        pts[np.ix_(sel, others)] = uv[sel]
    return pts


def _sample_torus(n: int, rng: np.random.Generator) -> np.ndarray:
    # ring radius 0.3, tube radius 0.12, axis z; area-uniform via rejection
    big_r, small_r = 0.3, 0.12
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        need = n - filled
        u = rng.uniform(0, 2 * np.pi, size=2 * need)
        v = rng.uniform(0, 2 * np.pi, size=2 * need)
        w = rng.uniform(0, 1, size=2 * need)
        accept = w <= (big_r + small_r * np.cos(v)) / (big_r + small_r)
        u, v = u[accept][:need], v[accept][:need]
        got = u.size
        ring = big_r + small_r * np.cos(v)
        out[filled : filled + got, 0] = ring * np.cos(u)
        out[filled : filled + got, 1] = ring * np.sin(u)
        out[filled : filled + got, 2] = small_r * np.sin(v)
        filled += got
    return _CENTER + out


def _sample_plane(n: int, rng: np.random.Generator) -> np.ndarray:
    pts = np.empty((n, 3))
    pts[:, :2] = rng.uniform(0.0, 1.0, size=(n, 2))
    pts[:, 2] = 0.5
    return pts


_SHEET_AMPLITUDE = 0.08
_SHEET_WAVELENGTH = 0.35
_ROUGH_WAVES = 8


@lru_cache(maxsize=8)
def _height_template(n: int) -> np.ndarray:
    """Shared sorted height values for every wavy sheet of n points."""
    q = norm.ppf((np.arange(n) + 0.5) / n)
    q *= (_SHEET_AMPLITUDE / np.sqrt(2.0)) / max(float(q.std()), 1e-12)
    return q


def _sheet_heights(
    kind: str, x: np.ndarray, y: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    a = _SHEET_AMPLITUDE
    w = 2 * np.pi / _SHEET_WAVELENGTH
    if kind == "flat":
        return np.zeros_like(x)
    if kind == "wave":
        # crests along a single direction
        z = a * np.sin(w * x + rng.uniform(0, 2 * np.pi))
    elif kind == "grid":
        # two crossed crest directions everywhere; sqrt(2) matches the
        # height variance of the single wave
        z = (
            np.sqrt(2.0) * a
            * np.sin(w * x + rng.uniform(0, 2 * np.pi))
            * np.sin(w * y + rng.uniform(0, 2 * np.pi))
        )
    elif kind == "rough":
        # same wavelength as the wave, spread over many random crest
        # directions: no neighbourhood has a dominant one
        z = np.zeros_like(x)
        for _ in range(_ROUGH_WAVES):
            heading = rng.uniform(0, 2 * np.pi)
            u = np.cos(heading) * x + np.sin(heading) * y
            z += np.sin(w * u + rng.uniform(0, 2 * np.pi))
    else:
        raise ValueError(f"unknown sheet kind {kind!r}")
    # rank-remap heights onto one shared quantile template: every wavy
    # cloud then carries the exact same multiset of height values, so no
    # pointwise statistic separates the classes, only where on the sheet
    # each height sits
    order = np.argsort(z, kind="stable")
    out = np.empty_like(z)
    out[order] = _height_template(z.size)
    return out


def _sample_sheet(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    # uniform over a disc of radius 0.45 so the per-cloud z-rotation stays
    # inside the unit cube
    r = 0.45 * np.sqrt(rng.uniform(0, 1, size=n))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    x, y = r * np.cos(theta), r * np.sin(theta)
    z = _sheet_heights(kind, x, y, rng)
    rot = rng.uniform(0, 2 * np.pi)
    cos_r, sin_r = np.cos(rot), np.sin(rot)
    pts = np.stack([cos_r * x - sin_r * y, sin_r * x + cos_r * y, z], axis=1)
    return _CENTER + pts


_SAMPLERS = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "torus": _sample_torus,
    "plane": _sample_plane,
}


def generate_cloud(
    kind: str,
    n_points: int,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> PointCloud:
    """One labeled cloud of the named class; features are the positions."""
    if n_points < 8:
        raise ValueError(f"n_points must be >= 8, got {n_points}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    if rng is None:
        rng = np.random.default_rng(seed)
    if kind in _SAMPLERS:
        pts = _SAMPLERS[kind](n_points, rng)
        label = SURFACE_CLASSES.index(kind)
    elif kind in SHEET_CLASSES:
        pts = _sample_sheet(kind, n_points, rng)
        label = SHEET_CLASSES.index(kind)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    pts = pts.astype(DTYPE)
    return PointCloud(positions=pts, features=pts.copy(), label=label)


def make_clouds(
    per_class: int,
    n_points: int = 512,
    noise_sigma: float = 0.01,
    seed: int = 0,
    variant: str = "surfaces",
) -> list[PointCloud]:
    """Balanced list of labeled clouds, deterministic per seed."""
    if variant not in DATASET_VARIANTS:
        raise ValueError(f"unknown dataset variant {variant!r}")
    rng = np.random.default_rng(seed)
    clouds = []
    for kind in DATASET_VARIANTS[variant]:
        for _ in range(per_class):
            clouds.append(generate_cloud(kind, n_points, noise_sigma, rng=rng))
    return clouds


def make_dataset(
    per_class: int,
    split: float,
    seed: int = 0,
    n_points: int = 512,
    noise_sigma: float = 0.01,
    variant: str = "surfaces",
) -> tuple[list[PointCloud], list[PointCloud]]:
    """Balanced, disjoint train/test split of ``per_class`` clouds per class.

    ``split`` is the training fraction; both sides keep equal per-class
    counts (train gets round(per_class * split) of each class).
    """
    if not 0 < split < 1:
        raise ValueError(f"split must be in (0, 1), got {split}")
    if per_class < 2:
        raise ValueError(f"per_class must be >= 2 to split, got {per_class}")
    n_train = int(round(per_class * split))
    n_train = min(max(n_train, 1), per_class - 1)
    return make_splits(
        n_train, per_class - n_train, n_points=n_points,
        noise_sigma=noise_sigma, seed=seed, variant=variant,
    )


def make_splits(
    per_class_train: int,
    per_class_test: int,
    n_points: int = 512,
    noise_sigma: float = 0.01,
    seed: int = 0,
    variant: str = "surfaces",
) -> tuple[list[PointCloud], list[PointCloud]]:
    """Disjoint train/test lists (test drawn after train from one stream)."""
    rng = np.random.default_rng(seed)
    names = DATASET_VARIANTS[variant]
    train, test = [], []
    for kind in names:
        for _ in range(per_class_train):
            train.append(generate_cloud(kind, n_points, noise_sigma, rng=rng))
        for _ in range(per_class_test):
            test.append(generate_cloud(kind, n_points, noise_sigma, rng=rng))
    return train, test


def nearest_centroid_accuracy(
    train: list[PointCloud], test: list[PointCloud]
) -> float:
    """Sanity baseline: classify by nearest class-mean position centroid."""
    labels = sorted({c.label for c in train})
    centroids = np.stack(
        [
            np.mean([c.positions.mean(axis=0) for c in train if c.label == l], axis=0)
            for l in labels
        ]
    )
    correct = 0
    for cloud in test:
        d = np.linalg.norm(centroids - cloud.positions.mean(axis=0), axis=1)
        correct += labels[int(np.argmin(d))] == cloud.label
    return correct / len(test)


def class_names_for(clouds: list[PointCloud], variant: str) -> tuple[str, ...]:
    return DATASET_VARIANTS[variant]


def save_dataset(
    root: str, split: str, clouds: list[PointCloud], class_names: tuple[str, ...]
) -> None:
    """Write ``<root>/<split>/<class>/<id>.csv`` and refresh the manifest."""
    rootp = Path(root)
    counters: dict[str, int] = {}
    for cloud in clouds:
        if cloud.label is None or not 0 <= cloud.label < len(class_names):
            raise ValueError(f"cloud label {cloud.label} has no class name")
        cname = class_names[cloud.label]
        i = counters.get(cname, 0)
        counters[cname] = i + 1
        d = rootp / split / cname
        d.mkdir(parents=True, exist_ok=True)
        save_point_cloud_csv(str(d / f"{i:04d}.csv"), cloud)
    _rewrite_manifest(rootp, class_names)


def _rewrite_manifest(rootp: Path, class_names: tuple[str, ...]) -> None:
    lines = []
    for split_dir in sorted(p for p in rootp.iterdir() if p.is_dir()):
        for class_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
            if class_dir.name not in class_names:
                continue
            label = class_names.index(class_dir.name)
            for f in sorted(class_dir.glob("*.csv")):
                rel = f.relative_to(rootp)
                lines.append(f"{rel.as_posix()},{label}")
    (rootp / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_dataset(root: str, split: str) -> list[PointCloud]:
    """Read one split back via the manifest; labels must agree with the CSVs."""
    rootp = Path(root)
    manifest = rootp / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt under {root}")
    clouds = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        rel, _, label_text = line.rpartition(",")
        if not rel:
            raise ValueError(f"{manifest}:{lineno}: expected 'path,label'")
        if Path(rel).parts[0] != split:
            continue
        cloud = load_point_cloud_csv(str(rootp / rel))
        label = int(label_text)
        if cloud.label is not None and cloud.label != label:
            raise ValueError(
                f"{rel}: file label {cloud.label} disagrees with manifest {label}"
            )
        cloud.label = label
        clouds.append(cloud)
    if not clouds:
        raise ValueError(f"no clouds found for split {split!r} under {root}")
    return clouds
