"""Synthetic paired 2D-3D scenes with parameterized per-modality domain shift.

A scene holds one cluster of points per class. Clusters are placed by
backprojecting a pixel position inside a per-class image tile, at a depth
chosen so the whole cluster projects inside the tile's inner region; image
footprints of different classes therefore never share or neighbor a patch
cell. The "2D backbone" stand-in is a frozen class codebook with exactly
orthonormal rows, rendered into the patch grid by splatting the projected
points and then corrupted per domain. At zero corruption a nearest-codebook
classifier on lifted features is exact.

Per-sample randomness is split into a geometry stream and a corruption
stream; the corruption stream always draws unit-scale noise and scales it by
the domain's knobs, so samples generated from domains that differ only in a
corruption magnitude share their underlying noise realization.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import containers
from .geometry import CameraIntrinsics, PatchFeatureMap, RigidTransform, lift_features, project_points

SCHEMA_VERSION = 1
BEAM_COUNT = 6  # discrete elevation levels of the beam-like resampling
TILE_MARGIN_PATCHES = 2  # patch cells between a tile border and its inner region

# Per-class box half-extents in meters (cycled when num_classes > 6):
# horizontal slab, vertical pole, frontal wall, compact blob, diffuse blob, depth rod.
SHAPE_TABLE = np.array([
    [0.85, 0.06, 0.85],
    [0.07, 0.85, 0.07],
    [0.85, 0.85, 0.06],
    [0.30, 0.30, 0.30],
    [0.80, 0.80, 0.80],
    [0.07, 0.07, 0.85],
])


class DatasetVersionError(RuntimeError):
    """On-disk schema version differs from what this code writes."""


class DatasetIntegrityError(RuntimeError):
    """Manifest references samples that are missing or unreadable."""


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=140.0, fy=140.0, cx=192.0, cy=128.0, width=384, height=256)


@dataclass
class ClassGeometry:
    """Spatial prototypes: per-class box half-extents and the cluster depth range.

    ``extent_jitter`` j rescales each half-extent per sample by a factor drawn
    from U[1-j, 1+j], blurring the class shape signatures so the 3D task does
    not saturate.
    """
    half_extents: np.ndarray  # (K, 3) meters
    depth_range: tuple[float, float] = (5.5, 9.0)
    extent_jitter: float = 0.0

    def __post_init__(self):
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64)
        if not 0.0 <= self.extent_jitter < 1.0:
            raise ValueError("extent_jitter must lie in [0, 1)")

    @classmethod
    def for_classes(cls, num_classes: int, extent_jitter: float = 0.0) -> "ClassGeometry":
        idx = np.arange(num_classes) % len(SHAPE_TABLE)
        return cls(SHAPE_TABLE[idx].copy(), extent_jitter=extent_jitter)


@dataclass
class SceneSpec:
    num_points: int = 512
    num_classes: int = 6
    layout_seed: int = 0
    feature_dim: int = 64
    patch_size: int = 16
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    class_geometry: ClassGeometry | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_points < self.num_classes:
            raise ValueError("need at least one point per class")
        if self.feature_dim < self.num_classes:
            raise ValueError("feature_dim must be >= num_classes for an orthonormal codebook")
        if self.class_geometry is None:
            self.class_geometry = ClassGeometry.for_classes(self.num_classes)

    def grid_shape(self) -> tuple[int, int]:
        return (-(-self.intrinsics.height // self.patch_size),
                -(-self.intrinsics.width // self.patch_size))

    def to_dict(self) -> dict:
        return {
            "num_points": self.num_points,
            "num_classes": self.num_classes,
            "layout_seed": self.layout_seed,
            "feature_dim": self.feature_dim,
            "patch_size": self.patch_size,
            "intrinsics": self.intrinsics.to_array().tolist(),
            "half_extents": self.class_geometry.half_extents.tolist(),
            "depth_range": list(self.class_geometry.depth_range),
            "extent_jitter": self.class_geometry.extent_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            num_points=d["num_points"],
            num_classes=d["num_classes"],
            layout_seed=d["layout_seed"],
            feature_dim=d["feature_dim"],
            patch_size=d["patch_size"],
            intrinsics=CameraIntrinsics.from_array(np.array(d["intrinsics"])),
            class_geometry=ClassGeometry(np.array(d["half_extents"]),
                                         tuple(d["depth_range"]),
                                         d.get("extent_jitter", 0.0)),
        )


@dataclass
class DomainSpec:
    name: str
    feature_noise_2d: float = 0.0
    feature_dropout_2d: float = 0.0
    geometry_jitter_3d: float = 0.0
    resample_pattern_3d: str = "uniform"  # or "beam"
    label_available: bool = False

    def __post_init__(self):
        if self.feature_noise_2d < 0 or self.geometry_jitter_3d < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0.0 <= self.feature_dropout_2d <= 1.0:
            raise ValueError("feature_dropout_2d must lie in [0, 1]")
        if self.resample_pattern_3d not in ("uniform", "beam"):
            raise ValueError("resample_pattern_3d must be 'uniform' or 'beam'")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "feature_noise_2d": self.feature_noise_2d,
            "feature_dropout_2d": self.feature_dropout_2d,
            "geometry_jitter_3d": self.geometry_jitter_3d,
            "resample_pattern_3d": self.resample_pattern_3d,
            "label_available": self.label_available,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(**d)


@dataclass
class PairedSample:
    sample_id: str
    points: np.ndarray  # (N, 3) float32
    labels: np.ndarray  # (N,) int64
    patch_features: PatchFeatureMap
    intrinsics: CameraIntrinsics
    extrinsics: RigidTransform

    def __post_init__(self):
        if len(self.labels) != len(self.points):
            raise ValueError("labels and points must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")


@dataclass
class DatasetSplit:
    source_train: list[str]
    target_train: list[str]
    target_val: list[str]
    target_test: list[str]

    def __post_init__(self):
        groups = [self.source_train, self.target_train, self.target_val, self.target_test]
        all_ids = [i for g in groups for i in g]
        if len(set(all_ids)) != len(all_ids):
            raise ValueError("splits must be disjoint")
        if not self.target_val or not self.target_test:
            raise ValueError("target_val and target_test must be nonempty")

    def to_dict(self) -> dict:
        return {"source_train": self.source_train, "target_train": self.target_train,
                "target_val": self.target_val, "target_test": self.target_test}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(**d)


def class_codebook(spec: SceneSpec) -> np.ndarray:
    """Frozen (K, C) codebook with exactly orthonormal rows, shared across domains."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([spec.layout_seed, 0xC0DE])))
    gauss = rng.standard_normal((spec.feature_dim, spec.feature_dim))
    q, _ = np.linalg.qr(gauss)
    return np.ascontiguousarray(q[:, :spec.num_classes].T)


def _tile_layout(spec: SceneSpec) -> tuple[int, int]:
    cols = math.ceil(math.sqrt(spec.num_classes))
    rows = math.ceil(spec.num_classes / cols)
    return rows, cols


def _class_point_counts(spec: SceneSpec) -> np.ndarray:
    base, rem = divmod(spec.num_points, spec.num_classes)
    counts = np.full(spec.num_classes, base, dtype=np.int64)
    counts[:rem] += 1
    return counts


def _sample_cluster(rng: np.random.Generator, spec: SceneSpec, class_id: int, tile: int,
                    n: int, pattern: str) -> np.ndarray:
    """Points of one class, guaranteed to project inside its tile's inner region."""
    intr = spec.intrinsics
    rows, cols = _tile_layout(spec)
    tile_w = intr.width / cols
    tile_h = intr.height / rows
    margin = TILE_MARGIN_PATCHES * spec.patch_size
    iw = tile_w / 2 - margin  # inner half-extents, pixels
    ih = tile_h / 2 - margin
    if iw <= 0 or ih <= 0:
        raise ValueError("image too small for the class tile layout; enlarge it or reduce classes")
    tr, tc = divmod(tile, cols)
    center_u = (tc + 0.5) * tile_w + rng.uniform(-0.15, 0.15) * iw
    center_v = (tr + 0.5) * tile_h + rng.uniform(-0.15, 0.15) * ih
    # distance from the sampled center to the nearest inner boundary, per axis
    avail_u = iw - abs(center_u - (tc + 0.5) * tile_w)
    avail_v = ih - abs(center_v - (tr + 0.5) * tile_h)

    hx, hy, hz = spec.class_geometry.half_extents[class_id] * rng.uniform(
        1.0 - spec.class_geometry.extent_jitter,
        1.0 + spec.class_geometry.extent_jitter, size=3)
    lo, hi = spec.class_geometry.depth_range
    z_fit = hz + max(intr.fx * hx / avail_u, intr.fy * hy / avail_v)
    z_lo = max(lo, z_fit * 1.02)
    if z_lo > hi:
        raise ValueError(f"class {class_id} geometry cannot project inside its tile; "
                         "reduce extents or increase depth_range")
    z0 = rng.uniform(z_lo, hi)
    cx3 = (center_u - intr.cx) / intr.fx * z0
    cy3 = (center_v - intr.cy) / intr.fy * z0

    offsets = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.array([hx, hy, hz])
    if pattern == "beam":
        levels = np.linspace(-hy, hy, BEAM_COUNT)
        offsets[:, 1] = levels[rng.integers(0, BEAM_COUNT, size=n)]
    return np.array([cx3, cy3, z0]) + offsets


def generate_scene(spec: SceneSpec, domain: DomainSpec, seed: int) -> PairedSample:
    """One deterministic paired sample: points, labels, and corrupted features."""
    root = np.random.SeedSequence([int(spec.layout_seed), int(seed)])
    geom_ss, corrupt_ss = root.spawn(2)
    geom = np.random.Generator(np.random.PCG64(geom_ss))
    corrupt = np.random.Generator(np.random.PCG64(corrupt_ss))

    k = spec.num_classes
    tiles = geom.permutation(_tile_layout(spec)[0] * _tile_layout(spec)[1])[:k]
    counts = _class_point_counts(spec)
    points = np.concatenate([
        _sample_cluster(geom, spec, c, int(tiles[c]), int(counts[c]), domain.resample_pattern_3d)
        for c in range(k)
    ])
    labels = np.repeat(np.arange(k, dtype=np.int64), counts)
    order = geom.permutation(len(points))
    points, labels = points[order], labels[order]

    # Render the clean grid from the uncorrupted geometry, then corrupt.
    codebook = class_codebook(spec)
    index = project_points(points, RigidTransform.identity(), spec.intrinsics)
    hp, wp = spec.grid_shape()
    grid = np.zeros((hp, wp, spec.feature_dim))
    cell_counts = np.zeros((hp, wp))
    vv = index.pixel_coords[index.valid_mask]
    ci = np.floor(vv[:, 1] / spec.patch_size).astype(np.int64)
    cj = np.floor(vv[:, 0] / spec.patch_size).astype(np.int64)
    np.add.at(grid, (ci, cj), codebook[labels[index.valid_mask]])
    np.add.at(cell_counts, (ci, cj), 1.0)
    grid /= np.maximum(cell_counts, 1.0)[:, :, None]

    # Unit-scale draws happen unconditionally so that domains differing only
    # in a magnitude share the same noise realization.
    noise = corrupt.standard_normal(grid.shape)
    grid = grid + domain.feature_noise_2d * noise
    drop = corrupt.random((hp, wp)) < domain.feature_dropout_2d
    grid[drop] = 0.0
    jitter = corrupt.standard_normal(points.shape)
    points = points + domain.geometry_jitter_3d * jitter

    return PairedSample(
        sample_id="",
        points=points.astype(np.float32),
        labels=labels,
        patch_features=PatchFeatureMap(grid.astype(np.float32), spec.patch_size),
        intrinsics=spec.intrinsics,
        extrinsics=RigidTransform.identity(),
    )


def make_splits(num_source: int, num_target: int, val_fraction: float,
                test_fraction: float, seed: int) -> DatasetSplit:
    """Disjoint, seeded, size-exact splits over fresh source/target ids."""
    if num_source < 1 or num_target < 1:
        raise ValueError("need at least one source and one target sample")
    if not (0 < val_fraction < 1 and 0 < test_fraction < 1):
        raise ValueError("fractions must lie in (0, 1)")
    if val_fraction + test_fraction >= 1:
        raise ValueError("val_fraction + test_fraction must be < 1")
    n_val = int(round(val_fraction * num_target))
    n_test = int(round(test_fraction * num_target))
    if n_val < 1 or n_test < 1 or n_val + n_test >= num_target:
        raise ValueError("requested split sizes leave an empty split")
    source_ids = [f"src_{i:04d}" for i in range(num_source)]
    target_ids = [f"tgt_{i:04d}" for i in range(num_target)]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x59])))
    perm = rng.permutation(num_target)
    val = sorted(target_ids[i] for i in perm[:n_val])
    test = sorted(target_ids[i] for i in perm[n_val:n_val + n_test])
    train = sorted(target_ids[i] for i in perm[n_val + n_test:])
    return DatasetSplit(source_ids, train, val, test)


@dataclass
class SyntheticDataset:
    spec: SceneSpec
    source_domain: DomainSpec
    target_domain: DomainSpec
    splits: DatasetSplit
    samples: dict[str, PairedSample]
    codebook: np.ndarray
    seed: int

    def domain_of(self, sample_id: str) -> DomainSpec:
        return self.source_domain if sample_id.startswith("src_") else self.target_domain


def build_dataset(spec: SceneSpec, source_domain: DomainSpec, target_domain: DomainSpec,
                  num_source: int, num_target: int, seed: int,
                  val_fraction: float = 1 / 6, test_fraction: float = 1 / 6) -> SyntheticDataset:
    """Generate every sample of a two-domain dataset with fixed splits."""
    splits = make_splits(num_source, num_target, val_fraction, test_fraction, seed)
    samples: dict[str, PairedSample] = {}
    for domain_idx, (domain, ids) in enumerate(
            [(source_domain, splits.source_train),
             (target_domain, splits.target_train + splits.target_val + splits.target_test)]):
        for sid in ids:
            per_sample = int(np.random.SeedSequence(
                [seed, domain_idx, int(sid.split("_")[1])]).generate_state(1)[0])
            sample = generate_scene(spec, domain, per_sample)
            sample.sample_id = sid
            samples[sid] = sample
    return SyntheticDataset(spec, source_domain, target_domain, splits, samples,
                            class_codebook(spec), seed)


def nearest_codebook(features: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the nearest codebook row per feature vector (Euclidean)."""
    d2 = ((features[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def lifted_codebook_accuracy(sample: PairedSample, codebook: np.ndarray) -> float:
    """Nearest-codebook accuracy on lifted features over validly projected points."""
    index = project_points(sample.points, sample.extrinsics, sample.intrinsics)
    feats, valid = lift_features(sample.patch_features, index)
    if not valid.any():
        return float("nan")
    pred = nearest_codebook(feats[valid], codebook)
    return float((pred == sample.labels[valid]).mean())


def save_dataset(ds: SyntheticDataset, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    os.makedirs(os.path.join(path, "samples"), exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": ds.seed,
        "scene_spec": ds.spec.to_dict(),
        "domains": {"source": ds.source_domain.to_dict(), "target": ds.target_domain.to_dict()},
        "splits": ds.splits.to_dict(),
        "samples": [{"id": sid, "file": f"samples/{sid}.npz"} for sid in sorted(ds.samples)],
    }
    containers.save_arrays(os.path.join(path, "codebook.npz"), {"codebook": ds.codebook})
    for sid, s in ds.samples.items():
        containers.save_arrays(os.path.join(path, "samples", f"{sid}.npz"), {
            "points": s.points.astype(np.float32),
            "labels": s.labels.astype(np.int64),
            "patch_features": s.patch_features.grid.astype(np.float32),
            "intrinsics": s.intrinsics.to_array(),
            "extrinsics": s.extrinsics.to_array(),
        }, meta={"sample_id": sid, "patch_size": s.patch_features.patch_size})
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_dataset(path: str | os.PathLike) -> SyntheticDataset:
    path = os.fspath(path)
    try:
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
    except FileNotFoundError as exc:
        raise DatasetIntegrityError(f"no manifest.json under {path}") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetVersionError(f"dataset schema {version!r} != supported {SCHEMA_VERSION}")
    spec = SceneSpec.from_dict(manifest["scene_spec"])
    samples: dict[str, PairedSample] = {}
    for entry in manifest["samples"]:
        fpath = os.path.join(path, entry["file"])
        if not os.path.exists(fpath):
            raise DatasetIntegrityError(f"manifest lists missing sample file {entry['file']}")
        arrays, meta = containers.load_arrays(fpath)
        samples[entry["id"]] = PairedSample(
            sample_id=entry["id"],
            points=arrays["points"],
            labels=arrays["labels"],
            patch_features=PatchFeatureMap(arrays["patch_features"], meta["patch_size"]),
            intrinsics=CameraIntrinsics.from_array(arrays["intrinsics"]),
            extrinsics=RigidTransform.from_array(arrays["extrinsics"]),
        )
    codebook_arrays, _ = containers.load_arrays(os.path.join(path, "codebook.npz"))
    return SyntheticDataset(
        spec=spec,
        source_domain=DomainSpec.from_dict(manifest["domains"]["source"]),
        target_domain=DomainSpec.from_dict(manifest["domains"]["target"]),
        splits=DatasetSplit.from_dict(manifest["splits"]),
        samples=samples,
        codebook=codebook_arrays["codebook"],
        seed=manifest["seed"],
    )


def domain_presets(name: str) -> tuple[DomainSpec, DomainSpec]:
    """Source/target domain pairs behind the shipped dataset presets."""
    source = DomainSpec(name="clean", label_available=True)
    if name == "night":
        target = DomainSpec(name="night", feature_noise_2d=2.0)
    elif name == "sensor":
        target = DomainSpec(name="sensor", feature_noise_2d=0.2,
                            geometry_jitter_3d=0.05, resample_pattern_3d="beam")
    elif name == "geo-shift":
        target = DomainSpec(name="geo-shift", feature_noise_2d=0.6,
                            feature_dropout_2d=0.1, geometry_jitter_3d=0.02)
    else:
        raise ValueError(f"unknown dataset preset {name!r}")
    return source, target
