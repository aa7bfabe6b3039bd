"""Procedural paired RGB/height rasters with controllable domain shift.

Scenes are axis-aligned rectangular buildings with flat roofs on a flat
ground plane, viewed at nadir. The controllable axes mirror the shifts a
height model meets across datasets: camera height (mapped to a ground-scale
factor, so a higher camera shrinks and densifies footprints without
touching true building heights), a long-tail height distribution
(lognormal, clamped), sun direction, and hard cast shadows. Roof shading
carries a height-correlated brightness cue so the image-to-height mapping
is learnable with or without shadows; shadow length is the second cue.

A dataset is a directory of HMT1 rasters plus a ``manifest.json``
describing the splits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import hmt
from .errors import ConfigError, DataError
from .seeding import path_hash, spawn_rng

CAMERA_HEIGHTS = (300, 380, 460, 540)
BASE_CAMERA = 300.0
PX_PER_M_AT_BASE = 0.5


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    density: float = 0.25          # target roof coverage fraction of the raster
    height_mu: float = 1.5         # lognormal location of roof heights (metres)
    height_sigma: float = 1.0
    height_max: float = 439.2      # clamp bound (metres)
    camera_height: int = 380       # one of CAMERA_HEIGHTS
    sun_azimuth: float = 135.0     # degrees, clockwise from north
    sun_elevation: float = 45.0    # degrees above horizon
    shadows: bool = True

    def __post_init__(self):
        if not (0.0 < self.density < 1.0):
            raise ConfigError(f"density must be in (0,1), got {self.density}")
        if self.camera_height not in CAMERA_HEIGHTS:
            raise ConfigError(f"camera_height must be one of {CAMERA_HEIGHTS}")
        if self.height < 8 or self.width < 8:
            raise ConfigError("scene extents must be at least 8 px")
        if self.height_max <= 0 or self.height_sigma <= 0:
            raise ConfigError("height distribution parameters must be positive")
        if not (5.0 <= self.sun_elevation <= 90.0):
            raise ConfigError("sun elevation must be within [5, 90] degrees")

    @property
    def ground_scale(self) -> float:
        """Footprint scale factor relative to the lowest camera."""
        return BASE_CAMERA / self.camera_height

    @property
    def px_per_m(self) -> float:
        return PX_PER_M_AT_BASE * self.ground_scale


# canned domains: a large synthetic-city source and two shifted targets
PRESETS: dict[str, SceneSpec] = {
    "source": SceneSpec(density=0.22, height_mu=1.6, height_sigma=1.0,
                        height_max=439.2, camera_height=380,
                        sun_azimuth=135.0, sun_elevation=50.0, shadows=True),
    "target_a": SceneSpec(density=0.38, height_mu=2.3, height_sigma=0.7,
                          height_max=195.8, camera_height=540,
                          sun_azimuth=300.0, sun_elevation=35.0, shadows=True),
    "target_b": SceneSpec(density=0.30, height_mu=1.1, height_sigma=0.6,
                          height_max=92.7, camera_height=300,
                          sun_azimuth=210.0, sun_elevation=60.0, shadows=False),
}


def generate_scene(spec: SceneSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One scene: returns (rgb (3,H,W) float32 in [0,1], height (1,H,W) float32).

    Deterministic in (spec, seed). The height raster is written before any
    shading, so shadows never alter it; ground stays exactly 0.
    """
    rng = spawn_rng(seed, "scene")
    h, w = spec.height, spec.width
    hgt = np.zeros((h, w), dtype=np.float64)
    rgb = np.empty((3, h, w), dtype=np.float64)

    ground = np.array([0.30, 0.34, 0.28])
    rgb[:] = ground[:, None, None] + 0.03 * rng.standard_normal((3, h, w))

    # expected building count from the target coverage; the density -> 0
    # limit is a bare ground plane
    mean_side_px = 16.0 * spec.px_per_m
    n_buildings = int(round(spec.density * h * w / max(mean_side_px ** 2, 4.0)))

    buildings = []
    for _ in range(n_buildings):
        bh = min(float(rng.lognormal(spec.height_mu, spec.height_sigma)), spec.height_max)
        side_i = max(2, int(round(rng.uniform(8.0, 24.0) * spec.px_per_m)))
        side_j = max(2, int(round(rng.uniform(8.0, 24.0) * spec.px_per_m)))
        y0 = int(rng.integers(0, max(1, h - side_i + 1)))
        x0 = int(rng.integers(0, max(1, w - side_j + 1)))
        albedo = rng.uniform(0.25, 0.85, size=3)
        buildings.append((bh, y0, x0, side_i, side_j, albedo))

    # raise footprints tallest-last so roofs of taller buildings win overlaps
    for bh, y0, x0, si, sj, albedo in sorted(buildings, key=lambda b: b[0]):
        hgt[y0:y0 + si, x0:x0 + sj] = np.maximum(hgt[y0:y0 + si, x0:x0 + sj], bh)
        brightness = 0.65 + 0.35 * min(bh / 40.0, 1.0)
        rgb[:, y0:y0 + si, x0:x0 + sj] = (albedo * brightness)[:, None, None]

    elev = math.radians(spec.sun_elevation)
    az = math.radians(spec.sun_azimuth)
    if spec.shadows:
        # hard shadows marched away from the sun, scaled by occluder height
        d_i, d_j = math.cos(az), -math.sin(az)
        shadow = np.zeros((h, w), dtype=bool)
        for bh, y0, x0, si, sj, _ in buildings:
            length_px = bh / math.tan(elev) * spec.px_per_m
            for t in range(1, int(math.ceil(length_px)) + 1):
                oy, ox = int(round(t * d_i)), int(round(t * d_j))
                ys, ye = np.clip([y0 + oy, y0 + si + oy], 0, h)
                xs, xe = np.clip([x0 + ox, x0 + sj + ox], 0, w)
                if ys >= ye or xs >= xe:
                    continue
                block = shadow[ys:ye, xs:xe]
                block |= hgt[ys:ye, xs:xe] < bh
        rgb[:, shadow] *= 0.5

    rgb *= 0.35 + 0.65 * math.sin(elev)  # global sun term, flat surfaces at nadir
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb.astype(np.float32), hgt[None].astype(np.float32)


@dataclass
class DatasetManifest:
    """On-disk description of a generated dataset: split name -> list of
    (image path, height path) pairs relative to the dataset root."""

    name: str
    root: Path
    scene: SceneSpec
    root_seed: int
    splits: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        return {s: len(p) for s, p in self.splits.items()}

    def split_pairs(self, split: str) -> list[tuple[Path, Path]]:
        if split not in self.splits:
            raise DataError(f"dataset {self.name!r} has no split {split!r}")
        return [(self.root / i, self.root / g) for i, g in self.splits[split]]

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "root_seed": self.root_seed,
            "scene": asdict(self.scene),
            "counts": self.counts(),
            "splits": {s: [list(p) for p in pairs] for s, pairs in self.splits.items()},
        }, sort_keys=True, indent=1)

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, root: str | Path, validate: bool = True) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError as e:
            raise DataError(f"missing manifest: {path}") from e
        m = cls(name=raw["name"], root=root, scene=SceneSpec(**raw["scene"]),
                root_seed=raw["root_seed"],
                splits={s: [tuple(p) for p in pairs]
                        for s, pairs in raw["splits"].items()})
        if raw["counts"] != m.counts():
            raise DataError(f"manifest counts disagree with split lists in {path}")
        if validate:
            for split in m.splits:
                for img, hgt_p in m.split_pairs(split):
                    if not img.exists() or not hgt_p.exists():
                        raise DataError(f"manifest references missing file: {img}")
        return m


def generate_dataset(spec: SceneSpec, n_train: int, n_val: int, n_test: int,
                     out_dir: str | Path, root_seed: int = 0,
                     name: str = "scenes") -> DatasetManifest:
    """Write HMT1 rasters for three splits with disjoint seed streams."""
    if min(n_train, n_val, n_test) < 0:
        raise ConfigError("split counts must be >= 0")
    root = Path(out_dir)
    manifest = DatasetManifest(name=name, root=root, scene=spec, root_seed=root_seed)
    for split, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        sub = root / split
        sub.mkdir(parents=True, exist_ok=True)
        pairs = []
        for idx in range(count):
            rgb, hgt_arr = generate_scene(spec, path_hash(root_seed, split, idx))
            img_rel = f"{split}/img_{idx:04d}.hmt"
            hgt_rel = f"{split}/hgt_{idx:04d}.hmt"
            hmt.save(root / img_rel, rgb)
            hmt.save(root / hgt_rel, hgt_arr)
            pairs.append((img_rel, hgt_rel))
        manifest.splits[split] = pairs
    manifest.save()
    return manifest


def subsample_fewshot(manifest: DatasetManifest, pct: float, seed: int) -> DatasetManifest:
    """Uniform-without-replacement subset of the training split,
    ceil(pct% of n_train) items; validation and test stay untouched."""
    train = manifest.splits.get("train", [])
    n = len(train)
    take = math.ceil(n * pct / 100.0)
    if take < 1 or n == 0:
        raise ConfigError(f"few-shot subset of {pct}% of {n} train items is empty")
    rng = spawn_rng(seed, "fewshot", manifest.name, pct)
    keep = sorted(rng.choice(n, size=take, replace=False).tolist())
    sub = replace(manifest, splits={**manifest.splits,
                                    "train": [train[i] for i in keep]})
    return sub
