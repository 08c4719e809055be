"""Synthetic dataset: box cities, an analytic wake oracle, and serialization.

The flow oracle replaces CFD with a closed-form wake-superposition model.
Background state is the Monin-Obukhov profile advected westerly (wind along
+x). Each box of height h, plan size (wx, wy) centered at (cx, cy) adds:

  deficit   D = 0.6 * exp(-xi / L) * exp(-((y - cy) / (0.6 wy + 0.12 xi))^2)
                    * exp(-(z / (1.1 h))^2)          for xi = x - x_max > 0
  wake len  L = 3 h * exp(8 * inv_lmo)   (longer wakes for stable air)

  vx  = u_bg(z) * prod_b (1 - D_b)
  vy  = u_bg(z) * sum_b 0.3 D_b tanh(2 (y - cy) / wy)
  vz  = u_bg(z) * sum_b 0.2 D_b (z / h) exp(-z / h)
  p   = sum_b [ 0.5 rho u_bg^2 exp(-((x - x_min)/h)^2) G_y G_z   (stagnation,
                    compactly gated to x_min - 2h <= x <= x_min)
              - 0.3 rho u_bg^2 D_b ]                              (wake suction)
  k   = k_bg + sum_b 0.5 D_b u_bg^2
  eps = eps_bg + sum_b 0.5 D_b u_bg^3 / h
  theta = theta_bg + (theta_ground - theta_bg) * (1 - prod_b (1 - 0.5 D_b))

with rho = 1.2 kg/m^3, G_y = exp(-((y - cy)/(0.6 wy))^2), G_z =
exp(-(z/h)^2), and theta_ground the background potential temperature at 2 m.
Every wake/stagnation term is gated to x > x_max or x in [x_min - 2h, x_min],
so fields far upwind equal the background exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .io_utils import (
    DataFormatError,
    floats_to_hex,
    hex_to_floats,
    read_f32_array,
    read_header,
    write_f32_array,
    write_header,
)
from .profiles import StabilityParams, background_state, compute_profiles, flatten_profiles

SAMPLE_MAGIC = b"ABSWDAT1"

BUILT_AREA = 100.0  # m, square side of the built zone
ZONE_X = (0.0, 400.0)  # built area plus 300 m downwind extension
ZONE_Y = (0.0, 100.0)
ZONE_Z = (0.0, 50.0)
VOLUME_Z_MIN = 2.0  # volume samples stay above the roughness sublayer

BUILDING_WIDTH_RANGE = (5.0, 30.0)
BUILDING_HEIGHT_RANGE = (5.0, 40.0)
PLACEMENT_ATTEMPTS = 10_000

NEUTRAL_BAND = 0.005  # |inv_lmo| below this counts as neutral, 1/m
SPLIT_WEIGHTS = (138, 10, 80)

AIR_DENSITY = 1.2
THETA_GROUND_HEIGHT = 2.0

N_FIELDS = 7
FIELD_NAMES = ("vx", "vy", "vz", "p", "theta", "log_k", "log_eps")


@dataclass
class GeometrySample:
    """Axis-aligned boxes, each row (cx, cy, wx, wy, h) in meters."""

    boxes: np.ndarray  # (n_boxes, 5) float64


@dataclass
class FlowSample:
    geometry: GeometrySample
    stability: StabilityParams
    geometry_id: int
    terrain: np.ndarray  # (n_gnd, 3) float32
    obstacles: np.ndarray  # (n_obs, 3) float32
    volume_coords: np.ndarray  # (n_vol, 3) float32
    fields: np.ndarray  # (n_vol, 7) float32: vx, vy, vz, p, theta, log10 k, log10 eps


def classify_stability(inv_lmo: float) -> str:
    if inv_lmo < -NEUTRAL_BAND:
        return "unstable"
    if inv_lmo > NEUTRAL_BAND:
        return "stable"
    return "neutral"


def _boxes_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """Plan-view rectangle intersection with positive area."""
    return (
        abs(a[0] - b[0]) < (a[2] + b[2]) / 2.0
        and abs(a[1] - b[1]) < (a[3] + b[3]) / 2.0
    )


def generate_geometry(rng: np.random.Generator, n_buildings: int) -> GeometrySample:
    """Rejection-sample non-overlapping boxes inside the built area."""
    if n_buildings < 1:
        raise ValueError("n_buildings must be >= 1")
    boxes: list[np.ndarray] = []
    for b in range(n_buildings):
        for _ in range(PLACEMENT_ATTEMPTS):
            wx = rng.uniform(*BUILDING_WIDTH_RANGE)
            wy = rng.uniform(*BUILDING_WIDTH_RANGE)
            h = rng.uniform(*BUILDING_HEIGHT_RANGE)
            cx = rng.uniform(wx / 2.0, BUILT_AREA - wx / 2.0)
            cy = rng.uniform(wy / 2.0, BUILT_AREA - wy / 2.0)
            cand = np.array([cx, cy, wx, wy, h])
            if not any(_boxes_overlap(cand, other) for other in boxes):
                boxes.append(cand)
                break
        else:
            raise RuntimeError(
                f"could not place building {b + 1}/{n_buildings} after "
                f"{PLACEMENT_ATTEMPTS} attempts; use fewer or smaller buildings"
            )
    return GeometrySample(boxes=np.stack(boxes))


def sample_stability(rng: np.random.Generator) -> StabilityParams:
    """Independent uniform draws over the valid parameter ranges."""
    from .profiles import INV_LMO_RANGE, Z0_RANGE

    return StabilityParams(
        inv_lmo=rng.uniform(*INV_LMO_RANGE), z0=rng.uniform(*Z0_RANGE)
    )


def points_in_box(coords: np.ndarray, box: np.ndarray) -> np.ndarray:
    cx, cy, wx, wy, h = box
    return (
        (np.abs(coords[:, 0] - cx) < wx / 2.0)
        & (np.abs(coords[:, 1] - cy) < wy / 2.0)
        & (coords[:, 2] < h)
        & (coords[:, 2] >= 0.0)
    )


def oracle_flow(
    geometry: GeometrySample, stability: StabilityParams, coords: np.ndarray
) -> np.ndarray:
    """Evaluate the documented wake-superposition model at the given points.

    Returns (n, 7) float64 columns (vx, vy, vz, p, theta, log10 k, log10 eps).
    Points inside a box are rejected.
    """
    coords = np.asarray(coords, dtype=np.float64)
    for box in geometry.boxes:
        if points_in_box(coords, box).any():
            raise ValueError("oracle_flow: point inside a building box")

    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    u_bg, theta_bg, k_bg, eps_bg = background_state(stability, z)
    theta_ground = float(
        background_state(stability, np.array([THETA_GROUND_HEIGHT]))[1][0]
    )

    deficit_prod = np.ones_like(x)
    theta_mix_prod = np.ones_like(x)
    vy = np.zeros_like(x)
    vz = np.zeros_like(x)
    p = np.zeros_like(x)
    dk = np.zeros_like(x)
    deps = np.zeros_like(x)

    for box in geometry.boxes:
        cx, cy, wx, wy, h = box
        x_min, x_max = cx - wx / 2.0, cx + wx / 2.0
        xi = x - x_max
        wake = xi > 0.0
        length = 3.0 * h * np.exp(8.0 * stability.inv_lmo)
        sigma_y = 0.6 * wy + 0.12 * np.maximum(xi, 0.0)
        deficit = np.where(
            wake,
            0.6
            * np.exp(-np.maximum(xi, 0.0) / length)
            * np.exp(-(((y - cy) / sigma_y) ** 2))
            * np.exp(-((z / (1.1 * h)) ** 2)),
            0.0,
        )
        deficit_prod *= 1.0 - deficit
        theta_mix_prod *= 1.0 - 0.5 * deficit
        vy += 0.3 * deficit * np.tanh(2.0 * (y - cy) / wy)
        vz += 0.2 * deficit * (z / h) * np.exp(-z / h)
        dk += 0.5 * deficit * u_bg**2
        deps += 0.5 * deficit * u_bg**3 / h

        bump_zone = (x >= x_min - 2.0 * h) & (x <= x_min)
        bump = np.where(
            bump_zone,
            0.5
            * AIR_DENSITY
            * u_bg**2
            * np.exp(-(((x - x_min) / h) ** 2))
            * np.exp(-(((y - cy) / (0.6 * wy)) ** 2))
            * np.exp(-((z / h) ** 2)),
            0.0,
        )
        p += bump - 0.3 * AIR_DENSITY * u_bg**2 * deficit

    vx = u_bg * deficit_prod
    vy = u_bg * vy
    vz = u_bg * vz
    theta = theta_bg + (theta_ground - theta_bg) * (1.0 - theta_mix_prod)
    k = k_bg + dk
    eps = eps_bg + deps
    return np.column_stack([vx, vy, vz, p, theta, np.log10(k), np.log10(eps)])


def extract_point_clouds(
    geometry: GeometrySample,
    rng: np.random.Generator,
    n_gnd: int,
    n_obs: int,
    n_vol: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Terrain (ground plane), obstacle-surface, and volume point clouds."""
    if min(n_gnd, n_obs, n_vol) < 1:
        raise ValueError("point counts must be positive")
    terrain = np.column_stack(
        [
            rng.uniform(*ZONE_X, size=n_gnd),
            rng.uniform(*ZONE_Y, size=n_gnd),
            np.zeros(n_gnd),
        ]
    )

    # faces: west/east (x-normal), south/north (y-normal), top; bottom buried
    faces = []
    areas = []
    for bi, (cx, cy, wx, wy, h) in enumerate(geometry.boxes):
        faces += [(bi, f) for f in ("west", "east", "south", "north", "top")]
        areas += [wy * h, wy * h, wx * h, wx * h, wx * wy]
    areas = np.asarray(areas)
    choice = rng.choice(len(faces), size=n_obs, p=areas / areas.sum())
    u1 = rng.uniform(size=n_obs)
    u2 = rng.uniform(size=n_obs)
    obstacles = np.empty((n_obs, 3))
    for i, fi in enumerate(choice):
        bi, face = faces[fi]
        cx, cy, wx, wy, h = geometry.boxes[bi]
        if face == "west":
            obstacles[i] = (cx - wx / 2.0, cy - wy / 2.0 + u1[i] * wy, u2[i] * h)
        elif face == "east":
            obstacles[i] = (cx + wx / 2.0, cy - wy / 2.0 + u1[i] * wy, u2[i] * h)
        elif face == "south":
            obstacles[i] = (cx - wx / 2.0 + u1[i] * wx, cy - wy / 2.0, u2[i] * h)
        elif face == "north":
            obstacles[i] = (cx - wx / 2.0 + u1[i] * wx, cy + wy / 2.0, u2[i] * h)
        else:
            obstacles[i] = (
                cx - wx / 2.0 + u1[i] * wx,
                cy - wy / 2.0 + u2[i] * wy,
                h,
            )

    volume = np.empty((0, 3))
    while volume.shape[0] < n_vol:
        want = n_vol - volume.shape[0]
        cand = np.column_stack(
            [
                rng.uniform(*ZONE_X, size=want),
                rng.uniform(*ZONE_Y, size=want),
                rng.uniform(VOLUME_Z_MIN, ZONE_Z[1], size=want),
            ]
        )
        inside = np.zeros(want, dtype=bool)
        for box in geometry.boxes:
            inside |= points_in_box(cand, box)
        volume = np.vstack([volume, cand[~inside]])
    return terrain, obstacles, volume


def make_sample(
    rng: np.random.Generator,
    n_buildings: int,
    n_gnd: int,
    n_obs: int,
    n_vol: int,
    geometry: GeometrySample | None = None,
    stability: StabilityParams | None = None,
    geometry_id: int = 0,
) -> FlowSample:
    if geometry is None:
        geometry = generate_geometry(rng, n_buildings)
    if stability is None:
        stability = sample_stability(rng)
    terrain, obstacles, volume = extract_point_clouds(
        geometry, rng, n_gnd, n_obs, n_vol
    )
    fields = oracle_flow(geometry, stability, volume)
    return FlowSample(
        geometry=geometry,
        stability=stability,
        geometry_id=geometry_id,
        terrain=terrain.astype(np.float32),
        obstacles=obstacles.astype(np.float32),
        volume_coords=volume.astype(np.float32),
        fields=fields.astype(np.float32),
    )


def split_targets(n: int) -> tuple[int, int, int]:
    """Largest-remainder apportionment of n samples to 138:10:80."""
    props = np.asarray(SPLIT_WEIGHTS, dtype=np.float64) / sum(SPLIT_WEIGHTS)
    raw = props * n
    base = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - base))[: n - base.sum()]:
        base[i] += 1
    return tuple(int(v) for v in base)


def build_splits(
    samples: list[FlowSample], rng: np.random.Generator
) -> dict[str, list[int]]:
    """Assign sample indices to train/valid/test.

    Geometries that occur in more than one sample (the repeated-geometry
    construction) go entirely to train, which also prevents geometry leakage.
    The rest is filled to 138:10:80 proportions after seeding each split with
    one sample of each stability class where counts permit.
    """
    n = len(samples)
    if n < 10:
        raise ValueError("need at least 10 samples to build splits")
    targets = dict(zip(("train", "valid", "test"), split_targets(n)))
    classes = [classify_stability(s.stability.inv_lmo) for s in samples]

    geo_counts: dict[int, int] = {}
    for s in samples:
        geo_counts[s.geometry_id] = geo_counts.get(s.geometry_id, 0) + 1
    dup_geos = {g for g, c in geo_counts.items() if c > 1}

    assign: dict[int, str] = {
        i: "train" for i, s in enumerate(samples) if s.geometry_id in dup_geos
    }
    caps = {
        split: max(0, targets[split] - sum(1 for v in assign.values() if v == split))
        for split in ("train", "valid", "test")
    }
    pool = [int(i) for i in rng.permutation(n) if i not in assign]

    for cls in ("unstable", "stable", "neutral"):
        total = classes.count(cls)
        if total < 3:
            if total:
                warnings.warn(
                    f"too few {cls} samples ({total}) to cover every split"
                )
            continue
        for split in ("train", "valid", "test"):
            covered = any(
                classes[i] == cls for i, sp in assign.items() if sp == split
            )
            if covered:
                continue
            member = next((i for i in pool if classes[i] == cls), None)
            if member is None:
                warnings.warn(f"ran out of {cls} samples while seeding {split}")
                continue
            pool.remove(member)
            assign[member] = split
            # coverage wins over exact proportions for very small splits
            if caps[split] > 0:
                caps[split] -= 1

    for split in ("train", "valid", "test"):
        while caps[split] and pool:
            assign[pool.pop(0)] = split
            caps[split] -= 1
    for i in pool:  # duplicates overflowing the train target push extras here
        assign[i] = "train"

    out = {"train": [], "valid": [], "test": []}
    for i in range(n):
        out[assign[i]].append(i)
    return out


@dataclass
class NormalizationStats:
    """Training-split statistics; coordinates map the zone box to [0, 1000]."""

    field_mean: np.ndarray  # (7,)
    field_std: np.ndarray  # (7,)
    feat_mean: np.ndarray  # (2,) inv_lmo, z0
    feat_std: np.ndarray  # (2,)
    profile_mean: np.ndarray  # (256,)
    profile_std: np.ndarray  # (256,)

    def to_header(self) -> dict[str, str]:
        return {
            f"stats.{name}": floats_to_hex(getattr(self, name))
            for name in (
                "field_mean",
                "field_std",
                "feat_mean",
                "feat_std",
                "profile_mean",
                "profile_std",
            )
        }

    @classmethod
    def from_header(cls, header: dict[str, str]) -> "NormalizationStats":
        return cls(
            **{
                name: hex_to_floats(header[f"stats.{name}"])
                for name in (
                    "field_mean",
                    "field_std",
                    "feat_mean",
                    "feat_std",
                    "profile_mean",
                    "profile_std",
                )
            }
        )


def profile_vector(stability: StabilityParams) -> np.ndarray:
    return flatten_profiles(compute_profiles(stability))


def compute_stats(train_samples: list[FlowSample]) -> NormalizationStats:
    """Per-field standardization statistics over the training split only.

    A zero standard deviation on any of the 7 output fields is rejected;
    feature and profile channels are floored at 1e-12 so single-sample
    training (where the scalars are constant) still works.
    """
    fields = np.concatenate([s.fields.astype(np.float64) for s in train_samples])
    field_mean = fields.mean(axis=0)
    field_std = fields.std(axis=0)
    if (field_std == 0).any():
        bad = [FIELD_NAMES[i] for i in np.flatnonzero(field_std == 0)]
        raise ValueError(f"zero variance in training fields: {bad}")

    feats = np.array(
        [[s.stability.inv_lmo, s.stability.z0] for s in train_samples],
        dtype=np.float64,
    )
    profs = np.stack([profile_vector(s.stability) for s in train_samples])
    return NormalizationStats(
        field_mean=field_mean,
        field_std=field_std,
        feat_mean=feats.mean(axis=0),
        feat_std=np.maximum(feats.std(axis=0), 1e-12),
        profile_mean=profs.mean(axis=0),
        profile_std=np.maximum(profs.std(axis=0), 1e-12),
    )


def normalize_coords(coords: np.ndarray) -> np.ndarray:
    """Affine map of the zone-of-interest bounding box to [0, 1000] per axis."""
    lo = np.array([ZONE_X[0], ZONE_Y[0], ZONE_Z[0]])
    hi = np.array([ZONE_X[1], ZONE_Y[1], ZONE_Z[1]])
    return (np.asarray(coords, dtype=np.float64) - lo) / (hi - lo) * 1000.0


def denormalize_coords(coords: np.ndarray) -> np.ndarray:
    lo = np.array([ZONE_X[0], ZONE_Y[0], ZONE_Z[0]])
    hi = np.array([ZONE_X[1], ZONE_Y[1], ZONE_Z[1]])
    return np.asarray(coords, dtype=np.float64) / 1000.0 * (hi - lo) + lo


@dataclass
class NormalizedSample:
    """Model-ready tensors for one sample (normalized units)."""

    terrain_coords: torch.Tensor  # (n_gnd, 3)
    terrain_feats: torch.Tensor  # (n_gnd, 2) standardized (inv_lmo, z0)
    obstacle_coords: torch.Tensor  # (n_obs, 3)
    volume_coords: torch.Tensor  # (n_vol, 3)
    profile_vec: torch.Tensor  # (256,) standardized
    fields: torch.Tensor  # (n_vol, 7) standardized targets
    stability_class: str


def normalize_sample(sample: FlowSample, stats: NormalizationStats) -> NormalizedSample:
    feats = np.array([sample.stability.inv_lmo, sample.stability.z0])
    feats = (feats - stats.feat_mean) / stats.feat_std
    prof = (profile_vector(sample.stability) - stats.profile_mean) / stats.profile_std
    fields = (sample.fields.astype(np.float64) - stats.field_mean) / stats.field_std
    n_gnd = sample.terrain.shape[0]
    return NormalizedSample(
        terrain_coords=torch.from_numpy(
            normalize_coords(sample.terrain).astype(np.float32)
        ),
        terrain_feats=torch.from_numpy(
            np.tile(feats.astype(np.float32), (n_gnd, 1))
        ),
        obstacle_coords=torch.from_numpy(
            normalize_coords(sample.obstacles).astype(np.float32)
        ),
        volume_coords=torch.from_numpy(
            normalize_coords(sample.volume_coords).astype(np.float32)
        ),
        profile_vec=torch.from_numpy(prof.astype(np.float32)),
        fields=torch.from_numpy(fields.astype(np.float32)),
        stability_class=classify_stability(sample.stability.inv_lmo),
    )


def denormalize_fields(fields: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of field standardization; k and eps stay as base-10 logs."""
    return np.asarray(fields, dtype=np.float64) * stats.field_std + stats.field_mean


def write_sample(sample: FlowSample, path: str | Path) -> None:
    path = Path(path)
    header = {
        "boxes": floats_to_hex(sample.geometry.boxes),
        "geometry_id": str(sample.geometry_id),
        "inv_lmo": float(sample.stability.inv_lmo).hex(),
        "z0": float(sample.stability.z0).hex(),
        "n_boxes": str(sample.geometry.boxes.shape[0]),
        "n_gnd": str(sample.terrain.shape[0]),
        "n_obs": str(sample.obstacles.shape[0]),
        "n_vol": str(sample.volume_coords.shape[0]),
    }
    with open(path, "wb") as f:
        f.write(SAMPLE_MAGIC)
        write_header(f, header)
        write_f32_array(f, sample.terrain)
        write_f32_array(f, sample.obstacles)
        write_f32_array(f, sample.volume_coords)
        write_f32_array(f, sample.fields)


def read_sample(path: str | Path) -> FlowSample:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(SAMPLE_MAGIC))
        if magic != SAMPLE_MAGIC:
            raise DataFormatError(
                f"bad magic {magic!r} at byte offset 0 in {path}"
            )
        header = read_header(f)
        n_boxes = int(header["n_boxes"])
        n_gnd = int(header["n_gnd"])
        n_obs = int(header["n_obs"])
        n_vol = int(header["n_vol"])
        boxes = hex_to_floats(header["boxes"]).reshape(n_boxes, 5)
        terrain = read_f32_array(f, 3 * n_gnd).reshape(n_gnd, 3)
        obstacles = read_f32_array(f, 3 * n_obs).reshape(n_obs, 3)
        volume = read_f32_array(f, 3 * n_vol).reshape(n_vol, 3)
        fields = read_f32_array(f, N_FIELDS * n_vol).reshape(n_vol, N_FIELDS)
    return FlowSample(
        geometry=GeometrySample(boxes=boxes),
        stability=StabilityParams(
            inv_lmo=float.fromhex(header["inv_lmo"]),
            z0=float.fromhex(header["z0"]),
        ),
        geometry_id=int(header["geometry_id"]),
        terrain=terrain,
        obstacles=obstacles,
        volume_coords=volume,
        fields=fields,
    )
