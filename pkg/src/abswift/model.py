"""Full model assembly, ablation variants, and weight persistence.

The ablation ladder builds the full model in four steps:
  step1  merged geometry cloud, no context encoder, single linear decode head
  step2  split terrain/obstacle encoder with cross-attention
  step3  adds the meteorological profile (context) encoder
  step4  per-field MLP decode heads (the full model)
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields as dc_fields, replace

import numpy as np
import torch
from torch import nn

from .dataset import (
    NormalizationStats,
    NormalizedSample,
    denormalize_coords,
    denormalize_fields,
)
from .encoders import ContextEncoder, GeometryEncoder, VolumeEncoder
from .io_utils import (
    DataFormatError,
    read_f32_array,
    read_header,
    write_f32_array,
    write_header,
)
from .nn import count_parameters, init_weights_
from .processor import Decoder, PhysicsBlock

WEIGHTS_MAGIC = b"ABSWIFT1"
FORMAT_VERSION = 1

VARIANTS = ("step1", "step2", "step3", "step4")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 192
    n_heads: int = 3
    n_gnd: int = 4096
    n_obs: int = 4096
    n_gnd_sn: int = 1024
    n_obs_sn: int = 1024
    r_gnd: float = 5.0
    r_obs: float = 1.0
    n_vol_anchor: int = 8192
    n_processor_blocks: int = 3
    n_decoder_blocks: int = 4
    max_degree: int = 32
    variant: str = "step4"

    def validate(self) -> "ModelConfig":
        problems = []
        if self.variant not in VARIANTS:
            if self.variant in ("step0", "0"):
                raise ValueError(
                    "variant step0 (separate surface branch) is unsupported"
                )
            problems.append(f"variant={self.variant!r} not in {VARIANTS}")
        if self.d % self.n_heads != 0:
            problems.append(f"d={self.d} not divisible by n_heads={self.n_heads}")
        elif (self.d // self.n_heads) % 2 != 0:
            problems.append(f"head dim {self.d // self.n_heads} must be even")
        if self.n_gnd_sn > self.n_gnd:
            problems.append(f"n_gnd_sn={self.n_gnd_sn} > n_gnd={self.n_gnd}")
        if self.n_obs_sn > self.n_obs:
            problems.append(f"n_obs_sn={self.n_obs_sn} > n_obs={self.n_obs}")
        for name in ("r_gnd", "r_obs"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        for name in (
            "d", "n_heads", "n_gnd", "n_obs", "n_gnd_sn", "n_obs_sn",
            "n_vol_anchor", "n_processor_blocks", "n_decoder_blocks",
            "max_degree",
        ):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))
        return self


def paper_config(variant: str = "step4") -> ModelConfig:
    """Full-scale hyperparameters (6.5M-parameter regime)."""
    return ModelConfig(variant=variant).validate()


def desk_config(variant: str = "step4") -> ModelConfig:
    """Small configuration that trains in minutes on one CPU core.

    Radii are rescaled for the sparser clouds (coordinates are normalized
    to [0, 1000] per axis).
    """
    return ModelConfig(
        d=48,
        n_heads=3,
        n_gnd=512,
        n_obs=512,
        n_gnd_sn=128,
        n_obs_sn=128,
        r_gnd=120.0,
        r_obs=60.0,
        n_vol_anchor=256,
        n_processor_blocks=3,
        n_decoder_blocks=4,
        variant=variant,
    ).validate()


@dataclass(frozen=True)
class VariantFlags:
    split_geometry: bool
    context_encoder: bool
    mlp_heads: bool


def apply_variant(config: ModelConfig) -> VariantFlags:
    config.validate()
    step = int(config.variant[-1])
    return VariantFlags(
        split_geometry=step >= 2,
        context_encoder=step >= 3,
        mlp_heads=step >= 4,
    )


class ABSwift(nn.Module):
    """Branched anchor-attention surrogate for steady-state urban wind flow."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        flags = apply_variant(config)
        self.flags = flags
        d, h = config.d, config.n_heads
        self.geometry = GeometryEncoder(d, h, flags.split_geometry)
        self.context = ContextEncoder(d) if flags.context_encoder else None
        self.volume = VolumeEncoder(d)
        self.processor = nn.ModuleList(
            PhysicsBlock(d, h) for _ in range(config.n_processor_blocks)
        )
        self.decoder = Decoder(d, h, config.n_decoder_blocks, flags.mlp_heads)

    def draw_anchors(self, n_vol: int, rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        if cfg.n_vol_anchor > n_vol:
            raise ValueError(
                f"n_vol_anchor={cfg.n_vol_anchor} exceeds n_vol={n_vol}"
            )
        return np.sort(rng.choice(n_vol, size=cfg.n_vol_anchor, replace=False))

    def forward(
        self,
        sample: NormalizedSample,
        rng: np.random.Generator,
        chunk_size: int | None = None,
        anchor_idx: np.ndarray | None = None,
    ) -> tuple[torch.Tensor, np.ndarray]:
        """Predict (n_vol, 7) standardized fields; returns the anchor draw too.

        The rng drives the supernode and anchor draws only; everything else
        is a pure function of the weights and inputs.
        """
        cfg = self.config
        geom, g_pos = self.geometry(
            sample.terrain_coords,
            sample.terrain_feats,
            sample.obstacle_coords,
            cfg.n_gnd_sn,
            cfg.n_obs_sn,
            cfg.r_gnd,
            cfg.r_obs,
            cfg.max_degree,
            rng,
        )
        context = (
            self.context(sample.profile_vec) if self.context is not None else None
        )
        v_pos = sample.volume_coords
        vol = self.volume(v_pos, context)
        if anchor_idx is None:
            anchor_idx = self.draw_anchors(vol.shape[0], rng)
        anchors = torch.from_numpy(np.asarray(anchor_idx, dtype=np.int64))
        for block in self.processor:
            geom, vol = block(geom, g_pos, vol, v_pos, anchors, chunk_size)
        pred = self.decoder(vol, v_pos, anchors, chunk_size)
        return pred, np.asarray(anchor_idx)


def build(config: ModelConfig, seed: int = 0) -> ABSwift:
    """Construct the model with N(0, 0.02) weights, deterministic per seed."""
    model = ABSwift(config)
    gen = torch.Generator()
    gen.manual_seed(seed)
    init_weights_(model, gen)
    return model


@dataclass
class PredictionBundle:
    """Denormalized prediction: coordinates in meters, fields in physical
    units with k and eps exponentiated back from base-10 logs."""

    coords: np.ndarray  # (n_vol, 3)
    fields: np.ndarray  # (n_vol, 7): vx, vy, vz, p, theta, k, eps


def predict_bundle(
    model: ABSwift,
    sample: NormalizedSample,
    stats: NormalizationStats,
    rng: np.random.Generator,
    chunk_size: int | None = None,
) -> PredictionBundle:
    with torch.no_grad():
        pred, _ = model(sample, rng, chunk_size=chunk_size)
    phys = denormalize_fields(pred.numpy(), stats)
    phys[:, 5] = 10.0 ** phys[:, 5]
    phys[:, 6] = 10.0 ** phys[:, 6]
    coords = denormalize_coords(sample.volume_coords.numpy().astype(np.float64))
    return PredictionBundle(coords=coords, fields=phys)


def _config_header(config: ModelConfig) -> dict[str, str]:
    out = {}
    for f in dc_fields(ModelConfig):
        v = getattr(config, f.name)
        out[f"config.{f.name}"] = float(v).hex() if isinstance(v, float) else str(v)
    return out


def _config_from_header(header: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in dc_fields(ModelConfig):
        raw = header[f"config.{f.name}"]
        if f.type == "float":
            kwargs[f.name] = float.fromhex(raw)
        elif f.type == "int":
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = raw
    return ModelConfig(**kwargs).validate()


def save_weights(
    model: ABSwift,
    path,
    stats: NormalizationStats | None = None,
) -> None:
    """Write config, normalization stats, and all named parameters.

    Arrays are stored in sorted-name order as u64 LE length + f32 LE values.
    """
    state = model.state_dict()
    header = {"format_version": str(FORMAT_VERSION), "rng_policy": "numpy-pcg64"}
    header.update(_config_header(model.config))
    if stats is not None:
        header.update(stats.to_header())
    for name in state:
        header[f"array.{name}"] = str(state[name].numel())
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    write_header(buf, header)
    for name in sorted(state):
        write_f32_array(buf, state[name].detach().cpu().numpy())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_weights(
    path, expect_config: ModelConfig | None = None
) -> tuple[ABSwift, NormalizationStats | None]:
    with open(path, "rb") as f:
        magic = f.read(len(WEIGHTS_MAGIC))
        if magic != WEIGHTS_MAGIC:
            raise DataFormatError(f"bad magic {magic!r} in weight file {path}")
        header = read_header(f)
        version = int(header.get("format_version", "-1"))
        if version != FORMAT_VERSION:
            raise DataFormatError(
                f"weight format version {version}, expected {FORMAT_VERSION}"
            )
        config = _config_from_header(header)
        if expect_config is not None and config != expect_config:
            diffs = [
                f"{f.name}: expected {getattr(expect_config, f.name)}, "
                f"found {getattr(config, f.name)}"
                for f in dc_fields(ModelConfig)
                if getattr(config, f.name) != getattr(expect_config, f.name)
            ]
            raise DataFormatError("config mismatch on load: " + "; ".join(diffs))
        model = ABSwift(config)
        state = model.state_dict()
        declared = {
            k[len("array."):]: int(v)
            for k, v in header.items()
            if k.startswith("array.")
        }
        if set(declared) != set(state):
            missing = sorted(set(state) - set(declared))
            extra = sorted(set(declared) - set(state))
            raise DataFormatError(
                f"weight name mismatch: missing {missing}, unexpected {extra}"
            )
        new_state = {}
        for name in sorted(state):
            arr = read_f32_array(f, declared[name])
            new_state[name] = torch.from_numpy(
                arr.reshape(tuple(state[name].shape))
            )
        model.load_state_dict(new_state)
    stats = (
        NormalizationStats.from_header(header)
        if "stats.field_mean" in header
        else None
    )
    return model, stats


def model_parameter_count(config: ModelConfig) -> int:
    return count_parameters(ABSwift(config))


def variant_ladder_configs(config: ModelConfig) -> list[ModelConfig]:
    return [replace(config, variant=v) for v in VARIANTS]
