"""Declarative configuration: network specs, loss weights, training and run configs.

All models are pydantic, so a run config file (JSON or YAML) is validated in
one pass and errors carry the dotted path of the offending field.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

CONFIG_VERSION = 1


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LossWeights(_Model):
    p_d: float = Field(1e-4, ge=0, description="drift penalty on real critic scores")
    p_r: float = Field(1.0, ge=0, description="gradient penalty coefficient")
    lambda_W: float = Field(10.0, ge=0, description="adversarial generator weight")
    lambda_S: float = Field(1.0, ge=0, description="supervised generator weight")


class GeneratorSpec(_Model):
    variant: Literal["Y", "TU"] = "Y"
    psf_branch: Literal["sparse", "unfold"] = "sparse"
    in_channels: Literal[1, 3] = 3
    base_channels: int = Field(32, ge=1)
    depth: int = Field(4, ge=1)
    skip_connections: Union[bool, List[bool]] = True
    input_resolution: int = Field(128, ge=2)
    psf_layers: int = Field(5, ge=1)
    psf_channels: Optional[List[int]] = None
    psf_pad_fraction: float = Field(0.25, gt=0, le=1)
    psf_threshold_frac: float = Field(0.01, ge=0, lt=1)
    stage2_base_channels: Optional[int] = Field(None, ge=1)
    stage2_depth: Optional[int] = Field(None, ge=1)
    norm: Literal["instance", "none"] = "instance"
    leaky_slope: float = Field(0.2, ge=0)

    @model_validator(mode="after")
    def _check(self):
        if self.input_resolution % (2 ** self.depth):
            raise ValueError(
                f"input_resolution {self.input_resolution} not divisible by 2**depth={2 ** self.depth}"
            )
        if isinstance(self.skip_connections, list) and len(self.skip_connections) != self.depth:
            raise ValueError("skip_connections list must have one entry per stage")
        if self.psf_branch == "sparse" and self.psf_layers < self.depth:
            raise ValueError("sparse PSF encoder needs psf_layers >= depth to reach the bottleneck")
        if self.psf_channels is not None and len(self.psf_channels) != self.psf_layers:
            raise ValueError("psf_channels needs one width per PSF layer")
        d2 = self.stage2_depth or self.depth
        if self.variant == "TU" and self.input_resolution % (2 ** d2):
            raise ValueError("input_resolution not divisible by 2**stage2_depth")
        return self

    @property
    def skips(self) -> List[bool]:
        if isinstance(self.skip_connections, bool):
            return [self.skip_connections] * self.depth
        return list(self.skip_connections)

    @property
    def bottleneck_resolution(self) -> int:
        return self.input_resolution // 2 ** self.depth

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.depth

    @property
    def tile_size(self) -> int:
        return self.bottleneck_resolution

    @property
    def tile_count(self) -> int:
        return (self.input_resolution // self.tile_size) ** 2

    @property
    def pad_length(self) -> int:
        return int(round(self.psf_pad_fraction * self.input_resolution ** 2))

    @property
    def psf_widths(self) -> List[int]:
        if self.psf_channels is not None:
            return list(self.psf_channels)
        return [self.base_channels * 2 ** min(i + 1, self.depth) for i in range(self.psf_layers)]


class CriticSpec(_Model):
    kind: Literal["global", "patch"]
    in_channels: Literal[1, 3] = 3
    backbone: str = "vgg16"
    truncation: int = Field(3, ge=0)
    pretrained: bool = True
    allow_random_init: bool = False
    bounded: bool = False
    patch_layers: int = Field(4, ge=1)
    patch_base_channels: int = Field(64, ge=1)
    norm: Literal["instance", "none"] = "instance"


class DataConfig(_Model):
    manifest: str
    seed_psf: str


class TrainingConfig(_Model):
    batch_size: int = Field(8, ge=1)
    warmup_iters: int = Field(1000, ge=0)
    total_iters: int = Field(10000, ge=0)
    lr_g: float = Field(1e-4, gt=0)
    lr_d: float = Field(1e-4, gt=0)
    betas: Tuple[float, float] = (0.5, 0.9)
    critic_steps: int = Field(1, ge=1)
    seed: int = 0
    resolution: int = Field(128, ge=2)
    grid_rows: int = Field(5, ge=1)
    grid_cols: int = Field(5, ge=1)
    psf_pool_size: int = Field(0, ge=0, description="0 draws a fresh permutation for every sample")
    noise_sigma: float = Field(0.01, ge=0)
    boundary: Literal["circular", "linear"] = "circular"
    weights: LossWeights = LossWeights()
    log_every: int = Field(1, ge=1)
    val_every: int = Field(500, ge=1)
    val_images: int = Field(16, ge=1)
    checkpoint_every: int = Field(500, ge=1)

    @property
    def single_psf(self) -> bool:
        return self.grid_rows * self.grid_cols == 1


_TOY_TRAINING = dict(
    warmup_iters=200,
    total_iters=2000,
    lr_g=1e-3,
    psf_pool_size=4,
    weights=LossWeights(lambda_W=1e-3),
    val_images=25,
)


def _toy_critics() -> Tuple[CriticSpec, CriticSpec]:
    patch = CriticSpec(kind="patch", patch_layers=3, patch_base_channels=16)
    glob = CriticSpec(
        kind="global", backbone="vgg:16,M,32,M,64,M,64", truncation=0, pretrained=False
    )
    return patch, glob


class RunConfig(_Model):
    version: int = CONFIG_VERSION
    output_dir: str = "runs/default"
    data: DataConfig
    training: TrainingConfig = TrainingConfig()
    generator: GeneratorSpec = GeneratorSpec()
    critic_patch: CriticSpec = CriticSpec(kind="patch")
    critic_global: CriticSpec = CriticSpec(kind="global")

    @model_validator(mode="after")
    def _check(self):
        if self.version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {self.version}")
        if self.generator.input_resolution != self.training.resolution:
            raise ValueError("generator.input_resolution must equal training.resolution")
        if self.critic_patch.kind != "patch" or self.critic_global.kind != "global":
            raise ValueError("critic_patch must be kind 'patch' and critic_global kind 'global'")
        return self

    @classmethod
    def toy(cls, manifest: str, seed_psf: str, output_dir: str = "runs/toy", **training) -> "RunConfig":
        """Desk-scale configuration: 64x64 inputs and small networks.

        The training defaults suit a few thousand iterations on a CPU: a fixed
        pool of four PSFs, a faster generator learning rate and a light
        adversarial weight. Keyword arguments override any training field.
        """
        res = training.pop("resolution", 64)
        for key, value in _TOY_TRAINING.items():
            training.setdefault(key, value)
        patch, glob = _toy_critics()
        return cls(
            output_dir=output_dir,
            data=DataConfig(manifest=manifest, seed_psf=seed_psf),
            training=TrainingConfig(resolution=res, **training),
            generator=GeneratorSpec(
                base_channels=16, depth=3, input_resolution=res, psf_channels=[16, 32, 64, 64, 64]
            ),
            critic_patch=patch,
            critic_global=glob,
        )

    def dump(self, path: Union[str, Path]) -> None:
        path = Path(path)
        data = self.model_dump(mode="json")
        if path.suffix in (".yaml", ".yml"):
            path.write_text(yaml.safe_dump(data, sort_keys=False))
        else:
            path.write_text(json.dumps(data, indent=2))


def _format_validation(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def parse_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(f"invalid run config: {_format_validation(err)}") from err


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        data = yaml.safe_load(text) if path.suffix in (".yaml", ".yml") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_run_config(data)
