"""Run configuration: typed dataclasses with a strict JSON round trip.

Unknown keys are rejected at every nesting level so that typos in a config
file surface as errors instead of silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .core import digest_of


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    branch_channels: int = 16
    depth: int = 3
    channel_mult: tuple[int, ...] = (1, 2, 3)
    res_blocks_per_level: int = 1
    se_reduction: int = 8
    time_embed_dim: int = 128
    attn_heads: int = 4
    groupnorm_groups: int = 8
    in_channels: int = 1

    @property
    def base_channels(self) -> int:
        return 4 * self.branch_channels

    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def validate(self) -> None:
        ints = dict(
            branch_channels=self.branch_channels,
            depth=self.depth,
            res_blocks_per_level=self.res_blocks_per_level,
            se_reduction=self.se_reduction,
            time_embed_dim=self.time_embed_dim,
            attn_heads=self.attn_heads,
            groupnorm_groups=self.groupnorm_groups,
            in_channels=self.in_channels,
        )
        for k, v in ints.items():
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"network.{k} must be a positive integer, got {v!r}")
        if len(self.channel_mult) != self.depth or any(m < 1 for m in self.channel_mult):
            raise ConfigError("network.channel_mult needs one positive entry per level")
        if self.time_embed_dim % 2:
            raise ConfigError("network.time_embed_dim must be even")
        for c in [self.base_channels, *self.level_channels()]:
            if c % self.groupnorm_groups:
                raise ConfigError(f"{c} channels not divisible by groupnorm_groups={self.groupnorm_groups}")
            if c < self.se_reduction:
                raise ConfigError(f"{c} channels fewer than se_reduction={self.se_reduction}")
        if self.level_channels()[-1] % self.attn_heads:
            raise ConfigError("bottleneck channels not divisible by attn_heads")

    def validate_input(self, h: int, w: int) -> None:
        m = 2**self.depth
        if h < 16 or w < 16:
            raise ConfigError(f"input {h}x{w} too small for the 15x15 stem branch (need >= 16)")
        if h % m or w % m:
            raise ConfigError(f"input {h}x{w} not divisible by 2**depth = {m}")


@dataclass
class TrainingConfig:
    lr_init: float = 1e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    batch_size: int = 4
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 1
    grad_clip: float | None = None

    def validate(self) -> None:
        if not (0 < self.lr_min <= self.lr_init):
            raise ConfigError("training: need 0 < lr_min <= lr_init")
        if self.batch_size < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError("training: batch_size, epochs and checkpoint_every must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("training.weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("training: invalid Adam constants")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("training.grad_clip must be positive when set")


@dataclass
class SimulatorConfig:
    # (snr_wm, snr_gm, contrast_gain)
    ind_mean: tuple[float, float, float] = (12.0, 8.0, 1.0)
    ind_cov: tuple[tuple[float, ...], ...] = ((4.0, 0.0, 0.0), (0.0, 2.25, 0.0), (0.0, 0.0, 0.01))
    ood_mean: tuple[float, float, float] = (4.0, 3.5, 0.8)
    ood_cov: tuple[tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 0.01))
    downsample_factor: int = 2
    max_attempts: int = 10000

    def validate(self) -> None:
        import numpy as np

        for name in ("ind_cov", "ood_cov"):
            cov = np.asarray(getattr(self, name), dtype=float)
            if cov.shape != (3, 3) or not np.allclose(cov, cov.T):
                raise ConfigError(f"simulator.{name} must be a symmetric 3x3 matrix")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ConfigError(f"simulator.{name} is not positive definite") from None
        if len(self.ind_mean) != 3 or len(self.ood_mean) != 3:
            raise ConfigError("simulator means must have 3 entries")
        if self.downsample_factor < 1 or self.max_attempts < 1:
            raise ConfigError("simulator: downsample_factor and max_attempts must be >= 1")


@dataclass
class DataConfig:
    source: str = "phantom"  # "phantom" or a directory of volumes
    image_size: int = 64
    train_pool: int = 404
    test_ind: int = 300
    test_ood: int = 200
    train_fraction: float = 0.8
    min_foreground: float = 0.05

    def validate(self) -> None:
        if self.image_size < 16:
            raise ConfigError("data.image_size must be >= 16")
        if min(self.train_pool, self.test_ind, self.test_ood) < 0 or self.train_pool < 1:
            raise ConfigError("data counts must be non-negative with a non-empty train pool")
        if not (0 < self.train_fraction < 1):
            raise ConfigError("data.train_fraction must lie in (0, 1)")


@dataclass
class SamplerConfig:
    n_steps: int = 50
    method: str = "euler"
    batch_size: int = 8

    def validate(self) -> None:
        if self.n_steps < 1:
            raise ConfigError("sampler.n_steps must be >= 1")
        if self.method not in ("euler", "midpoint"):
            raise ConfigError(f"sampler.method must be 'euler' or 'midpoint', got {self.method!r}")
        if self.batch_size < 1:
            raise ConfigError("sampler.batch_size must be >= 1")


@dataclass
class PathsConfig:
    runs_dir: str = "runs"
    input_dir: str = ""


@dataclass
class EvalConfig:
    lpips_provider: str = ""  # "module:function", empty disables LPIPS
    brain_mask: bool = False
    report_subjects: int = 2


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    deterministic: bool = True

    def validate(self) -> "RunConfig":
        self.network.validate()
        self.network.validate_input(self.data.image_size, self.data.image_size)
        self.training.validate()
        self.simulator.validate()
        self.sampler.validate()
        self.data.validate()
        if self.data.image_size % self.simulator.downsample_factor:
            raise ConfigError("data.image_size must be divisible by simulator.downsample_factor")
        return self

    def to_dict(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_plain(cls, d, "")

    def digest(self, exclude_paths: bool = True) -> str:
        d = self.to_dict()
        if exclude_paths:
            d.pop("paths")
        return digest_of(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        d = self.to_dict()
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node = d
            parts = key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section in override {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key in override {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be an object")
        return _from_plain(tp, value, where + ".")
    if origin is typing.Union or str(origin) == "types.UnionType":
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where} must have {len(args)} entries")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def _from_plain(cls, d: dict, prefix: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(prefix + k for k in unknown))}")
    kwargs = {k: _coerce(hints[k], v, prefix + k) for k, v in d.items()}
    return cls(**kwargs)


def desk_config(seed: int = 0) -> RunConfig:
    """CPU-sized settings for 64x64 phantom runs (about 10 minutes on one core)."""
    return RunConfig(
        network=NetworkConfig(
            branch_channels=8,
            depth=2,
            channel_mult=(1, 2),
            res_blocks_per_level=1,
            se_reduction=8,
            time_embed_dim=32,
            attn_heads=2,
            groupnorm_groups=8,
        ),
        training=TrainingConfig(lr_init=1e-3, lr_min=1e-5, epochs=50, batch_size=4),
        data=DataConfig(image_size=64, train_pool=160, test_ind=16, test_ood=16),
        sampler=SamplerConfig(n_steps=20),
        seed=seed,
    )


def tiny_config(seed: int = 0) -> RunConfig:
    """A seconds-scale configuration for smoke tests of the command plumbing."""
    return RunConfig(
        network=NetworkConfig(
            branch_channels=2,
            depth=2,
            channel_mult=(1, 2),
            res_blocks_per_level=1,
            se_reduction=2,
            time_embed_dim=8,
            attn_heads=2,
            groupnorm_groups=4,
        ),
        training=TrainingConfig(lr_init=1e-3, lr_min=1e-5, epochs=2, batch_size=4),
        data=DataConfig(image_size=32, train_pool=10, test_ind=4, test_ood=4),
        sampler=SamplerConfig(n_steps=3, batch_size=4),
        seed=seed,
    )


PRESETS = {"default": lambda seed=0: RunConfig(seed=seed), "desk": desk_config, "tiny": tiny_config}
