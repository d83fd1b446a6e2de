"""Run configuration: dataclasses plus a flat ``key = value`` file format.

Every key in a config file names exactly one field of one of the section
dataclasses below; field names are unique across sections so no prefixes are
needed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 48
    min_obstacles: int = 0
    max_obstacles: int = 4
    camera_height_m: float = 2.5
    camera_pitch_rad: float = 0.15
    focal_px: float = 48.0
    reflection_amp: float = 0.6
    glitter_amp: float = 0.5
    wake_amp: float = 0.5
    noise_amp: float = 0.2
    min_obstacle_area: int = 30
    multi_edge: bool = False
    # augmentation
    flip_prob: float = 0.5
    color_jitter: float = 0.1
    scale_aug: bool = False
    rotate_aug: bool = False

    def validate(self) -> None:
        if self.width < 32 or self.height < 32:
            raise ConfigError("scene width and height must be >= 32")
        if not 0 <= self.min_obstacles <= self.max_obstacles <= 8:
            raise ConfigError("obstacle counts must satisfy 0 <= min <= max <= 8")
        for name in ("reflection_amp", "glitter_amp", "wake_amp", "noise_amp", "color_jitter", "flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.camera_height_m <= 0 or self.focal_px <= 0:
            raise ConfigError("camera height and focal length must be positive")
        if self.scale_aug or self.rotate_aug:
            raise ConfigError("scaling/rotation augmentation is not implemented")


@dataclass
class AnnotationNoise:
    edge_jitter_px: float = 1.0
    box_dilation_px: int = 1
    box_jitter_px: int = 1
    horizon_jitter_px: float = 1.0
    horizon_jitter_rad: float = 0.01
    prior_mode: str = "oracle_corrupt"
    prior_noise_px: int = 1

    def validate(self) -> None:
        for name in ("edge_jitter_px", "box_dilation_px", "box_jitter_px",
                     "horizon_jitter_px", "horizon_jitter_rad", "prior_noise_px"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.prior_mode not in ("oracle_corrupt", "ellipse"):
            raise ConfigError(f"unknown prior_mode {self.prior_mode!r}")


@dataclass
class SlrConfig:
    theta: float = 11.0
    omega_min: float = 0.005
    beta: float = 20.0
    omega_r: float = 0.5
    gamma: float = 2.0
    lambda_ws: float = 0.01
    tau: float = 0.9
    sigma_col: float = 0.1
    warmup_epochs: int = 25
    finetune_epochs: int = 50
    iterations: int = 1
    # ablation switches
    edge_heuristic: bool = True
    finetuning: bool = True
    constraints_r: bool = True
    feature_clustering: bool = True
    aux_loss: bool = True
    # per-term weights inside the warm-up / fine-tune objectives
    weight_foc: float = 1.0
    weight_pair: float = 1.0
    weight_proj: float = 1.0
    weight_aux: float = 1.0
    # optimizer; lr0 is sized for the small randomly initialised network
    lr0: float = 1e-3
    momentum: float = 0.9
    rho: float = 0.99
    rms_eps: float = 1e-8
    poly_power: float = 0.9
    restart_schedule: bool = True
    batch_size: int = 4
    channels: str = "8,16,32"
    seed: int = 0

    def validate(self) -> None:
        if self.theta <= 0:
            raise ConfigError("theta must be positive")
        if not 0 < self.omega_min < 1:
            raise ConfigError("omega_min must lie in (0, 1)")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.sigma_col <= 0:
            raise ConfigError("sigma_col must be positive")
        if min(self.warmup_epochs, self.finetune_epochs, self.iterations) < 0:
            raise ConfigError("epoch and iteration counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.channel_widths) != 3:
            raise ConfigError("channels must list three encoder widths")

    @property
    def channel_widths(self) -> tuple[int, ...]:
        return tuple(int(c) for c in str(self.channels).split(",") if c.strip())


@dataclass
class EvalConfig:
    tol_px: float = 20.0
    min_det_area: int = 25
    danger_radius_m: float = 15.0
    match_fraction: float = 0.5

    def validate(self) -> None:
        if self.tol_px < 0 or self.min_det_area < 1 or self.danger_radius_m < 0:
            raise ConfigError("invalid evaluation settings")


@dataclass
class DataConfig:
    n_train: int = 200
    n_test: int = 50
    data_seed: int = 1234

    def validate(self) -> None:
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("split sizes must be non-negative")


@dataclass
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: AnnotationNoise = field(default_factory=AnnotationNoise)
    slr: SlrConfig = field(default_factory=SlrConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> "Config":
        for section in self._sections():
            section.validate()
        return self

    def _sections(self):
        return [getattr(self, f.name) for f in fields(self)]

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for section in self._sections():
            out.update(dataclasses.asdict(section))
        return out

    def replace(self, **overrides: Any) -> "Config":
        """Copy with flat ``field=value`` overrides applied."""
        cfg = Config(**{f.name: dataclasses.replace(getattr(self, f.name)) for f in fields(self)})
        for key, value in overrides.items():
            section = _owner(cfg, key)
            setattr(section, key, value)
        return cfg

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# [{f.name}]")
            for k, v in dataclasses.asdict(getattr(self, f.name)).items():
                lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"


def _owner(cfg: Config, key: str):
    for section in cfg._sections():
        if key in {f.name for f in fields(section)}:
            return section
    raise ConfigError(f"unknown config key {key!r}")


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw: str, typ: type, key: str) -> Any:
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str, base: Config | None = None) -> Config:
    cfg = (base or Config()).replace()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            section = _owner(cfg, key)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        ftype = {f.name: f.type for f in fields(section)}[key]
        setattr(section, key, _coerce(value, _TYPES[ftype], key))
    return cfg.validate()


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return Config().validate()
    return parse_config(Path(path).read_text())
