"""Run configuration: flat ``key = value`` text files with typed parsing.

Unknown keys are rejected.  Every key is listed in ``docs/config.md``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .solver import RansacConfig
from .synth import SynthConfig


@dataclass
class RunConfig:
    seed: int = 0
    # data
    image_size: int = 64
    patch_size: int = 8
    prior_points: int = 1024
    prior_instances: int = 16
    n_train: int = 600
    n_test: int = 120
    depth_min: float = 0.6
    depth_max: float = 1.2
    render_density: int = 24
    image_noise: float = 0.0
    # model
    d_model: int = 32
    head_hidden: int = 64
    head_depth: int = 2
    proj_depth: int = 1
    fusion: str = "attention"
    scale_mode: str = "residual"
    guidance_scale: float = 0.1
    # optimization
    batch_size: int = 16
    epochs: int = 120
    lr: float = 1e-3
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 100.0
    corr_beta: float = 0.1
    entropy_weight: float = 1e-3
    deform_weight: float = 1e-2
    chamfer_weight: float = 0.0
    scale_loss_norm: str = "l1"
    checkpoint_every: int = 10
    # pose solving
    ransac_threshold: float = 1.0
    ransac_confidence: float = 0.999
    ransac_max_iterations: int = 500
    ransac_min_inliers: int = 6
    ransac_refine_iterations: int = 10
    workers: int = 1

    def validate(self) -> "RunConfig":
        positive = ["image_size", "patch_size", "prior_points", "prior_instances", "d_model",
                    "head_hidden", "head_depth", "proj_depth", "batch_size", "lr", "corr_beta",
                    "ransac_threshold", "ransac_max_iterations", "render_density",
                    "checkpoint_every", "workers", "guidance_scale"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)!r}")
        nonneg = ["n_train", "n_test", "epochs", "lambda1", "lambda2", "lambda3",
                  "entropy_weight", "deform_weight", "chamfer_weight", "ransac_refine_iterations", "image_noise"]
        for name in nonneg:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size: {self.patch_size} does not divide image_size {self.image_size}")
        if not 0 < self.depth_min <= self.depth_max:
            raise ConfigError(f"depth_min/depth_max: need 0 < min <= max, got {self.depth_min}, {self.depth_max}")
        if self.fusion not in ("attention", "concat"):
            raise ConfigError(f"fusion: expected 'attention' or 'concat', got {self.fusion!r}")
        if self.scale_mode not in ("residual", "direct"):
            raise ConfigError(f"scale_mode: expected 'residual' or 'direct', got {self.scale_mode!r}")
        if self.scale_loss_norm not in ("l1", "l2"):
            raise ConfigError(f"scale_loss_norm: expected 'l1' or 'l2', got {self.scale_loss_norm!r}")
        if not 0 < self.ransac_confidence < 1:
            raise ConfigError(f"ransac_confidence: must lie in (0, 1), got {self.ransac_confidence}")
        if self.ransac_min_inliers < 4:
            raise ConfigError("ransac_min_inliers: must be >= 4")
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validate()

    def synth_config(self) -> SynthConfig:
        return SynthConfig(n_train=self.n_train, n_test=self.n_test, image_size=self.image_size,
                           depth_range=(self.depth_min, self.depth_max), density=self.render_density,
                           prior_points=self.prior_points, prior_instances=self.prior_instances,
                           noise_std=self.image_noise)

    def ransac(self, seed: int = 0) -> RansacConfig:
        return RansacConfig(max_iterations=self.ransac_max_iterations,
                            inlier_threshold_px=self.ransac_threshold,
                            confidence=self.ransac_confidence,
                            min_inliers=self.ransac_min_inliers,
                            refine_iterations=self.ransac_refine_iterations, seed=seed)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _format(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, raw: str, kind):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as err:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from err


_TYPES = {f.name: {"int": int, "float": float, "str": str}[f.type] for f in fields(RunConfig)}


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, _TYPES[key])
    return dataclasses.replace(base or RunConfig(), **values).validate()


def load_config(path) -> RunConfig:
    p = Path(path)
    if p.name in PRESETS and not p.exists():
        return preset(p.name)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config_text(text)


PRESETS = {
    # full-size shapes: 224 x 224 crops, N_r = 1024; for shape parity, not accuracy
    "paper-shape": dict(image_size=224, patch_size=14, prior_points=1024),
    # 600 samples x 120 epochs in about 10 minutes on one core
    "desk": dict(prior_points=128, patch_size=4, lr=3e-3, guidance_scale=5.0, ransac_threshold=2.0),
    "tiny": dict(prior_points=16, d_model=8, head_hidden=16, n_train=12, n_test=6, epochs=2,
                 batch_size=4, render_density=8, prior_instances=8, ransac_threshold=2.0),
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(**PRESETS[name]).validate()
