"""Flat ``key = value`` experiment configuration.

One setting per line; ``#`` starts a comment. Relative paths resolve
against the directory holding the config file. Example::

    dataset = data/web
    variant = Denoising
    alignment = ShiftedCosine
    lambda = 0.5
    threshold = 0.5
    grid_lambda = 0.0,0.1,0.2
    epochs = 20
    seed = 0
    output_dir = out/web

Training keys mirror ``TrainingConfig`` field names (margin, learning_rate,
batch_size, epochs, user_docs_sampled, weight_decay, hard_negatives,
in_batch_negatives, hard_depth).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .rerank import FusionConfig
from .training import TrainingConfig
from .tuning import DEFAULT_GRID
from .types import AttentionConfig, parse_alignment, parse_variant

log = logging.getLogger(__name__)

PATH_KEYS = ("dataset", "run", "qrels", "params", "output_dir")
_TRAINING_KEYS = {f.name for f in fields(TrainingConfig)} - {"seed"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; later keys override earlier ones."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def parse_grid(value: str) -> Tuple[float, ...]:
    try:
        grid = tuple(float(x) for x in value.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"not a comma-separated list of numbers: {value!r}") from None
    if not grid:
        raise ConfigError("empty grid")
    return grid


@dataclass
class ExperimentConfig:
    name: str = ""
    dataset: Optional[Path] = None
    run: Optional[Path] = None
    qrels: Optional[Path] = None
    params: Optional[Path] = None
    output_dir: Optional[Path] = None
    variant: str = "Denoising"
    alignment: Optional[str] = None
    heads: int = 4
    threshold: float = 0.5
    epsilon: float = 1e-9
    lam: float = 0.5
    normalize_first_stage: bool = True
    tune_threshold: bool = True
    grid_lambda: Tuple[float, ...] = DEFAULT_GRID
    grid_threshold: Tuple[float, ...] = DEFAULT_GRID
    metric: str = "map100"
    split: str = "test"
    seed: int = 0
    alpha: float = 0.05
    iterations: int = 100_000
    training: TrainingConfig = field(default_factory=TrainingConfig)

    @property
    def fusion(self) -> FusionConfig:
        return FusionConfig(self.lam, self.normalize_first_stage)

    def attention(self, dim: int) -> AttentionConfig:
        from .experiment import default_attention

        return default_attention(self.variant, self.alignment, dim=dim, heads=self.heads,
                                 seed=self.seed, threshold=self.threshold)

    def check_paths(self) -> None:
        for key in PATH_KEYS:
            if key == "output_dir":
                continue
            path = getattr(self, key)
            if path is not None and not path.exists():
                raise ConfigError(f"{key}: {path} does not exist")


_SCALARS = {
    "name": str, "variant": str, "alignment": str, "heads": int, "threshold": float,
    "epsilon": float, "lambda": float, "metric": str, "split": str, "seed": int,
    "alpha": float, "iterations": int,
}


def from_mapping(values: Dict[str, str], base_dir: Path = Path("."), check_paths: bool = True) -> ExperimentConfig:
    cfg = ExperimentConfig()
    training = {}
    for key, value in values.items():
        try:
            if key in PATH_KEYS:
                setattr(cfg, key, (base_dir / value).resolve() if value else None)
            elif key in _SCALARS:
                setattr(cfg, "lam" if key == "lambda" else key, _SCALARS[key](value))
            elif key in ("normalize_first_stage", "tune_threshold"):
                setattr(cfg, key, parse_bool(value))
            elif key in ("grid_lambda", "grid_threshold"):
                setattr(cfg, key, parse_grid(value))
            elif key in _TRAINING_KEYS:
                kind = type(getattr(TrainingConfig, key))
                training[key] = kind(value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{key}: {exc}") from None
    try:
        cfg.training = TrainingConfig(seed=cfg.seed, **training)
        parse_variant(cfg.variant)
        if cfg.alignment is not None:
            parse_alignment(cfg.alignment)
        cfg.fusion  # validates lambda
        if not 0.0 <= cfg.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {cfg.threshold}")
        # variant/alignment compatibility is checked by building a config
        cfg.attention(dim=max(cfg.heads, 1) * 2)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if check_paths:
        cfg.check_paths()
    return cfg


def load_config(path, overrides: Optional[Dict[str, str]] = None, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    values = parse_kv(text, str(path))
    values.update(overrides or {})
    cfg = from_mapping(values, path.parent, check_paths)
    if not cfg.name:
        cfg = replace(cfg, name=path.stem)
    return cfg
