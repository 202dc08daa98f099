"""Configuration records and the flat key=value config-file format."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace


@dataclass(frozen=True)
class LossConfig:
    """Objective weights: alpha trades compression against the mutual-
    information term, beta weights the four reconstruction losses, and
    sigma_noise scales the coordinate denoising perturbation (Angstrom).
    pair_norm picks the pair-count normalization of the distance loss
    ("n2" = all ordered pairs, "n" = atom count)."""

    alpha: float = 1.0
    beta: float = 1.0
    sigma_noise: float = 0.1
    pair_norm: str = "n2"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.sigma_noise <= 0:
            raise ValueError("sigma_noise must be positive")
        if self.pair_norm not in ("n", "n2"):
            raise ValueError("pair_norm must be 'n' or 'n2'")


@dataclass(frozen=True)
class ModelConfig:
    """Encoder widths and subgraph-sampling settings.

    The reference-scale embedding width is 300; the defaults here are desk
    scale so the full test matrix runs in minutes.
    """

    in_dim: int = 20
    hidden: int = 32
    latent: int = 16
    proj: int = 32
    depth: int = 4
    k_hop: int = 3
    cutoff_3d: float = 1.5
    ball_radius: float = 4.5
    signed_volume: bool = False
    temperature: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if min(self.hidden, self.latent, self.proj, self.in_dim) < 1:
            raise ValueError("widths must be positive")
        if self.cutoff_3d <= 0 or self.ball_radius <= 0:
            raise ValueError("cutoffs must be positive")

    @property
    def feat_dim(self) -> int:
        return self.in_dim + (1 if self.signed_volume else 0)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 200  # reference scale uses 500
    lr: float = 1e-4
    weight_decay: float = 1e-5
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives)")
        if self.epochs < 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("invalid optimizer settings")

    @property
    def k_hop(self) -> int:
        return self.model.k_hop

    @property
    def cutoff_3d(self) -> float:
        return self.model.cutoff_3d


_LOSS_KEYS = {f.name for f in fields(LossConfig)}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"loss", "model"}


def _coerce(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat `key = value` lines; '#' starts a comment; later keys win."""
    cfg = base or TrainConfig()
    loss_kw: dict = {}
    model_kw: dict = {}
    train_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _LOSS_KEYS:
            loss_kw[key] = _coerce(getattr(cfg.loss, key), raw)
        elif key in _MODEL_KEYS:
            model_kw[key] = _coerce(getattr(cfg.model, key), raw)
        elif key in _TRAIN_KEYS:
            train_kw[key] = _coerce(getattr(cfg, key), raw)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return replace(
        cfg,
        loss=replace(cfg.loss, **loss_kw),
        model=replace(cfg.model, **model_kw),
        **train_kw,
    )


def config_snapshot(cfg: TrainConfig) -> dict:
    """Flat dict of every setting, for manifests and reproducibility."""
    out = {k: getattr(cfg, k) for k in sorted(_TRAIN_KEYS)}
    out.update({k: getattr(cfg.loss, k) for k in sorted(_LOSS_KEYS)})
    out.update({k: getattr(cfg.model, k) for k in sorted(_MODEL_KEYS)})
    return out
