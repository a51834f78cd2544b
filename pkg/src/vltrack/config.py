"""Experiment configuration: model, training, synthetic world and evaluation.

One YAML file drives a whole experiment; its canonical JSON form is hashed
into the digest recorded in checkpoints and reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

COLORS = {
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.20),
    "blue": (0.20, 0.30, 0.95),
    "yellow": (0.95, 0.90, 0.20),
    "magenta": (0.90, 0.20, 0.90),
    "cyan": (0.20, 0.90, 0.90),
}
SHAPES = ("square", "circle", "triangle")
DIRECTIONS = ("left", "right", "up", "down")


def default_vocab() -> list[str]:
    return ["<pad>", *COLORS, *SHAPES, "moving", *DIRECTIONS]


class ConfigError(ValueError):
    """Raised with every violated invariant listed, one per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class ModelConfig:
    width: int = 64                 # C
    patch: int = 8                  # p
    shallow_layers: int = 2         # N
    deep_layers: int = 2            # M
    heads: int = 4
    mlp_ratio: int = 2
    max_words: int = 6              # N_l
    template_h: int = 32
    template_w: int = 32
    search_h: int = 64
    search_w: int = 64
    tau: float = 0.1
    beta: float = 0.75
    n_neg: int = 9
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_mmc: float = 0.1
    ctx_threshold: float = 0.5
    grounding_floor: float = 0.1
    template_factor: float = 4.0    # crop area / box area
    search_factor: float = 16.0
    final_norm: bool = True
    ln_eps: float = 1e-6
    init_std: float = 0.02
    vocab: list = field(default_factory=default_vocab)

    @property
    def n_template(self) -> int:
        return (self.template_h // self.patch) * (self.template_w // self.patch)

    @property
    def n_search(self) -> int:
        return (self.search_h // self.patch) * (self.search_w // self.patch)

    @property
    def search_grid(self) -> tuple[int, int]:
        return self.search_h // self.patch, self.search_w // self.patch

    @property
    def template_grid(self) -> tuple[int, int]:
        return self.template_h // self.patch, self.template_w // self.patch

    @property
    def n_tokens(self) -> int:
        return 2 + self.max_words + self.n_template + self.n_search

    def problems(self) -> list[str]:
        out = []
        for name in ("width", "patch", "heads", "mlp_ratio", "max_words",
                     "template_h", "template_w", "search_h", "search_w"):
            if getattr(self, name) < 1:
                out.append(f"model.{name} must be >= 1")
        for name in ("shallow_layers", "deep_layers"):
            if getattr(self, name) < 0:
                out.append(f"model.{name} must be >= 0")
        if self.heads >= 1 and self.width % self.heads:
            out.append("model.heads must divide model.width")
        if self.patch >= 1:
            for name in ("template_h", "template_w", "search_h", "search_w"):
                if getattr(self, name) % self.patch:
                    out.append(f"model.patch must divide model.{name}")
        if self.tau <= 0:
            out.append("model.tau must be > 0")
        if not 0.0 <= self.beta <= 1.0:
            out.append("model.beta must lie in [0, 1]")
        if self.n_neg < 1:
            out.append("model.n_neg must be >= 1")
        for name in ("lambda_l1", "lambda_giou", "lambda_mmc"):
            if getattr(self, name) < 0:
                out.append(f"model.{name} must be >= 0")
        if self.template_factor <= 0 or self.search_factor <= 0:
            out.append("model crop factors must be > 0")
        if self.ln_eps <= 0:
            out.append("model.ln_eps must be > 0")
        if not self.vocab or self.vocab[0] != "<pad>":
            out.append("model.vocab must start with '<pad>'")
        if len(set(self.vocab)) != len(self.vocab):
            out.append("model.vocab has duplicate words")
        return out


@dataclass
class TrainConfig:
    steps: int = 2500
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    mode_ratio: list = field(default_factory=lambda: [4.0, 1.0, 4.0])
    optimizer: str = "adamw"
    checkpoint_every: int = 0
    grad_clip: float = 1.0
    pool_sequences: int = 400
    max_gap: int = 8
    search_jitter: float = 0.15
    context_prob: float = 0.5
    log_every: int = 100

    def problems(self) -> list[str]:
        out = []
        if self.steps < 0:
            out.append("train.steps must be >= 0")
        if self.batch_size < 1:
            out.append("train.batch_size must be >= 1")
        if self.lr < 0:
            out.append("train.lr must be >= 0")
        if len(self.mode_ratio) != 3:
            out.append("train.mode_ratio needs three weights (BBOX, NL, NL_BBOX)")
        elif any(w < 0 for w in self.mode_ratio) or sum(self.mode_ratio) <= 0:
            out.append("train.mode_ratio weights must be >= 0 and not all zero")
        if self.optimizer not in ("adamw", "sgd"):
            out.append("train.optimizer must be 'adamw' or 'sgd'")
        if self.pool_sequences < 1:
            out.append("train.pool_sequences must be >= 1")
        if self.max_gap < 1:
            out.append("train.max_gap must be >= 1")
        if not 0.0 <= self.context_prob <= 1.0:
            out.append("train.context_prob must lie in [0, 1]")
        return out


@dataclass
class WorldConfig:
    frame_h: int = 64
    frame_w: int = 64
    n_frames: int = 20
    palette: list = field(default_factory=lambda: list(COLORS))
    shapes: list = field(default_factory=lambda: list(SHAPES))
    min_distractors: int = 2
    max_distractors: int = 3
    min_size: float = 9.0
    max_size: float = 14.0
    min_speed: float = 0.6
    max_speed: float = 2.0
    motion_word_prob: float = 0.5
    noise: float = 0.02
    supersample: int = 4

    def problems(self) -> list[str]:
        out = []
        if len(self.palette) < 3:
            out.append("world.palette needs at least 3 colors")
        unknown = [c for c in self.palette if c not in COLORS]
        if unknown:
            out.append(f"world.palette has unknown colors {unknown}")
        bad = [s for s in self.shapes if s not in SHAPES]
        if bad:
            out.append(f"world.shapes has unknown shapes {bad}")
        if len(self.palette) * len(self.shapes) < 2:
            out.append("world needs at least 2 distinguishable object classes")
        if self.n_frames < 2:
            out.append("world.n_frames must be >= 2")
        if self.min_distractors < 1 or self.max_distractors < self.min_distractors:
            out.append("world distractor counts need 1 <= min <= max")
        if not 0 < self.min_size <= self.max_size < min(self.frame_h, self.frame_w) / 2:
            out.append("world object sizes must satisfy 0 < min <= max < frame/2")
        if self.min_speed < 0 or self.max_speed < self.min_speed:
            out.append("world speeds need 0 <= min <= max")
        return out


@dataclass
class EvalConfig:
    n_sequences: int = 50
    seed_offset: int = 1_000_000
    n_frames: int = 20
    precision_threshold: float = 4.0

    def problems(self) -> list[str]:
        out = []
        if self.n_sequences < 1:
            out.append("eval.n_sequences must be >= 1")
        if self.n_frames < 2:
            out.append("eval.n_frames must be >= 2")
        return out


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    world: WorldConfig = field(default_factory=WorldConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "ExperimentConfig":
        problems = (self.model.problems() + self.train.problems()
                    + self.world.problems() + self.eval.problems())
        vocab = set(self.model.vocab)
        missing = [w for w in (*self.world.palette, *self.world.shapes, "moving", *DIRECTIONS)
                   if w not in vocab]
        if missing:
            problems.append(f"model.vocab lacks world words {missing}")
        if self.model.max_words < 4:
            problems.append("model.max_words must be >= 4 to hold '<color> <shape> moving <dir>'")
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "world": WorldConfig, "eval": EvalConfig}
REQUIRED_SECTIONS = ("model", "train")


def from_dict(raw: dict, strict: bool = True) -> ExperimentConfig:
    """Build and validate a config from nested mappings.

    Unknown keys and missing required sections are reported together with the
    invariant violations.
    """
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    for name in REQUIRED_SECTIONS:
        if strict and name not in raw:
            problems.append(f"missing required section '{name}'")
    for name in raw:
        if name not in _SECTIONS:
            problems.append(f"unknown section '{name}'")
    sections = {}
    for name, cls in _SECTIONS.items():
        values = raw.get(name) or {}
        if not isinstance(values, dict):
            problems.append(f"section '{name}' must be a mapping")
            values = {}
        known = {f.name for f in dataclasses.fields(cls)}
        for key in values:
            if key not in known:
                problems.append(f"unknown field '{name}.{key}'")
        sections[name] = cls(**{k: v for k, v in values.items() if k in known})
    cfg = ExperimentConfig(**sections)
    try:
        cfg.validate()
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse {path}: {exc}"]) from exc
    return from_dict(raw or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def micro_config() -> ExperimentConfig:
    """Smallest configuration that still exercises every code path."""
    model = ModelConfig(width=8, patch=2, shallow_layers=1, deep_layers=1, heads=2,
                        mlp_ratio=2, max_words=4, template_h=2, template_w=2,
                        search_h=4, search_w=4, n_neg=2)
    return ExperimentConfig(model=model).validate()
