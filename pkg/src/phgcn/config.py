"""RunConfig: one JSON document driving every CLI command.

All randomness comes from the top-level ``seed``. Component seeds are
``derive_seed(seed, stream)`` with stream 1 = synthetic data, 2 = weight
init, 3 = batch shuffling, 4 = gradient-check instance (see ``phgcn.rng``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .dataset import PartitionSpec, SynthConfig
from .gcnnet import HIDDEN
from .optim import VARIANTS, TrainConfig
from .rng import STREAM_SYNTH, derive_seed


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSection:
    n_identities: int = 16
    images_per_identity: int = 12
    rows: int = 24
    cols: int = 8
    dim: int = 32
    noise_sigma: float = 0.5
    corrupt_prob: float = 0.0
    train_identities: int | None = None


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 60
    batch_size: int = 64
    lr_gcn: float = 0.01
    lr_head: float = 1.0
    decay_epoch: int = 40
    decay_factor: float = 0.1
    momentum: float = 0.0


@dataclass(frozen=True)
class ModelSection:
    eps: float = 0.75
    beta: float = 0.3
    delta: float | str = "auto"
    hidden: int = HIDDEN


@dataclass(frozen=True)
class GradCheckSection:
    d0: int = 16
    num_classes: int = 4
    step: float = 1e-5
    max_coords: int = 256


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    variant: str = "phgcn"
    levels: tuple[int, ...] = (1, 3, 6)
    synth: SynthSection = field(default_factory=SynthSection)
    train: TrainSection = field(default_factory=TrainSection)
    model: ModelSection = field(default_factory=ModelSection)
    gradcheck: GradCheckSection = field(default_factory=GradCheckSection)
    paths: dict = field(default_factory=dict)

    # --- derived objects ---

    @property
    def spec(self) -> PartitionSpec:
        return PartitionSpec(self.levels)

    @property
    def delta(self):
        return None if self.model.delta == "auto" else float(self.model.delta)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**asdict(self.synth), seed=derive_seed(self.seed, STREAM_SYNTH))

    def train_config(self) -> TrainConfig:
        return TrainConfig(**asdict(self.train), seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return d

    def digest(self) -> str:
        """sha256 over the canonical JSON of every result-affecting field (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_model(self, **kw) -> "RunConfig":
        cfg = replace(self, model=replace(self.model, **kw))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        def check(name, fn):
            try:
                fn()
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{name}: {exc}") from None

        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed: must be a nonnegative integer, got {self.seed!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: expected one of {VARIANTS}, got {self.variant!r}")
        check("levels", lambda: PartitionSpec(self.levels))
        for name, value in asdict(self.synth).items():
            try:
                SynthConfig(**{**asdict(SynthSection()), name: value})
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"synth.{name}: {exc}") from None
        check("synth", self.synth_config)
        for name, value in asdict(self.train).items():
            try:
                TrainConfig(**{name: value})
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"train.{name}: {exc}") from None
        if not 0.0 < self.model.eps < 1.0:
            raise ConfigError(f"model.eps: must lie strictly inside (0, 1), got {self.model.eps}")
        if self.model.beta < 0:
            raise ConfigError(f"model.beta: must be nonnegative, got {self.model.beta}")
        delta = self.model.delta
        if delta != "auto" and (isinstance(delta, str) or not delta > 0):
            raise ConfigError(f"model.delta: must be 'auto' or a positive number, got {delta!r}")
        if self.model.hidden < 1:
            raise ConfigError("model.hidden: must be positive")
        g = self.gradcheck
        if g.d0 < 1 or g.num_classes < 2 or g.step <= 0 or g.max_coords < 1:
            raise ConfigError("gradcheck: d0 >= 1, num_classes >= 2, step > 0, max_coords >= 1 required")


_SECTIONS = {"synth": SynthSection, "train": TrainSection, "model": ModelSection,
             "gradcheck": GradCheckSection}


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    return cls(**raw)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    kw = dict(raw)
    for name, cls in _SECTIONS.items():
        if name in kw:
            kw[name] = _build(cls, kw[name], name)
    if "levels" in kw:
        kw["levels"] = tuple(kw["levels"])
    cfg = RunConfig(**kw)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(raw)
