"""Structured run configuration: schema, validation, JSON round-trip, hashing.

A run is described by one :class:`RunConfig` tree. Every field has a
documented default, unknown keys are rejected on load, and the canonical
JSON serialization (sorted keys, compact separators) feeds a SHA-256 hash
that stamps every artifact a run produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .baselines import SamplerConfig
from .errors import ConfigError, InputError
from .lgm_loss import LGMConfig
from .meda_evolution import EvolutionConfig
from .metrics import G_MEAN_VARIANTS
from .networks import MLP, MLPSpec, ModelQuartet, init_params
from .training_phases import PhaseWeights, TrainConfig

DATA_SOURCES = ("glyphs", "idx")


@dataclass
class DataConfig:
    """Dataset source and imbalance layout.

    ``source`` picks between the built-in glyph generator and a pair of
    IDX files; the glyph fields are ignored for the ``idx`` source and
    the path fields are ignored for ``glyphs``. The imbalance fields
    apply to both: ``minority_classes`` keep ``n_min`` training samples,
    every other class keeps ``n_maj``, and each class contributes
    ``n_val`` validation samples.
    """

    source: str = "glyphs"
    class_count: int = 4
    height: int = 16
    width: int = 16
    per_class: int = 520
    noise_sd: float = 0.05
    max_shift: int = 2
    intensity_jitter: float = 0.2
    glyph_seed: int = 0
    idx_images: str | None = None
    idx_labels: str | None = None
    minority_classes: tuple[int, ...] = (0,)
    n_min: int = 20
    n_maj: int = 400
    n_val: int = 100
    split_seed: int = 0

    def __post_init__(self) -> None:
        if self.source not in DATA_SOURCES:
            raise ConfigError(
                f"source must be one of {DATA_SOURCES}, got {self.source!r}"
            )
        for name in ("class_count", "height", "width", "per_class"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")
        for name in ("noise_sd", "intensity_jitter"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value!r}")
        if not isinstance(self.max_shift, int) or self.max_shift < 0:
            raise ConfigError(
                f"max_shift must be a non-negative integer, got {self.max_shift!r}"
            )
        for name in ("n_min", "n_maj", "n_val"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.minority_classes:
            raise ConfigError("minority_classes must not be empty")
        seen: set[int] = set()
        for label in self.minority_classes:
            if not isinstance(label, int) or not 0 <= label < self.class_count:
                raise ConfigError(
                    f"minority class {label!r} outside [0, {self.class_count})"
                )
            if label in seen:
                raise ConfigError(f"minority class {label} listed twice")
            seen.add(label)
        if len(self.minority_classes) >= self.class_count:
            raise ConfigError("at least one class must remain majority")
        if self.source == "idx" and (self.idx_images is None or self.idx_labels is None):
            raise ConfigError("idx source requires idx_images and idx_labels paths")
        if self.source == "glyphs":
            needed = self.n_val + max(self.n_min, self.n_maj)
            if needed > self.per_class:
                raise ConfigError(
                    f"per_class={self.per_class} cannot supply n_val plus the "
                    f"larger train count ({needed})"
                )


@dataclass
class ModelConfig:
    """Hidden-layer widths for the four networks and the latent size."""

    latent_dim: int = 12
    encoder_hidden: tuple[int, ...] = (256,)
    decoder_hidden: tuple[int, ...] = (256,)
    latent_hidden: tuple[int, ...] = (64,)
    image_hidden: tuple[int, ...] = (256, 64)

    def __post_init__(self) -> None:
        if not isinstance(self.latent_dim, int) or self.latent_dim < 1:
            raise ConfigError(
                f"latent_dim must be a positive integer, got {self.latent_dim!r}"
            )
        for name in ("encoder_hidden", "decoder_hidden", "latent_hidden", "image_hidden"):
            widths = getattr(self, name)
            if not widths:
                raise ConfigError(f"{name} must list at least one layer width")
            for width in widths:
                if not isinstance(width, int) or width < 1:
                    raise ConfigError(
                        f"{name} widths must be positive integers, got {width!r}"
                    )


@dataclass
class RunConfig:
    """Complete description of one experiment run."""

    seed: int = 0
    run_dir: str = "run"
    g_mean_variant: str = "macro_specificity"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lgm: LGMConfig = field(default_factory=LGMConfig)
    weights: PhaseWeights = field(default_factory=PhaseWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    final_classifier: TrainConfig = field(
        default_factory=lambda: TrainConfig(max_epochs=100, patience=10)
    )

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if not isinstance(self.run_dir, str) or not self.run_dir:
            raise ConfigError(f"run_dir must be a non-empty string, got {self.run_dir!r}")
        if self.g_mean_variant not in G_MEAN_VARIANTS:
            raise ConfigError(
                f"g_mean_variant must be one of {G_MEAN_VARIANTS}, got "
                f"{self.g_mean_variant!r}"
            )


# Section name -> dataclass, in the order sections appear in from_dict docs.
_SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "model": ModelConfig,
    "lgm": LGMConfig,
    "weights": PhaseWeights,
    "train": TrainConfig,
    "evolution": EvolutionConfig,
    "sampler": SamplerConfig,
    "final_classifier": TrainConfig,
}
_SCALARS = ("seed", "run_dir", "g_mean_variant")


def _build_section(cls: type, overrides: object, section: str):
    """Instantiate one config section, rejecting unknown keys."""
    if not isinstance(overrides, dict):
        raise ConfigError(
            f"{section}: expected a mapping, got {type(overrides).__name__}"
        )
    names = {f.name for f in dataclasses.fields(cls)}
    for key in overrides:
        if key not in names:
            raise ConfigError(f"{section}: unknown key {key!r}")
    kwargs = {}
    for name, value in overrides.items():
        # JSON has no tuples; lists fill tuple-typed fields.
        kwargs[name] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (InputError, ConfigError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def from_dict(mapping: object) -> RunConfig:
    """Build a validated :class:`RunConfig` from a plain mapping.

    Missing keys fall back to defaults; unknown keys at any level raise
    :class:`ConfigError` naming the key and its section.
    """
    if not isinstance(mapping, dict):
        raise ConfigError(f"config root must be a mapping, got {type(mapping).__name__}")
    known = set(_SCALARS) | set(_SECTIONS)
    for key in mapping:
        if key not in known:
            raise ConfigError(f"config: unknown key {key!r}")
    kwargs: dict[str, object] = {}
    for name, cls in _SECTIONS.items():
        if name in mapping:
            kwargs[name] = _build_section(cls, mapping[name], name)
    for name in _SCALARS:
        if name in mapping:
            kwargs[name] = mapping[name]
    try:
        return RunConfig(**kwargs)
    except (InputError, ConfigError) as exc:
        raise ConfigError(f"config: {exc}") from exc


def to_dict(config: RunConfig) -> dict:
    """Plain-data mirror of the config tree (tuples become lists)."""

    def convert(value: object) -> object:
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {
                f.name: convert(getattr(value, f.name))
                for f in dataclasses.fields(value)
            }
        if isinstance(value, tuple):
            return [convert(item) for item in value]
        return value

    result = convert(config)
    assert isinstance(result, dict)
    return result


def config_hash(config: RunConfig) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    payload = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def default_config() -> RunConfig:
    """A fully defaulted configuration."""
    return RunConfig()


def save_config(config: RunConfig, path: str) -> None:
    """Write the config as indented JSON with sorted keys."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path: str) -> RunConfig:
    """Read and validate a JSON config file."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            mapping = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return from_dict(mapping)


def build_quartet(
    model: ModelConfig, image_dim: int, class_count: int, rng: np.random.Generator
) -> ModelQuartet:
    """Instantiate the four networks with the configured layer widths."""
    specs = {
        "encoder": MLPSpec(
            (image_dim, *model.encoder_hidden, model.latent_dim), "linear"
        ),
        "decoder": MLPSpec(
            (model.latent_dim, *model.decoder_hidden, image_dim), "sigmoid"
        ),
        "latent_classifier": MLPSpec(
            (model.latent_dim, *model.latent_hidden, class_count), "logits"
        ),
        "image_classifier": MLPSpec(
            (image_dim, *model.image_hidden, class_count), "logits"
        ),
    }
    return ModelQuartet(
        **{name: MLP(s, init_params(s, rng)) for name, s in specs.items()}
    )
