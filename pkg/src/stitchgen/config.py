"""Declarative run configuration: defaults, strict parsing, overrides.

One JSON document drives a whole pipeline run. Every key has a default,
unknown keys are rejected so typos fail loudly, and serialization is
canonical (sorted keys, two-space indent, trailing newline) so a saved
config byte-reproduces on rewrite.
"""

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


def _as_int(value, path):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return value


def _as_float(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _as_str(value, path):
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _as_int_tuple(value, path):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
    return tuple(_as_int(v, f"{path}[{i}]") for i, v in enumerate(value))


def _as_layer_set(value, path):
    return None if value is None else _as_int_tuple(value, path)


def _as_float_tuple(value, path):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"{path}: expected a list of numbers, got {value!r}")
    return tuple(_as_float(v, f"{path}[{i}]") for i, v in enumerate(value))


def _require(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(message)


@dataclass(frozen=True)
class WorldSection:
    """Synthetic-world shape: class count, views per scene, image size."""

    n_classes: int = 4
    n_views: int = 4
    H: int = 16
    W: int = 16
    n_scenes: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "n_views", "H", "W", "n_scenes"):
            _require(getattr(self, name) >= 1, f"world.{name}: must be >= 1")
        _require(self.seed >= 0, "world.seed: must be >= 0")


@dataclass(frozen=True)
class ModelsSection:
    """Architecture knobs plus the training budget of each base model."""

    latent_channels: int = 8
    f_layers: int = 6
    critic_width: int = 64
    vae_epochs: int = 40
    f3d_epochs: int = 60
    critic_epochs: int = 12
    gen_steps: int = 1500

    def __post_init__(self):
        _require(self.latent_channels >= 1, "models.latent_channels: must be >= 1")
        _require(self.f_layers >= 2, "models.f_layers: must be >= 2")
        _require(self.critic_width >= 1, "models.critic_width: must be >= 1")
        for name in ("vae_epochs", "f3d_epochs", "critic_epochs", "gen_steps"):
            _require(getattr(self, name) >= 0, f"models.{name}: must be >= 0")


@dataclass(frozen=True)
class StitchSection:
    """Layer scan plus stitched-model finetune settings."""

    layer_set: tuple | None = None  # None scans every layer 1..l-1
    ridge_scale: float = 1e-6
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    lr: float = 2e-4
    epochs: int = 12
    batch: int = 8
    clip: float = 1.0

    def __post_init__(self):
        if self.layer_set is not None:
            _require(len(self.layer_set) >= 1, "stitch.layer_set: must be nonempty")
            _require(all(k >= 1 for k in self.layer_set),
                     "stitch.layer_set: layers must be >= 1")
        _require(self.ridge_scale >= 0, "stitch.ridge_scale: must be >= 0")
        _require(self.adapter_rank >= 1, "stitch.adapter_rank: must be >= 1")
        _require(self.lr > 0, "stitch.lr: must be > 0")
        _require(self.epochs >= 0, "stitch.epochs: must be >= 0")
        _require(self.batch >= 1, "stitch.batch: must be >= 1")
        _require(self.clip > 0, "stitch.clip: must be > 0")


@dataclass(frozen=True)
class AlignSection:
    """Reward-alignment schedule: rollout lengths, step budget, weights."""

    T1: int = 10
    T2: int = 50
    K: int = 2
    lr: float = 1e-4
    steps: int = 60
    batch: int = 4
    clip: float = 0.1
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    w_mv: float = 1.0 / 16.0
    w_3d: float = 1.0 / 16.0
    w_cons: float = 0.05

    def __post_init__(self):
        _require(1 <= self.T1 <= self.T2, "align: need 1 <= T1 <= T2")
        _require(0 <= self.K <= self.T1, "align: need 0 <= K <= T1")
        _require(self.lr > 0, "align.lr: must be > 0")
        _require(self.steps >= 0, "align.steps: must be >= 0")
        _require(self.batch >= 1, "align.batch: must be >= 1")
        _require(self.clip > 0, "align.clip: must be > 0")
        _require(self.adapter_rank >= 1, "align.adapter_rank: must be >= 1")


@dataclass(frozen=True)
class EvalSection:
    alphas: tuple = (0.0, 0.005, 0.01, 0.02, 0.05)
    trials: int = 16

    def __post_init__(self):
        _require(len(self.alphas) >= 1, "eval.alphas: must be nonempty")
        _require(all(a >= 0 for a in self.alphas), "eval.alphas: must be >= 0")
        _require(list(self.alphas) == sorted(self.alphas),
                 "eval.alphas: must be sorted ascending")
        _require(self.trials >= 1, "eval.trials: must be >= 1")


@dataclass(frozen=True)
class PathsSection:
    workdir: str = "runs/default"

    def __post_init__(self):
        _require(bool(self.workdir), "paths.workdir: must be nonempty")


_SECTIONS = {
    "world": (WorldSection, {
        "n_classes": _as_int, "n_views": _as_int, "H": _as_int, "W": _as_int,
        "n_scenes": _as_int, "seed": _as_int,
    }),
    "models": (ModelsSection, {
        "latent_channels": _as_int, "f_layers": _as_int, "critic_width": _as_int,
        "vae_epochs": _as_int, "f3d_epochs": _as_int, "critic_epochs": _as_int,
        "gen_steps": _as_int,
    }),
    "stitch": (StitchSection, {
        "layer_set": _as_layer_set, "ridge_scale": _as_float,
        "adapter_rank": _as_int, "adapter_alpha": _as_float, "lr": _as_float,
        "epochs": _as_int, "batch": _as_int, "clip": _as_float,
    }),
    "align": (AlignSection, {
        "T1": _as_int, "T2": _as_int, "K": _as_int, "lr": _as_float,
        "steps": _as_int, "batch": _as_int, "clip": _as_float,
        "adapter_rank": _as_int, "adapter_alpha": _as_float,
        "w_mv": _as_float, "w_3d": _as_float, "w_cons": _as_float,
    }),
    "eval": (EvalSection, {
        "alphas": _as_float_tuple, "trials": _as_int,
    }),
    "paths": (PathsSection, {
        "workdir": _as_str,
    }),
}


@dataclass(frozen=True)
class RunConfig:
    world: WorldSection = field(default_factory=WorldSection)
    models: ModelsSection = field(default_factory=ModelsSection)
    stitch: StitchSection = field(default_factory=StitchSection)
    align: AlignSection = field(default_factory=AlignSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)


def from_dict(payload: dict) -> RunConfig:
    """Build a RunConfig from a nested mapping; any unknown key raises."""
    if not isinstance(payload, dict):
        raise ConfigError(
            f"config: root must be a mapping, got {type(payload).__name__}")
    unknown = set(payload) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"config: unknown section(s) {sorted(unknown)}")
    built = {}
    for name, (cls, kinds) in _SECTIONS.items():
        sub = payload.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(
                f"{name}: expected a mapping, got {type(sub).__name__}")
        bad = set(sub) - set(kinds)
        if bad:
            raise ConfigError(f"{name}: unknown key(s) {sorted(bad)}")
        kwargs = {key: kinds[key](sub[key], f"{name}.{key}") for key in sub}
        built[name] = cls(**kwargs)
    return RunConfig(**built)


def to_dict(cfg: RunConfig) -> dict:
    out = {}
    for name in _SECTIONS:
        section = getattr(cfg, name)
        entry = {}
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            entry[f.name] = list(value) if isinstance(value, tuple) else value
        out[name] = entry
    return out


def serialize_config(cfg: RunConfig) -> str:
    """Canonical JSON text; identical configs always serialize identically."""
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_config(cfg))


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return from_dict(payload)


def apply_overrides(payload: dict, assignments) -> dict:
    """Apply dotted key=value overrides (values parse as JSON, else string)."""
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.strip().split(".")
        if any(not p for p in parts):
            raise ConfigError(f"override {item!r}: bad key {key!r}")
        node = payload
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise ConfigError(
                    f"override {item!r}: {part!r} is not a section")
            node = nxt
        node[parts[-1]] = value
    return payload
