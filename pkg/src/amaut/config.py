"""Experiment configuration: YAML files, named profiles, validation.

A config file is a YAML mapping with the optional sections ``dataset``,
``mel``, ``model``, ``train``, ``ttda`` and ``refine`` plus the scalars
``profile``, ``seed`` and ``output_dir``. Values given in the file override
the chosen profile, which in turn overrides library defaults.

Example::

    profile: synth
    seed: 3
    output_dir: runs/demo
    dataset:
      synth: {n_classes: 3, clips_per_class: 20}
      val_fraction: 0.2
    train: {epochs: 10}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import yaml

from .audio_io import SynthSpec
from .errors import ConfigError
from .frontend import MelParams
from .losses import TTDAConfig
from .training import TrainConfig

REFINE_MODES = ("none", "aug", "mlt", "hyb")

# (alpha, beta, gamma, q, lr, lambda, eta) per dataset profile
_TABLE = {
    "am": (1.0, 0.5, 0.5, 1.1, 1e-3, 10, 40),
    "sc1": (0.2, 1.0, 0.0, 0.8, 1e-3, 10, 50),
    "sc2": (0.0, 1.0, 0.2, 1.1, 1e-3, 10, 50),
    "vs": (1.0, 0.5, 0.5, 1.1, 1e-3, 10, 80),
    "cs": (1.0, 0.5, 0.5, 1.1, 1e-3, 10, 40),
}


def _profile(name: str) -> dict:
    if name == "synth":
        return {
            "mel": {"n_mels": 64},
            "model": {"embed_dim": 64, "n_heads": 4, "n_blocks": 2, "cnn_width": 64,
                      "cnn_mid": 32, "target_K": 12},
            "train": {"lr0": 0.01, "lam": 10, "eta": 40, "epochs": 20},
            "ttda": {"alpha": 1.0, "beta": 0.5, "gamma": 0.5, "q": 1.1,
                     "lr": 1e-3, "lam": 10, "eta": 40},
        }
    a, b, g, q, lr, lam, eta = _TABLE[name]
    return {
        "train": {"lr0": lr, "lam": lam, "eta": eta},
        "ttda": {"alpha": a, "beta": b, "gamma": g, "q": q, "lr": lr, "lam": lam, "eta": eta},
    }


PROFILES = tuple(_TABLE) + ("synth",)


@dataclass(frozen=True)
class RefinementSpec:
    mode: str = "none"
    A: int = 2
    M: int = 3

    def __post_init__(self):
        if self.mode not in REFINE_MODES:
            raise ConfigError(f"refine mode must be one of {REFINE_MODES}, got {self.mode!r}")
        if self.A < 0 or self.A % 2:
            raise ConfigError(f"refine.A must be a non-negative even number, got {self.A}")
        if self.M < 1 or self.M % 2 == 0:
            raise ConfigError(f"refine.M must be a positive odd number, got {self.M}")


@dataclass(frozen=True)
class DatasetSpec:
    """Either a manifest path or a synthetic corpus description."""

    manifest: Optional[Path] = None
    synth: Optional[SynthSpec] = None
    val_manifest: Optional[Path] = None
    test_manifest: Optional[Path] = None
    val_fraction: float = 0.0

    def __post_init__(self):
        if (self.manifest is None) == (self.synth is None):
            raise ConfigError("dataset needs exactly one of 'manifest' or 'synth'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        for p in (self.manifest, self.val_manifest, self.test_manifest):
            if p is not None and not p.is_file():
                raise ConfigError(f"dataset file not found: {p}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec(synth=SynthSpec()))
    mel: MelParams = MelParams()
    model: dict = field(default_factory=dict)
    train: TrainConfig = TrainConfig()
    ttda: TTDAConfig = TTDAConfig()
    refine: RefinementSpec = RefinementSpec()
    output_dir: Path = Path("runs/default")
    profile: Optional[str] = None

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        ds = self.dataset
        return {
            "profile": self.profile,
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "dataset": {
                "manifest": str(ds.manifest) if ds.manifest else None,
                "synth": asdict(ds.synth) if ds.synth else None,
                "val_manifest": str(ds.val_manifest) if ds.val_manifest else None,
                "test_manifest": str(ds.test_manifest) if ds.test_manifest else None,
                "val_fraction": ds.val_fraction,
            },
            "mel": self.mel.to_dict(),
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "ttda": self.ttda.to_dict(),
            "refine": asdict(self.refine),
        }


_MODEL_KEYS = {"n_classes", "embed_dim", "n_heads", "n_blocks", "mlp_ratio", "cnn_width",
               "cnn_mid", "blocks_per_stage", "target_K", "attn_dropout",
               "classifier_variant", "max_positions"}


def _build(cls, section: str, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict, *, base_dir: Path = Path("."), profile: Optional[str] = None
                     ) -> ExperimentConfig:
    """Validate a parsed mapping; relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    profile = profile or raw.get("profile")
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {PROFILES}")
        raw = _merge(_profile(profile), raw)
    allowed = {"profile", "seed", "output_dir", "dataset", "mel", "model", "train", "ttda", "refine"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")

    def path(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    ds_raw = dict(raw.get("dataset") or {})
    if "synth" in ds_raw and ds_raw["synth"] is not None:
        synth = dict(ds_raw["synth"])
        if "burst_frac" in synth:
            synth["burst_frac"] = tuple(synth["burst_frac"])
        ds_raw["synth"] = _build(SynthSpec, "dataset.synth", synth)
    elif "manifest" not in ds_raw:
        ds_raw["synth"] = SynthSpec()
    for key in ("manifest", "val_manifest", "test_manifest"):
        if key in ds_raw:
            ds_raw[key] = path(ds_raw[key])
    dataset = _build(DatasetSpec, "dataset", ds_raw)

    model = dict(raw.get("model") or {})
    unknown = set(model) - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in [model]: {sorted(unknown)}")

    train = dict(raw.get("train") or {})
    if "seed" in raw:
        train["seed"] = raw["seed"]
    seed = train.get("seed", 0)
    if not isinstance(seed, int) or seed < 0 or seed >= 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")

    return ExperimentConfig(
        dataset=dataset,
        mel=_build(MelParams, "mel", dict(raw.get("mel") or {})),
        model=model,
        train=_build(TrainConfig, "train", train),
        ttda=_build(TTDAConfig, "ttda", dict(raw.get("ttda") or {})),
        refine=_build(RefinementSpec, "refine", dict(raw.get("refine") or {})),
        output_dir=Path(raw.get("output_dir", "runs/default")),
        profile=profile,
    )


def load_config(path: Optional[Path] = None, *, profile: Optional[str] = None,
                overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    """Read a YAML config (or start empty) and apply profile and overrides."""
    raw: dict = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
        base = path.parent
    if overrides:
        raw = _merge(raw, overrides)
    return config_from_dict(raw, base_dir=base, profile=profile)
