"""Run configuration: one JSON document describing a full experiment.

The global ``seed`` is the only source of randomness; it is copied into the
nested phantom, watershed and training configs, so those sections carry no
seed of their own in the JSON form.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace

from segnl.nn.train import TrainConfig
from segnl.nn.unet import UNetConfig
from segnl.phantom import PhantomSpec
from segnl.watershed import WatershedConfig


class ConfigError(ValueError):
    pass


# Desk-scale phantom: half the in-plane and axial resolution of the
# PhantomSpec defaults, same anatomy in voxel-relative terms.
HEADLINE_PHANTOM = PhantomSpec(
    dims=(32, 32, 16),
    brain_semi_axes=(13.5, 14.5, 6.5),
    ventricle_offset_x=4.0,
    ventricle_offset_y=1.0,
    ventricle_semi_axes=(2.5, 4.5, 3.0),
    center_jitter_std=0.5,
)

# Conservative flood with barrier noise: labels miss ventricle voxels but
# almost never include tissue (cohort-mean DSC about 0.78). Seed jitter is
# off because a seed pushed out of these small ventricles fails the whole side.
HEADLINE_WATERSHED = WatershedConfig(
    smoothing_sigma=0.5,
    stop_quantile=0.035,
    seed_jitter_std=0.0,
    barrier_noise_std=0.1,
)

# ~60 steps per epoch here, so a larger step than the 200-epoch schedule
HEADLINE_TRAIN = TrainConfig(epochs=40, lr_drop_epoch=30, lr_initial=1e-3, lr_late=1e-4, batch_size=8)


@dataclass(frozen=True)
class CohortConfig:
    n_train: int = 30
    n_val: int = 5
    n_test: int = 5

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one subject")


@dataclass(frozen=True)
class MetricsConfig:
    n_thresholds: int = 200
    n_bootstraps: int = 1000
    # statistic resampled by the bootstrap: mean of per-subject DSC
    bootstrap_statistic: str = "mean"
    # voxel is foreground when p(left) or p(right) exceeds this
    threshold: float = 0.5
    margin: float = 0.03
    alpha: float = 0.05

    def __post_init__(self):
        if self.n_thresholds < 2 or self.n_bootstraps < 1:
            raise ValueError("need n_thresholds >= 2 and n_bootstraps >= 1")
        if self.bootstrap_statistic not in ("mean", "median"):
            raise ValueError(f"bootstrap_statistic must be 'mean' or 'median', got {self.bootstrap_statistic!r}")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


_SEEDED = ("phantom", "watershed", "train")


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "run"
    # cohort location; empty means <output_dir>/cohort
    data_dir: str = ""
    seed: int = 0
    cohort: CohortConfig = field(default_factory=CohortConfig)
    phantom: PhantomSpec = HEADLINE_PHANTOM
    watershed: WatershedConfig = HEADLINE_WATERSHED
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = HEADLINE_TRAIN
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        for name in _SEEDED:
            sub = getattr(self, name)
            if sub.seed != self.seed:
                object.__setattr__(self, name, replace(sub, seed=self.seed))

    @property
    def cohort_dir(self):
        return self.data_dir or os.path.join(self.output_dir, "cohort")

    def to_dict(self):
        out = {"output_dir": self.output_dir, "data_dir": self.data_dir, "seed": self.seed}
        for name, sub in self._sections():
            d = sub.to_dict() if hasattr(sub, "to_dict") else {f.name: getattr(sub, f.name) for f in fields(sub)}
            d.pop("seed", None)
            out[name] = d
        return out

    def _sections(self):
        return [(n, getattr(self, n)) for n in ("cohort", "phantom", "watershed", "unet", "train", "metrics")]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kwargs = {k: d[k] for k in ("output_dir", "data_dir", "seed") if k in d}
        try:
            for name, sub in base._sections():
                if name not in d:
                    continue
                section = d[name]
                if not isinstance(section, dict):
                    raise ConfigError(f"section {name!r} must be an object")
                if "seed" in section:
                    raise ConfigError(f"{name}.seed is not allowed; set the top-level seed")
                merged = _section_dict(sub)
                merged.update(section)
                kwargs[name] = _build(type(sub), merged)
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def stage_hash(self, stage):
        """Digest of everything a pipeline stage (and its upstream stages) depends on."""
        d = self.to_dict()
        d["seed"] = self.seed
        keys = {
            "generate": ("seed", "cohort", "phantom"),
            "pseudolabel": ("seed", "cohort", "phantom", "watershed"),
            "train": ("seed", "cohort", "phantom", "watershed", "unet", "train"),
            "evaluate": ("seed", "cohort", "phantom", "watershed", "unet", "train", "metrics"),
        }[stage]
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def _section_dict(sub):
    if hasattr(sub, "to_dict"):
        return sub.to_dict()
    return {f.name: getattr(sub, f.name) for f in fields(sub)}


def _build(cls, d):
    if hasattr(cls, "from_dict"):
        return cls.from_dict(d)
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return RunConfig.from_dict(raw)


def dump_config(config):
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
