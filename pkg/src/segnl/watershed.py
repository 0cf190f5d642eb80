"""Seeded priority-flood watershed used to produce imperfect ventricle labels.

The flood surface is the smoothed channel-1 intensity plus optional
"barrier" noise. Two seeds (left, right) flood simultaneously over a
6-connected grid in nondecreasing flood level; the flood stops once the next
level exceeds a quantile of the in-mask surface. Seed jitter and barrier
noise are the knobs that make the labels imperfect.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from segnl import kernels
from segnl.preprocess import compute_brain_mask, percentile_normalize
from segnl.rng import substream
from segnl.volume_io import LabelMap

LEFT, RIGHT = 1, 2


class SeedError(ValueError):
    pass


class FloodPreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class WatershedConfig:
    smoothing_sigma: float = 1.0
    stop_quantile: float = 0.35
    seed_jitter_std: float = 2.0
    barrier_noise_std: float = 0.05
    # correlation length (voxels) of the barrier noise; 0 gives white noise
    barrier_noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.smoothing_sigma < 0 or self.barrier_noise_sigma < 0:
            raise ValueError("smoothing sigmas must be >= 0")
        if not 0 < self.stop_quantile <= 1:
            raise ValueError(f"stop_quantile must be in (0, 1], got {self.stop_quantile}")
        if self.seed_jitter_std < 0 or self.barrier_noise_std < 0:
            raise ValueError("noise stds must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown WatershedConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SeedSet:
    left: tuple
    right: tuple
    midline: float

    def as_array(self):
        return np.array([self.left, self.right], dtype=np.intp)


def smooth(data, sigma):
    data = np.asarray(data, dtype=np.float64)
    if sigma == 0:
        return data.copy()
    return ndimage.gaussian_filter(data, sigma, mode="nearest")


def _central_box(coords):
    """Slices covering the middle 50% of the bounding box of ``coords`` on each axis."""
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    ext = hi - lo
    start = np.floor(lo + 0.25 * ext).astype(int)
    stop = np.ceil(hi - 0.25 * ext).astype(int) + 1
    return tuple(slice(a, b) for a, b in zip(start, stop))


def _snap_to_mask(point, mask, half):
    """Nearest in-mask voxel of the same half-space (ties: first in scan order)."""
    if mask[tuple(point)] and half[tuple(point)]:
        return tuple(int(v) for v in point)
    cand = np.argwhere(mask & half)
    d2 = ((cand - np.asarray(point)) ** 2).sum(axis=1)
    return tuple(int(v) for v in cand[int(np.argmin(d2))])


def select_seeds(volume, mask, config, rng=None):
    """Darkest smoothed voxel in the central box of each brain half, then jittered.

    The midline is the x-coordinate of the mask centroid; the left half is
    ``x < midline``. With ``seed_jitter_std > 0`` each seed moves by rounded
    Gaussian noise and is snapped back to the mask within its own half.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise SeedError("empty brain mask")
    sm = smooth(volume.data, config.smoothing_sigma)
    coords = np.argwhere(mask)
    midline = float(coords[:, 0].mean())
    xs = np.arange(mask.shape[0])[:, None, None]
    halves = {LEFT: np.broadcast_to(xs < midline, mask.shape), RIGHT: np.broadcast_to(xs >= midline, mask.shape)}

    seeds = {}
    for lab in (LEFT, RIGHT):
        region = mask & halves[lab]
        pts = np.argwhere(region)
        if len(pts) == 0:
            raise SeedError(f"no in-mask voxel in the {'left' if lab == LEFT else 'right'} half")
        box = _central_box(pts)
        window = np.full(mask.shape, np.inf)
        window[box] = np.where(region[box], sm[box], np.inf)
        if not np.isfinite(window).any():
            window = np.where(region, sm, np.inf)
        seed = np.array(np.unravel_index(int(np.argmin(window)), mask.shape))
        if config.seed_jitter_std > 0:
            if rng is None:
                raise ValueError("seed jitter requires an rng")
            seed = seed + np.rint(rng.normal(0.0, config.seed_jitter_std, 3)).astype(int)
            seed = np.clip(seed, 0, np.array(mask.shape) - 1)
            seed = _snap_to_mask(seed, mask, halves[lab])
        seeds[lab] = tuple(int(v) for v in seed)
    return SeedSet(seeds[LEFT], seeds[RIGHT], midline)


def flood_surface(volume, mask, config, rng=None):
    surface = smooth(volume.data, config.smoothing_sigma)
    if config.barrier_noise_std > 0:
        if rng is None:
            raise ValueError("barrier noise requires an rng")
        noise = rng.normal(size=surface.shape)
        if config.barrier_noise_sigma > 0:
            noise = ndimage.gaussian_filter(noise, config.barrier_noise_sigma, mode="wrap")
            noise /= noise.std()
        surface = surface + config.barrier_noise_std * noise
    return surface


def stop_level(surface, mask, quantile):
    return float(np.quantile(surface[mask], quantile, method="inverted_cdf"))


def flood_labels(surface, mask, seeds, level, record=False):
    """Run the priority flood on a precomputed surface; returns ``(labels, trace)``."""
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    seed_arr = np.ascontiguousarray(seeds.as_array())
    for s in seed_arr:
        if not mask[tuple(s)]:
            raise FloodPreconditionError(f"seed {tuple(s)} lies outside the mask")
    return kernels.flood(
        np.ascontiguousarray(surface, dtype=np.float64),
        mask,
        seed_arr,
        np.array([LEFT, RIGHT], dtype=np.uint8),
        float(level),
        bool(record),
    )


def flood(volume, mask, seeds, config, rng=None, return_trace=False):
    """Flood both seeds over the barrier-noised surface and return a LabelMap."""
    mask = np.asarray(mask, dtype=bool)
    surface = flood_surface(volume, mask, config, rng)
    level = stop_level(surface, mask, config.stop_quantile)
    labels, trace = flood_labels(surface, mask, seeds, level, record=return_trace)
    out = LabelMap(labels, volume.spacing, volume.orientation)
    if return_trace:
        return out, trace
    return out


@dataclass
class PseudoLabelResult:
    subject_id: str
    labelmap: LabelMap = None
    status: str = "ok"
    error: str = ""
    seeds: SeedSet = None
    dsc: dict = None
    normalization_divisor: float = None

    @property
    def failed(self):
        return self.status != "ok"


def pseudo_label(subject, config, subject_index=0):
    """Mask, normalise, seed and flood one subject. Errors mark it failed instead of raising."""
    from segnl.metrics import dsc_per_subject

    rng = substream(config.seed, "watershed", subject_index)
    try:
        mask = compute_brain_mask(subject.channel1)
        norm = percentile_normalize(subject.channel1, mask)
        seeds = select_seeds(norm, mask, config, rng)
        labelmap = flood(norm, mask, seeds, config, rng)
    except (ValueError, RuntimeError) as exc:
        return PseudoLabelResult(subject.id, status="failed", error=f"{type(exc).__name__}: {exc}")
    dsc = None
    if subject.truth is not None:
        dsc = {sel: dsc_per_subject(subject.truth, labelmap, sel) for sel in ("left", "right", "both")}
    return PseudoLabelResult(
        subject.id, labelmap, seeds=seeds, dsc=dsc, normalization_divisor=norm.meta["normalization_divisor"]
    )
