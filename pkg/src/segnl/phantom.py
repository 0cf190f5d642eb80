"""Synthetic two-channel brain phantoms with exact left/right ventricle labels.

A phantom is a brain ellipsoid holding two dark (channel 1) / bright
(channel 2) ventricle ellipsoids on either side of the midline. Each subject
jitters ventricle centres, semi-axes and in-plane rotation, then applies a
smooth multiplicative bias field and additive Gaussian noise per channel.
"""

import json
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from segnl.rng import substream
from segnl.volume_io import LabelMap, Volume, write_labelmap, write_nifti

MAX_JITTER_ATTEMPTS = 10
MIN_X_GAP = 2


class PhantomError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 32)
    spacing: tuple = (1.0, 1.0, 1.0)
    brain_semi_axes: tuple = (27.0, 29.0, 13.0)
    # left ventricle sits at midline - offset_x, right at midline + offset_x
    ventricle_offset_x: float = 8.0
    ventricle_offset_y: float = 2.0
    ventricle_offset_z: float = 0.0
    ventricle_semi_axes: tuple = (5.0, 9.0, 6.0)
    center_jitter_std: float = 1.0
    axis_jitter_std: float = 0.1
    rotation_jitter_deg: float = 8.0
    background: float = 0.0
    tissue_ch1: float = 0.6
    ventricle_ch1: float = 0.15
    tissue_ch2: float = 0.35
    ventricle_ch2: float = 0.9
    noise_std: float = 0.05
    bias_amplitude: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("dims", "spacing", "brain_semi_axes", "ventricle_semi_axes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if self.noise_std < 0 or self.bias_amplitude < 0:
            raise ValueError("noise_std and bias_amplitude must be >= 0")
        if min(self.center_jitter_std, self.axis_jitter_std, self.rotation_jitter_deg) < 0:
            raise ValueError("jitter stds must be >= 0")
        if self.ventricle_offset_x <= 0:
            raise ValueError("ventricle_offset_x must be > 0 so left.x < midline < right.x")
        for side in (-1, 1):
            centre = self._nominal_centre(side)
            if _ellipsoid_containment(centre, self.ventricle_semi_axes, 0.0,
                                      self.grid_centre, self.brain_semi_axes) >= 1.0:
                raise ValueError("nominal ventricle ellipsoid is not strictly inside the brain ellipsoid")
        if any(2 * a > d for a, d in zip(self.brain_semi_axes, self.dims)):
            raise ValueError("brain ellipsoid does not fit in the grid")

    @property
    def grid_centre(self):
        return np.array([(d - 1) / 2.0 for d in self.dims])

    def _nominal_centre(self, side):
        return self.grid_centre + np.array(
            [side * self.ventricle_offset_x, self.ventricle_offset_y, self.ventricle_offset_z]
        )

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PhantomSpec fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Subject:
    id: str
    channel1: Volume
    channel2: Volume
    truth: LabelMap = None


def _rotation_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ellipsoid_containment(centre, axes, angle, brain_centre, brain_axes, n=2000):
    """Largest brain-ellipsoid level value over a dense sample of the ventricle surface."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    k = np.arange(n)
    zc = 1 - 2 * (k + 0.5) / n
    r = np.sqrt(1 - zc * zc)
    pts = np.stack([r * np.cos(golden * k), r * np.sin(golden * k), zc], axis=1) * np.asarray(axes)
    pts = pts @ _rotation_z(angle).T + centre
    return float((((pts - brain_centre) / np.asarray(brain_axes)) ** 2).sum(axis=1).max())


def _ellipsoid_mask(shape, centre, axes, angle=0.0):
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in shape), indexing="ij")
    rel = np.stack([g - c for g, c in zip(grids, centre)], axis=-1)
    local = rel @ _rotation_z(angle)  # rotate by -angle into the ellipsoid frame
    return ((local / np.asarray(axes)) ** 2).sum(axis=-1) <= 1.0


def _bias_field(shape, amplitude, rng):
    """exp(amplitude * P) with P a random quadratic scaled so max|P| = 1 on the grid."""
    coeffs = rng.normal(size=10)
    if amplitude == 0:
        return np.ones(shape)
    u = np.meshgrid(*(np.linspace(-1.0, 1.0, d) if d > 1 else np.zeros(1) for d in shape), indexing="ij")
    x, y, z = u
    terms = (x, y, z, x * x, y * y, z * z, x * y, x * z, y * z)
    poly = coeffs[0] + sum(c * t for c, t in zip(coeffs[1:], terms))
    poly = poly - poly.mean()
    peak = np.abs(poly).max()
    if peak > 0:
        poly = poly / peak
    return np.exp(amplitude * poly)


def _draw_ventricles(spec, rng):
    axes0 = np.asarray(spec.ventricle_semi_axes)
    params = []
    for side in (-1, 1):
        centre = spec._nominal_centre(side) + rng.normal(0.0, spec.center_jitter_std, 3)
        axes = axes0 * np.clip(1.0 + rng.normal(0.0, spec.axis_jitter_std, 3), 0.5, 1.5)
        angle = np.deg2rad(rng.normal(0.0, spec.rotation_jitter_deg))
        params.append((centre, axes, angle))
    return params


def sample_geometry(spec, rng):
    """Draw jittered ventricles until the layout constraints hold (max 10 tries)."""
    brain_centre = spec.grid_centre
    mid = brain_centre[0]
    for _ in range(MAX_JITTER_ATTEMPTS):
        params = _draw_ventricles(spec, rng)
        (lc, la, lang), (rc, ra, rang) = params
        if not lc[0] < mid < rc[0]:
            continue
        if max(_ellipsoid_containment(c, a, ang, brain_centre, spec.brain_semi_axes)
               for c, a, ang in params) >= 1.0:
            continue
        left = _ellipsoid_mask(spec.dims, lc, la, lang)
        right = _ellipsoid_mask(spec.dims, rc, ra, rang)
        if not left.any() or not right.any():
            continue
        gap = np.nonzero(right.any(axis=(1, 2)))[0].min() - np.nonzero(left.any(axis=(1, 2)))[0].max() - 1
        if gap < MIN_X_GAP:
            continue
        return params, left, right
    raise PhantomError(f"ventricle jitter violated layout constraints {MAX_JITTER_ATTEMPTS} times")


def generate_subject(spec, subject_index):
    """Render subject ``subject_index`` deterministically from ``spec.seed``."""
    rng = substream(spec.seed, "phantom", subject_index)
    _, left, right = sample_geometry(spec, rng)
    brain = _ellipsoid_mask(spec.dims, spec.grid_centre, spec.brain_semi_axes)

    truth = np.zeros(spec.dims, dtype=np.uint8)
    truth[left] = 1
    truth[right] = 2
    ventricle = truth > 0

    channels = []
    for tissue, vent in ((spec.tissue_ch1, spec.ventricle_ch1), (spec.tissue_ch2, spec.ventricle_ch2)):
        clean = np.full(spec.dims, spec.background, dtype=np.float64)
        clean[brain] = tissue
        clean[ventricle] = vent
        clean *= _bias_field(spec.dims, spec.bias_amplitude, rng)
        channels.append(clean)
    for img in channels:
        if spec.noise_std > 0:
            img += rng.normal(0.0, spec.noise_std, spec.dims)

    sid = f"sub-{subject_index:03d}"
    return Subject(
        id=sid,
        channel1=Volume(channels[0].astype(np.float32), spec.spacing),
        channel2=Volume(channels[1].astype(np.float32), spec.spacing),
        truth=LabelMap(truth, spec.spacing),
    )


SUBJECT_FILES = {"t1": "t1.nii", "flair": "flair.nii", "truth": "truth.nii"}


def generate_cohort(spec, n_train, n_val, n_test, output_dir):
    """Write a randomly split cohort and return the manifest path."""
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if min(counts.values()) < 1:
        raise ValueError(f"every split needs at least one subject, got {counts}")
    total = sum(counts.values())
    order = substream(spec.seed, "split").permutation(total)
    split_of = {}
    start = 0
    for name, n in counts.items():
        for idx in order[start:start + n]:
            split_of[int(idx)] = name
        start += n

    os.makedirs(output_dir, exist_ok=True)
    entries = []
    for idx in range(total):
        subject = generate_subject(spec, idx)
        rel_dir = os.path.join("subjects", subject.id)
        os.makedirs(os.path.join(output_dir, rel_dir), exist_ok=True)
        paths = {key: os.path.join(rel_dir, fname) for key, fname in SUBJECT_FILES.items()}
        write_nifti(subject.channel1, os.path.join(output_dir, paths["t1"]))
        write_nifti(subject.channel2, os.path.join(output_dir, paths["flair"]))
        write_labelmap(subject.truth, os.path.join(output_dir, paths["truth"]))
        entries.append({"id": subject.id, "index": idx, "split": split_of[idx], "paths": paths})

    manifest = {"version": 1, "spec": spec.to_dict(), "subjects": entries}
    path = os.path.join(output_dir, "manifest.json")
    write_json(manifest, path)
    return path


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path):
    with open(path) as fh:
        return json.load(fh)


def split_ids(manifest, split):
    return [s["id"] for s in manifest["subjects"] if s["split"] == split]
