"""Brain masking and percentile intensity normalisation.

The mask is Otsu threshold -> largest 26-connected component -> closing
(ball radius 2) -> hole filling. Hole filling is what keeps the dark
ventricles inside the mask. Normalisation divides by a nearest-rank
percentile of the in-mask intensities.
"""

import math

import numpy as np
from scipy import ndimage

from segnl.volume_io import Volume


class MaskingError(ValueError):
    pass


class NormalizationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


CONN26 = np.ones((3, 3, 3), dtype=bool)


def ball(radius):
    r = int(radius)
    grid = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
    return (grid ** 2).sum(axis=0) <= radius * radius


def otsu_threshold(values, nbins=256):
    """Threshold maximising the between-class variance of a histogram."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if lo == hi:
        return float(lo)
    hist, edges = np.histogram(values, bins=nbins, range=(lo, hi))
    centres = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * centres)
    m0 = s0 / np.maximum(w0, 1)
    m1 = (s0[-1] - s0) / np.maximum(w1, 1)
    between = w0 * w1 * (m0 - m1) ** 2
    return float(centres[int(np.argmax(between[:-1]))])


def largest_component(binary):
    labels, n = ndimage.label(binary, structure=CONN26)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def compute_brain_mask(volume, closing_radius=2):
    """Binary brain mask of ``volume`` as a bool array of the same shape."""
    data = np.asarray(volume.data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise MaskingError("volume contains non-finite values")
    if data.min() == data.max():
        raise MaskingError("volume is constant; nothing to threshold")
    fg = data > otsu_threshold(data)
    if not fg.any():
        raise MaskingError("empty foreground after Otsu threshold")
    fg = largest_component(fg)
    pad = closing_radius + 1
    padded = np.pad(fg, pad)
    padded = ndimage.binary_closing(padded, structure=ball(closing_radius))
    mask = padded[pad:-pad, pad:-pad, pad:-pad]
    mask = ndimage.binary_fill_holes(mask)
    mask = largest_component(mask)
    if not mask.any():
        raise MaskingError("brain mask is empty")
    return mask


def nearest_rank_percentile(values, p):
    """Smallest value with at least ``p`` percent of samples at or below it."""
    values = np.sort(np.asarray(values).ravel())
    if values.size == 0:
        raise NormalizationError("no values to take a percentile of")
    rank = max(1, math.ceil(p / 100.0 * values.size))
    return values[rank - 1]


def percentile_normalize(volume, mask, p=95.0):
    """Divide ``volume`` by the p-th nearest-rank percentile of its in-mask values.

    The divisor is recorded as ``meta["normalization_divisor"]`` on the result.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.dims:
        raise ShapeError(f"mask shape {mask.shape} != volume dims {volume.dims}")
    if not mask.any():
        raise NormalizationError("mask is empty")
    q = float(nearest_rank_percentile(volume.data[mask].astype(np.float64), p))
    if not q > 0:
        raise NormalizationError(f"percentile divisor {q} is not positive")
    out = (volume.data.astype(np.float64) / q).astype(np.float32)
    meta = dict(volume.meta, normalization_divisor=q, normalization_percentile=p)
    return Volume(out, volume.spacing, volume.orientation, meta)


def apply_mask(volume, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != volume.dims:
        raise ShapeError(f"mask shape {mask.shape} != volume dims {volume.dims}")
    out = np.where(mask, volume.data, np.zeros((), dtype=volume.data.dtype))
    return Volume(out, volume.spacing, volume.orientation, dict(volume.meta))


def register_identity(moving, fixed):
    """Registration stage placeholder: channels are co-registered by construction."""
    if moving.dims != fixed.dims:
        raise ShapeError(f"cannot register {moving.dims} onto {fixed.dims}")
    return moving


def preprocess_subject(subject, p=95.0):
    """Mask and normalise both channels using the channel-1 brain mask.

    Returns ``(channel1, channel2, mask)`` with the two divisors in each
    volume's ``meta``.
    """
    mask = compute_brain_mask(subject.channel1)
    ch2 = register_identity(subject.channel2, subject.channel1)
    ch1 = apply_mask(percentile_normalize(subject.channel1, mask, p), mask)
    ch2 = apply_mask(percentile_normalize(ch2, mask, p), mask)
    return ch1, ch2, mask
