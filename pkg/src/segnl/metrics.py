"""Overlap, ROC and bootstrap statistics for comparing segmentations.

Selectors pick the foreground: ``"left"`` is label 1, ``"right"`` label 2
and ``"both"`` merges them.
"""

import numpy as np

SELECTORS = ("left", "right", "both")


class DegenerateClassError(ValueError):
    """ROC needs at least one positive and one negative voxel."""


def _data(x):
    return np.asarray(getattr(x, "data", x))


def foreground(labels, selector):
    labels = _data(labels)
    if selector == "left":
        return labels == 1
    if selector == "right":
        return labels == 2
    if selector == "both":
        return labels > 0
    raise ValueError(f"unknown selector {selector!r}; expected one of {SELECTORS}")


def class_probability(probs, selector):
    """Foreground probability for ``selector`` from a ``(3, ...)`` class-probability stack."""
    probs = np.asarray(probs)
    if selector == "left":
        return probs[1]
    if selector == "right":
        return probs[2]
    if selector == "both":
        return probs[1] + probs[2]
    raise ValueError(f"unknown selector {selector!r}; expected one of {SELECTORS}")


def _overlap_counts(ref, pred, selector):
    r, x = _data(ref), _data(pred)
    if r.shape != x.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {x.shape}")
    fr, fx = foreground(r, selector), foreground(x, selector)
    return int(np.count_nonzero(fr & fx)), int(np.count_nonzero(fr)), int(np.count_nonzero(fx))


def dsc_pooled(refs, preds, selector="both"):
    """2 * sum|R_i & X_i| / sum(|R_i| + |X_i|) over subjects; 1.0 when everything is empty."""
    if len(refs) != len(preds):
        raise ValueError(f"{len(refs)} references but {len(preds)} predictions")
    inter = total = 0
    for r, x in zip(refs, preds):
        i, nr, nx = _overlap_counts(r, x, selector)
        inter += i
        total += nr + nx
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def dsc_per_subject(ref, pred, selector="both"):
    return dsc_pooled([ref], [pred], selector)


def roc_curve(probs, refs, selector="both", masks=None, n_thresholds=200):
    """Pooled ROC over all (in-mask) voxels of all subjects.

    ``probs`` is a list of ``(3, ...)`` class-probability arrays, one per
    subject. A voxel is called positive when its foreground probability is
    ``>= threshold``; thresholds run over ``linspace(0, 1, n_thresholds)``
    plus one above 1 so the curve always spans (0, 0) to (1, 1).

    Returns an ``(n_thresholds + 1, 3)`` array of ``(threshold, fpr, tpr)``
    rows ordered by descending threshold.
    """
    if len(probs) != len(refs):
        raise ValueError(f"{len(probs)} probability maps but {len(refs)} references")
    if masks is not None and len(masks) != len(refs):
        raise ValueError("masks must match refs in length")
    scores, truth = [], []
    for i, (p, r) in enumerate(zip(probs, refs)):
        s = class_probability(p, selector)
        t = foreground(r, selector)
        if s.shape != t.shape:
            raise ValueError(f"shape mismatch: {s.shape} vs {t.shape}")
        if masks is not None:
            m = np.asarray(masks[i], dtype=bool)
            s, t = s[m], t[m]
        scores.append(np.ravel(s))
        truth.append(np.ravel(t))
    return roc_from_scores(np.concatenate(scores), np.concatenate(truth), n_thresholds)


def roc_from_scores(scores, truth, n_thresholds=200):
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth, dtype=bool)
    if scores.size and (scores.min() < -1e-9 or scores.max() > 1 + 1e-9):
        raise ValueError("probabilities must lie in [0, 1]")
    pos, neg = np.sort(scores[truth]), np.sort(scores[~truth])
    if pos.size == 0 or neg.size == 0:
        raise DegenerateClassError(f"need both classes, got {pos.size} positives and {neg.size} negatives")
    thresholds = np.concatenate([[np.nextafter(1.0, 2.0)], np.linspace(1.0, 0.0, n_thresholds)])
    tp = pos.size - np.searchsorted(pos, thresholds, side="left")
    fp = neg.size - np.searchsorted(neg, thresholds, side="left")
    return np.stack([thresholds, fp / neg.size, tp / pos.size], axis=1)


def auc(points):
    """Trapezoidal area under ROC points given as rows ``(threshold, fpr, tpr)`` or ``(fpr, tpr)``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two ROC points")
    fpr, tpr = pts[:, -2], pts[:, -1]
    order = np.lexsort((tpr, fpr))
    fpr, tpr = fpr[order], tpr[order]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_point_single(preds, refs, selector="both", masks=None):
    """``(fpr, tpr)`` of hard segmentations, pooled like :func:`roc_curve`."""
    if not isinstance(preds, (list, tuple)):
        preds, refs = [preds], [refs]
        masks = None if masks is None else [masks]
    tp = fp = npos = nneg = 0
    for i, (x, r) in enumerate(zip(preds, refs)):
        fx, fr = foreground(x, selector), foreground(r, selector)
        if masks is not None:
            m = np.asarray(masks[i], dtype=bool)
            fx, fr = fx[m], fr[m]
        tp += np.count_nonzero(fx & fr)
        fp += np.count_nonzero(fx & ~fr)
        npos += np.count_nonzero(fr)
        nneg += np.count_nonzero(~fr)
    if npos == 0 or nneg == 0:
        raise DegenerateClassError(f"need both classes, got {npos} positives and {nneg} negatives")
    return fp / nneg, tp / npos


def bootstrap_pvalue(dsc_a, dsc_b, n=1000, rng=None, statistic=np.mean):
    """Share of subject resamples in which method B scores higher than A.

    Subjects are drawn with replacement, pairs kept together. Ties count
    half, so identical inputs give exactly 0.5.
    """
    a = np.asarray(dsc_a, dtype=np.float64)
    b = np.asarray(dsc_b, dtype=np.float64)
    if n < 1:
        raise ValueError("need at least one bootstrap resample")
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two paired 1-D score lists of equal length >= 2")
    if rng is None:
        rng = np.random.default_rng()
    idx = rng.integers(0, a.size, size=(n, a.size))
    stat_a = statistic(a[idx], axis=1)
    stat_b = statistic(b[idx], axis=1)
    wins_b = np.count_nonzero(stat_b > stat_a)
    ties = np.count_nonzero(stat_b == stat_a)
    return (wins_b + 0.5 * ties) / n
