"""Evaluation metrics for segmentation distributions and single predictions:
IoU distance, generalized energy distance, NCC score, Dice, Hausdorff
distance, and sampling-based uncertainty maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

NCC_EPS = 1e-8
CE_EPS = 1e-8


@dataclass
class SampleSet:
    """A set of N predicted (or annotated) label maps for one image."""

    samples: np.ndarray  # [N, H, W] integer class ids

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 3 or self.samples.shape[0] < 1:
            raise ValueError(
                f"expected nonempty [N, H, W] label stack, got shape "
                f"{self.samples.shape}"
            )
        if not np.issubdtype(self.samples.dtype, np.integer):
            raise ValueError(f"labels must be integer, got {self.samples.dtype}")

    def __len__(self):
        return self.samples.shape[0]


@dataclass
class UncertaintyMap:
    """Normalized pixel-wise variance map, values in [0, 1]."""

    values: np.ndarray  # [H, W]


def iou_distance(s: np.ndarray, t: np.ndarray, class_id: int) -> float:
    """d = 1 - IoU over the class mask. Two empty masks count as agreement (d = 0)."""
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {t.shape}")
    a = s == class_id
    b = t == class_id
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    inter = np.logical_and(a, b).sum()
    return 1.0 - inter / union


def _foreground_classes(*sets: SampleSet):
    labels = np.unique(np.concatenate([ss.samples.ravel() for ss in sets]))
    return [int(c) for c in labels if c != 0]


def _distance_matrix(a: np.ndarray, b: np.ndarray, class_id: int) -> np.ndarray:
    """Pairwise 1-IoU between two label stacks for one class."""
    am = (a == class_id).reshape(a.shape[0], -1).astype(np.float64)
    bm = (b == class_id).reshape(b.shape[0], -1).astype(np.float64)
    inter = am @ bm.T
    union = am.sum(axis=1)[:, None] + bm.sum(axis=1)[None, :] - inter
    d = np.ones_like(inter)
    np.divide(inter, union, out=d, where=union > 0)
    return 1.0 - d


def ged_squared(pred: SampleSet, truth: SampleSet, classes=None) -> float:
    """Generalized energy distance squared, 2 E[d(s,t)] - E[d(s,s')] - E[d(t,t')].

    Expectations are plug-in means over all ordered pairs including
    same-index pairs, so ged_squared(S, S) is exactly zero. Multi-class
    inputs are scored per foreground class and averaged.
    """
    if pred.samples.shape[1:] != truth.samples.shape[1:]:
        raise ValueError(
            f"spatial shape mismatch {pred.samples.shape[1:]} vs "
            f"{truth.samples.shape[1:]}"
        )
    if classes is None:
        classes = _foreground_classes(pred, truth)
    if not classes:
        return 0.0
    vals = []
    for c in classes:
        cross = _distance_matrix(pred.samples, truth.samples, c).mean()
        dss = _distance_matrix(pred.samples, pred.samples, c).mean()
        dtt = _distance_matrix(truth.samples, truth.samples, c).mean()
        vals.append(2.0 * cross - dss - dtt)
    return float(np.mean(vals))


def sample_diversity(pred: SampleSet, classes=None) -> float:
    """E[d(s, s')] over all ordered pairs, averaged over foreground classes."""
    if classes is None:
        classes = _foreground_classes(pred)
    if not classes:
        return 0.0
    return float(
        np.mean([_distance_matrix(pred.samples, pred.samples, c).mean() for c in classes])
    )


def _binary_onehot(stack: np.ndarray, class_id: int) -> np.ndarray:
    """[N, H, W] labels -> [N, 2, H, W] (background, class) probabilities."""
    fg = (stack == class_id).astype(np.float64)
    return np.stack([1.0 - fg, fg], axis=1)


def _pixel_xent(weights: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Pixel-wise cross entropy -sum_c w_c log(p_c); class dim is axis 0."""
    return -(weights * np.log(probs + CE_EPS)).sum(axis=0)


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = a.std() * b.std() + NCC_EPS
    return float((a * b).mean() / denom)


def ncc_score(pred: SampleSet, truth: SampleSet, classes=None) -> float:
    """Mean NCC between the expected cross-entropy map of predictions against
    their own mean and against each annotation.

    Per truth annotation t: NCC(E_s[CE(mean_pred, s)], E_s[CE(t, s)]),
    averaged over annotations, per foreground class, averaged over classes.
    Exactly-equal constant maps score 1.
    """
    if pred.samples.shape[1:] != truth.samples.shape[1:]:
        raise ValueError(
            f"spatial shape mismatch {pred.samples.shape[1:]} vs "
            f"{truth.samples.shape[1:]}"
        )
    if classes is None:
        classes = _foreground_classes(pred, truth)
    if not classes:
        return 1.0
    vals = []
    for c in classes:
        s_oh = _binary_onehot(pred.samples, c)  # [N, 2, H, W]
        t_oh = _binary_onehot(truth.samples, c)  # [M, 2, H, W]
        mean_s = s_oh.mean(axis=0)
        e_ss = np.mean([_pixel_xent(mean_s, s) for s in s_oh], axis=0)
        per_truth = []
        for t in t_oh:
            e_ts = np.mean([_pixel_xent(t, s) for s in s_oh], axis=0)
            if np.array_equal(e_ss, e_ts) and e_ss.std() == 0:
                per_truth.append(1.0)
            else:
                per_truth.append(_ncc(e_ss, e_ts))
        vals.append(np.mean(per_truth))
    return float(np.mean(vals))


def dice_coefficient(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """Hard Dice 2|s&t| / (|s| + |t|); both masks empty counts as 1."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    a = pred == class_id
    b = truth == class_id
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / total


def _boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of mask pixels with a 4-neighbour outside the mask
    (image border counts as outside)."""
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    boundary = mask & ~interior
    return np.argwhere(boundary)


def hausdorff_distance(
    pred: np.ndarray,
    truth: np.ndarray,
    class_id: int,
    percentile: float = 100.0,
    spacing=None,
) -> float:
    """Symmetric (percentile) Hausdorff distance between class boundaries.

    Returns NaN when either mask is empty (undefined; callers exclude it
    from averages). Distances are Euclidean in pixels, scaled by `spacing`
    (row, col) when given.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    a = _boundary_points(pred == class_id)
    b = _boundary_points(truth == class_id)
    if len(a) == 0 or len(b) == 0:
        return float("nan")
    scale = np.asarray(spacing, dtype=np.float64) if spacing is not None else np.ones(2)
    d = cdist(a * scale, b * scale)
    directed = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(directed, percentile))


def variance_map(pred: SampleSet, class_count: int | None = None) -> UncertaintyMap:
    """Pixel-wise variance of the one-hot encodings summed over classes,
    normalized by its maximum (all zeros when samples agree everywhere)."""
    if len(pred) < 2:
        raise ValueError(f"need >= 2 samples for a variance map, got {len(pred)}")
    if class_count is None:
        class_count = int(pred.samples.max()) + 1
    onehot = np.stack(
        [(pred.samples == c).astype(np.float64) for c in range(class_count)], axis=1
    )  # [N, K, H, W]
    var = onehot.var(axis=0).sum(axis=0)
    peak = var.max()
    if peak > 0:
        var = var / peak
    return UncertaintyMap(values=var)


def region_disagreement(umap: UncertaintyMap, region_mask: np.ndarray):
    """(inside_mean, outside_mean) of the uncertainty map over a region."""
    mask = np.asarray(region_mask, dtype=bool)
    if mask.shape != umap.values.shape:
        raise ValueError(f"shape mismatch {mask.shape} vs {umap.values.shape}")
    n_in = mask.sum()
    if n_in == 0 or n_in == mask.size:
        raise ValueError("region mask must be nonempty and not cover everything")
    return float(umap.values[mask].mean()), float(umap.values[~mask].mean())
