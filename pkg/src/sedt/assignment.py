"""Interval geometry and target-to-prediction matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Interval:
    onset: float
    offset: float

    def __post_init__(self):
        if self.onset > self.offset:
            raise ValueError(f"onset {self.onset} > offset {self.offset}")

    @property
    def length(self) -> float:
        return self.offset - self.onset

    @property
    def center(self) -> float:
        return 0.5 * (self.onset + self.offset)


@dataclass
class MatchAssignment:
    """``pairs`` holds (target_index, prediction_index) sorted by target."""

    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int] = field(default_factory=list)

    @property
    def target_indices(self) -> list[int]:
        return [t for t, _ in self.pairs]

    @property
    def prediction_indices(self) -> list[int]:
        return [p for _, p in self.pairs]


@dataclass(frozen=True)
class MatchWeights:
    l1: float = 5.0
    iou: float = 2.0
    cls: float = 1.0


def to_interval(m: float, l: float) -> Interval:
    """(center, length) -> clamped [onset, offset] in [0, 1]."""
    on = min(max(m - l / 2, 0.0), 1.0)
    off = min(max(m + l / 2, 0.0), 1.0)
    return Interval(on, max(on, off))


def iou_1d(a: Interval, b: Interval) -> float:
    inter = max(0.0, min(a.offset, b.offset) - max(a.onset, b.onset))
    union = a.length + b.length - inter
    if union <= 0 or a.length <= 0 or b.length <= 0:
        return 0.0
    return inter / union


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IOU between rows of two ``[*, 2]`` (center, length) arrays, unclamped."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a_on, a_off = a[:, 0] - a[:, 1] / 2, a[:, 0] + a[:, 1] / 2
    b_on, b_off = b[:, 0] - b[:, 1] / 2, b[:, 0] + b[:, 1] / 2
    inter = np.clip(np.minimum(a_off[:, None], b_off[None]) - np.maximum(a_on[:, None], b_on[None]), 0, None)
    union = a[:, 1][:, None] + b[:, 1][None] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def _clamp_boxes(boxes: np.ndarray) -> np.ndarray:
    on = np.clip(boxes[:, 0] - boxes[:, 1] / 2, 0, 1)
    off = np.clip(boxes[:, 0] + boxes[:, 1] / 2, 0, 1)
    return np.stack([(on + off) / 2, off - on], 1)


def pair_cost(target_box, target_class: int, class_probs, pred_box, weights: MatchWeights = MatchWeights()) -> float:
    b = np.asarray(target_box, dtype=np.float64)
    bh = np.asarray(pred_box, dtype=np.float64)
    l1 = float(np.abs(b - bh).sum())
    iou = iou_1d(to_interval(*b), to_interval(*bh))
    return weights.l1 * l1 + weights.iou * (1.0 - iou) - weights.cls * float(class_probs[target_class])


def cost_matrix(target_boxes, target_classes, class_probs, pred_boxes,
                weights: MatchWeights = MatchWeights()) -> np.ndarray:
    """Vectorized ``pair_cost`` for all (target, prediction) pairs: [n_targets, n_preds]."""
    tb = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 2)
    pb = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 2)
    probs = np.asarray(class_probs, dtype=np.float64)
    l1 = np.abs(tb[:, None, :] - pb[None, :, :]).sum(-1)
    iou = pairwise_iou(_clamp_boxes(tb), _clamp_boxes(pb))
    cls = probs[:, np.asarray(target_classes, dtype=int)].T if len(tb) else np.zeros((0, len(pb)))
    return weights.l1 * l1 + weights.iou * (1.0 - iou) - weights.cls * cls


def hungarian(cost: np.ndarray) -> MatchAssignment:
    """Minimum-cost injective map from targets (rows) to predictions (columns).

    Shortest augmenting path with row potentials. Rows are inserted in index
    order and columns are scanned in ascending order with strict ``<``, so
    among equal-cost choices the lowest prediction index wins.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    n, m = c.shape
    if n > m:
        raise ValueError(f"{n} targets cannot be matched to {m} predictions; expand the predictions")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    if n == 0:
        return MatchAssignment([], list(range(m)))

    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=int)  # owner[j] = 1-based row matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    pairs = sorted((int(owner[j]) - 1, j - 1) for j in range(1, m + 1) if owner[j])
    matched = {p for _, p in pairs}
    return MatchAssignment(pairs, [j for j in range(m) if j not in matched])


def one_to_many_expand(n_targets: int, k: int, n_preds: int | None = None) -> list[int]:
    """Duplicate every target ``k`` times; returns the back-mapping to original indices."""
    if k < 1:
        raise ValueError("multiplicity must be at least 1")
    if n_preds is not None and n_targets * k > n_preds:
        raise ValueError(f"{n_targets} targets x {k} copies exceed {n_preds} predictions")
    return [t for t in range(n_targets) for _ in range(k)]


def match(target_boxes, target_classes, class_probs, pred_boxes,
          weights: MatchWeights = MatchWeights(), multiplicity: int = 1) -> MatchAssignment:
    """Hungarian matching with optional one-to-many target duplication.

    Returned pairs refer to original target indices, so with ``multiplicity > 1``
    a target index can appear up to that many times.
    """
    n_preds = len(pred_boxes)
    back = one_to_many_expand(len(target_boxes), multiplicity, n_preds)
    cost = cost_matrix(target_boxes, target_classes, class_probs, pred_boxes, weights)
    res = hungarian(cost[back] if back else cost[:0])
    pairs = sorted((back[t], p) for t, p in res.pairs)
    return MatchAssignment(pairs, res.unmatched_predictions)
