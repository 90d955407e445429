"""Event-based, segment-based and clip-level tagging F1.

Inputs are mappings ``clip_id -> list of (label, onset_sec, offset_sec)``
for events and ``clip_id -> set of labels`` for tags.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

EventList = Sequence[tuple[str, float, float]]


@dataclass
class ClassScore:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def to_json(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn}


@dataclass
class ScoreReport:
    per_class: dict[str, ClassScore]
    protocol: dict = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        if not self.per_class:
            return 0.0
        return sum(s.f1 for s in self.per_class.values()) / len(self.per_class)

    def to_json(self) -> dict:
        return {"protocol": self.protocol,
                "per_class": {k: v.to_json() for k, v in sorted(self.per_class.items())},
                "macro_f1": self.macro_f1}


def _class_set(refs, preds, classes: Optional[Iterable[str]]) -> list[str]:
    if classes is not None:
        return sorted(set(classes))
    labels = {e[0] for evs in refs.values() for e in evs}
    labels |= {e[0] for evs in preds.values() for e in evs}
    return sorted(labels)


def _greedy_collar_matches(refs: EventList, preds: EventList, collar: float,
                           offset_fraction: float) -> int:
    """Count one-to-one matches for a single class in a single clip.

    References are visited in onset order; each takes the earliest-onset
    unmatched prediction within the collar on both boundaries.
    """
    refs = sorted(refs, key=lambda e: (e[1], e[2]))
    preds = sorted(preds, key=lambda e: (e[1], e[2]))
    used = [False] * len(preds)
    hits = 0
    for _, r_on, r_off in refs:
        off_tol = max(collar, offset_fraction * (r_off - r_on))
        for j, (_, p_on, p_off) in enumerate(preds):
            if used[j]:
                continue
            if abs(p_on - r_on) <= collar + 1e-9 and abs(p_off - r_off) <= off_tol + 1e-9:
                used[j] = True
                hits += 1
                break
    return hits


def event_based_f1(refs: Mapping[str, EventList], preds: Mapping[str, EventList],
                   collar_sec: float = 0.2, offset_fraction: float = 0.0,
                   classes: Optional[Iterable[str]] = None) -> ScoreReport:
    """Collar-based event matching on onsets and offsets.

    ``offset_fraction > 0`` widens the offset tolerance to that fraction of
    the reference length (the usual toolkit behaviour); the default uses the
    plain collar for both boundaries.
    """
    labels = _class_set(refs, preds, classes)
    scores = {c: ClassScore() for c in labels}
    for clip in set(refs) | set(preds):
        by_ref, by_pred = defaultdict(list), defaultdict(list)
        for e in refs.get(clip, ()):
            by_ref[e[0]].append(e)
        for e in preds.get(clip, ()):
            by_pred[e[0]].append(e)
        for c in set(by_ref) | set(by_pred):
            if c not in scores:
                continue
            hits = _greedy_collar_matches(by_ref[c], by_pred[c], collar_sec, offset_fraction)
            scores[c].tp += hits
            scores[c].fp += len(by_pred[c]) - hits
            scores[c].fn += len(by_ref[c]) - hits
    protocol = {"kind": "event_based", "collar_sec": collar_sec, "offset_fraction": offset_fraction}
    return ScoreReport(scores, protocol)


def _active_segments(events: EventList, label: str, n_segments: int, seg: float) -> set[int]:
    active = set()
    for lab, on, off in events:
        if lab != label or off <= on:
            continue
        first = max(0, int(math.floor(on / seg)))
        last = min(n_segments - 1, int(math.ceil(off / seg)) - 1)
        active.update(range(first, last + 1))
    return active


def segment_based_f1(refs: Mapping[str, EventList], preds: Mapping[str, EventList],
                     durations: Mapping[str, float], segment_sec: float = 1.0,
                     classes: Optional[Iterable[str]] = None) -> ScoreReport:
    """Per-class activity on fixed segments; a segment is active if an event overlaps it."""
    labels = _class_set(refs, preds, classes)
    scores = {c: ClassScore() for c in labels}
    for clip, duration in durations.items():
        n_seg = int(math.ceil(duration / segment_sec - 1e-9))
        for c in labels:
            r = _active_segments(refs.get(clip, ()), c, n_seg, segment_sec)
            p = _active_segments(preds.get(clip, ()), c, n_seg, segment_sec)
            scores[c].tp += len(r & p)
            scores[c].fp += len(p - r)
            scores[c].fn += len(r - p)
    return ScoreReport(scores, {"kind": "segment_based", "segment_sec": segment_sec})


def tagging_f1(refs: Mapping[str, Iterable[str]], preds: Mapping[str, Iterable[str]],
               classes: Optional[Iterable[str]] = None) -> ScoreReport:
    if classes is None:
        classes = {t for tags in refs.values() for t in tags} | {t for tags in preds.values() for t in tags}
    scores = {c: ClassScore() for c in sorted(set(classes))}
    for clip in set(refs) | set(preds):
        r, p = set(refs.get(clip, ())), set(preds.get(clip, ()))
        for c in scores:
            scores[c].tp += int(c in r and c in p)
            scores[c].fp += int(c in p and c not in r)
            scores[c].fn += int(c in r and c not in p)
    return ScoreReport(scores, {"kind": "tagging"})
