"""In-memory feature sets built from manifests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np
import torch

from .corpus import (ClipRecord, NormStats, SpectrogramTensor, SynthSpec, clip_features,
                     compute_stats, normalize)


@dataclass(frozen=True)
class FeatureParams:
    n_mels: int = 64
    hop_sec: float = 0.02
    win_sec: float = 0.04


def featurize(spec: SynthSpec, records: Sequence[ClipRecord],
              params: FeatureParams = FeatureParams()) -> list[SpectrogramTensor]:
    return [clip_features(spec, r, params.n_mels, params.hop_sec, params.win_sec) for r in records]


@dataclass
class FeatureSet:
    """Normalized spectrograms stacked as ``[n_clips, T_s, n_mels]`` with their records."""

    records: list[ClipRecord]
    features: torch.Tensor
    class_names: list[str]
    frames_per_sec: float

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def build(cls, records: Sequence[ClipRecord], spectrograms: Sequence[SpectrogramTensor],
              stats: NormStats, class_names: Sequence[str]) -> "FeatureSet":
        if not records:
            return cls([], torch.zeros(0, 0, 0), list(class_names), 0.0)
        normed = [normalize(s, stats).values for s in spectrograms]
        return cls(list(records), torch.from_numpy(np.stack(normed)), list(class_names),
                   spectrograms[0].frames_per_sec)

    def class_index(self, label: str) -> int:
        return self.class_names.index(label)

    def targets(self, i: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(labels [K], boxes [K, 2] as (center, length), multi-hot tags [C]) for clip ``i``."""
        rec = self.records[i]
        events = rec.normalized_events()
        labels = torch.tensor([self.class_index(e.label) for e in events], dtype=torch.long)
        boxes = torch.tensor([[e.center_m, e.length_l] for e in events], dtype=torch.float32).reshape(-1, 2)
        tags = torch.zeros(len(self.class_names))
        for t in rec.tags:
            tags[self.class_index(t)] = 1.0
        return labels, boxes, tags

    def subset(self, idx: Sequence[int]) -> "FeatureSet":
        idx = list(idx)
        return FeatureSet([self.records[i] for i in idx], self.features[idx], self.class_names,
                          self.frames_per_sec)


def prepare(spec: SynthSpec, train: Sequence[ClipRecord], others: Sequence[Sequence[ClipRecord]] = (),
            params: FeatureParams = FeatureParams(), stats: Optional[NormStats] = None):
    """Featurize a training split (its statistics drive normalization) plus extra splits."""
    raw_train = featurize(spec, train, params)
    if stats is None:
        stats = compute_stats(raw_train)
    names = spec.class_names
    sets = [FeatureSet.build(train, raw_train, stats, names)]
    for recs in others:
        sets.append(FeatureSet.build(recs, featurize(spec, recs, params), stats, names))
    return stats, sets


def iterate_batches(n: int, batch_size: int, generator: torch.Generator) -> Iterator[list[int]]:
    order = torch.randperm(n, generator=generator).tolist()
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]
