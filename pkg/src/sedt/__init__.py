"""Sound event detection transformer with self-supervised patch pretraining."""

from .assignment import Interval, MatchAssignment, hungarian, iou_1d, match
from .corpus import Annotation, ClipRecord, Event, SpectrogramTensor, SynthSpec, default_spec, synth_clip
from .network import SEDT, ModelConfig, PredictionSet
from .metrics import event_based_f1, segment_based_f1, tagging_f1

__all__ = ["Interval", "MatchAssignment", "hungarian", "iou_1d", "match", "Annotation", "ClipRecord",
           "Event", "SpectrogramTensor", "SynthSpec", "default_spec", "synth_clip", "SEDT",
           "ModelConfig", "PredictionSet", "event_based_f1", "segment_based_f1", "tagging_f1"]
