"""Bounding-window target vectors: encoding, decoding and post-processing.

Full 13-component layout, one 30 s window per vector::

    [W, N1, N2, N3, REM,  c_a, x_a, w_a,  p_r, c_apnea, c_hypopnea, x_r, w_r]

``x`` is the event centre and ``w`` its width, both as fractions of the
window length. Reduced assemblies drop the arousal and/or respiratory blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import DivergenceError, ValidationError
from .records import APNEA, AROUSAL, HYPOPNEA, RESPIRATORY, STAGES, Annotation, family_of

MIN_AROUSAL_S = 3.0
PRESENCE_THRESHOLD = 0.5


class Assembly(str, Enum):
    S = "S"
    SA = "SA"
    SR = "SR"
    SAR = "SAR"

    @property
    def has_arousal(self) -> bool:
        return "A" in self.value

    @property
    def has_respiratory(self) -> bool:
        return "R" in self.value

    @cached_property
    def layout(self) -> "Layout":
        return Layout.for_assembly(self)

    @property
    def size(self) -> int:
        return self.layout.size

    @property
    def families(self) -> tuple[str, ...]:
        fams = ["stage"]
        if self.has_arousal:
            fams.append("arousal")
        if self.has_respiratory:
            fams.append("respiratory")
        return tuple(fams)


@dataclass(frozen=True)
class Layout:
    """Component indices of one assembly's vector."""

    size: int
    stage: tuple[int, ...]
    arousal_presence: int | None = None
    arousal_coords: tuple[int, int] | None = None
    resp_presence: int | None = None
    resp_class: tuple[int, int] | None = None
    resp_coords: tuple[int, int] | None = None

    @classmethod
    def for_assembly(cls, assembly: Assembly) -> "Layout":
        i = 5
        kw: dict = {"stage": tuple(range(5))}
        if assembly.has_arousal:
            kw["arousal_presence"] = i
            kw["arousal_coords"] = (i + 1, i + 2)
            i += 3
        if assembly.has_respiratory:
            kw["resp_presence"] = i
            kw["resp_class"] = (i + 1, i + 2)
            kw["resp_coords"] = (i + 3, i + 4)
            i += 5
        return cls(size=i, **kw)

    @property
    def softmax_blocks(self) -> list[tuple[int, ...]]:
        blocks = [self.stage]
        if self.resp_class is not None:
            blocks.append(self.resp_class)
        return blocks

    @property
    def sigmoid_indices(self) -> list[int]:
        return [i for i in (self.arousal_presence, self.resp_presence) if i is not None]

    @property
    def linear_indices(self) -> list[int]:
        out: list[int] = []
        for pair in (self.arousal_coords, self.resp_coords):
            if pair is not None:
                out.extend(pair)
        return out

    def classification_indices(self, family: str) -> list[int]:
        if family == "stage":
            return list(self.stage)
        if family == "arousal":
            return [self.arousal_presence]
        if family == "respiratory":
            return [self.resp_presence, *self.resp_class]
        raise KeyError(family)

    def coordinate_indices(self, family: str) -> list[int]:
        if family == "arousal":
            return list(self.arousal_coords)
        if family == "respiratory":
            return list(self.resp_coords)
        return []

    def presence_index(self, family: str) -> int | None:
        return {"arousal": self.arousal_presence, "respiratory": self.resp_presence}.get(family)


def as_assembly(value) -> Assembly:
    if isinstance(value, Assembly):
        return value
    try:
        return Assembly(str(value).upper())
    except ValueError:
        raise ValidationError(f"unknown assembly {value!r}; expected one of S, SA, SR, SAR") from None


@dataclass(frozen=True)
class WindowSpan:
    start_s: float
    end_s: float

    @property
    def length_s(self) -> float:
        return self.end_s - self.start_s

    def contains(self, t: float) -> bool:
        return self.start_s <= t < self.end_s


@dataclass(frozen=True)
class DecodedWindow:
    span: WindowSpan
    stage: str
    arousal: Annotation | None = None
    respiratory: Annotation | None = None

    @property
    def events(self) -> list[Annotation]:
        return [e for e in (self.arousal, self.respiratory) if e is not None]


def event_centroid(a: Annotation) -> float:
    """Temporal midpoint of an annotation."""
    return a.onset_s + a.duration_s / 2.0


def iou_1d(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    if union <= 0:
        return 0.0
    return inter / union


def encode(span: WindowSpan, stage: str, owned, assembly) -> np.ndarray:
    """Build the target vector for one window.

    ``owned`` holds the (at most one per family) event annotations whose
    centroid falls inside ``span``. Absent families are zero-filled.
    """
    assembly = as_assembly(assembly)
    lay = assembly.layout
    if stage not in STAGES:
        raise ValidationError(f"window {span} has no valid stage label (got {stage!r})")
    n = span.length_s
    v = np.zeros(lay.size, dtype=np.float64)
    v[lay.stage[STAGES.index(stage)]] = 1.0

    seen: set[str] = set()
    for a in owned:
        fam = family_of(a.label)
        if fam == "stage":
            raise ValidationError("stage annotations are passed via `stage`, not `owned`")
        if fam in seen:
            raise ValidationError(f"two owned {fam} annotations in window {span}")
        seen.add(fam)
        if fam not in assembly.families:
            raise ValidationError(f"assembly {assembly.value} does not include {fam} events")
        if a.duration_s <= 0:
            raise ValidationError(f"non-positive duration in {a}")
        z = event_centroid(a)
        if not span.contains(z):
            raise ValidationError(f"centroid {z} of {a} lies outside window {span}")
        x = (z - span.start_s) / n
        w = a.duration_s / n
        if fam == "arousal":
            v[lay.arousal_presence] = 1.0
            v[list(lay.arousal_coords)] = (x, w)
        else:
            v[lay.resp_presence] = 1.0
            v[lay.resp_class[RESPIRATORY.index(a.label)]] = 1.0
            v[list(lay.resp_coords)] = (x, w)
    return v


def _to_event(span: WindowSpan, x: float, w: float, label: str, conf: float,
              record_duration: float | None) -> Annotation | None:
    n = span.length_s
    width = w * n
    if not width > 0:
        return None
    onset = span.start_s + (x - w / 2.0) * n
    end = onset + width
    if onset < 0 or (record_duration is not None and end > record_duration):
        onset = max(onset, 0.0)
        if record_duration is not None:
            end = min(end, record_duration)
        width = end - onset
        if width <= 0:
            return None
    return Annotation(onset, width, label, confidence=conf)


def decode(v, span: WindowSpan, assembly, record_duration: float | None = None) -> DecodedWindow:
    """Turn one output vector into a stage label plus absolute-time events.

    Presence is thresholded at 0.5; coordinates of absent events are ignored.
    Events reaching outside ``[0, record_duration]`` are clipped to it.
    """
    assembly = as_assembly(assembly)
    lay = assembly.layout
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (lay.size,):
        raise ValidationError(f"vector of shape {v.shape} does not match assembly {assembly.value}")
    if not np.all(np.isfinite(v)):
        raise DivergenceError(f"non-finite activation in window {span}")

    stage = STAGES[int(np.argmax(v[list(lay.stage)]))]
    arousal = respiratory = None
    if lay.arousal_presence is not None:
        c = float(v[lay.arousal_presence])
        if c >= PRESENCE_THRESHOLD:
            x, w = v[list(lay.arousal_coords)]
            arousal = _to_event(span, x, w, AROUSAL, c, record_duration)
    if lay.resp_presence is not None:
        p = float(v[lay.resp_presence])
        if p >= PRESENCE_THRESHOLD:
            ca, ch = v[list(lay.resp_class)]
            label = APNEA if ca >= ch else HYPOPNEA
            x, w = v[list(lay.resp_coords)]
            respiratory = _to_event(span, x, w, label, p, record_duration)
    return DecodedWindow(span, stage, arousal, respiratory)


def _confidence(a: Annotation) -> float:
    return 1.0 if a.confidence is None else float(a.confidence)


def _rank_key(a: Annotation):
    return (-_confidence(a), a.onset_s, a.end_s, a.label)


def nms(candidates, lam: float = 0.0) -> list[Annotation]:
    """Greedy per-label non-maximum suppression.

    A candidate is dropped when it overlaps an already kept candidate of the
    same label with IOU strictly greater than ``lam``. Output is ordered by
    descending confidence, then onset. Missing confidences count as 1.0.
    """
    ranked = sorted(candidates, key=_rank_key)
    for a in ranked:
        if not math.isfinite(_confidence(a)):
            raise DivergenceError(f"non-finite confidence in {a}")
    kept: list[Annotation] = []
    for cand in ranked:
        box = (cand.onset_s, cand.end_s)
        if any(k.label == cand.label and iou_1d((k.onset_s, k.end_s), box) > lam for k in kept):
            continue
        kept.append(cand)
    return kept


def merge_overlapping(events) -> list[Annotation]:
    """Merge same-label events whose intervals intersect with positive length.

    Each connected group becomes one annotation spanning the union, carrying
    the group's maximum confidence.
    """
    by_label: dict[str, list[Annotation]] = {}
    for e in events:
        by_label.setdefault(e.label, []).append(e)
    merged: list[Annotation] = []
    for label, group in by_label.items():
        group.sort(key=lambda a: (a.onset_s, a.end_s))
        start, end = group[0].onset_s, group[0].end_s
        conf = group[0].confidence
        for a in group[1:]:
            if a.onset_s < end:
                end = max(end, a.end_s)
                if a.confidence is not None:
                    conf = a.confidence if conf is None else max(conf, a.confidence)
            else:
                merged.append(Annotation(start, end - start, label, conf))
                start, end, conf = a.onset_s, a.end_s, a.confidence
        merged.append(Annotation(start, end - start, label, conf))
    merged.sort(key=lambda a: (a.onset_s, a.label))
    return merged


def postprocess_events(events, lam: float = 0.0) -> list[Annotation]:
    kept = [e for e in events if not (e.label == AROUSAL and e.duration_s < MIN_AROUSAL_S)]
    kept = nms(merge_overlapping(kept), lam)
    return sorted(kept, key=lambda a: (a.onset_s, a.label))


def postprocess(windows, lam: float = 0.0) -> tuple[list[Annotation], list[str]]:
    """Collect decoded windows into a cleaned event list and a hypnogram."""
    windows = list(windows)
    events = [e for w in windows for e in w.events]
    hypnogram = [w.stage for w in windows]
    return postprocess_events(events, lam), hypnogram
