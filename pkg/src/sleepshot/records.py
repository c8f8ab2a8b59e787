"""Record container plus the on-disk record directory format.

A record directory holds::

    record.json         {"id", "duration_s", "channels": [{"name", "sample_rate_hz", "file"}]}
    <channel>.f32       raw little-endian float32 samples, one file per channel
    annotations.jsonl   one {"onset_s", "duration_s", "label"} object per line
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError

STAGES = ("W", "N1", "N2", "N3", "REM")
AROUSAL = "arousal"
APNEA = "apnea"
HYPOPNEA = "hypopnea"
EVENT_LABELS = STAGES + (AROUSAL, APNEA, HYPOPNEA)

RESPIRATORY = (APNEA, HYPOPNEA)
EPOCH_S = 30.0

_TIME_EPS = 1e-6


def family_of(label: str) -> str:
    """Map a label to its event family: ``stage``, ``arousal`` or ``respiratory``."""
    if label in STAGES:
        return "stage"
    if label == AROUSAL:
        return "arousal"
    if label in RESPIRATORY:
        return "respiratory"
    raise ValidationError(f"unknown label {label!r}")


@dataclass(frozen=True)
class Annotation:
    onset_s: float
    duration_s: float
    label: str
    confidence: float | None = None

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s

    def to_json(self) -> dict:
        out = {"onset_s": self.onset_s, "duration_s": self.duration_s, "label": self.label}
        if self.confidence is not None:
            out["confidence"] = self.confidence
        return out


@dataclass(frozen=True)
class Channel:
    name: str
    sample_rate_hz: float
    samples: np.ndarray

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class Record:
    id: str
    channels: tuple[Channel, ...]
    annotations: tuple[Annotation, ...]
    duration_s: float
    meta: dict = field(default_factory=dict, compare=False)

    def channel(self, name: str) -> Channel:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise ValidationError(f"record {self.id!r} has no channel {name!r}")

    @property
    def channel_names(self) -> list[str]:
        return [ch.name for ch in self.channels]

    def stage_annotations(self) -> list[Annotation]:
        return [a for a in self.annotations if a.label in STAGES]

    def event_annotations(self) -> list[Annotation]:
        return [a for a in self.annotations if a.label not in STAGES]


def validate_annotation(a: Annotation, duration_s: float) -> None:
    if a.label not in EVENT_LABELS:
        raise ValidationError(f"unknown label {a.label!r}")
    if not (math.isfinite(a.onset_s) and math.isfinite(a.duration_s)):
        raise ValidationError(f"non-finite annotation time in {a}")
    if a.duration_s <= 0:
        raise ValidationError(f"non-positive duration in annotation {a}")
    if a.onset_s < 0:
        raise ValidationError(f"negative onset in annotation {a}")
    if a.onset_s + a.duration_s > duration_s + _TIME_EPS:
        raise ValidationError(f"annotation {a} ends after record end {duration_s}")


def validate_record(r: Record) -> None:
    """Check the record invariants; raises ValidationError on the first violation."""
    names = r.channel_names
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate channel names in record {r.id!r}: {names}")
    for ch in r.channels:
        if ch.sample_rate_hz <= 0:
            raise ValidationError(f"channel {ch.name!r}: non-positive sample rate")
        expected = int(round(r.duration_s * ch.sample_rate_hz))
        if len(ch.samples) != expected:
            raise ValidationError(
                f"channel {ch.name!r}: payload length {len(ch.samples)} != {expected}"
            )
        if not np.all(np.isfinite(ch.samples)):
            raise ValidationError(f"channel {ch.name!r} contains NaN or Inf samples")
    for a in r.annotations:
        validate_annotation(a, r.duration_s)


def parse_annotation_line(line: str, lineno: int = 0) -> Annotation:
    try:
        obj = json.loads(line)
        ann = Annotation(
            onset_s=float(obj["onset_s"]),
            duration_s=float(obj["duration_s"]),
            label=str(obj["label"]),
            confidence=None if obj.get("confidence") is None else float(obj["confidence"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed annotation line {lineno}: {line.strip()!r}") from exc
    return ann


def read_annotations(path: str | Path) -> list[Annotation]:
    anns = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                anns.append(parse_annotation_line(line, lineno))
    return anns


def write_annotations(path: str | Path, annotations) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            fh.write(json.dumps(a.to_json()) + "\n")


def _sorted_annotations(anns) -> tuple[Annotation, ...]:
    return tuple(sorted(anns, key=lambda a: (a.onset_s, EVENT_LABELS.index(a.label), a.duration_s)))


def load_record(path: str | Path) -> Record:
    """Load and validate a record directory.

    Channels keep header order and annotations come back sorted by onset.
    """
    path = Path(path)
    header_path = path / "record.json"
    if not header_path.is_file():
        raise ValidationError(f"{path}: missing record.json")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        rec_id = str(header["id"])
        duration = float(header["duration_s"])
        ch_specs = header["channels"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{header_path}: malformed header") from exc

    names = [c.get("name") for c in ch_specs]
    if len(set(names)) != len(names):
        raise ValidationError(f"{header_path}: duplicate channel in header {names}")

    channels = []
    for spec in ch_specs:
        payload = path / spec["file"]
        if not payload.is_file():
            raise ValidationError(f"missing channel payload {spec['file']!r} for {spec['name']!r}")
        samples = np.fromfile(payload, dtype="<f4")
        channels.append(Channel(spec["name"], float(spec["sample_rate_hz"]), samples))

    ann_path = path / "annotations.jsonl"
    anns = read_annotations(ann_path) if ann_path.is_file() else []
    for a in anns:
        validate_annotation(a, duration)
    record = Record(rec_id, tuple(channels), _sorted_annotations(anns), duration)
    validate_record(record)
    return record


def _payload_name(name: str) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in name)
    return f"{safe}.f32"


def save_record(r: Record, path: str | Path) -> Path:
    """Write ``r`` as a record directory; returns the directory path."""
    validate_record(r)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    specs = []
    for ch in r.channels:
        fname = _payload_name(ch.name)
        np.asarray(ch.samples, dtype="<f4").tofile(path / fname)
        specs.append({"name": ch.name, "sample_rate_hz": ch.sample_rate_hz, "file": fname})
    header = {"id": r.id, "duration_s": r.duration_s, "channels": specs}
    (path / "record.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    write_annotations(path / "annotations.jsonl", _sorted_annotations(r.annotations))
    return path


def resample_channel(ch: Channel, target_hz: float) -> Channel:
    """Linear interpolation onto a ``target_hz`` grid, holding the last value past the end."""
    if target_hz <= 0:
        raise ValidationError("target rate must be positive")
    n_src = len(ch.samples)
    if n_src == 0:
        raise ValidationError(f"channel {ch.name!r} is empty")
    if target_hz == ch.sample_rate_hz:
        return replace(ch, samples=np.array(ch.samples, copy=True))
    n_out = int(round(n_src / ch.sample_rate_hz * target_hz))
    positions = np.arange(n_out, dtype=np.float64) * (ch.sample_rate_hz / target_hz)
    src = np.asarray(ch.samples, dtype=np.float64)
    out = np.interp(positions, np.arange(n_src, dtype=np.float64), src)
    return Channel(ch.name, float(target_hz), out)


def standardize(x: np.ndarray) -> np.ndarray:
    """(x - mean) / std with population std; all zeros when std is 0."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    mu = x.mean()
    sd = x.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(x)
    return (x - mu) / sd


def normalize_channel(ch: Channel) -> Channel:
    # record-level preview only; training windows are normalized in dataset.py
    return replace(ch, samples=standardize(ch.samples))
