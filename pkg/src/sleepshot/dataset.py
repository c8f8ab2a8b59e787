"""Windowing of records into (input tensor, target vector) examples."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codec import Assembly, WindowSpan, as_assembly, encode, event_centroid
from .errors import ValidationError
from .records import STAGES, Record, family_of, resample_channel

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
_EPS = 1e-9


@dataclass(frozen=True)
class DatasetConfig:
    channel_names: tuple[str, ...]
    assembly: Assembly = Assembly.SAR
    N: float = 30.0
    delta: float = 60.0
    rate_hz: float = 100.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "assembly", as_assembly(self.assembly))
        object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if self.N <= 0 or self.delta < 0 or self.rate_hz <= 0:
            raise ValidationError("N and rate_hz must be positive and delta non-negative")
        if not self.channel_names:
            raise ValidationError("channel_names must not be empty")

    @property
    def D(self) -> int:
        return len(self.channel_names)

    @property
    def L(self) -> int:
        return int(round((2 * self.delta + self.N) * self.rate_hz))

    def to_json(self) -> dict:
        d = asdict(self)
        d["assembly"] = self.assembly.value
        d["channel_names"] = list(self.channel_names)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetConfig":
        keys = {"channel_names", "assembly", "N", "delta", "rate_hz", "seed"}
        return cls(**{k: v for k, v in d.items() if k in keys})


@dataclass
class Example:
    input: np.ndarray
    target: np.ndarray
    span: WindowSpan
    record_id: str


@dataclass
class BuildStats:
    windows: int = 0
    skipped_epochs: int = 0
    dropped_ties: dict = field(default_factory=lambda: {"arousal": 0, "respiratory": 0})
    unowned_events: int = 0
    lost_in_skipped: int = 0
    excluded_family: int = 0

    def add(self, other: "BuildStats") -> None:
        self.windows += other.windows
        self.skipped_epochs += other.skipped_epochs
        for k, v in other.dropped_ties.items():
            self.dropped_ties[k] = self.dropped_ties.get(k, 0) + v
        self.unowned_events += other.unowned_events
        self.lost_in_skipped += other.lost_in_skipped
        self.excluded_family += other.excluded_family


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]

    def to_json(self) -> dict:
        return {"train": list(self.train), "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_json(cls, d: dict) -> "SplitSpec":
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]))


def window_targets(annotations, duration_s: float, cfg: DatasetConfig):
    """Assign annotations to N-second windows and encode one target per window.

    Returns ``(spans, targets, stats)`` where skipped windows (no stage label)
    are absent from ``spans``/``targets``. Events are owned by the window
    holding their centroid; among same-family competitors the longer one wins
    (earlier onset on equal durations).
    """
    N = cfg.N
    n_windows = int(math.floor(duration_s / N + _EPS))
    stats = BuildStats()

    stage_of: list[str | None] = [None] * n_windows
    for a in annotations:
        if a.label not in STAGES:
            continue
        first = int(math.ceil(a.onset_s / N - 0.5 - _EPS))
        last = int(math.floor((a.onset_s + a.duration_s) / N - 0.5 - _EPS))
        for k in range(max(first, 0), min(last, n_windows - 1) + 1):
            if stage_of[k] is not None and stage_of[k] != a.label:
                log.warning("conflicting stage labels for epoch %d; keeping %s", k, stage_of[k])
                continue
            stage_of[k] = a.label

    owned: dict[int, dict[str, object]] = {}
    for a in annotations:
        fam = family_of(a.label)
        if fam == "stage":
            continue
        if fam not in cfg.assembly.families:
            stats.excluded_family += 1
            continue
        k = int(math.floor(event_centroid(a) / N))
        if not 0 <= k < n_windows:
            stats.unowned_events += 1
            continue
        if stage_of[k] is None:
            stats.lost_in_skipped += 1
            continue
        slot = owned.setdefault(k, {})
        prev = slot.get(fam)
        if prev is None:
            slot[fam] = a
            continue
        stats.dropped_ties[fam] += 1
        if (a.duration_s, -a.onset_s) > (prev.duration_s, -prev.onset_s):
            slot[fam] = a

    spans, targets = [], []
    for k in range(n_windows):
        if stage_of[k] is None:
            stats.skipped_epochs += 1
            continue
        span = WindowSpan(k * N, (k + 1) * N)
        events = list(owned.get(k, {}).values())
        spans.append(span)
        targets.append(encode(span, stage_of[k], events, cfg.assembly))
    stats.windows = len(spans)
    return spans, targets, stats


def _normalized_window(x: np.ndarray, start: int, length: int) -> np.ndarray:
    out = np.zeros(length, dtype=np.float64)
    lo, hi = max(start, 0), min(start + length, len(x))
    if hi <= lo:
        return out
    seg = x[lo:hi]
    mu = seg.mean()
    sd = seg.std()
    if sd > 0:
        out[lo - start:hi - start] = (seg - mu) / sd
    return out


def window_inputs(r: Record, cfg: DatasetConfig, spans) -> np.ndarray:
    """Context-expanded, normalized (len(spans), D, L) input tensor for ``spans`` of ``r``.

    Inputs cover each window plus ``delta`` seconds of context on each side,
    zero-padded past the record edges and standardized per channel over the
    non-padded samples only.
    """
    signals = [np.asarray(resample_channel(r.channel(name), cfg.rate_hz).samples, dtype=np.float64)
               for name in cfg.channel_names]
    L = cfg.L
    out = np.empty((len(spans), cfg.D, L), dtype=np.float32)
    for i, span in enumerate(spans):
        s0 = int(round((span.start_s - cfg.delta) * cfg.rate_hz))
        for c, sig in enumerate(signals):
            out[i, c] = _normalized_window(sig, s0, L)
    return out


def record_spans(duration_s: float, N: float) -> list[WindowSpan]:
    """Every whole N-second window of a record, labelled or not."""
    n = int(math.floor(duration_s / N + _EPS))
    return [WindowSpan(k * N, (k + 1) * N) for k in range(n)]


def build_examples(r: Record, cfg: DatasetConfig, stats: BuildStats | None = None) -> list[Example]:
    """One example per labelled epoch of ``r``."""
    if r.duration_s < cfg.N:
        raise ValidationError(f"record {r.id!r} is shorter than one {cfg.N} s window")
    for name in cfg.channel_names:
        r.channel(name)

    spans, targets, st = window_targets(r.annotations, r.duration_s, cfg)
    if st.skipped_epochs:
        log.warning("record %s: %d epochs without stage label skipped", r.id, st.skipped_epochs)
    for fam, n in st.dropped_ties.items():
        if n:
            log.info("record %s: %d %s annotations dropped by same-window tie-break", r.id, n, fam)
    if stats is not None:
        stats.add(st)

    inputs = window_inputs(r, cfg, spans)
    return [Example(x, target, span, r.id) for x, span, target in zip(inputs, spans, targets)]


def split(examples, seed: int) -> SplitSpec:
    """Seeded 80/20 test hold-out followed by an 80/20 train/validation split."""
    n = examples if isinstance(examples, int) else len(examples)
    if n < 5:
        raise ValidationError(f"need at least 5 examples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(math.floor(0.2 * n + 0.5))
    n_val = int(math.floor(0.2 * (n - n_test) + 0.5))
    test = perm[:n_test]
    val = perm[n_test:n_test + n_val]
    train = perm[n_test + n_val:]
    return SplitSpec(tuple(sorted(map(int, train))), tuple(sorted(map(int, val))),
                     tuple(sorted(map(int, test))))


@dataclass
class Dataset:
    cfg: DatasetConfig
    inputs: np.ndarray
    targets: np.ndarray
    spans: list[WindowSpan]
    record_ids: list[str]
    stats: BuildStats = field(default_factory=BuildStats)
    split: SplitSpec | None = None

    def __len__(self) -> int:
        return len(self.spans)

    @classmethod
    def from_examples(cls, examples, cfg: DatasetConfig, stats: BuildStats | None = None) -> "Dataset":
        examples = list(examples)
        if examples:
            inputs = np.stack([e.input for e in examples]).astype(np.float32, copy=False)
            targets = np.stack([e.target for e in examples]).astype(np.float64)
        else:
            inputs = np.zeros((0, cfg.D, cfg.L), np.float32)
            targets = np.zeros((0, cfg.assembly.size))
        return cls(cfg, inputs, targets, [e.span for e in examples], [e.record_id for e in examples],
                   stats or BuildStats())

    def subset(self, indices) -> "Dataset":
        idx = list(indices)
        return Dataset(self.cfg, self.inputs[idx], self.targets[idx], [self.spans[i] for i in idx],
                       [self.record_ids[i] for i in idx], self.stats)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.targets, dtype="<f8").tobytes())
        return h.hexdigest()


def build_dataset(records, cfg: DatasetConfig, with_split: bool = True) -> Dataset:
    stats = BuildStats()
    examples = []
    for r in records:
        examples.extend(build_examples(r, cfg, stats))
    ds = Dataset.from_examples(examples, cfg, stats)
    if with_split:
        ds.split = split(len(ds), cfg.seed)
    return ds


def save_dataset(ds: Dataset, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "cfg": ds.cfg.to_json(),
        "seed": ds.cfg.seed,
        "counts": {"examples": len(ds), "D": ds.cfg.D, "L": ds.cfg.L, "V": ds.cfg.assembly.size},
        "stats": asdict(ds.stats),
        "records": sorted(set(ds.record_ids)),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    np.ascontiguousarray(ds.inputs, dtype="<f4").tofile(path / "inputs.f32")
    with open(path / "targets.jsonl", "w", encoding="utf-8") as fh:
        for i, (span, rid, t) in enumerate(zip(ds.spans, ds.record_ids, ds.targets)):
            row = {"index": i, "record_id": rid, "start_s": span.start_s, "end_s": span.end_s,
                   "target": [float(v) for v in t]}
            fh.write(json.dumps(row) + "\n")
    if ds.split is not None:
        (path / "split.json").write_text(json.dumps(ds.split.to_json()) + "\n", encoding="utf-8")
    return path


def load_dataset(path: str | Path, expect: DatasetConfig | None = None) -> Dataset:
    """Load a dataset directory, checking it against ``expect`` when given."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        cfg = DatasetConfig.from_json(manifest["cfg"])
        counts = manifest["counts"]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: unreadable dataset manifest") from exc
    if expect is not None:
        for key in ("channel_names", "assembly", "N", "delta", "rate_hz"):
            if getattr(expect, key) != getattr(cfg, key):
                raise ValidationError(
                    f"dataset {key} mismatch: manifest has {getattr(cfg, key)!r}, "
                    f"expected {getattr(expect, key)!r}")
    if counts.get("D") != cfg.D or counts.get("L") != cfg.L or counts.get("V") != cfg.assembly.size:
        raise ValidationError(f"{path}: manifest counts disagree with its config")

    n = int(counts["examples"])
    raw = np.fromfile(path / "inputs.f32", dtype="<f4")
    if raw.size != n * cfg.D * cfg.L:
        raise ValidationError(f"{path}: inputs.f32 holds {raw.size} values, expected {n * cfg.D * cfg.L}")
    inputs = raw.reshape(n, cfg.D, cfg.L)

    spans, rids, targets = [], [], []
    with open(path / "targets.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            t = row["target"]
            if len(t) != cfg.assembly.size:
                raise ValidationError(
                    f"target of length {len(t)} does not match assembly {cfg.assembly.value} "
                    f"(length {cfg.assembly.size})")
            spans.append(WindowSpan(float(row["start_s"]), float(row["end_s"])))
            rids.append(row["record_id"])
            targets.append(t)
    if len(spans) != n:
        raise ValidationError(f"{path}: {len(spans)} targets for {n} examples")

    stats_json = manifest.get("stats", {})
    stats = BuildStats(**stats_json) if stats_json else BuildStats()
    split_path = path / "split.json"
    spl = SplitSpec.from_json(json.loads(split_path.read_text())) if split_path.is_file() else None
    return Dataset(cfg, inputs, np.asarray(targets, dtype=np.float64).reshape(n, cfg.assembly.size),
                   spans, rids, stats, spl)
