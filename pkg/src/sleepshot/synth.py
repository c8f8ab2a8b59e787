"""Deterministic synthetic polysomnography with planted, learnable signatures.

Recipe (all amplitudes are exaggerated on purpose):

* hypnogram: first-order Markov chain over 30 s epochs, starting awake;
* EEG: stage-weighted mix of band-limited noises. Wake is alpha/beta, N1 theta,
  N2 theta plus 12-14 Hz spindle bursts, N3 large 0.5-2 Hz waves, REM mixed
  theta/beta;
* EOG: blinks in W, slow rolling movements in N1, rapid saccade bursts in REM,
  delta leakage in N3;
* EMG: 20-45 Hz noise whose amplitude falls from W to REM;
* arousals: 3-15 s surges of alpha/beta in both EEGs plus an EMG burst;
* respiratory: airflow and thoraco-abdominal belts scaled by 0-10 % (apnea)
  or 20-60 % (hypopnea) of baseline amplitude for 10-60 s, with a saturation
  dip that starts 10 s after the event onset.

Events of one family never overlap and never share the 30 s epoch that holds
their centroid, so a dataset build owns every planted event.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ValidationError
from .records import APNEA, AROUSAL, EPOCH_S, HYPOPNEA, STAGES, Annotation, Channel, Record, save_record

MONTAGE = ("EEG1", "EEG2", "EOG", "EMG", "SpO2", "Airflow", "Abdomen", "Thorax")
SAMPLE_RATES = {"EEG1": 100.0, "EEG2": 100.0, "EOG": 100.0, "EMG": 100.0,
                "SpO2": 1.0, "Airflow": 25.0, "Abdomen": 25.0, "Thorax": 25.0}

DEFAULT_TRANSITIONS = (
    (0.90, 0.07, 0.02, 0.00, 0.01),
    (0.06, 0.70, 0.20, 0.00, 0.04),
    (0.02, 0.03, 0.88, 0.04, 0.03),
    (0.01, 0.00, 0.07, 0.92, 0.00),
    (0.03, 0.03, 0.03, 0.00, 0.91),
)

SATURATION_LAG_S = 10.0

# EEG band amplitudes per stage: delta, theta, alpha, sigma (spindle-gated), beta
_EEG_AMPS = {
    "W": (0.2, 0.2, 1.2, 0.0, 1.0),
    "N1": (0.3, 1.3, 0.3, 0.0, 0.2),
    "N2": (0.5, 0.6, 0.1, 2.5, 0.1),
    "N3": (3.0, 0.3, 0.0, 0.0, 0.0),
    "REM": (0.2, 0.8, 0.3, 0.0, 0.6),
}
_EMG_AMP = {"W": 1.0, "N1": 0.5, "N2": 0.3, "N3": 0.25, "REM": 0.04}
_BANDS = ((0.5, 2.0), (4.0, 7.0), (8.0, 12.0), (12.0, 14.0), (20.0, 30.0))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    duration_s: float = 8 * 3600.0
    D: int = 8
    arousals_per_hour: float = 10.0
    respiratory_per_hour: float = 15.0
    apnea_fraction: float = 0.5
    transitions: tuple = DEFAULT_TRANSITIONS
    record_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(tuple(float(p) for p in row)
                                                      for row in self.transitions))
        if self.D not in (4, 6, 8):
            raise ValidationError(f"D must be 4, 6 or 8, got {self.D}")
        if self.duration_s < EPOCH_S:
            raise ValidationError(f"duration {self.duration_s} s is shorter than one 30 s epoch")
        if abs(self.duration_s / EPOCH_S - round(self.duration_s / EPOCH_S)) > 1e-9:
            raise ValidationError("duration must be a whole number of 30 s epochs")
        if min(self.arousals_per_hour, self.respiratory_per_hour) < 0:
            raise ValidationError("event rates must be non-negative")
        if not 0 <= self.apnea_fraction <= 1:
            raise ValidationError("apnea_fraction must lie in [0, 1]")
        m = np.asarray(self.transitions)
        if m.shape != (5, 5) or np.any(m < 0) or not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
            raise ValidationError("transitions must be a 5x5 row-stochastic matrix")

    @property
    def channel_names(self) -> tuple[str, ...]:
        return MONTAGE[:self.D]

    @property
    def id(self) -> str:
        return self.record_id or f"synth-{self.seed:04d}"

    def to_json(self) -> dict:
        d = asdict(self)
        d["transitions"] = [list(r) for r in self.transitions]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class _Planted:
    label: str
    onset_s: float
    duration_s: float
    params: dict = field(default_factory=dict)

    @property
    def end_s(self) -> float:
        return self.onset_s + self.duration_s


def sample_hypnogram(rng: np.random.Generator, n_epochs: int, transitions) -> list[str]:
    m = np.asarray(transitions)
    state = 0
    out = [STAGES[state]]
    cum = np.cumsum(m, axis=1)
    for u in rng.random(n_epochs - 1):
        state = min(int(np.searchsorted(cum[state], u, side="right")), 4)
        out.append(STAGES[state])
    return out


def _band_noise(rng, n, fs, lo, hi):
    white = rng.standard_normal(n + int(4 * fs))
    sos = signal.butter(4, [lo, min(hi, 0.45 * fs)], btype="band", fs=fs, output="sos")
    x = signal.sosfiltfilt(sos, white)[int(2 * fs):int(2 * fs) + n]
    return x / x.std()


def _epoch_profile(values, n_epochs, fs, n):
    """Per-sample amplitude from per-epoch values, smoothed over one second."""
    per = int(round(EPOCH_S * fs))
    prof = np.repeat(np.asarray(values, dtype=np.float64), per)[:n]
    if len(prof) < n:
        prof = np.pad(prof, (0, n - len(prof)), mode="edge")
    k = max(int(fs), 1)
    return np.convolve(np.pad(prof, (k // 2, k - 1 - k // 2), mode="edge"), np.ones(k) / k, mode="valid")


def _interval_mask(t, events, ramp_s=0.0):
    """1 inside each event, cosine ramps of ``ramp_s`` just outside."""
    m = np.zeros_like(t)
    for e in events:
        inside = (t >= e.onset_s) & (t < e.end_s)
        m[inside] = 1.0
        if ramp_s > 0:
            pre = (t >= e.onset_s - ramp_s) & (t < e.onset_s)
            m[pre] = np.maximum(m[pre], 0.5 - 0.5 * np.cos(np.pi * (t[pre] - e.onset_s + ramp_s) / ramp_s))
            post = (t >= e.end_s) & (t < e.end_s + ramp_s)
            m[post] = np.maximum(m[post], 0.5 + 0.5 * np.cos(np.pi * (t[post] - e.end_s) / ramp_s))
    return m


def _place_events(rng, count, hypnogram, duration, dur_range, gap_s):
    """Uniform onsets inside sleep epochs, rejecting overlaps and shared centroid epochs."""
    sleep_epochs = [k for k, s in enumerate(hypnogram) if s != "W"]
    placed: list[tuple[float, float]] = []
    owners: set[int] = set()
    if not sleep_epochs:
        return placed
    attempts = 0
    while len(placed) < count and attempts < 50 * max(count, 1):
        attempts += 1
        dur = float(rng.uniform(*dur_range))
        k = sleep_epochs[int(rng.integers(len(sleep_epochs)))]
        onset = round(float(k * EPOCH_S + rng.uniform(0, EPOCH_S)), 2)
        dur = round(dur, 2)
        end = onset + dur
        if onset < 0 or end > duration:
            continue
        owner = int(math.floor((onset + dur / 2) / EPOCH_S))
        if owner in owners:
            continue
        if any(onset < s + d + gap_s and s < end + gap_s for s, d in placed):
            continue
        placed.append((onset, dur))
        owners.add(owner)
    placed.sort()
    return placed


def generate_record(cfg: SynthConfig) -> Record:
    """Generate one synthetic record; identical configs give identical records."""
    rng = np.random.default_rng(cfg.seed)
    n_epochs = int(round(cfg.duration_s / EPOCH_S))
    duration = n_epochs * EPOCH_S
    hyp = sample_hypnogram(rng, n_epochs, cfg.transitions)
    hours = duration / 3600.0

    n_ar = int(rng.poisson(cfg.arousals_per_hour * hours)) if cfg.arousals_per_hour > 0 else 0
    n_resp = int(rng.poisson(cfg.respiratory_per_hour * hours)) if cfg.respiratory_per_hour > 0 else 0
    arousals = [_Planted(AROUSAL, o, d, {"gain": float(rng.uniform(2.5, 4.0))})
                for o, d in _place_events(rng, n_ar, hyp, duration, (3.0, 15.0), 5.0)]
    resp = []
    for o, d in _place_events(rng, n_resp, hyp, duration, (10.0, 60.0), 15.0):
        if rng.random() < cfg.apnea_fraction:
            resp.append(_Planted(APNEA, o, d, {"residual": float(rng.uniform(0.0, 0.08)),
                                               "desaturation": float(rng.uniform(4.0, 8.0))}))
        else:
            resp.append(_Planted(HYPOPNEA, o, d, {"residual": float(rng.uniform(0.2, 0.6)),
                                                  "desaturation": float(rng.uniform(2.0, 4.0))}))

    signals = {}
    fs = SAMPLE_RATES["EEG1"]
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    arousal_mask = _interval_mask(t, arousals, ramp_s=0.5)
    arousal_gain = np.ones(n)
    for e in arousals:
        arousal_gain += (e.params["gain"] - 1.0) * _interval_mask(t, [e], ramp_s=0.5)

    for name in ("EEG1", "EEG2"):
        bands = [_band_noise(rng, n, fs, lo, hi) for lo, hi in _BANDS]
        spindle_gate = _spindle_gate(rng, n, fs)
        x = 0.1 * rng.standard_normal(n)
        for b, band in enumerate(bands):
            amp = _epoch_profile([_EEG_AMPS[s][b] for s in hyp], n_epochs, fs, n)
            if b == 3:
                band = band * spindle_gate
            x += amp * band
        x += (arousal_gain - 1.0) * (bands[2] + bands[4])
        signals[name] = x

    signals["EOG"] = _eog(rng, hyp, n_epochs, fs, n, t)
    emg = _band_noise(rng, n, fs, 20.0, 45.0)
    emg_amp = _epoch_profile([_EMG_AMP[s] for s in hyp], n_epochs, fs, n)
    signals["EMG"] = emg * emg_amp * (1.0 + 2.0 * arousal_mask) + 0.02 * rng.standard_normal(n)

    _respiratory_channels(rng, duration, resp, signals)

    channels = tuple(Channel(name, SAMPLE_RATES[name], signals[name].astype(np.float32))
                     for name in cfg.channel_names)
    anns = [Annotation(k * EPOCH_S, EPOCH_S, s) for k, s in enumerate(hyp)]
    anns += [Annotation(e.onset_s, e.duration_s, e.label) for e in arousals + resp]
    anns.sort(key=lambda a: (a.onset_s, a.label))
    truth = {
        "config": cfg.to_json(),
        "hypnogram": hyp,
        "events": [{"label": e.label, "onset_s": e.onset_s, "duration_s": e.duration_s, **e.params}
                   for e in sorted(arousals + resp, key=lambda e: e.onset_s)],
        "saturation_lag_s": SATURATION_LAG_S,
    }
    return Record(cfg.id, channels, tuple(anns), duration, meta={"synth_truth": truth})


def _spindle_gate(rng, n, fs):
    gate = np.zeros(n)
    t = 0.0
    total = n / fs
    while t < total:
        t += float(rng.uniform(2.0, 6.0))
        length = float(rng.uniform(0.7, 1.5))
        i0, i1 = int(t * fs), min(int((t + length) * fs), n)
        if i1 > i0:
            gate[i0:i1] = np.hanning(i1 - i0)
        t += length
    return gate


def _eog(rng, hyp, n_epochs, fs, n, t):
    x = 0.15 * rng.standard_normal(n)
    slow = _band_noise(rng, n, fs, 0.1, 0.5)
    fast = _band_noise(rng, n, fs, 1.0, 3.0)
    delta = _band_noise(rng, n, fs, 0.5, 2.0)
    x += 2.0 * _epoch_profile([s == "N1" for s in hyp], n_epochs, fs, n) * slow
    x += 1.5 * _epoch_profile([s == "N3" for s in hyp], n_epochs, fs, n) * delta
    burst = (_band_noise(rng, n, fs, 0.05, 0.3) > 0).astype(float)
    x += 3.0 * _epoch_profile([s == "REM" for s in hyp], n_epochs, fs, n) * burst * fast
    # blinks while awake
    wake = np.array([s == "W" for s in hyp])
    n_blinks = int(rng.poisson(0.3 * wake.sum() * EPOCH_S))
    epochs = np.flatnonzero(wake)
    if len(epochs):
        centers = (rng.choice(epochs, size=n_blinks) + rng.random(n_blinks)) * EPOCH_S
        width = int(0.4 * fs)
        bump = 4.0 * np.hanning(width)
        for c in centers:
            i0 = int(c * fs) - width // 2
            if 0 <= i0 and i0 + width <= n:
                x[i0:i0 + width] += bump
    return x


def _respiratory_channels(rng, duration, events, signals):
    fs = SAMPLE_RATES["Airflow"]
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    rate = 0.25 + 0.03 * _band_noise(rng, n, fs, 0.001, 0.01)
    phase = 2 * np.pi * np.cumsum(rate) / fs
    envelope = 1.0 + 0.08 * _band_noise(rng, n, fs, 0.002, 0.02)
    atten = np.ones(n)
    for e in events:
        m = _interval_mask(t, [e], ramp_s=1.0)
        atten = np.minimum(atten, 1.0 - (1.0 - e.params["residual"]) * m)
    amp = envelope * atten
    signals["Airflow"] = amp * np.sin(phase) + 0.03 * rng.standard_normal(n)
    signals["Abdomen"] = 0.8 * amp * np.sin(phase - 0.4) + 0.03 * rng.standard_normal(n)
    signals["Thorax"] = 0.9 * amp * np.sin(phase + 0.2) + 0.03 * rng.standard_normal(n)

    fs_sat = SAMPLE_RATES["SpO2"]
    n_sat = int(round(duration * fs_sat))
    ts = np.arange(n_sat) / fs_sat
    sat = 96.0 + 0.3 * _band_noise(rng, n_sat, fs_sat, 0.005, 0.05)
    for e in events:
        start = e.onset_s + SATURATION_LAG_S
        bottom = e.end_s + SATURATION_LAG_S
        recover = bottom + 10.0
        depth = e.params["desaturation"]
        fall = (ts >= start) & (ts < bottom)
        sat[fall] -= depth * (ts[fall] - start) / max(bottom - start, 1e-9)
        rise = (ts >= bottom) & (ts < recover)
        sat[rise] -= depth * (1.0 - (ts[rise] - bottom) / 10.0)
    signals["SpO2"] = np.clip(sat, 50.0, 100.0)


def write_synth_record(record: Record, path: str | Path) -> Path:
    path = save_record(record, path)
    truth = record.meta.get("synth_truth")
    if truth is not None:
        (Path(path) / "synth_truth.json").write_text(json.dumps(truth, indent=2) + "\n", encoding="utf-8")
    return path
