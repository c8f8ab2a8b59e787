import numpy as np
import pytest

from sleepshot import ValidationError
from sleepshot.dataset import DatasetConfig, window_targets
from sleepshot.records import STAGES, load_record, validate_record
from sleepshot.synth import (
    DEFAULT_TRANSITIONS,
    MONTAGE,
    SynthConfig,
    generate_record,
    sample_hypnogram,
    write_synth_record,
)


@pytest.fixture(scope="module")
def hour_record():
    return generate_record(SynthConfig(seed=4, duration_s=3600, D=8))


def test_same_seed_is_byte_identical():
    cfg = SynthConfig(seed=9, duration_s=600, D=6)
    a, b = generate_record(cfg), generate_record(cfg)
    assert a.annotations == b.annotations
    for x, y in zip(a.channels, b.channels):
        assert x.samples.tobytes() == y.samples.tobytes()
    other = generate_record(SynthConfig(seed=10, duration_s=600, D=6))
    assert other.channels[0].samples.tobytes() != a.channels[0].samples.tobytes()


def test_montage_by_D():
    for D in (4, 6, 8):
        r = generate_record(SynthConfig(seed=0, duration_s=60, D=D))
        assert r.channel_names == list(MONTAGE[:D])


def test_zero_rates_give_only_stages():
    r = generate_record(SynthConfig(seed=1, duration_s=1800, arousals_per_hour=0, respiratory_per_hour=0))
    assert all(a.label in STAGES for a in r.annotations)


@pytest.mark.parametrize("kw", [dict(duration_s=20), dict(D=5), dict(arousals_per_hour=-1),
                                dict(transitions=[[1, 0, 0, 0, 0]] * 4 + [[0.5, 0.6, 0, 0, 0]])])
def test_invalid_configs(kw):
    with pytest.raises(ValidationError):
        SynthConfig(**kw)


def test_record_invariants_and_tiling(hour_record):
    validate_record(hour_record)
    stages = hour_record.stage_annotations()
    assert [a.onset_s for a in stages] == [30.0 * k for k in range(120)]
    assert all(a.duration_s == 30.0 for a in stages)
    events = hour_record.event_annotations()
    assert events and all(0 <= a.onset_s and a.end_s <= hour_record.duration_s for a in events)
    for a in events:
        lo, hi = (3, 15) if a.label == "arousal" else (10, 60)
        assert lo <= a.duration_s <= hi


def test_planted_events_survive_dataset_build(hour_record):
    cfg = DatasetConfig(channel_names=MONTAGE, assembly="SAR")
    spans, targets, stats = window_targets(hour_record.annotations, hour_record.duration_s, cfg)
    events = hour_record.event_annotations()
    owned = sum(int(t[5]) + int(t[8]) for t in targets)
    assert owned == len(events)
    assert sum(stats.dropped_ties.values()) == 0
    assert stats.unowned_events == 0 and stats.lost_in_skipped == 0


def test_apnea_airflow_variance(hour_record):
    flow = hour_record.channel("Airflow")
    fs = flow.sample_rate_hz
    x = flow.samples.astype(np.float64)
    events = hour_record.event_annotations()
    resp = [a for a in events if a.label != "arousal"]
    apneas = [a for a in resp if a.label == "apnea"]
    assert apneas
    checked = 0
    for a in apneas:
        lo = a.onset_s - 60
        if lo < 0 or any(b is not a and b.end_s > lo and b.onset_s < a.onset_s for b in resp):
            continue
        base = x[int(lo * fs):int(a.onset_s * fs)].var()
        inside = x[int((a.onset_s + 1) * fs):int((a.end_s - 1) * fs)].var()
        assert inside <= 0.1 * base
        checked += 1
    assert checked > 0


def test_hypopnea_is_partial(hour_record):
    flow = hour_record.channel("Airflow")
    x = flow.samples.astype(np.float64)
    fs = flow.sample_rate_hz
    truth = {(e["onset_s"], e["label"]): e for e in hour_record.meta["synth_truth"]["events"]}
    for a in hour_record.event_annotations():
        if a.label != "hypopnea" or a.onset_s < 60:
            continue
        residual = truth[(a.onset_s, a.label)]["residual"]
        assert 0.2 <= residual <= 0.6
        inside = x[int((a.onset_s + 1) * fs):int((a.end_s - 1) * fs)].std()
        before = x[int((a.onset_s - 60) * fs):int(a.onset_s * fs)].std()
        assert inside < before


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_transition_frequencies_converge(seed):
    T = np.asarray(DEFAULT_TRANSITIONS)
    hyp = sample_hypnogram(np.random.default_rng(seed), 960, T)
    k = [STAGES.index(s) for s in hyp]
    counts = np.zeros((5, 5))
    for a, b in zip(k, k[1:]):
        counts[a, b] += 1
    visited = counts.sum(axis=1) > 0
    empirical = counts[visited] / counts[visited].sum(axis=1, keepdims=True)
    tv = 0.5 * np.abs(empirical - T[visited]).sum(axis=1)
    assert tv.max() < 0.1


def test_written_record_loads_back(tmp_path):
    r = generate_record(SynthConfig(seed=2, duration_s=300, D=4))
    path = write_synth_record(r, tmp_path / "rec")
    back = load_record(path)
    assert back.annotations == r.annotations
    assert (path / "synth_truth.json").is_file()
    for a, b in zip(r.channels, back.channels):
        assert a.samples.tobytes() == b.samples.tobytes()
