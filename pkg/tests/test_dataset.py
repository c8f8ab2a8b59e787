import filecmp
import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sleepshot import ValidationError
from sleepshot.codec import decode
from sleepshot.dataset import (
    DatasetConfig,
    build_dataset,
    build_examples,
    load_dataset,
    save_dataset,
    split,
    window_targets,
)
from sleepshot.records import STAGES, Annotation, Channel, Record


def make_record(duration=90.0, events=(), stages=None, rates=(100.0, 25.0), seed=0, rid="r"):
    rng = np.random.default_rng(seed)
    channels = tuple(Channel(f"C{i}", r, rng.standard_normal(int(duration * r)) * (i + 1) + i)
                     for i, r in enumerate(rates))
    n = int(duration // 30)
    stages = stages if stages is not None else [STAGES[k % 5] for k in range(n)]
    anns = [Annotation(30.0 * k, 30.0, s) for k, s in enumerate(stages) if s is not None]
    return Record(rid, channels, tuple(anns) + tuple(events), duration)


def cfg(**kw):
    base = dict(channel_names=("C0", "C1"), assembly="SAR", delta=60, seed=0)
    base.update(kw)
    return DatasetConfig(**base)


def test_tiling_of_a_90_s_record():
    ex = build_examples(make_record(), cfg())
    assert [(e.span.start_s, e.span.end_s) for e in ex] == [(0, 30), (30, 60), (60, 90)]
    assert all(e.input.shape == (2, 15000) for e in ex)


def test_centroid_ownership_crosses_onset_window():
    spans, targets, _ = window_targets([Annotation(k * 30.0, 30.0, "N2") for k in range(3)]
                                       + [Annotation(29, 4, "arousal")], 90, cfg(assembly="SA"))
    assert targets[0][5] == 0.0 and targets[1][5] == 1.0
    ev = decode(targets[1], spans[1], "SA").arousal
    assert ev.onset_s == pytest.approx(29.0) and ev.duration_s == pytest.approx(4.0)


def test_longer_event_wins_tie():
    anns = [Annotation(k * 30.0, 30.0, "N2") for k in range(3)]
    anns += [Annotation(35, 20, "apnea"), Annotation(28, 35, "apnea")]
    _, targets, stats = window_targets(anns, 90, cfg(assembly="SR"))
    assert targets[1][-1] == pytest.approx(35 / 30)
    assert targets[1][-2] == pytest.approx((45.5 - 30) / 30)
    assert stats.dropped_ties["respiratory"] == 1


def test_missing_stage_skips_epoch_and_counts_it():
    rec = make_record(duration=120, stages=["W", None, "N1", "N2"],
                      events=[Annotation(40, 5, "arousal")])
    stats_ds = build_dataset([rec], cfg(), with_split=False)
    assert len(stats_ds) == 3
    assert stats_ds.stats.skipped_epochs == 1
    assert stats_ds.stats.lost_in_skipped == 1


def test_missing_channel_is_an_error():
    with pytest.raises(ValidationError, match="no channel"):
        build_examples(make_record(), cfg(channel_names=("C0", "EEG9")))


def test_edge_windows_are_zero_padded_and_rows_normalized():
    ex = build_examples(make_record(duration=300), cfg())
    first = ex[0].input
    assert np.all(first[:, :6000] == 0)
    body = first[:, 6000:].astype(np.float64)
    assert np.all(np.abs(body.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(body.std(axis=1) - 1) < 1e-6)
    middle = ex[4].input.astype(np.float64)
    assert np.all(np.abs(middle.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(middle.std(axis=1) - 1) < 1e-6)


def test_constant_channel_gives_zero_rows():
    rec = make_record()
    flat = Channel("C1", 25.0, np.full(90 * 25, 3.0))
    rec = Record(rec.id, (rec.channels[0], flat), rec.annotations, rec.duration_s)
    for e in build_examples(rec, cfg()):
        assert np.all(e.input[1] == 0)


@pytest.mark.parametrize("n, sizes", [(100, (64, 16, 20)), (5, (3, 1, 1)), (7, (5, 1, 1))])
def test_split_sizes(n, sizes):
    s = split(n, seed=3)
    assert (len(s.train), len(s.validation), len(s.test)) == sizes
    assert sorted(s.train + s.validation + s.test) == list(range(n))
    assert s == split(n, seed=3)


def test_split_rejects_tiny_sets():
    with pytest.raises(ValidationError, match="at least 5"):
        split(4, seed=0)


def test_save_load_bit_identical(tmp_path):
    ds = build_dataset([make_record(duration=300, events=[Annotation(100, 12, "apnea")])], cfg())
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds", expect=cfg())
    assert back.inputs.tobytes() == ds.inputs.tobytes()
    np.testing.assert_array_equal(back.targets, ds.targets)
    assert back.spans == ds.spans and back.split == ds.split
    assert back.content_hash() == ds.content_hash()


def test_load_with_different_D_fails(tmp_path):
    save_dataset(build_dataset([make_record(duration=300)], cfg()), tmp_path / "ds")
    with pytest.raises(ValidationError, match="channel_names"):
        load_dataset(tmp_path / "ds", expect=cfg(channel_names=("C0",)))


def test_target_length_mismatch_fails(tmp_path):
    path = save_dataset(build_dataset([make_record(duration=300)], cfg()), tmp_path / "ds")
    lines = (path / "targets.jsonl").read_text().splitlines()
    row = json.loads(lines[0])
    row["target"] = row["target"][:10]
    lines[0] = json.dumps(row)
    (path / "targets.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="does not match assembly SAR"):
        load_dataset(path)


def test_rebuild_is_byte_identical(tmp_path):
    recs = [make_record(duration=300, seed=s, rid=f"r{s}") for s in (1, 2)]
    save_dataset(build_dataset(recs, cfg()), tmp_path / "a")
    save_dataset(build_dataset(recs, cfg()), tmp_path / "b")
    for name in ("manifest.json", "inputs.f32", "targets.jsonl", "split.json"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_every_event_owned_once(seed):
    rng = random.Random(seed)
    n = rng.randrange(1, 12)
    duration = 30.0 * n
    anns = [Annotation(30.0 * k, 30.0, rng.choice(STAGES)) for k in range(n)]
    events = []
    for _ in range(rng.randrange(0, 10)):
        d = rng.uniform(1, min(40.0, duration))
        c = rng.uniform(d / 2, duration - d / 2)
        events.append(Annotation(c - d / 2, d, rng.choice(["arousal", "apnea", "hypopnea"])))
    spans, targets, stats = window_targets(anns + events, duration, cfg())
    assert len(spans) == n
    owned = sum(int(t[5] >= 0.5) + int(t[8] >= 0.5) for t in targets)
    dropped = sum(stats.dropped_ties.values())
    assert owned + dropped == len(events)
    recovered = []
    for span, t in zip(spans, targets):
        recovered += decode(t, span, "SAR").events
    for e in recovered:
        assert any(abs(e.onset_s - a.onset_s) < 1e-9 and abs(e.duration_s - a.duration_s) < 1e-9
                   and e.label == a.label for a in events)
