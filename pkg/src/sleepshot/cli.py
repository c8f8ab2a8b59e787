"""Command-line front end: synth, build-dataset, train, infer, score, grid.

Every option can also come from a JSON config file (``--config``) holding a
``version`` field; flags given on the command line override file values.
Exit status is 0 on success, 2 on validation errors and 3 on numeric
divergence, with a one-line JSON error object on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import inspect
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .codec import WindowSpan, as_assembly, decode, postprocess
from .dataset import (
    DatasetConfig,
    build_dataset,
    load_dataset,
    record_spans,
    save_dataset,
    window_inputs,
    window_targets,
)
from .errors import DivergenceError, ValidationError
from .metrics import score_run, summary_table
from .model import ModelConfig, load_params, predict, read_checkpoint_header, save_params
from .records import STAGES, Annotation, load_record, read_annotations, write_annotations
from .synth import MONTAGE, SynthConfig, generate_record, write_synth_record
from .trainer import TrainConfig, train

log = logging.getLogger("sleepshot")

CONFIG_VERSION = 1
CHECKPOINT_NAME = "checkpoint.ckpt"

GRID = (
    (4, "S"), (4, "SA"), (4, "SR"), (4, "SAR"),
    (6, "SA"), (6, "SR"), (6, "SAR"),
    (8, "SA"), (8, "SR"), (8, "SAR"),
)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValidationError(f"missing file {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def _model_config(D, assembly, L, seed, P, kernel, filters, pool_width, dense_units, dropout_rate,
                  lstm_hidden) -> ModelConfig:
    return ModelConfig(D=D, assembly=assembly, L=L, P=P, kernel=kernel, filters=tuple(filters),
                       pool_width=pool_width, dense_units=dense_units, dropout_rate=dropout_rate,
                       lstm_hidden=lstm_hidden, seed=seed)


def _train_config(seed, batch_size, max_epochs, patience, learning_rate, momentum, loss_mode) -> TrainConfig:
    return TrainConfig(batch_size=batch_size, max_epochs=max_epochs, patience=patience or None,
                       learning_rate=learning_rate, momentum=momentum, loss_mode=loss_mode,
                       shuffle_seed=seed)


# -- commands -----------------------------------------------------------------


def cmd_synth(out, seed=0, n_records=1, duration_s=28800.0, D=8, arousals_per_hour=10.0,
              respiratory_per_hour=15.0, apnea_fraction=0.5) -> list[Path]:
    """Write ``n_records`` synthetic records (seeds ``seed``, ``seed+1``, ...) under ``out``."""
    out = Path(out)
    paths = []
    for i in range(n_records):
        cfg = SynthConfig(seed=seed + i, duration_s=duration_s, D=D, arousals_per_hour=arousals_per_hour,
                          respiratory_per_hour=respiratory_per_hour, apnea_fraction=apnea_fraction)
        rec = generate_record(cfg)
        paths.append(write_synth_record(rec, out / rec.id))
        log.info("wrote %s", paths[-1])
    return paths


def _channel_names(D, channels):
    if channels:
        return tuple(channels)
    if D is None:
        raise ValidationError("give either D or an explicit channel list")
    if not 1 <= D <= len(MONTAGE):
        raise ValidationError(f"D must lie in 1..{len(MONTAGE)} for the default montage")
    return MONTAGE[:D]


def _expand_records(paths) -> list[Path]:
    """Accept record directories or directories holding record directories."""
    found = []
    for p in map(Path, paths):
        if (p / "record.json").is_file():
            found.append(p)
        elif p.is_dir():
            subs = sorted(d for d in p.iterdir() if (d / "record.json").is_file())
            if not subs:
                raise ValidationError(f"{p}: no record directories found")
            found.extend(subs)
        else:
            raise ValidationError(f"{p}: not a record directory")
    return found


def cmd_build(records, out, seed=0, D=None, channels=None, assembly="SAR", N=30.0, delta=60.0,
              rate_hz=100.0) -> Path:
    """Build a dataset directory from record directories."""
    cfg = DatasetConfig(channel_names=_channel_names(D, channels), assembly=assembly, N=N, delta=delta,
                        rate_hz=rate_hz, seed=seed)
    recs = [load_record(p) for p in _expand_records(records)]
    ds = build_dataset(recs, cfg)
    path = save_dataset(ds, out)
    log.info("dataset with %d examples written to %s", len(ds), path)
    return path


def _fit_and_save(ds, out: Path, mcfg: ModelConfig, tcfg: TrainConfig, seed: int):
    best, tlog = train(mcfg, ds, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    lineage = {"seed": seed, "dataset_cfg": ds.cfg.to_json(), "dataset_hash": ds.content_hash(),
               "train_cfg": tcfg.to_json(), "sleepshot_version": __version__}
    save_params(best, out / CHECKPOINT_NAME, lineage=lineage)
    tlog.write_jsonl(out / "trainlog.jsonl")
    summary = {"epochs_run": tlog.epochs_run, "best_epoch": tlog.best_epoch,
               "best_val_loss": tlog.best_val_loss, "stopped_early": tlog.stopped_early,
               "model_cfg": mcfg.to_json(), **lineage}
    _write_json(out / "train.json", summary)
    return best, tlog


def cmd_train(dataset, out, seed=0, P=5, kernel=100, filters=(8, 16, 32), pool_width=6, dense_units=50,
              dropout_rate=0.5, lstm_hidden=50, batch_size=100, max_epochs=100, patience=5,
              learning_rate=0.001, momentum=0.9, loss_mode="multi") -> Path:
    """Train on a dataset directory; writes checkpoint.ckpt, trainlog.jsonl and train.json."""
    ds = load_dataset(dataset)
    mcfg = _model_config(ds.cfg.D, ds.cfg.assembly, ds.cfg.L, seed, P, kernel, filters, pool_width,
                         dense_units, dropout_rate, lstm_hidden)
    tcfg = _train_config(seed, batch_size, max_epochs, patience, learning_rate, momentum, loss_mode)
    out = Path(out)
    _fit_and_save(ds, out, mcfg, tcfg, seed)
    return out / CHECKPOINT_NAME


def _write_predictions(out: Path, rid: str, spans, preds, assembly, lam, record_duration=None) -> dict:
    windows = [decode(v, s, assembly, record_duration) for v, s in zip(preds, spans)]
    events, hypnogram = postprocess(windows, lam)
    d = out / rid
    d.mkdir(parents=True, exist_ok=True)
    write_annotations(d / "events.jsonl", events)
    _write_json(d / "hypnogram.json", hypnogram)
    with open(d / "windows.jsonl", "w", encoding="utf-8") as fh:
        for s, v, w in zip(spans, preds, windows):
            fh.write(json.dumps({"record_id": rid, "start_s": s.start_s, "end_s": s.end_s,
                                 "stage": w.stage, "activations": [float(a) for a in v]}) + "\n")
    return {"windows": len(spans), "events": len(events)}


def cmd_infer(checkpoint, out, record=None, dataset=None, split="all", lam=0.0) -> Path:
    """Predict every window of a record (or of a dataset split) and decode events.

    Writes ``<out>/<record_id>/{events.jsonl, hypnogram.json, windows.jsonl}``
    plus ``<out>/meta.json``.
    """
    if (record is None) == (dataset is None):
        raise ValidationError("give exactly one of record or dataset")
    header = read_checkpoint_header(checkpoint)
    params = load_params(checkpoint)
    assembly = params.config.assembly
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    if record is not None:
        ds_json = header.get("lineage", {}).get("dataset_cfg")
        if ds_json is None:
            raise ValidationError(f"{checkpoint}: checkpoint carries no dataset configuration")
        cfg = DatasetConfig.from_json(ds_json)
        rec = load_record(record)
        spans = record_spans(rec.duration_s, cfg.N)
        preds = predict(params, window_inputs(rec, cfg, spans))
        counts[rec.id] = _write_predictions(out, rec.id, spans, preds, assembly, lam, rec.duration_s)
    else:
        ds = load_dataset(dataset)
        if ds.cfg.D != params.config.D or ds.cfg.assembly != assembly:
            raise ValidationError("dataset and checkpoint disagree on D or assembly")
        if split == "all":
            idx = np.arange(len(ds))
        else:
            if ds.split is None or split not in ("train", "validation", "test"):
                raise ValidationError(f"dataset has no {split!r} split")
            idx = np.asarray(getattr(ds.split, split), dtype=np.int64)
        preds = predict(params, ds.inputs[idx])
        by_record: dict[str, list[int]] = {}
        for j, i in enumerate(idx):
            by_record.setdefault(ds.record_ids[i], []).append(j)
        for rid, js in by_record.items():
            spans = [ds.spans[idx[j]] for j in js]
            counts[rid] = _write_predictions(out, rid, spans, preds[js], assembly, lam)
    _write_json(out / "meta.json", {"assembly": assembly.value, "lam": lam, "checkpoint_sha256":
                                    header.get("sha256"), "records": counts})
    return out


def _prediction_dirs(pred: Path) -> list[Path]:
    if (pred / "windows.jsonl").is_file() or (pred / "events.jsonl").is_file():
        return [pred]
    dirs = sorted(d for d in pred.iterdir() if d.is_dir() and
                  ((d / "windows.jsonl").is_file() or (d / "events.jsonl").is_file()))
    if not dirs:
        raise ValidationError(f"{pred}: no predictions found")
    return dirs


def _load_predictions(d: Path, assembly, N: float):
    """Rows of (record_id, start_s, vector) plus decoded windows when activations exist."""
    if (d / "windows.jsonl").is_file():
        rows = [json.loads(line) for line in (d / "windows.jsonl").read_text().splitlines() if line.strip()]
        return [(r["record_id"], float(r["start_s"]), float(r["end_s"]), np.asarray(r["activations"]))
                for r in rows], True
    # re-encode a decoded annotation list into window vectors
    hyp = _read_json(d / "hypnogram.json")
    if any(s not in STAGES for s in hyp):
        raise ValidationError(f"{d}: hypnogram contains unknown stage labels")
    anns = [Annotation(k * N, N, s) for k, s in enumerate(hyp)] + read_annotations(d / "events.jsonl")
    cfg = DatasetConfig(channel_names=("none",), assembly=assembly, N=N)
    spans, targets, _ = window_targets(anns, len(hyp) * N, cfg)
    return [(d.name, s.start_s, s.end_s, t) for s, t in zip(spans, targets)], False


def _reference_targets(reference: Path, assembly, N: float) -> dict:
    if (reference / "manifest.json").is_file():
        ds = load_dataset(reference)
        if ds.cfg.assembly != assembly:
            raise ValidationError(f"reference dataset assembly {ds.cfg.assembly.value} != {assembly.value}")
        return {(rid, s.start_s): t for rid, s, t in zip(ds.record_ids, ds.spans, ds.targets)}
    table = {}
    cfg = DatasetConfig(channel_names=("none",), assembly=assembly, N=N)
    for path in _expand_records([reference]):
        rec = load_record(path)
        spans, targets, _ = window_targets(rec.annotations, rec.duration_s, cfg)
        table.update({(rec.id, s.start_s): t for s, t in zip(spans, targets)})
    return table


def cmd_score(pred, reference, out, assembly=None, N=30.0) -> dict:
    """Score predictions against a reference record (or dataset) and write report.json.

    Predictions with raw activations are decoded with the usual thresholds;
    annotation-only predictions are re-encoded window by window first.
    """
    pred, reference = Path(pred), Path(reference)
    meta_path = next((p / "meta.json" for p in (pred, pred.parent) if (p / "meta.json").is_file()), None)
    if assembly is None:
        if meta_path is None:
            raise ValidationError("assembly unknown: pass it explicitly or score an infer output directory")
        assembly = _read_json(meta_path)["assembly"]
    assembly = as_assembly(assembly)

    ref = _reference_targets(reference, assembly, N)
    vectors, targets, decoded = [], [], []
    have_activations = True
    unmatched = 0
    for d in _prediction_dirs(pred):
        rows, raw = _load_predictions(d, assembly, N)
        have_activations &= raw
        for rid, start, end, v in rows:
            t = ref.get((rid, start))
            if t is None:
                unmatched += 1
                continue
            if len(v) != assembly.size:
                raise ValidationError(f"prediction for {rid}@{start} has length {len(v)}, "
                                      f"expected {assembly.size}")
            vectors.append(v)
            targets.append(t)
            decoded.append(decode(v, WindowSpan(start, end), assembly))
    if not vectors:
        raise ValidationError("no predicted window matches a reference window")
    metadata = {"matched_windows": len(vectors), "unmatched_predicted_windows": unmatched,
                "reference_windows": len(ref),
                "prediction_source": "activations" if have_activations else "re-encoded annotations"}
    report = score_run(decoded, np.asarray(targets), np.asarray(vectors), assembly, metadata)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    return report


def cmd_grid(out, records=None, seed=0, n_records=2, duration_s=28800.0, experiments=GRID, P=5,
             kernel=100, filters=(8, 16, 32), pool_width=6, dense_units=50, dropout_rate=0.5,
             lstm_hidden=50, batch_size=100, max_epochs=100, patience=5, learning_rate=0.001,
             momentum=0.9, loss_mode="multi", lam=0.0) -> list[Path]:
    """Run the (D, assembly) experiment grid and write one report per experiment.

    Records come from ``records`` (8-channel montage) or are synthesized from
    ``seed``. Each experiment builds its dataset, trains, scores the held-out
    test split and writes ``<out>/D<D>_<assembly>/report.json``; the summary
    table goes to ``<out>/summary.md``.
    """
    if records:
        recs = [load_record(p) for p in _expand_records(records)]
    else:
        recs = [generate_record(SynthConfig(seed=seed + i, duration_s=duration_s, D=8))
                for i in range(n_records)]
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = _train_config(seed, batch_size, max_epochs, patience, learning_rate, momentum, loss_mode)
    rows, paths = [], []
    for D, asm in experiments:
        D, assembly = int(D), as_assembly(asm)
        name = f"D{D}_{assembly.value}"
        log.info("experiment %s", name)
        ds = build_dataset(recs, DatasetConfig(channel_names=MONTAGE[:D], assembly=assembly, seed=seed))
        mcfg = _model_config(D, assembly, ds.cfg.L, seed, P, kernel, filters, pool_width, dense_units,
                             dropout_rate, lstm_hidden)
        exp_dir = out / name
        best, tlog = _fit_and_save(ds, exp_dir, mcfg, tcfg, seed)

        test = np.asarray(ds.split.test, dtype=np.int64)
        preds = predict(best, ds.inputs[test])
        decoded = [decode(v, ds.spans[i], assembly) for v, i in zip(preds, test)]
        metadata = {"experiment": name, "D": D, "channels": list(MONTAGE[:D]),
                    "seeds": {"dataset": seed, "model": seed, "shuffle": seed},
                    "records": sorted({r.id for r in recs}), "dataset_hash": ds.content_hash(),
                    "test_windows": int(len(test)), "epochs_run": tlog.epochs_run,
                    "best_epoch": tlog.best_epoch, "train_cfg": tcfg.to_json(),
                    "model_cfg": mcfg.to_json(), "lam": lam}
        report = score_run(decoded, ds.targets[test], preds, assembly, metadata)
        _write_json(exp_dir / "report.json", report)
        rows.append(("CNN-LSTM", D, assembly, report))
        paths.append(exp_dir / "report.json")
    (out / "summary.md").write_text(summary_table(rows), encoding="utf-8")
    return paths


# -- argument handling ----------------------------------------------------------


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _experiments(text: str) -> list[tuple[int, str]]:
    """Parse ``4:S,6:SAR`` into (D, assembly) pairs."""
    out = []
    for item in text.split(","):
        d, _, a = item.partition(":")
        out.append((int(d), a.strip()))
    return out


def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--P", type=int, help="time splits per input (default 5)")
    g.add_argument("--kernel", type=int, help="convolution kernel width (default 100)")
    g.add_argument("--filters", type=_int_list, help="comma-separated filters per block (default 8,16,32)")
    g.add_argument("--pool-width", dest="pool_width", type=int)
    g.add_argument("--dense-units", dest="dense_units", type=int)
    g.add_argument("--dropout-rate", dest="dropout_rate", type=float)
    g.add_argument("--lstm-hidden", dest="lstm_hidden", type=int)
    g = p.add_argument_group("training")
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--max-epochs", dest="max_epochs", type=int)
    g.add_argument("--patience", type=int, help="0 disables early stopping")
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--loss-mode", dest="loss_mode", choices=["multi", "single"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sleepshot", description=__doc__.splitlines()[0],
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, help="master seed (default 0)")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bit-reproducible runs")
    parser.add_argument("--config", help="JSON config file; flags override its values")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic records", argument_default=argparse.SUPPRESS)
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-records", dest="n_records", type=int)
    p.add_argument("--duration-s", dest="duration_s", type=float)
    p.add_argument("--D", type=int, choices=[4, 6, 8])
    p.add_argument("--arousals-per-hour", dest="arousals_per_hour", type=float)
    p.add_argument("--respiratory-per-hour", dest="respiratory_per_hour", type=float)
    p.add_argument("--apnea-fraction", dest="apnea_fraction", type=float)

    p = sub.add_parser("build-dataset", help="window records into a dataset",
                       argument_default=argparse.SUPPRESS)
    p.add_argument("--records", nargs="+", help="record directories (or parents of them)")
    p.add_argument("--out")
    p.add_argument("--D", type=int, help="use the first D montage channels")
    p.add_argument("--channels", type=lambda s: s.split(","), help="explicit comma-separated channels")
    p.add_argument("--assembly", choices=["S", "SA", "SR", "SAR"])
    p.add_argument("--N", type=float, help="window seconds (default 30)")
    p.add_argument("--delta", type=float, help="context seconds on each side (default 60)")
    p.add_argument("--rate-hz", dest="rate_hz", type=float)

    p = sub.add_parser("train", help="train a model on a dataset", argument_default=argparse.SUPPRESS)
    p.add_argument("--dataset")
    p.add_argument("--out")
    _add_model_args(p)

    p = sub.add_parser("infer", help="predict and decode events", argument_default=argparse.SUPPRESS)
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--record", help="record directory")
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--split", choices=["all", "train", "validation", "test"])
    p.add_argument("--lam", type=float, help="NMS overlap threshold (default 0)")

    p = sub.add_parser("score", help="compute the metric report", argument_default=argparse.SUPPRESS)
    p.add_argument("--pred", help="infer output directory")
    p.add_argument("--reference", help="record directory, parent of records, or dataset directory")
    p.add_argument("--out", help="report.json path")
    p.add_argument("--assembly", choices=["S", "SA", "SR", "SAR"])

    p = sub.add_parser("grid", help="run the ten-experiment grid", argument_default=argparse.SUPPRESS)
    p.add_argument("--out")
    p.add_argument("--records", nargs="+", help="8-channel records; synthesized when omitted")
    p.add_argument("--n-records", dest="n_records", type=int)
    p.add_argument("--duration-s", dest="duration_s", type=float)
    p.add_argument("--experiments", type=_experiments, help="subset such as 4:S,6:SAR")
    p.add_argument("--lam", type=float)
    _add_model_args(p)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "build-dataset": cmd_build,
    "train": cmd_train,
    "infer": cmd_infer,
    "score": cmd_score,
    "grid": cmd_grid,
}

_GLOBAL_KEYS = {"command", "config", "deterministic", "verbose"}


def _load_config(path) -> dict:
    cfg = _read_json(Path(path))
    if not isinstance(cfg, dict) or cfg.get("version") != CONFIG_VERSION:
        raise ValidationError(f"{path}: config must be a JSON object with \"version\": {CONFIG_VERSION}")
    return cfg


def resolve_options(args: argparse.Namespace) -> dict:
    """Merge config-file values (flat keys, then the command's own section) with flags."""
    flags = {k: v for k, v in vars(args).items() if k not in _GLOBAL_KEYS}
    merged: dict = {}
    if getattr(args, "config", None):
        cfg = _load_config(args.config)
        merged.update({k: v for k, v in cfg.items() if not isinstance(v, dict) and k != "version"})
        merged.update(cfg.get(args.command, {}))
        merged.pop("deterministic", None)
    merged.update(flags)
    params = inspect.signature(COMMANDS[args.command]).parameters
    opts = {k.replace("-", "_"): v for k, v in merged.items() if k.replace("-", "_") in params}
    missing = [k for k, p in params.items() if p.default is inspect.Parameter.empty and k not in opts]
    if missing:
        raise ValidationError(f"{args.command}: missing required option(s) "
                              + ", ".join("--" + k.replace("_", "-") for k in missing))
    return opts


def _deterministic(args) -> bool:
    if getattr(args, "deterministic", False):
        return True
    if getattr(args, "config", None):
        return bool(_load_config(args.config).get("deterministic", False))
    return False


def _jsonable(result):
    if isinstance(result, Path):
        return str(result)
    if isinstance(result, list):
        return [_jsonable(r) for r in result]
    if isinstance(result, dict):
        return {"global_mae": result.get("global_mae"),
                "kappa": {f: e["kappa"] for f, e in result.get("families", {}).items()}}
    return result


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        opts = resolve_options(args)
        limits = threadpool_limits(limits=1) if _deterministic(args) else contextlib.nullcontext()
        with limits:
            result = COMMANDS[args.command](**opts)
    except ValidationError as exc:
        print(json.dumps({"error": "validation", "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(json.dumps({"error": "divergence", "command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 3
    print(json.dumps({"command": args.command, "result": _jsonable(result)}))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
