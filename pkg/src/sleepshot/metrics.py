"""Agreement and error metrics, reported per event family.

Kappa and F1 are computed on window-level labels (one label per 30 s window
and family). F1 is macro-averaged over the classes that occur in either the
reference or the prediction.
"""
from __future__ import annotations

import numpy as np

from .codec import Assembly, as_assembly, decode
from .errors import ValidationError
from .records import STAGES

FAMILY_CLASSES = {
    "stage": STAGES,
    "arousal": ("absent", "present"),
    "respiratory": ("none", "apnea", "hypopnea"),
}

CONVENTIONS = {
    "unit": "30 s window",
    "f1_average": "macro over classes present in reference or prediction",
    "mae_bw": "coordinates of target-positive windows only",
}


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows index the reference label, columns the predicted label."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValidationError("label sequences differ in length")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def cohen_kappa(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValidationError("cannot compute kappa of an empty confusion matrix")
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=0) * cm.sum(axis=1)).sum() / total ** 2)
    if np.isclose(p_e, 1.0, rtol=0, atol=1e-15):
        return 1.0 if np.isclose(p_o, 1.0, rtol=0, atol=1e-15) else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def f1_scores(cm) -> tuple[np.ndarray, float, list[int]]:
    """Per-class F1, macro F1 and the indices of classes with no support at all.

    A class never predicted and never present gets F1 = 0 and is left out of
    the macro average.
    """
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros_like(tp), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    undefined = [int(k) for k in np.flatnonzero((pred_pos == 0) & (true_pos == 0))]
    defined = [k for k in range(len(f1)) if k not in undefined]
    macro = float(f1[defined].mean()) if defined else 0.0
    return f1, macro, undefined


def mae_components(preds, targets, assembly) -> dict:
    """Mean absolute errors per family plus the global MAE.

    Returns ``{"mae_c": {family: value}, "mae_bw": {family: value | None},
    "global_mae": value}``; ``mae_bw`` is None when no window of the reference
    contains an event of that family.
    """
    assembly = as_assembly(assembly)
    lay = assembly.layout
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 2 or preds.shape[1] != lay.size:
        raise ValidationError(f"preds {preds.shape} and targets {targets.shape} do not match "
                              f"assembly {assembly.value}")
    err = np.abs(preds - targets)
    out = {"mae_c": {}, "mae_bw": {}, "global_mae": float(err.mean()) if err.size else 0.0}
    for fam in assembly.families:
        out["mae_c"][fam] = float(err[:, lay.classification_indices(fam)].mean())
        coords = lay.coordinate_indices(fam)
        if not coords:
            continue
        positive = targets[:, lay.presence_index(fam)] >= 0.5
        out["mae_bw"][fam] = float(err[positive][:, coords].mean()) if positive.any() else None
    return out


def window_labels(vectors, assembly) -> dict[str, np.ndarray]:
    """Integer class per window and family from output or target vectors."""
    assembly = as_assembly(assembly)
    lay = assembly.layout
    v = np.asarray(vectors, dtype=np.float64)
    labels = {"stage": np.argmax(v[:, list(lay.stage)], axis=1)}
    if assembly.has_arousal:
        labels["arousal"] = (v[:, lay.arousal_presence] >= 0.5).astype(np.int64)
    if assembly.has_respiratory:
        present = v[:, lay.resp_presence] >= 0.5
        cls = np.where(v[:, lay.resp_class[0]] >= v[:, lay.resp_class[1]], 1, 2)
        labels["respiratory"] = np.where(present, cls, 0)
    return labels


def labels_from_decoded(windows, assembly) -> dict[str, np.ndarray]:
    assembly = as_assembly(assembly)
    labels = {"stage": np.array([STAGES.index(w.stage) for w in windows], dtype=np.int64)}
    if assembly.has_arousal:
        labels["arousal"] = np.array([int(w.arousal is not None) for w in windows], dtype=np.int64)
    if assembly.has_respiratory:
        resp = FAMILY_CLASSES["respiratory"]
        labels["respiratory"] = np.array(
            [0 if w.respiratory is None else resp.index(w.respiratory.label) for w in windows],
            dtype=np.int64)
    return labels


def score_run(decoded, reference_targets, preds, assembly, metadata: dict | None = None) -> dict:
    """Assemble the per-family report.

    ``decoded`` is either a sequence of DecodedWindow or None, in which case
    predicted labels are read off ``preds`` with the decoding thresholds.
    """
    assembly = as_assembly(assembly)
    ref = np.asarray(reference_targets, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if len(ref) != len(preds) or (decoded is not None and len(decoded) != len(ref)):
        raise ValidationError("predicted and reference window sequences are misaligned")
    if len(ref) == 0:
        raise ValidationError("nothing to score")
    true_labels = window_labels(ref, assembly)
    pred_labels = labels_from_decoded(decoded, assembly) if decoded is not None \
        else window_labels(preds, assembly)
    maes = mae_components(preds, ref, assembly)

    report: dict = {"families": {}}
    for fam in assembly.families:
        classes = FAMILY_CLASSES[fam]
        cm = confusion_matrix(true_labels[fam], pred_labels[fam], len(classes))
        per_class, macro, undefined = f1_scores(cm)
        entry = {
            "kappa": cohen_kappa(cm),
            "f1_macro": macro,
            "per_class_f1": {c: float(f) for c, f in zip(classes, per_class)},
            "mae_c": maes["mae_c"][fam],
        }
        if fam != "stage":
            entry["mae_bw"] = maes["mae_bw"][fam]
        entry["counts"] = {
            "windows": int(cm.sum()),
            "reference": {c: int(n) for c, n in zip(classes, cm.sum(axis=1))},
            "predicted": {c: int(n) for c, n in zip(classes, cm.sum(axis=0))},
            "f1_undefined_classes": [classes[k] for k in undefined],
        }
        entry["confusion_matrix"] = cm.tolist()
        report["families"][fam] = entry
    report["global_mae"] = maes["global_mae"]
    report["metadata"] = {"assembly": assembly.value, "conventions": CONVENTIONS, **(metadata or {})}
    return report


def decode_all(preds, spans, assembly: Assembly, record_duration: float | None = None):
    return [decode(v, s, assembly, record_duration) for v, s in zip(preds, spans)]


TABLE_COLUMNS = {
    "stage": ("kappa", "f1_macro", "mae_c"),
    "arousal": ("kappa", "f1_macro", "mae_c", "mae_bw"),
    "respiratory": ("kappa", "f1_macro", "mae_c", "mae_bw"),
}


def summary_table(rows) -> str:
    """Markdown table with one row per experiment, grouped by event family.

    ``rows`` holds ``(name, D, assembly, report)`` tuples; missing families
    print as ``-``.
    """
    head = ["Model", "D", "E"]
    for fam, cols in TABLE_COLUMNS.items():
        head += [f"{fam} {c}" for c in cols]
    head.append("global_mae")
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, D, assembly, report in rows:
        cells = [name, str(D), as_assembly(assembly).value]
        for fam, cols in TABLE_COLUMNS.items():
            entry = report["families"].get(fam)
            for c in cols:
                val = None if entry is None else entry.get(c)
                cells.append("-" if val is None else f"{val:.3f}")
        cells.append(f"{report['global_mae']:.3f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
