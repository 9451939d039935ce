"""Frame-classification metrics and introspection exports.

Metrics are pure functions of (scores, labels): ROC by a descending
threshold sweep over distinct score values, AUC by trapezoidal integration
(equal to the pairwise win probability with ties counted 1/2), EER by
linear interpolation of the FPR/FNR crossing. Attention reports expose the
head-averaged attention rows behind the model's decisions as CSV/JSON for
external plotting.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .errors import InputError, MetricError

REPORT_SCHEMA_VERSION = 1


def _validate(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise MetricError(f"scores {s.shape} and labels {y.shape} differ in length")
    if not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be binary 0/1")
    y = y.astype(np.int64)
    if y.min() == y.max():
        raise MetricError("both classes must be present to sweep a ROC")
    return s, y


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), swept at distinct score values, descending.

    Both axes are monotone non-decreasing and the curve runs from (0,0)
    (threshold +inf) to (1,1) (threshold = lowest score).
    """
    s, y = _validate(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    distinct = np.nonzero(np.diff(s_sorted))[0]
    cut = np.concatenate([distinct, [len(s_sorted) - 1]])
    tps = np.cumsum(y_sorted)[cut]
    fps = np.cumsum(1 - y_sorted)[cut]
    n_pos = y.sum()
    n_neg = len(y) - n_pos
    fpr = np.concatenate([[0.0], fps / n_neg])
    tpr = np.concatenate([[0.0], tps / n_pos])
    thresholds = np.concatenate([[np.inf], s_sorted[cut]])
    return fpr, tpr, thresholds


def auc(scores, labels) -> float:
    """Area under the ROC: P(score_pos > score_neg) + 1/2 P(tie)."""
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.trapezoid(tpr, fpr))


def eer(scores, labels) -> float:
    """Rate where FPR equals FNR, linearly interpolated between sweep points."""
    fpr, tpr, _ = roc_curve(scores, labels)
    fnr = 1.0 - tpr
    diff = fpr - fnr  # monotone non-decreasing from -1 to +1
    k = int(np.searchsorted(diff, 0.0, side="left"))
    if diff[k] == 0.0:
        return float(fpr[k])
    t = (0.0 - diff[k - 1]) / (diff[k] - diff[k - 1])
    return float(fpr[k - 1] + t * (fpr[k] - fpr[k - 1]))


def evaluate_scored(scores, labels) -> dict:
    return {"auc": auc(scores, labels), "eer": eer(scores, labels)}


def evaluate_dataset(score_label_pairs) -> dict:
    """Pooled and per-utterance AUC/EER over (scores, labels) pairs.

    Utterances where a metric is undefined (single-class labels) are
    skipped in the per-utterance average but still pooled.
    """
    all_scores, all_labels, per_utt = [], [], []
    for scores, labels in score_label_pairs:
        all_scores.append(np.asarray(scores, dtype=np.float64))
        all_labels.append(np.asarray(labels))
        try:
            per_utt.append(evaluate_scored(scores, labels))
        except MetricError:
            per_utt.append(None)
    pooled = evaluate_scored(np.concatenate(all_scores), np.concatenate(all_labels))
    defined = [m for m in per_utt if m is not None]
    mean_utt = None
    if defined:
        mean_utt = {"auc": float(np.mean([m["auc"] for m in defined])),
                    "eer": float(np.mean([m["eer"] for m in defined]))}
    return {"pooled": pooled, "per_utterance": per_utt,
            "mean_per_utterance": mean_utt}


def write_roc_csv(path, fpr, tpr, thresholds) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["fpr", "tpr", "threshold"])
        for row in zip(fpr, tpr, thresholds):
            writer.writerow([f"{row[0]:.9g}", f"{row[1]:.9g}", f"{row[2]:.9g}"])


# ---------------------------------------------------------------------------
# attention introspection
# ---------------------------------------------------------------------------

def attention_report(model, mel_values: np.ndarray, frame_indices,
                     labels=None) -> dict:
    """Head-averaged attention rows for the requested query frames.

    For each frame l the report carries AverageAttention[l, :], the true
    labels when given, and the frame's mel slice, ready for external
    plotting.
    """
    mel_values = np.asarray(mel_values)
    n_frames = mel_values.shape[0]
    frame_indices = [int(i) for i in frame_indices]
    for i in frame_indices:
        if not 0 <= i < n_frames:
            raise InputError(
                f"frame index {i} out of range for {n_frames} frames")
    att = model.attention_for(mel_values)
    label_list = None
    if labels is not None:
        labels = np.asarray(labels).ravel()
        if len(labels) != n_frames:
            raise InputError(
                f"{len(labels)} labels for {n_frames} frames")
        label_list = [int(v) for v in labels]
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "n_frames": n_frames,
        "labels": label_list,
        "frames": [{
            "frame": i,
            "attention": [float(v) for v in att.values[i]],
            "label": label_list[i] if label_list is not None else None,
            "mel": [float(v) for v in mel_values[i]],
        } for i in frame_indices],
    }


def write_attention_json(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f)
        f.write("\n")


def write_attention_csv(path, report: dict) -> None:
    """Long format: one row per (query frame, key frame) pair."""
    labels = report["labels"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["query_frame", "key_frame", "attention", "key_label"])
        for entry in report["frames"]:
            q = entry["frame"]
            for k, w in enumerate(entry["attention"]):
                writer.writerow(
                    [q, k, f"{w:.9g}", "" if labels is None else labels[k]])
