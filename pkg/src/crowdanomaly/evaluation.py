"""Frame-, pixel- and event-level scoring, ROC curves, AUC and EER.

Detections are per frame: a boolean "anything flagged" vector and,
for pixel-level scoring, a boolean mask per frame.  A frame counts as a false
positive if anything is flagged on it while the ground truth calls it normal.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import (
    DegenerateScores,
    DimensionMismatch,
    FormatError,
    MissingMask,
    NoAbnormalFrames,
    NoNormalFrames,
)
from .flow_io import read_pgm, write_pgm

PIXEL_RATIO = 0.4


@dataclass(frozen=True)
class Event:
    start: int
    end: int
    label: str = "anomaly"


@dataclass
class GroundTruth:
    """Per-frame abnormal flags, optional per-frame masks and event intervals.

    ``masks`` maps frame index to a boolean ``(H, W)`` mask; frames without an
    entry have no annotated anomaly pixels.
    """

    labels: np.ndarray
    masks: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        by_label = {}
        for ev in self.events:
            by_label.setdefault(ev.label, []).append(ev)
        for evs in by_label.values():
            evs = sorted(evs, key=lambda e: e.start)
            for a, b in zip(evs, evs[1:]):
                if b.start <= a.end:
                    raise FormatError(f"overlapping events with label {a.label!r}")

    @property
    def n_frames(self) -> int:
        return len(self.labels)

    def mask(self, frame: int) -> np.ndarray | None:
        return self.masks.get(frame)


def _frames(gt: GroundTruth, frames) -> np.ndarray:
    if frames is None:
        return np.arange(gt.n_frames)
    return np.asarray(frames, dtype=np.int64)


def rates(hit_abnormal: np.ndarray, flagged_normal: np.ndarray):
    if len(hit_abnormal) == 0:
        raise NoAbnormalFrames("ground truth has no abnormal frames")
    if len(flagged_normal) == 0:
        raise NoNormalFrames("ground truth has no normal frames")
    return float(np.mean(hit_abnormal)), float(np.mean(flagged_normal))


def frame_outcomes(detected, gt: GroundTruth, frames=None):
    """Per-frame outcomes ``(hit on abnormal frames, flagged normal frames)``."""
    frames = _frames(gt, frames)
    det = np.asarray(detected, dtype=bool)[frames]
    lab = gt.labels[frames]
    return det[lab], det[~lab]


def frame_level(detected, gt: GroundTruth, frames=None) -> tuple[float, float]:
    """``(TPR, FPR)`` where any flagged region counts for the whole frame."""
    return rates(*frame_outcomes(detected, gt, frames))


def overlap_ratio(detected_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    gt_mask = np.asarray(gt_mask, dtype=bool)
    detected_mask = np.asarray(detected_mask, dtype=bool)
    if detected_mask.shape != gt_mask.shape:
        raise DimensionMismatch(f"mask shapes differ: {detected_mask.shape} vs {gt_mask.shape}")
    total = gt_mask.sum()
    return float((detected_mask & gt_mask).sum() / total) if total else 0.0


def pixel_outcomes(detected_masks: Sequence, gt: GroundTruth, frames=None,
                   ratio: float = PIXEL_RATIO):
    """Like :func:`frame_outcomes`, but an abnormal frame needs ``ratio`` of its mask covered."""
    frames = _frames(gt, frames)
    hits, fps = [], []
    for f in frames:
        det = detected_masks[f]
        if gt.labels[f]:
            m = gt.mask(f)
            if m is None or not np.any(m):
                raise MissingMask(f"abnormal frame {f} has no ground-truth mask")
            hits.append(det is not None and overlap_ratio(det, m) >= ratio)
        else:
            fps.append(det is not None and bool(np.any(det)))
    return np.array(hits, dtype=bool), np.array(fps, dtype=bool)


def pixel_level(detected_masks: Sequence, gt: GroundTruth, frames=None,
                ratio: float = PIXEL_RATIO) -> tuple[float, float]:
    """``(TPR, FPR)`` under the pixel-coverage rule."""
    return rates(*pixel_outcomes(detected_masks, gt, frames, ratio))


@dataclass(frozen=True)
class EventReport:
    hits: int
    misses: int
    false_alarms: int
    rows: list  # (event_id, hit, first_detected_frame or None)
    detected_events: list


def merge_detections(detected, merge_gap: int) -> list[tuple[int, int]]:
    """Runs of detected frames, joined when separated by at most ``merge_gap`` frames."""
    idx = np.flatnonzero(np.asarray(detected, dtype=bool))
    if len(idx) == 0:
        return []
    runs = []
    start = prev = int(idx[0])
    for f in idx[1:]:
        f = int(f)
        if f - prev - 1 > merge_gap:
            runs.append((start, prev))
            start = f
        prev = f
    runs.append((start, prev))
    return runs


def event_level(detected, gt: GroundTruth, merge_gap: int = 10,
                detected_masks: Sequence | None = None) -> EventReport:
    """Match merged detection intervals against the ground-truth events.

    With ``detected_masks`` and ground-truth masks, an overlapping interval
    only hits an event if some detected pixel touches the event's mask in a
    shared frame.
    """
    detected = np.asarray(detected, dtype=bool)
    runs = merge_detections(detected, merge_gap)
    used = [False] * len(runs)
    rows = []
    hits = 0
    for eid, ev in enumerate(gt.events):
        first = None
        for r, (a, b) in enumerate(runs):
            lo, hi = max(a, ev.start), min(b, ev.end)
            if lo > hi:
                continue
            frames = [f for f in range(lo, hi + 1) if detected[f]]
            if detected_masks is not None and gt.masks:
                frames = [f for f in frames if gt.mask(f) is not None
                          and detected_masks[f] is not None
                          and np.any(np.asarray(detected_masks[f], bool) & gt.mask(f))]
            if frames:
                used[r] = True
                first = frames[0] if first is None else min(first, frames[0])
        hits += first is not None
        rows.append((eid, first is not None, first))
    return EventReport(hits, len(gt.events) - hits, used.count(False), rows, runs)


@dataclass(frozen=True)
class RocCurve:
    """ROC points sorted by FPR, including (0, 0) and (1, 1)."""

    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    eer: float
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    threshold_fpr: np.ndarray = field(default_factory=lambda: np.zeros(0))
    threshold_tpr: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def equal_error_rate(fpr: np.ndarray, tpr: np.ndarray) -> float:
    """FPR where FPR = 1 - TPR, interpolated linearly along sorted ROC points."""
    f = fpr + tpr - 1.0
    for i in range(len(f) - 1):
        if f[i] <= 0.0 <= f[i + 1]:
            if f[i + 1] == f[i]:
                return float(fpr[i])
            t = -f[i] / (f[i + 1] - f[i])
            return float(fpr[i] + t * (fpr[i + 1] - fpr[i]))
    raise ValueError("ROC points do not cross the EER line")


def roc_from_rates(thresholds, tpr, fpr) -> RocCurve:
    thresholds = np.asarray(thresholds, dtype=np.float64)
    tpr = np.asarray(tpr, dtype=np.float64)
    fpr = np.asarray(fpr, dtype=np.float64)
    pts = np.concatenate([[[0.0, 0.0]], np.stack([fpr, tpr], axis=1), [[1.0, 1.0]]])
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    x, y = pts[:, 0], pts[:, 1]
    auc = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    return RocCurve(x, y, auc, equal_error_rate(x, y), thresholds, fpr, tpr)


def threshold_grid(scores, steps: int = 50) -> np.ndarray:
    """Thresholds spanning the score range.

    ``steps > 0`` gives ``steps`` evenly spaced values from just below the
    minimum to just above the maximum; ``steps == 0`` uses every distinct
    score plus one value above the maximum (an exact ROC).
    """
    s = np.asarray(scores, dtype=np.float64)
    s = s[np.isfinite(s)]
    if len(s) == 0 or s.min() == s.max():
        raise DegenerateScores("all scores are equal")
    lo, hi = float(s.min()), float(s.max())
    if steps == 0:
        u = np.unique(s)
        return np.concatenate([u, [hi + max(1.0, abs(hi)) * 1e-9 + 1e-9]])
    if steps < 2:
        raise ValueError("need at least 2 thresholds")
    pad = (hi - lo) * 1e-6
    return np.linspace(lo - pad, hi + pad, steps)


def roc(score_series, gt: GroundTruth, threshold_grid_values=None, frames=None,
        steps: int = 50) -> RocCurve:
    """Frame-level ROC: a frame is flagged at threshold ``T_p`` iff its score ``< T_p``."""
    frames = _frames(gt, frames)
    s = np.asarray(score_series, dtype=np.float64)[frames]
    lab = gt.labels[frames]
    if threshold_grid_values is None:
        threshold_grid_values = threshold_grid(s, steps)
    elif len(np.unique(s)) < 2:
        raise DegenerateScores("all scores are equal")
    th = np.asarray(threshold_grid_values, dtype=np.float64)
    if len(th) < 2:
        raise ValueError("need at least 2 thresholds")
    flagged = s[None, :] < th[:, None]
    if lab.sum() == 0:
        raise NoAbnormalFrames("ground truth has no abnormal frames")
    if (~lab).sum() == 0:
        raise NoNormalFrames("ground truth has no normal frames")
    tpr = flagged[:, lab].mean(axis=1)
    fpr = flagged[:, ~lab].mean(axis=1)
    return roc_from_rates(th, tpr, fpr)


def write_roc_csv(path, curves: dict) -> None:
    """``threshold,level,TPR,FPR`` rows, a blank line, then ``level,AUC,EER``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "level", "TPR", "FPR"])
        for level, c in curves.items():
            for t, tp, fp in zip(c.thresholds, c.threshold_tpr, c.threshold_fpr):
                w.writerow([repr(float(t)), level, repr(float(tp)), repr(float(fp))])
        w.writerow([])
        w.writerow(["level", "AUC", "EER"])
        for level, c in curves.items():
            w.writerow([level, repr(c.auc), repr(c.eer)])


def write_event_csv(path, report: EventReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["event_id", "hit", "first_detected_frame"])
        for eid, hit, first in report.rows:
            w.writerow([eid, int(hit), "" if first is None else first])


def write_ground_truth(directory, gt: GroundTruth, mask_pattern: str = "mask_{:04d}.pgm") -> None:
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_index", "label"])
        for i, lab in enumerate(gt.labels):
            w.writerow([i, int(lab)])
    with open(os.path.join(directory, "events.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["start", "end", "label"])
        for ev in gt.events:
            w.writerow([ev.start, ev.end, ev.label])
    for f, m in sorted(gt.masks.items()):
        write_pgm(np.where(m, 255, 0).astype(np.uint8),
                  os.path.join(directory, "masks", mask_pattern.format(f)))


def _read_csv_rows(path, header):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or [c.strip() for c in rows[0]] != header:
        raise FormatError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def read_ground_truth(directory, mask_pattern: str = "mask_{:04d}.pgm") -> GroundTruth:
    """Read ``labels.csv``, optional ``events.csv`` and optional ``masks/``."""
    rows = _read_csv_rows(os.path.join(directory, "labels.csv"), ["frame_index", "label"])
    try:
        pairs = sorted((int(a), int(b)) for a, b in rows)
    except ValueError as exc:
        raise FormatError(f"{directory}/labels.csv: {exc}") from exc
    if [p[0] for p in pairs] != list(range(len(pairs))):
        raise FormatError(f"{directory}/labels.csv: frame indices must be 0..n-1")
    labels = np.array([p[1] != 0 for p in pairs], dtype=bool)
    events = []
    ev_path = os.path.join(directory, "events.csv")
    if os.path.exists(ev_path):
        for r in _read_csv_rows(ev_path, ["start", "end", "label"]):
            events.append(Event(int(r[0]), int(r[1]), r[2]))
    masks = {}
    for f in range(len(labels)):
        p = os.path.join(directory, "masks", mask_pattern.format(f))
        if os.path.exists(p):
            masks[f] = read_pgm(p) > 127
    return GroundTruth(labels, masks, events)
