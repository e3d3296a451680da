"""Command line: ``crowdanomaly VERB --config FILE [--threads N]``.

Verbs: ``synth``, ``flow``, ``train``, ``detect``, ``eval`` and ``sweep``.
Exit status is 0 on success, 1 for bad inputs (files, config, data) and 2
for internal errors.

Flow and frame directories hold either one sequence (files named by the
configured pattern) or one sub-directory per sequence.  With several
sequences, ``detect`` writes one output sub-directory per sequence and the
ground-truth directory is expected to mirror that layout.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import evaluation, synth
from .config import RunConfig, load_config
from .descriptor import build_grid, describe_clip
from .detector import (
    GROWN,
    NORMAL,
    SEED,
    DetectionGrid,
    TemporalModel,
    detect_histograms,
    label_cells,
    train,
)
from .exceptions import (
    ConfigError,
    DimensionMismatch,
    FormatError,
    GeometryMismatch,
    InputError,
    IoFailure,
)
from .flow_io import estimate_flow, list_sequence, read_flo, read_pgm, write_flo, write_pgm
from .trajectory import advect, segment_clips

log = logging.getLogger("crowdanomaly")

LABEL_NAMES = {NORMAL: "normal", SEED: "seed", GROWN: "grown"}
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}
SCORES_HEADER = ["frame", "location", "L_temporal", "L_spatial", "label"]
FRAMES_HEADER = ["frame", "score", "detected"]
MASK_PATTERN = "mask_{:04d}.pgm"


# -- parallel helpers ------------------------------------------------------

def ordered_map(fn, items, threads: int):
    """``map`` over ``items`` with up to ``threads`` workers, results in input order.

    Work is submitted in bounded batches so large inputs are streamed.
    """
    items = list(items)
    if threads <= 1:
        for x in items:
            yield fn(x)
        return
    batch = 4 * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for a in range(0, len(items), batch):
            yield from pool.map(fn, items[a : a + batch])


# -- sequence discovery and loading ----------------------------------------

def find_sequences(root: str, pattern: str) -> list[tuple[str, str]]:
    """``(name, directory)`` of each sequence under ``root``; name is "" for a flat layout."""
    if not os.path.isdir(root):
        raise IoFailure(f"{root}: not a directory")
    if os.path.exists(os.path.join(root, pattern.format(0))):
        return [("", root)]
    subs = sorted(d for d in os.listdir(root)
                  if os.path.exists(os.path.join(root, d, pattern.format(0))))
    if not subs:
        raise IoFailure(f"{root}: no files named like {pattern.format(0)!r}")
    return [(d, os.path.join(root, d)) for d in subs]


@dataclass(frozen=True)
class Sequence:
    """One input sequence; flows come from ``.flo`` files or are estimated from frames."""

    name: str
    paths: tuple
    estimate: bool
    cfg: RunConfig

    @property
    def n_frames(self) -> int:
        return len(self.paths) if self.estimate else len(self.paths) + 1

    def flows(self, start: int, count: int):
        if self.estimate:
            frames = [read_pgm(p) for p in self.paths[start : start + count + 1]]
            est = self.cfg.flow.estimator()
            return [estimate_flow(a, b, est) for a, b in zip(frames, frames[1:])]
        return [read_flo(p) for p in self.paths[start : start + count]]

    def clip(self, r: range):
        return advect(self.flows(r.start, len(r) - 1), clamp=self.cfg.flow.clamp)


def load_sequences(cfg: RunConfig, kind: str) -> list[Sequence]:
    estimate = cfg.flow.source == "estimate"
    key = f"{kind}_frames" if estimate else f"{kind}_flows"
    pattern = cfg.flow.frame_pattern if estimate else cfg.flow.flo_pattern
    out = []
    for name, d in find_sequences(cfg.path(key), pattern):
        paths = tuple(list_sequence(d, pattern))
        seq = Sequence(name, paths, estimate, cfg)
        if seq.n_frames < 2:
            raise InputError(f"{d}: sequence needs at least two frames")
        out.append(seq)
    return out


def _grid_for(model: TemporalModel, seq: Sequence):
    probe = seq.flows(0, 1)[0]
    grid = build_grid(probe.width, probe.height, model.patch_w, model.patch_h)
    model.check_grid(grid)
    return grid


def _check_descriptor(cfg: RunConfig, model: TemporalModel) -> None:
    d = cfg.descriptor
    want = (d.patch_w, d.patch_h, d.clip_length, d.params())
    got = (model.patch_w, model.patch_h, model.T, model.params)
    if want != got:
        raise GeometryMismatch(
            f"model was trained with patch {got[0]}x{got[1]}, T={got[2]}, {got[3]}; "
            f"config asks for patch {want[0]}x{want[1]}, T={want[2]}, {want[3]}"
        )


# -- per-clip results ------------------------------------------------------

@dataclass
class SequenceResult:
    name: str
    n_frames: int
    clips: list  # of (range, DetectionGrid)

    def covered(self) -> np.ndarray:
        return np.concatenate([np.arange(r.start, r.stop) for r, _ in self.clips]) \
            if self.clips else np.zeros(0, dtype=np.int64)

    def frame_scores(self, model: TemporalModel, cfg: RunConfig) -> np.ndarray:
        s = np.full(self.n_frames, np.inf)
        for r, g in self.clips:
            s[r.start : r.stop] = g.margin(model.activity.reshape(g.labels.shape), cfg.detector).min()
        return s

    def masks(self, grid, labels_per_clip) -> list:
        out = [None] * self.n_frames
        for (r, _), labels in zip(self.clips, labels_per_clip):
            if labels.any():
                m = grid.rasterize(labels != NORMAL)
                for f in r:
                    out[f] = m
        return out


def describe_sequence(seq: Sequence, model: TemporalModel, grid, threads: int):
    ranges = segment_clips(seq.n_frames, model.T)

    def work(r):
        return describe_clip(seq.clip(r), grid, model.params)

    return ranges, list(ordered_map(work, ranges, threads))


def score_sequence(name, n_frames, ranges, described, model, cfg: RunConfig,
                   threads: int) -> SequenceResult:
    def work(item):
        i, (r, (Q, moving)) = item
        return detect_histograms(Q, moving, model, cfg.detector, i, r.start)

    grids = list(ordered_map(work, list(enumerate(zip(ranges, described))), threads))
    return SequenceResult(name, n_frames, list(zip(ranges, grids)))


# -- ROC over sequences ----------------------------------------------------

def _seq_gt(cfg: RunConfig, name: str):
    d = cfg.path("gt")
    return evaluation.read_ground_truth(os.path.join(d, name) if name else d)


def _check_gt_length(gt, out: str):
    if os.path.exists(os.path.join(out, "masks", MASK_PATTERN.format(gt.n_frames))):
        raise DimensionMismatch(f"{out}: more detection masks than the {gt.n_frames} "
                                "ground-truth frames")


def roc_curves(results, gts, model: TemporalModel, grid, cfg: RunConfig):
    """Frame- and (where masks exist) pixel-level ROC pooled over sequences.

    A frame is flagged at threshold ``t`` when its score (the minimum cell
    margin) is below ``t``; the detection masks for pixel scoring are the
    labels obtained with every threshold moved by ``t - T_low_temporal``.
    """
    scores = [res.frame_scores(model, cfg) for res in results]
    covered = [res.covered() for res in results]
    pooled = np.concatenate([s[c] for s, c in zip(scores, covered)])
    steps = cfg.evaluation.steps
    th = evaluation.threshold_grid(pooled, steps)
    labs = np.concatenate([gt.labels[c] for gt, c in zip(gts, covered)])
    flagged = pooled[None, :] < th[:, None]
    tpr_f, fpr_f = zip(*(evaluation.rates(row[labs], row[~labs]) for row in flagged))
    curves = {"frame": evaluation.roc_from_rates(th, tpr_f, fpr_f)}

    with_masks = [i for i, gt in enumerate(gts) if gt.masks]
    if not with_masks:
        log.warning("no ground-truth masks found; pixel-level scores skipped")
        return curves
    activity = model.activity
    tpr_p, fpr_p = [], []
    for t in th:
        shift = t - cfg.detector.T_low_temporal
        hits, fps = [], []
        for i in with_masks:
            res = results[i]
            labels = [label_cells(g.L_temporal, g.L_spatial, activity, g.sufficient,
                                  cfg.detector, shift) for _, g in res.clips]
            h, f = evaluation.pixel_outcomes(res.masks(grid, labels), gts[i], covered[i],
                                             cfg.evaluation.overlap)
            hits.append(h)
            fps.append(f)
        tp, fp = evaluation.rates(np.concatenate(hits), np.concatenate(fps))
        tpr_p.append(tp)
        fpr_p.append(fp)
    curves["pixel"] = evaluation.roc_from_rates(th, tpr_p, fpr_p)
    return curves


# -- verbs -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, threads: int) -> int:
    scene = cfg.paths.scene
    if not scene:
        raise ConfigError("[paths] scene is not set")
    path = cfg.path("scene")
    spec = synth.load_scene(path if os.path.exists(path) else synth.bundled_scene(scene))
    pattern = cfg.flow.flo_pattern
    jobs = [(cfg.path("test_flows"), False)]
    if spec.training_frames:
        jobs.append((cfg.path("train_flows"), True))
    for directory, training in jobs:
        os.makedirs(directory, exist_ok=True)
        n = (spec.training_frames if training else spec.frame_count) - 1
        base = spec.background()

        def write(f, directory=directory, training=training):
            write_flo(synth.flow_at(spec, f, training, base),
                      os.path.join(directory, pattern.format(f)))

        for _ in ordered_map(write, range(n), threads):
            pass
        log.info("wrote %d flow fields to %s", n, directory)
    evaluation.write_ground_truth(cfg.path("gt"), synth.ground_truth(spec), MASK_PATTERN)
    log.info("wrote ground truth to %s", cfg.path("gt"))
    return 0


def cmd_flow(cfg: RunConfig, threads: int) -> int:
    did = 0
    est = cfg.flow.estimator()
    for kind in ("train", "test"):
        if not getattr(cfg.paths, f"{kind}_frames"):
            continue
        src = cfg.path(f"{kind}_frames")
        dst_root = cfg.path(f"{kind}_flows")
        for name, d in find_sequences(src, cfg.flow.frame_pattern):
            frames = list_sequence(d, cfg.flow.frame_pattern)
            if len(frames) < 2:
                raise InputError(f"{d}: need at least two frames")
            dst = os.path.join(dst_root, name) if name else dst_root
            os.makedirs(dst, exist_ok=True)

            def one(i, frames=frames, dst=dst):
                a, b = read_pgm(frames[i]), read_pgm(frames[i + 1])
                write_flo(estimate_flow(a, b, est), os.path.join(dst, cfg.flow.flo_pattern.format(i)))

            for _ in ordered_map(one, range(len(frames) - 1), threads):
                pass
            log.info("%s: %d flow fields", dst, len(frames) - 1)
            did += 1
    if not did:
        raise ConfigError("set [paths] train_frames and/or test_frames")
    return 0


def cmd_train(cfg: RunConfig, threads: int) -> int:
    seqs = load_sequences(cfg, "train")
    first = seqs[0].flows(0, 1)[0]
    grid = build_grid(first.width, first.height, cfg.descriptor.patch_w, cfg.descriptor.patch_h)
    T = cfg.descriptor.clip_length
    work = [(s, r) for s in seqs for r in segment_clips(s.n_frames, T)]
    model = train(ordered_map(lambda sr: sr[0].clip(sr[1]), work, threads), grid,
                  cfg.descriptor.params(), T)
    path = cfg.path("model")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    model.save(path)
    cov = model.coverage(cfg.detector.K)
    print(f"model: {path}")
    print(f"grid: {model.cols}x{model.rows} locations of {model.patch_w}x{model.patch_h} px, T={model.T}")
    print(f"training clips: {len(work)} from {len(seqs)} sequence(s)")
    print(f"histograms per location: {cov['min_history']}..{cov['max_history']}")
    print(f"locations with >= K={cfg.detector.K} histograms: {cov['sufficient']}/{cov['locations']}")
    print(f"locations active in training: {cov['active']}/{cov['locations']}")
    if cov["insufficient"]:
        log.warning("%d locations have fewer than K=%d histograms and will always be normal",
                    cov["insufficient"], cfg.detector.K)
    return 0


def _load_model(cfg: RunConfig) -> TemporalModel:
    model = TemporalModel.load(cfg.path("model"))
    _check_descriptor(cfg, model)
    cov = model.coverage(cfg.detector.K)
    if cov["insufficient"]:
        log.warning("%d of %d locations have fewer than K=%d training histograms; "
                    "they are reported normal", cov["insufficient"], cov["locations"],
                    cfg.detector.K)
    return model


def _write_detection(out: str, res: SequenceResult, grid, model, cfg: RunConfig) -> None:
    os.makedirs(os.path.join(out, "masks"), exist_ok=True)
    masks = res.masks(grid, [g.labels for _, g in res.clips])
    empty = np.zeros((grid.height, grid.width), dtype=np.uint8)
    for f, m in enumerate(masks):
        img = empty if m is None else np.where(m, 255, 0).astype(np.uint8)
        write_pgm(img, os.path.join(out, "masks", MASK_PATTERN.format(f)))
    with open(os.path.join(out, "scores.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORES_HEADER)
        for r, g in res.clips:
            Lt, Ls, lab = g.L_temporal.ravel(), g.L_spatial.ravel(), g.labels.ravel()
            for m in range(len(Lt)):
                w.writerow([r.start, m, repr(float(Lt[m])), repr(float(Ls[m])),
                            LABEL_NAMES[int(lab[m])]])
    scores = res.frame_scores(model, cfg)
    with open(os.path.join(out, "frames.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FRAMES_HEADER)
        for f in res.covered():
            w.writerow([int(f), repr(float(scores[f])), int(masks[f] is not None)])


def _out_dir(cfg: RunConfig, name: str) -> str:
    root = cfg.path("output")
    return os.path.join(root, name) if name else root


def cmd_detect(cfg: RunConfig, threads: int) -> int:
    model = _load_model(cfg)
    for seq in load_sequences(cfg, "test"):
        grid = _grid_for(model, seq)
        ranges, described = describe_sequence(seq, model, grid, threads)
        res = score_sequence(seq.name, seq.n_frames, ranges, described, model, cfg, threads)
        out = _out_dir(cfg, seq.name)
        _write_detection(out, res, grid, model, cfg)
        n_det = sum(int(g.detected.any()) for _, g in res.clips)
        print(f"{seq.name or 'sequence'}: {len(res.clips)} clips, {n_det} with detections -> {out}")
    return 0


def read_scores(path: str, model: TemporalModel, cfg: RunConfig, n_frames: int) -> SequenceResult:
    """Rebuild per-clip results from a ``scores.csv`` written by ``detect``."""
    rows = evaluation._read_csv_rows(path, SCORES_HEADER)
    shape = (model.rows, model.cols)
    by_clip: dict[int, list] = {}
    try:
        for r in rows:
            by_clip.setdefault(int(r[0]), []).append((int(r[1]), float(r[2]), float(r[3]),
                                                      LABEL_CODES[r[4]]))
    except (ValueError, KeyError, IndexError) as exc:
        raise FormatError(f"{path}: bad row ({exc})") from exc
    suff = model.sufficient(cfg.detector.K).reshape(shape)
    clips = []
    for i, start in enumerate(sorted(by_clip)):
        cells = sorted(by_clip[start])
        if [c[0] for c in cells] != list(range(model.M)):
            raise FormatError(f"{path}: clip at frame {start} does not list locations 0..{model.M - 1}")
        Lt = np.array([c[1] for c in cells]).reshape(shape)
        Ls = np.array([c[2] for c in cells]).reshape(shape)
        lab = np.array([c[3] for c in cells], dtype=np.int8).reshape(shape)
        r = range(start, min(start + model.T, n_frames))
        clips.append((r, DetectionGrid(i, start, Lt, Ls, lab, suff)))
    return SequenceResult("", n_frames, clips)


def cmd_eval(cfg: RunConfig, threads: int) -> int:
    model = _load_model(cfg)
    root = cfg.path("output")
    names = [""] if os.path.exists(os.path.join(root, "scores.csv")) else sorted(
        d for d in os.listdir(root) if os.path.exists(os.path.join(root, d, "scores.csv")))
    if not names:
        raise IoFailure(f"{root}: no scores.csv from a detect run")
    results, gts, op = [], [], []
    grid = None
    for name in names:
        out = _out_dir(cfg, name)
        gt = _seq_gt(cfg, name)
        res = read_scores(os.path.join(out, "scores.csv"), model, cfg, gt.n_frames)
        res.name = name
        masks = []
        for f in range(gt.n_frames):
            p = os.path.join(out, "masks", MASK_PATTERN.format(f))
            if not os.path.exists(p):
                raise IoFailure(f"{p}: missing detection mask")
            img = read_pgm(p) > 127
            masks.append(img if img.any() else None)
        if grid is None:
            h, w = read_pgm(os.path.join(out, "masks", MASK_PATTERN.format(0))).shape
            grid = build_grid(w, h, model.patch_w, model.patch_h)
            model.check_grid(grid)
        _check_gt_length(gt, out)
        results.append(res)
        gts.append(gt)
        op.append(masks)

    curves = roc_curves(results, gts, model, grid, cfg)
    evaluation.write_roc_csv(os.path.join(root, "roc.csv"), curves)

    cov = [r.covered() for r in results]
    det = [np.array([m is not None for m in masks]) for masks in op]
    rows = [("frame",) + evaluation.rates(*map(np.concatenate, zip(*(
        evaluation.frame_outcomes(d, gt, c) for d, gt, c in zip(det, gts, cov)))))]
    if "pixel" in curves:
        outs = [evaluation.pixel_outcomes(masks, gt, c, cfg.evaluation.overlap)
                for masks, gt, c in zip(op, gts, cov) if gt.masks]
        rows.append(("pixel",) + evaluation.rates(*map(np.concatenate, zip(*outs))))
    with open(os.path.join(root, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "TPR", "FPR", "AUC", "EER"])
        for level, tpr, fpr in rows:
            c = curves[level]
            w.writerow([level, repr(tpr), repr(fpr), repr(c.auc), repr(c.eer)])
            print(f"{level}: TPR={tpr:.4f} FPR={fpr:.4f} AUC={c.auc:.4f} EER={c.eer:.4f}")

    for name, masks, gt, d in zip(names, op, gts, det):
        rep = evaluation.event_level(d, gt, cfg.evaluation.merge_gap,
                                     masks if gt.masks else None)
        evaluation.write_event_csv(os.path.join(_out_dir(cfg, name), "events.csv"), rep)
        print(f"{name or 'events'}: {rep.hits} hit, {rep.misses} missed, "
              f"{rep.false_alarms} false alarm interval(s)")
    return 0


def cmd_sweep(cfg: RunConfig, threads: int) -> int:
    model = _load_model(cfg)
    seqs = load_sequences(cfg, "test")
    grid = _grid_for(model, seqs[0])
    cached = []
    for seq in seqs:
        gt = _seq_gt(cfg, seq.name)
        if gt.n_frames != seq.n_frames:
            raise DimensionMismatch(f"sequence {seq.name or '.'}: ground truth has "
                                    f"{gt.n_frames} frames, flows give {seq.n_frames}")
        cached.append((seq, gt) + describe_sequence(seq, model, grid, threads))
    rows = []
    for K in cfg.sweep.k:
        kcfg = replace(cfg, detector=replace(cfg.detector, K=K))
        if K == 2:
            log.warning("K=2: each Gaussian rests on a single pair distance, so every "
                        "variance is floored")
        insufficient = int((~model.sufficient(K)).sum())
        if insufficient:
            log.warning("K=%d: %d locations have too little history and are reported normal",
                        K, insufficient)
        results = [score_sequence(seq.name, seq.n_frames, ranges, described, model, kcfg, threads)
                   for seq, gt, ranges, described in cached]
        try:
            curves = roc_curves(results, [c[1] for c in cached], model, grid, kcfg)
        except evaluation.DegenerateScores:
            log.warning("K=%d: every frame scores the same, so no ROC exists; EER reported as nan", K)
            curves = {}
        nan = float("nan")
        eer_f = curves["frame"].eer if curves else nan
        eer_p = curves["pixel"].eer if "pixel" in curves else nan
        rows.append((K, eer_f, eer_p))
        print(f"K={K}: EER_frame={eer_f:.4f} EER_pixel={eer_p:.4f}")
    root = cfg.path("output")
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["K", "EER_frame", "EER_pixel"])
        for K, ef, ep in rows:
            w.writerow([K, repr(float(ef)), repr(float(ep))])
    return 0


VERBS = {
    "synth": cmd_synth,
    "flow": cmd_flow,
    "train": cmd_train,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crowdanomaly",
                                description="Crowd-scene anomaly detection from short trajectories.")
    p.add_argument("verb", choices=list(VERBS))
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    p.add_argument("--log-level", default="INFO",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s: %(message)s",
                        stream=sys.stderr, force=True)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config)
        return VERBS[args.verb](cfg, args.threads)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything else is a bug, not bad input
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
