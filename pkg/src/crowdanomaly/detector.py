"""Spatio-temporal anomaly detection on the patch grid.

Every patch of a test clip is scored twice:

* temporally, against the histograms seen at the same grid location in the
  training clips;
* spatially, against the moving patches within ``spatial_radius`` cells of
  it in the same clip.

Cells whose score falls below the low threshold become seeds; seeds then grow
over 8-connected cells whose score is below the high threshold.  Locations
rarely active during training get both thresholds lowered by
``nonactive_offset``.
"""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import knn_stat
from ._validation import as_trajectories, check_clip_geometry
from .descriptor import DescriptorParams, PatchGrid, build_grid, describe_clip
from .exceptions import (
    EmptyTraining,
    FormatError,
    GeometryMismatch,
    InsufficientHistory,
    IoFailure,
    Truncated,
    UnsupportedVersion,
)
from .trajectory import TrajectorySet

log = logging.getLogger(__name__)

NORMAL, SEED, GROWN = 0, 1, 2
MODEL_MAGIC = b"STAM"
MODEL_VERSION = 1
_EIGHT = np.ones((3, 3), dtype=bool)
# Detector-level statistics defaults.  Histogram counts are integers, so a
# variance floor far below one count-unit lets a single displaced point in an
# otherwise repetitive patch look as unusual as reversed motion; and flooring
# p merges every strong outlier into one score, so p is left unfloored.
SIGMA2_MIN = 1.0
P_MIN = 0.0
# float64 elements per temporary block in the batched kernels
_BLOCK = 1 << 22


@dataclass(frozen=True)
class DetectorConfig:
    K: int = knn_stat.DEFAULT_K
    T_low_temporal: float = -1000.0
    T_high_temporal: float = -400.0
    T_low_spatial: float = -1000.0
    T_high_spatial: float = -400.0
    spatial_radius: int = 2
    activity_min: float = 0.1
    nonactive_offset: float = 20.0
    combine: str = "or"
    motion_floor: float = 0.05
    spatial_source: str = "clip"
    tail: str = "upper"
    sigma2_min: float = SIGMA2_MIN
    p_min: float = P_MIN

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if self.T_low_temporal > self.T_high_temporal or self.T_low_spatial > self.T_high_spatial:
            raise ValueError("low thresholds must not exceed high thresholds")
        if self.spatial_radius < 1:
            raise ValueError("spatial_radius must be >= 1")
        if self.combine not in ("or", "and"):
            raise ValueError(f"combine must be 'or' or 'and', got {self.combine!r}")
        if self.spatial_source not in ("clip", "history"):
            raise ValueError(f"spatial_source must be 'clip' or 'history', got {self.spatial_source!r}")
        if self.tail not in knn_stat.TAILS:
            raise ValueError(f"tail must be one of {knn_stat.TAILS}")
        if not 0.0 <= self.activity_min <= 1.0 or not 0.0 <= self.motion_floor <= 1.0:
            raise ValueError("activity_min and motion_floor are fractions in [0, 1]")
        if self.nonactive_offset < 0:
            raise ValueError("nonactive_offset must be >= 0")
        if not self.sigma2_min > 0:
            raise ValueError("sigma2_min must be > 0")
        if not 0.0 <= self.p_min < 1.0:
            raise ValueError("p_min must lie in [0, 1)")


class TemporalModel:
    """Training histograms per grid location plus activity rates.

    ``histograms`` has shape ``(M, P, N)``; location ``m`` uses its first
    ``counts[m]`` rows.  Treat instances as read-only once built.
    """

    def __init__(self, cols, rows, patch_w, patch_h, T, params: DescriptorParams,
                 histograms, counts, activity):
        self.cols, self.rows = int(cols), int(rows)
        self.patch_w, self.patch_h = int(patch_w), int(patch_h)
        self.T = int(T)
        self.params = params
        self.histograms = np.asarray(histograms, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.activity = np.asarray(activity, dtype=np.float64)
        M = self.cols * self.rows
        if self.histograms.shape[0] != M or self.histograms.shape[2] != params.N:
            raise ValueError(f"histograms shape {self.histograms.shape} inconsistent with grid")
        if self.counts.shape != (M,) or self.activity.shape != (M,):
            raise ValueError("counts and activity need one entry per location")
        self._pool_chi2 = None

    @property
    def M(self) -> int:
        return self.cols * self.rows

    @property
    def patch_pixels(self) -> int:
        return self.patch_w * self.patch_h

    def history(self, m: int) -> np.ndarray:
        return self.histograms[m, : self.counts[m]]

    def check_grid(self, grid: PatchGrid) -> None:
        got = (grid.cols, grid.rows, grid.patch_w, grid.patch_h)
        want = (self.cols, self.rows, self.patch_w, self.patch_h)
        if got != want:
            raise GeometryMismatch(f"grid (cols, rows, patch_w, patch_h) {got} != model {want}")

    def sufficient(self, K: int) -> np.ndarray:
        return self.counts >= K

    def pool_chi2(self) -> np.ndarray:
        """Cached ``(M, P, P)`` chi-square distances within each location's history."""
        if self._pool_chi2 is None:
            M, P, N = self.histograms.shape
            out = np.zeros((M, P, P))
            i, j = np.triu_indices(P, k=1)
            step = max(1, _BLOCK // max(1, len(i) * N))
            for a in range(0, M, step):
                h = _packed_bins(self.histograms[a : a + step])
                d = knn_stat.chi2_terms_sum(h[:, i], h[:, j])
                out[a : a + step, i, j] = d
                out[a : a + step, j, i] = d
            self._pool_chi2 = out
        return self._pool_chi2

    def coverage(self, K: int) -> dict:
        suff = self.sufficient(K)
        return {
            "locations": self.M,
            "sufficient": int(suff.sum()),
            "insufficient": int((~suff).sum()),
            "min_history": int(self.counts.min()),
            "max_history": int(self.counts.max()),
            "active": int((self.activity > 0).sum()),
        }

    def to_bytes(self) -> bytes:
        p = self.params
        parts = [
            MODEL_MAGIC,
            struct.pack("<8I", MODEL_VERSION, self.cols, self.rows, self.patch_w, self.patch_h,
                        self.T, p.n_mag, p.n_ang),
            struct.pack("<d", p.r_max),
        ]
        for m in range(self.M):
            parts.append(struct.pack("<I", int(self.counts[m])))
            parts.append(self.history(m).astype("<u4").tobytes())
        parts.append(self.activity.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "TemporalModel":
        if raw[:4] != MODEL_MAGIC:
            raise FormatError("not a model file (bad magic)")
        if len(raw) < 44:
            raise Truncated("model header truncated")
        version, cols, rows, pw, ph, T, n_mag, n_ang = struct.unpack_from("<8I", raw, 4)
        if version != MODEL_VERSION:
            raise UnsupportedVersion(f"model format version {version} (supported: {MODEL_VERSION})")
        (r_max,) = struct.unpack_from("<d", raw, 36)
        params = DescriptorParams(n_mag, n_ang, r_max)
        N = params.N
        M = cols * rows
        pos = 44
        hists, counts = [], []
        try:
            for _ in range(M):
                (c,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                nbytes = 4 * c * N
                if pos + nbytes > len(raw):
                    raise Truncated("model histograms truncated")
                hists.append(np.frombuffer(raw, "<u4", c * N, pos).reshape(c, N))
                counts.append(c)
                pos += nbytes
        except struct.error as exc:
            raise Truncated("model histograms truncated") from exc
        if len(raw) != pos + 8 * M:
            raise Truncated("model activity block has the wrong size")
        activity = np.frombuffer(raw, "<f8", M, pos)
        P = max(counts, default=0)
        dense = np.zeros((M, P, N), dtype=np.int64)
        for m, h in enumerate(hists):
            dense[m, : len(h)] = h
        return cls(cols, rows, pw, ph, T, params, dense, counts, activity.copy())

    def save(self, path) -> None:
        try:
            with open(path, "wb") as fh:
                fh.write(self.to_bytes())
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "TemporalModel":
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise IoFailure(f"{path}: {exc}") from exc
        try:
            return cls.from_bytes(raw)
        except FormatError as exc:
            raise type(exc)(f"{path}: {exc}") from exc


def train(training_clips: Iterable, grid: PatchGrid, params: DescriptorParams,
          T: int | None = None) -> TemporalModel:
    """Collect per-location training histograms and activity rates."""
    hists, active = [], []
    for traj in as_trajectories(training_clips):
        if T is None:
            T = traj.T
        check_clip_geometry(traj, grid, T)
        counts, moving = describe_clip(traj, grid, params)
        hists.append(counts)
        active.append(moving > 0)
    if not hists:
        raise EmptyTraining("no training clips supplied")
    histograms = np.stack(hists, axis=1)
    activity = np.mean(np.stack(active, axis=1), axis=1)
    counts = np.full(grid.M, len(hists))
    return TemporalModel(grid.cols, grid.rows, grid.patch_w, grid.patch_h, T, params,
                         histograms, counts, activity)


def _packed_bins(h: np.ndarray) -> np.ndarray:
    """Drop the bins that are empty in every histogram of a ``(B, P, N)`` block.

    Each location's occupied bins are moved to the front and the block is cut
    to the widest support; the bins removed contribute nothing to chi-square.
    """
    support = h.any(axis=1)
    width = max(int(support.sum(axis=1).max()), 1)
    order = np.argsort(~support, axis=1, kind="stable")[:, :width]
    return np.take_along_axis(h, order[:, None, :], axis=2)


def _unit_scaled(neighbours: np.ndarray, var: np.ndarray, sigma2_min: float):
    """Count-gcd unit of each neighbour set and its floored standard deviation in raw units."""
    B = len(neighbours)
    unit = np.gcd.reduce(neighbours.reshape(B, -1), axis=1).astype(np.float64)
    unit[unit == 0] = 1.0
    sd = np.sqrt(np.maximum(var / (unit * unit), sigma2_min)) * unit
    return sd


def _moving_enough(moving: np.ndarray, total: int, floor: float) -> np.ndarray:
    return (np.asarray(moving) > 0) & (np.asarray(moving) >= floor * total)


def temporal_scores(Q: np.ndarray, moving: np.ndarray, model: TemporalModel,
                    cfg: DetectorConfig) -> np.ndarray:
    """Temporal ``L`` for every location of one clip; ``Q`` is ``(M, N)``.

    Locations with fewer than ``K`` training histograms or too little motion
    get ``L = 0``.
    """
    K = cfg.K
    M, P, N = model.histograms.shape
    L = np.zeros(M)
    live = model.sufficient(K) & _moving_enough(moving, (model.T - 1) * model.patch_pixels,
                                                 cfg.motion_floor)
    locs = np.flatnonzero(live)
    if len(locs) == 0:
        return L
    G = model.pool_chi2()
    iu, ju = np.triu_indices(K, k=1)
    step = max(1, _BLOCK // max(1, P * N))
    for a in range(0, len(locs), step):
        m = locs[a : a + step]
        D = knn_stat.chi2_terms_sum(Q[m, None, :], model.histograms[m])
        D[np.arange(P)[None, :] >= model.counts[m, None]] = np.inf
        full = np.argsort(D, axis=1, kind="stable")
        order = full[:, :K]
        for row in np.flatnonzero(knn_stat.boundary_ties(np.take_along_axis(D, full, axis=1), K)):
            c = model.counts[m[row]]
            order[row] = knn_stat.rank_exact(Q[m[row]], model.histograms[m[row], :c], D[row, :c], K)
        pairs = G[m[:, None], order[:, iu], order[:, ju]]
        mu, var = knn_stat.pair_moments(pairs)
        sd = _unit_scaled(model.histograms[m[:, None], order], var, cfg.sigma2_min)
        s = np.take_along_axis(D, order, axis=1)
        z = knn_stat.standardize(s, mu[:, None], sd[:, None])
        L[m] = knn_stat.log_tail_probability(z, cfg.p_min, cfg.tail).sum(axis=1)
    return L


def _neighbour_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    off = np.stack([dy.ravel(), dx.ravel()], axis=1)
    return off[(off != 0).any(axis=1)]


def _offset_table(H: np.ndarray, reach: int):
    """chi2 between every cell and the cell at each offset within ``reach``.

    Returns a ``((2*reach+1)^2, rows, cols)`` table; out-of-grid entries are
    ``inf``.
    """
    rows, cols, N = H.shape
    pad = np.zeros((rows + 2 * reach, cols + 2 * reach, N), dtype=H.dtype)
    pad[reach : reach + rows, reach : reach + cols] = H
    inside = np.zeros((rows + 2 * reach, cols + 2 * reach), dtype=bool)
    inside[reach : reach + rows, reach : reach + cols] = True
    span = 2 * reach + 1
    table = np.empty((span * span, rows, cols))
    for k in range(span * span):
        dy, dx = divmod(k, span)
        sl = (slice(dy, dy + rows), slice(dx, dx + cols))
        d = knn_stat.chi2_terms_sum(H, pad[sl])
        d[~inside[sl]] = np.inf
        table[k] = d
    return table


def spatial_scores(Q: np.ndarray, moving: np.ndarray, grid_shape: tuple[int, int],
                   patch_pixels: int, T: int, cfg: DetectorConfig) -> np.ndarray:
    """Spatial ``L`` for every location, pooling moving neighbours of the same clip."""
    rows, cols = grid_shape
    M = rows * cols
    N = Q.shape[1]
    r = cfg.spatial_radius
    qualifies = _moving_enough(moving, (T - 1) * patch_pixels, cfg.motion_floor).reshape(rows, cols)
    L = np.zeros(M)
    if not qualifies.any():
        return L
    H = Q.reshape(rows, cols, N)
    table = _offset_table(H, 2 * r)
    span = 4 * r + 1
    offs = _neighbour_offsets(r)
    n_c = len(offs)
    yy, xx = np.indices((rows, cols))
    yy, xx = yy.ravel(), xx.ravel()

    def tab_index(dy, dx):
        return (dy + 2 * r) * span + (dx + 2 * r)

    ny = yy[:, None] + offs[None, :, 0]
    nx = xx[:, None] + offs[None, :, 1]
    inb = (ny >= 0) & (ny < rows) & (nx >= 0) & (nx < cols)
    ok = np.zeros_like(inb)
    ok[inb] = qualifies[ny[inb], nx[inb]]
    d = table[tab_index(offs[:, 0], offs[:, 1])[None, :], yy[:, None], xx[:, None]]
    d = np.where(ok, d, np.inf)

    Kc = min(cfg.K, n_c)
    full = np.argsort(d, axis=1, kind="stable")
    order = full[:, :Kc]
    for m in np.flatnonzero(knn_stat.boundary_ties(np.take_along_axis(d, full, axis=1), Kc)):
        cand = np.flatnonzero(ok[m])
        pool = H[ny[m, cand], nx[m, cand]]
        order[m] = cand[knn_stat.rank_exact(Q[m], pool, d[m, cand], Kc)]
    k_eff = np.minimum(ok.sum(axis=1), cfg.K)
    valid = np.arange(Kc)[None, :] < k_eff[:, None]
    live = qualifies.ravel() & (k_eff >= 2)

    iu, ju = np.triu_indices(Kc, k=1)
    oi, oj = offs[order[:, iu]], offs[order[:, ju]]
    ay = np.clip(yy[:, None] + oi[..., 0], 0, rows - 1)
    ax = np.clip(xx[:, None] + oi[..., 1], 0, cols - 1)
    pairs = table[tab_index(oj[..., 0] - oi[..., 0], oj[..., 1] - oi[..., 1]), ay, ax]
    w = valid[:, iu] & valid[:, ju]
    pairs = np.where(w, pairs, 0.0)
    npairs = np.maximum(w.sum(axis=1), 1)
    mu = pairs.sum(axis=1) / npairs
    var = (np.where(w, pairs - mu[:, None], 0.0) ** 2).sum(axis=1) / npairs
    picked = offs[order]
    gy = np.clip(yy[:, None] + picked[..., 0], 0, rows - 1)
    gx = np.clip(xx[:, None] + picked[..., 1], 0, cols - 1)
    neighbours = np.where(valid[..., None], H[gy, gx], 0)
    sd = _unit_scaled(neighbours, var, cfg.sigma2_min)
    s = np.take_along_axis(d, order, axis=1)
    with np.errstate(invalid="ignore"):
        z = np.where(valid, knn_stat.standardize(s, mu[:, None], sd[:, None]), 0.0)
    logp = knn_stat.log_tail_probability(z, cfg.p_min, cfg.tail)
    L[live] = np.where(valid, logp, 0.0).sum(axis=1)[live]
    return L


def spatial_scores_history(Q: np.ndarray, moving: np.ndarray, model: TemporalModel,
                           cfg: DetectorConfig) -> np.ndarray:
    """Spatial ``L`` pooling the training histories of surrounding locations."""
    rows, cols = model.rows, model.cols
    L = np.zeros(model.M)
    qualifies = _moving_enough(moving, (model.T - 1) * model.patch_pixels, cfg.motion_floor)
    offs = _neighbour_offsets(cfg.spatial_radius)
    for m in np.flatnonzero(qualifies):
        y, x = divmod(m, cols)
        pool = [model.history((y + dy) * cols + (x + dx)) for dy, dx in offs
                if 0 <= y + dy < rows and 0 <= x + dx < cols]
        pool = np.concatenate(pool) if pool else np.zeros((0, Q.shape[1]), dtype=np.int64)
        k = min(cfg.K, len(pool))
        if k < 2:
            continue
        L[m] = knn_stat.score_query(Q[m], pool, k, cfg.sigma2_min, cfg.p_min, cfg.tail).L
    return L


def score_temporal(query, model: TemporalModel, m: int, cfg: DetectorConfig,
                   moving: int | None = None) -> float:
    """Temporal score of a single patch (reference path for the batched kernel).

    ``moving`` is the number of displaced trajectory points in the patch; if
    omitted every point outside magnitude ring 0 counts as displaced.
    """
    query = np.asarray(query, dtype=np.int64)
    if model.counts[m] < cfg.K:
        raise InsufficientHistory(f"location {m} has {model.counts[m]} histograms, K={cfg.K}")
    if moving is None:
        moving = int(query[model.params.n_ang :].sum())
    if not _moving_enough(moving, (model.T - 1) * model.patch_pixels, cfg.motion_floor):
        return 0.0
    return knn_stat.score_query(query, model.history(m), cfg.K, cfg.sigma2_min,
                                cfg.p_min, cfg.tail).L


def score_spatial(clip_histograms, moving, m: int, grid_shape: tuple[int, int],
                  patch_pixels: int, T: int, cfg: DetectorConfig) -> float:
    """Spatial score of a single patch (reference path for the batched kernel)."""
    rows, cols = grid_shape
    H = np.asarray(clip_histograms, dtype=np.int64)
    qualifies = _moving_enough(moving, (T - 1) * patch_pixels, cfg.motion_floor)
    if not qualifies[m]:
        return 0.0
    y, x = divmod(m, cols)
    pool = [H[(y + dy) * cols + (x + dx)] for dy, dx in _neighbour_offsets(cfg.spatial_radius)
            if 0 <= y + dy < rows and 0 <= x + dx < cols and qualifies[(y + dy) * cols + (x + dx)]]
    k = min(cfg.K, len(pool))
    if k < 2:
        return 0.0
    return knn_stat.score_query(H[m], np.array(pool), k, cfg.sigma2_min, cfg.p_min, cfg.tail).L


def effective_thresholds(activity: np.ndarray, cfg: DetectorConfig, shift: float = 0.0):
    """Per-location ``(low_t, high_t, low_s, high_s)`` after the non-active offset."""
    off = np.where(activity < cfg.activity_min, cfg.nonactive_offset, 0.0)
    return (cfg.T_low_temporal + shift - off, cfg.T_high_temporal + shift - off,
            cfg.T_low_spatial + shift - off, cfg.T_high_spatial + shift - off)


def _combine(a, b, how):
    return (a | b) if how == "or" else (a & b)


def label_cells(L_t, L_s, activity, sufficient, cfg: DetectorConfig,
                shift: float = 0.0) -> np.ndarray:
    """Seed/grow labelling of one clip's ``(rows, cols)`` score grids.

    ``shift`` moves all four thresholds together (used for ROC sweeps).
    """
    shape = np.shape(L_t)
    low_t, high_t, low_s, high_s = (t.reshape(shape) for t in
                                    effective_thresholds(np.asarray(activity), cfg, shift))
    suff = np.asarray(sufficient).reshape(shape)
    seed = _combine(L_t < low_t, L_s < low_s, cfg.combine) & suff
    high = _combine(L_t < high_t, L_s < high_s, cfg.combine) & suff
    labels = np.zeros(shape, dtype=np.int8)
    if seed.any():
        comp, _ = ndimage.label(high, structure=_EIGHT)
        keep = np.unique(comp[seed])
        labels[np.isin(comp, keep[keep > 0])] = GROWN
        labels[seed] = SEED
    return labels


def cell_margin(L_t, L_s, activity, cfg: DetectorConfig) -> np.ndarray:
    """Per-cell score on the temporal low-threshold scale.

    A cell is a seed exactly when its margin is below ``cfg.T_low_temporal``;
    the frame score used for ROC sweeps is the minimum margin over the grid.
    """
    off = np.where(np.asarray(activity) < cfg.activity_min, cfg.nonactive_offset, 0.0)
    off = off.reshape(np.shape(L_t))
    e_t = np.asarray(L_t) + off
    e_s = np.asarray(L_s) + off + (cfg.T_low_temporal - cfg.T_low_spatial)
    return np.minimum(e_t, e_s) if cfg.combine == "or" else np.maximum(e_t, e_s)


@dataclass(frozen=True, eq=False)
class DetectionGrid:
    clip_index: int
    start_frame: int
    L_temporal: np.ndarray
    L_spatial: np.ndarray
    labels: np.ndarray
    sufficient: np.ndarray = field(repr=False)

    @property
    def detected(self) -> np.ndarray:
        return self.labels != NORMAL

    def margin(self, activity, cfg: DetectorConfig) -> np.ndarray:
        m = cell_margin(self.L_temporal, self.L_spatial, activity, cfg)
        return np.where(self.sufficient, m, np.inf)

    def relabel(self, activity, cfg: DetectorConfig, shift: float = 0.0) -> np.ndarray:
        return label_cells(self.L_temporal, self.L_spatial, activity, self.sufficient, cfg, shift)


def detect_clip(test_clip: TrajectorySet, model: TemporalModel, cfg: DetectorConfig,
                grid: PatchGrid | None = None, clip_index: int = 0,
                start_frame: int = 0) -> DetectionGrid:
    if grid is None:
        grid = build_grid(test_clip.width, test_clip.height, model.patch_w, model.patch_h)
    model.check_grid(grid)
    check_clip_geometry(test_clip, grid, model.T)
    Q, moving = describe_clip(test_clip, grid, model.params)
    return detect_histograms(Q, moving, model, cfg, clip_index, start_frame)


def detect_histograms(Q: np.ndarray, moving: np.ndarray, model: TemporalModel,
                      cfg: DetectorConfig, clip_index: int = 0,
                      start_frame: int = 0) -> DetectionGrid:
    """Score and label one clip from its ``(M, N)`` histograms and moving counts."""
    if Q.shape != (model.M, model.params.N):
        raise GeometryMismatch(f"histograms {Q.shape} do not match model ({model.M}, {model.params.N})")
    L_t = temporal_scores(Q, moving, model, cfg)
    if cfg.spatial_source == "clip":
        L_s = spatial_scores(Q, moving, (model.rows, model.cols), model.patch_pixels, model.T, cfg)
    else:
        L_s = spatial_scores_history(Q, moving, model, cfg)
    shape = (model.rows, model.cols)
    suff = model.sufficient(cfg.K).reshape(shape)
    L_t = np.where(suff, L_t.reshape(shape), 0.0)
    L_s = np.where(suff, L_s.reshape(shape), 0.0)
    labels = label_cells(L_t, L_s, model.activity, suff, cfg)
    return DetectionGrid(clip_index, start_frame, L_t, L_s, labels, suff)


class ShapeKnnAnomalyDetector(BaseEstimator):
    """Patch-level anomaly detector for crowd-scene clips.

    ``X`` passed to :meth:`fit` and :meth:`detect` is a sequence of clips,
    each a :class:`~crowdanomaly.trajectory.TrajectorySet`, a sequence of
    ``T - 1`` flow fields, or an array of shape ``(T-1, H, W, 2)``.

    Parameters
    ----------
    patch_w, patch_h : int
        Patch size in pixels.
    n_mag_bins, n_ang_bins : int
        Polar histogram resolution.
    r_max : float or None
        Outer magnitude radius; ``None`` uses ``T - 1``.
    n_neighbors : int
        K for the K-NN retrieval.
    t_low_temporal, t_high_temporal, t_low_spatial, t_high_spatial : float
        Seed and growth thresholds on ``L`` per context.
    spatial_radius : int
        Chebyshev radius (in patches) of the spatial neighbourhood.
    activity_min, nonactive_offset : float
        Locations active in fewer than ``activity_min`` of the training clips
        have their thresholds lowered by ``nonactive_offset``.
    combine : {'or', 'and'}
        How the temporal and spatial tests are fused.
    motion_floor : float
        Minimum fraction of displaced points for a patch to be scored.
    spatial_source : {'clip', 'history'}
        Where spatial neighbours come from.
    tail : {'upper', 'two-sided'}
        Tail used to turn standardized distances into probabilities.
    n_jobs : int
        Worker threads over clips; results do not depend on it.
    """

    def __init__(self, patch_w=3, patch_h=3, n_mag_bins=8, n_ang_bins=8, r_max=None,
                 n_neighbors=knn_stat.DEFAULT_K, t_low_temporal=-1000.0, t_high_temporal=-400.0,
                 t_low_spatial=-1000.0, t_high_spatial=-400.0, spatial_radius=2,
                 activity_min=0.1, nonactive_offset=20.0, combine="or", motion_floor=0.05,
                 spatial_source="clip", tail="upper", sigma2_min=SIGMA2_MIN,
                 p_min=P_MIN, n_jobs=1):
        self.patch_w = patch_w
        self.patch_h = patch_h
        self.n_mag_bins = n_mag_bins
        self.n_ang_bins = n_ang_bins
        self.r_max = r_max
        self.n_neighbors = n_neighbors
        self.t_low_temporal = t_low_temporal
        self.t_high_temporal = t_high_temporal
        self.t_low_spatial = t_low_spatial
        self.t_high_spatial = t_high_spatial
        self.spatial_radius = spatial_radius
        self.activity_min = activity_min
        self.nonactive_offset = nonactive_offset
        self.combine = combine
        self.motion_floor = motion_floor
        self.spatial_source = spatial_source
        self.tail = tail
        self.sigma2_min = sigma2_min
        self.p_min = p_min
        self.n_jobs = n_jobs

    def config(self) -> DetectorConfig:
        return DetectorConfig(
            K=self.n_neighbors,
            T_low_temporal=self.t_low_temporal,
            T_high_temporal=self.t_high_temporal,
            T_low_spatial=self.t_low_spatial,
            T_high_spatial=self.t_high_spatial,
            spatial_radius=self.spatial_radius,
            activity_min=self.activity_min,
            nonactive_offset=self.nonactive_offset,
            combine=self.combine,
            motion_floor=self.motion_floor,
            spatial_source=self.spatial_source,
            tail=self.tail,
            sigma2_min=self.sigma2_min,
            p_min=self.p_min,
        )

    def fit(self, X, y=None):
        cfg = self.config()
        trajs = as_trajectories(X)
        first = next(trajs, None)
        if first is None:
            raise EmptyTraining("no training clips supplied")
        grid = build_grid(first.width, first.height, self.patch_w, self.patch_h)
        params = DescriptorParams.for_clip_length(first.T, self.n_mag_bins, self.n_ang_bins,
                                                  self.r_max)
        self.model_ = train(_chain(first, trajs), grid, params, first.T)
        self.grid_ = grid
        cov = self.model_.coverage(cfg.K)
        if cov["insufficient"]:
            log.warning("%d of %d locations have fewer than K=%d training histograms",
                        cov["insufficient"], cov["locations"], cfg.K)
        return self

    @classmethod
    def from_model(cls, model: TemporalModel, width: int, height: int, **params):
        """Wrap an already trained (e.g. loaded) model."""
        est = cls(patch_w=model.patch_w, patch_h=model.patch_h, n_mag_bins=model.params.n_mag,
                  n_ang_bins=model.params.n_ang, r_max=model.params.r_max, **params)
        grid = build_grid(width, height, model.patch_w, model.patch_h)
        model.check_grid(grid)
        est.model_ = model
        est.grid_ = grid
        return est

    def detect(self, X, start_frames=None) -> list[DetectionGrid]:
        check_is_fitted(self, "model_")
        cfg = self.config()
        clips = list(X) if not isinstance(X, (TrajectorySet,)) else [X]
        if start_frames is None:
            start_frames = [i * self.model_.T for i in range(len(clips))]

        def run(i):
            traj = next(as_trajectories([clips[i]]))
            return detect_clip(traj, self.model_, cfg, self.grid_, i, start_frames[i])

        if self.n_jobs and self.n_jobs > 1 and len(clips) > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                return list(pool.map(run, range(len(clips))))
        return [run(i) for i in range(len(clips))]

    def predict(self, X) -> np.ndarray:
        """Label grids ``(n_clips, rows, cols)``: 0 normal, 1 seed, 2 grown."""
        return np.stack([g.labels for g in self.detect(X)])

    def score_samples(self, X) -> np.ndarray:
        """Per-cell margins ``(n_clips, rows, cols)``; lower is more anomalous."""
        cfg = self.config()
        return np.stack([g.margin(self.model_.activity.reshape(g.labels.shape), cfg)
                         for g in self.detect(X)])

    def with_params(self, **params) -> "ShapeKnnAnomalyDetector":
        """Copy sharing the fitted model, with some parameters changed."""
        est = self.__class__(**{**self.get_params(), **params})
        for attr in ("model_", "grid_"):
            if hasattr(self, attr):
                setattr(est, attr, getattr(self, attr))
        return est


def _chain(first, rest):
    yield first
    yield from rest


__all__ = [
    "DetectorConfig",
    "DetectionGrid",
    "ShapeKnnAnomalyDetector",
    "TemporalModel",
    "detect_clip",
    "detect_histograms",
    "label_cells",
    "score_spatial",
    "score_temporal",
    "spatial_scores",
    "temporal_scores",
    "train",
]
