import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

import oracles
from crowdanomaly import synth
from crowdanomaly.descriptor import DescriptorParams, build_grid, describe_clip
from crowdanomaly.detector import (
    GROWN,
    NORMAL,
    SEED,
    DetectorConfig,
    ShapeKnnAnomalyDetector,
    TemporalModel,
    detect_clip,
    detect_histograms,
    label_cells,
    score_spatial,
    score_temporal,
    spatial_scores,
    temporal_scores,
    train,
)
from crowdanomaly.exceptions import (
    EmptyTraining,
    FormatError,
    GeometryMismatch,
    InsufficientHistory,
    Truncated,
    UnsupportedVersion,
)
from crowdanomaly.flow_io import FlowField
from crowdanomaly.trajectory import advect, segment_clips


def scene_clips(spec, training=False, T=10):
    flows = list(synth.iter_flows(spec, training))
    n = len(flows) + 1
    return [advect(flows[r.start : r.stop - 1]) for r in segment_clips(n, T)]


def drift(u, v, frames, seed, noise=0.4, W=24, H=18, anomalies=()):
    return synth.SceneSpec(W, H, frames, seed, noise, frames, u, v, anomalies=tuple(anomalies))


def const_clip(u, v, H=12, W=12, T=10):
    return advect([FlowField(np.full((H, W), u), np.full((H, W), v))] * (T - 1))


@pytest.fixture(scope="module")
def rightward():
    spec = drift(1.0, 0.0, 400, seed=3)
    clips = scene_clips(spec, training=True)
    grid = build_grid(24, 18, 3, 3)
    return train(clips, grid, DescriptorParams.for_clip_length(10)), grid


def test_history_count_per_location():
    """34 sequences of 200 frames cut into T = 10 clips."""
    clip = const_clip(1.0, 0.0, H=6, W=6)
    per_seq = len(segment_clips(200, 10))
    model = train([clip] * (34 * per_seq), build_grid(6, 6, 3, 3), DescriptorParams.for_clip_length(10))
    assert per_seq == 20
    assert model.counts.tolist() == [680] * 4
    assert model.histograms.shape == (4, 680, 64)


def test_static_training_clip():
    model = train([const_clip(0.0, 0.0)], build_grid(12, 12, 3, 3), DescriptorParams())
    assert not model.activity.any()
    assert (model.histograms[:, 0, 0] == 81).all()
    assert model.coverage(20)["insufficient"] == model.M


def test_empty_training():
    with pytest.raises(EmptyTraining):
        train([], build_grid(12, 12, 3, 3), DescriptorParams())


def test_training_geometry_checked():
    with pytest.raises(GeometryMismatch):
        train([const_clip(0, 0), const_clip(0, 0, T=5)], build_grid(12, 12, 3, 3), DescriptorParams())


def test_insufficient_history_is_normal():
    grid = build_grid(12, 12, 3, 3)
    model = train([const_clip(1.0, 0.0)] * 3, grid, DescriptorParams.for_clip_length(10))
    g = detect_clip(const_clip(-1.0, 0.0), model, DetectorConfig(K=5))
    assert not g.sufficient.any()
    assert not g.detected.any() and not g.L_temporal.any() and not g.L_spatial.any()
    with pytest.raises(InsufficientHistory):
        score_temporal(np.zeros(64, dtype=int), model, 0, DetectorConfig(K=5))


def test_duplicate_history_scores_zero():
    grid = build_grid(12, 12, 3, 3)
    model = train([const_clip(1.0, 0.0)] * 25, grid, DescriptorParams.for_clip_length(10))
    Q, moving = describe_clip(const_clip(1.0, 0.0), grid, model.params)
    assert score_temporal(Q[4], model, 4, DetectorConfig()) == 0.0
    assert not temporal_scores(Q, moving, model, DetectorConfig()).any()


def test_reversed_motion_is_far_below_minus_fifty(rightward):
    model, grid = rightward
    test = scene_clips(drift(-1.0, 0.0, 20, seed=99))[0]
    Q, moving = describe_clip(test, grid, model.params)
    L = temporal_scores(Q, moving, model, DetectorConfig())
    assert L.max() < -50


def test_static_query_over_static_history():
    grid = build_grid(12, 12, 3, 3)
    model = train([const_clip(0.0, 0.0)] * 25, grid, DescriptorParams.for_clip_length(10))
    Q, moving = describe_clip(const_clip(0.0, 0.0), grid, model.params)
    assert not moving.any()
    assert not temporal_scores(Q, moving, model, DetectorConfig()).any()


def test_uniform_field_spatially_unremarkable():
    # particles near the bottom/right edge are clamped, so only cells whose whole
    # neighbourhood stays 9 px clear of the border see identical histograms
    Q, moving = describe_clip(const_clip(1.0, 1.0, H=60, W=60), build_grid(60, 60, 3, 3),
                              DescriptorParams())
    L = spatial_scores(Q, moving, (20, 20), 9, 10, DetectorConfig(K=8)).reshape(20, 20)
    assert not L[:15, :15].any()


def test_counterflow_patch_is_spatial_minimum():
    spec = drift(1.0, 0.5, 12, seed=8, noise=0.3, W=30, H=30,
                 anomalies=[synth.Anomaly("x", 0, 11, synth.Rect(12, 12, 3, 3), -1.0, -0.5)])
    clip = scene_clips(spec)[0]
    grid = build_grid(30, 30, 3, 3)
    Q, moving = describe_clip(clip, grid, DescriptorParams())
    L = spatial_scores(Q, moving, (10, 10), 9, 10, DetectorConfig(K=8))
    # particles leaving the counterflow patch bounce off the upstream cell, so
    # the minimum sits on the injected cell or right next to it
    r, c = divmod(int(np.argmin(L)), 10)
    assert max(abs(r - 4), abs(c - 4)) <= 1
    far = np.abs(np.subtract.outer(np.arange(10), 4)) > 2
    assert L.min() < 5 * L.reshape(10, 10)[far[:, None] | far[None, :]].min()


def test_isolated_mover_has_no_spatial_pool():
    u = np.zeros((15, 15))
    u[6:9, 6:9] = 1.0
    clip = advect([FlowField(u, np.zeros_like(u))] * 9)
    Q, moving = describe_clip(clip, build_grid(15, 15, 3, 3), DescriptorParams())
    centre = 12
    assert moving[centre] > 0 and moving.sum() == moving[centre]
    L = spatial_scores(Q, moving, (5, 5), 9, 10, DetectorConfig())
    assert L[centre] == 0.0
    assert score_spatial(Q, moving, centre, (5, 5), 9, 10, DetectorConfig()) == 0.0


def test_nothing_below_high_threshold():
    L = np.full((4, 4), -10.0)
    labels = label_cells(L, L, np.ones(16), np.ones((4, 4), bool), DetectorConfig())
    assert not labels.any()


def test_seed_grows_into_adjacent_cells():
    cfg = DetectorConfig()
    Lt = np.zeros((4, 5))
    Lt[1, 1] = -2000.0
    Lt[1, 2] = Lt[2, 3] = -500.0
    Lt[3, 0] = -500.0  # below high but not connected
    labels = label_cells(Lt, np.zeros_like(Lt), np.ones(20), np.ones_like(Lt, bool), cfg)
    assert labels[1, 1] == SEED
    assert labels[1, 2] == labels[2, 3] == GROWN
    assert (labels != NORMAL).sum() == 3


cells = st.integers(2, 7).flatmap(lambda r: st.integers(2, 7).flatmap(lambda c: st.lists(
    st.sampled_from([0.0, -450.0, -900.0, -1100.0, -5000.0]), min_size=r * c, max_size=r * c
).map(lambda v: np.array(v).reshape(r, c))))


@given(cells, cells, st.sampled_from(["or", "and"]))
def test_labelling_matches_bfs_oracle(Lt, Ls, how):
    if Ls.shape != Lt.shape:
        Ls = np.resize(Ls, Lt.shape)
    cfg = DetectorConfig(combine=how)
    act = np.ones(Lt.size)
    labels = label_cells(Lt, Ls, act, np.ones(Lt.shape, bool), cfg)
    comb = np.logical_or if how == "or" else np.logical_and
    seed = comb(Lt < -1000, Ls < -1000)
    high = comb(Lt < -400, Ls < -400)
    assert labels.tolist() == oracles.seed_grow(seed.tolist(), high.tolist())


@given(cells, st.floats(0, 3000), st.floats(0, 3000))
def test_raising_thresholds_never_removes(Lt, a, b):
    suff = np.ones(Lt.shape, bool)
    act = np.ones(Lt.size)
    cfg = DetectorConfig()
    lo = label_cells(Lt, Lt[::-1], act, suff, cfg, shift=-max(a, b)) != NORMAL
    hi = label_cells(Lt, Lt[::-1], act, suff, cfg, shift=-min(a, b)) != NORMAL
    assert not (lo & ~hi).any()


@given(cells)
def test_and_fusion_subset_of_or(Lt):
    Ls = -Lt[::-1, ::-1] - 1500.0
    suff = np.ones(Lt.shape, bool)
    act = np.ones(Lt.size)
    a = label_cells(Lt, Ls, act, suff, DetectorConfig(combine="and")) != NORMAL
    o = label_cells(Lt, Ls, act, suff, DetectorConfig(combine="or")) != NORMAL
    assert not (a & ~o).any()


def test_nonactive_locations_need_lower_scores():
    Lt = np.array([[-1010.0, 0.0, -1010.0]])
    suff = np.ones((1, 3), bool)
    labels = label_cells(Lt, np.zeros_like(Lt), np.array([0.0, 1.0, 1.0]), suff, DetectorConfig())
    assert labels.tolist() == [[NORMAL, NORMAL, SEED]]


def test_margin_agrees_with_seed_rule():
    rng = np.random.default_rng(4)
    cfg = DetectorConfig(T_low_spatial=-1500.0, T_high_spatial=-600.0)
    Lt, Ls = rng.uniform(-3000, 0, (2, 6, 6))
    act = rng.uniform(0, 0.3, 36)
    g = detect_like(Lt, Ls, act, cfg)
    seeds = g.labels == SEED
    assert np.array_equal(seeds, g.margin(act.reshape(6, 6), cfg) < cfg.T_low_temporal)


def detect_like(Lt, Ls, act, cfg):
    from crowdanomaly.detector import DetectionGrid
    suff = np.ones(Lt.shape, bool)
    return DetectionGrid(0, 0, Lt, Ls, label_cells(Lt, Ls, act, suff, cfg), suff)


@given(st.integers(0, 2**31), st.integers(2, 12))
def test_batched_temporal_matches_scalar(seed, K):
    rng = np.random.default_rng(seed)
    M, P, N = 6, 20, 16
    hist = rng.integers(0, 4, (M, P, N))
    hist[:, rng.integers(0, P, 6)] = hist[:, :1]  # duplicates
    counts = rng.integers(K, P + 1, M)
    model = TemporalModel(3, 2, 2, 2, 4, DescriptorParams(2, 8, 3.0), hist, counts, np.ones(M))
    Q = rng.integers(0, 4, (M, N))
    moving = np.full(M, 12)
    cfg = DetectorConfig(K=K, motion_floor=0.0)
    L = temporal_scores(Q, moving, model, cfg)
    for m in range(M):
        ref = score_temporal(Q[m], model, m, cfg, moving=12)
        assert L[m] == pytest.approx(ref, rel=1e-9, abs=1e-9)


@given(st.integers(0, 2**31), st.integers(2, 30), st.integers(1, 2))
def test_batched_spatial_matches_scalar(seed, K, radius):
    rng = np.random.default_rng(seed)
    rows, cols, N = 5, 6, 16
    Q = rng.integers(0, 3, (rows * cols, N))
    moving = rng.integers(0, 3, rows * cols)
    cfg = DetectorConfig(K=K, spatial_radius=radius, motion_floor=0.0)
    L = spatial_scores(Q, moving, (rows, cols), 4, 5, cfg)
    for m in range(rows * cols):
        ref = score_spatial(Q, moving, m, (rows, cols), 4, 5, cfg)
        assert L[m] == pytest.approx(ref, rel=1e-9, abs=1e-9)


def test_model_round_trip(tmp_path, rightward):
    model, _ = rightward
    path = tmp_path / "m.stam"
    model.save(path)
    back = TemporalModel.load(path)
    assert back.to_bytes() == model.to_bytes()
    assert np.array_equal(back.histograms, model.histograms)
    assert back.params == model.params and back.T == model.T


def test_model_file_errors(tmp_path, rightward):
    model, _ = rightward
    raw = model.to_bytes()
    with pytest.raises(FormatError):
        TemporalModel.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(UnsupportedVersion):
        TemporalModel.from_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(Truncated):
        TemporalModel.from_bytes(raw[:-3])
    bad = tmp_path / "bad.stam"
    bad.write_bytes(raw[:30])
    with pytest.raises(Truncated, match="bad.stam"):
        TemporalModel.load(bad)


def test_grid_mismatch(rightward):
    model, _ = rightward
    with pytest.raises(GeometryMismatch):
        model.check_grid(build_grid(24, 18, 2, 2))
    with pytest.raises(GeometryMismatch):
        detect_histograms(np.zeros((3, 64), dtype=int), np.zeros(3), model, DetectorConfig())


@pytest.mark.parametrize("kw", [dict(K=1), dict(combine="xor"), dict(T_low_temporal=0.0),
                                dict(sigma2_min=0.0), dict(p_min=1.0), dict(spatial_radius=0),
                                dict(tail="lower"), dict(motion_floor=2.0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DetectorConfig(**kw)


def test_estimator_api():
    spec = drift(0.8, 0.3, 300, seed=5, anomalies=[
        synth.Anomaly("fast", 100, 139, synth.Rect(6, 6, 6, 6), relative=4.0)])
    train_clips = scene_clips(spec, training=True)
    test_clips = scene_clips(spec)
    est = ShapeKnnAnomalyDetector(n_neighbors=10)
    assert clone(est).get_params() == est.get_params()
    est.fit(train_clips)
    labels = est.predict(test_clips)
    assert labels.shape == (30, 6, 8)
    hit = labels[10:14].any(axis=(1, 2))
    assert hit.all() and not labels[:10].any() and not labels[15:].any()
    scores = est.score_samples(test_clips)
    assert scores.shape == labels.shape
    assert np.array_equal(est.with_params(n_jobs=4).predict(test_clips), labels)
    as_arrays = [np.stack([np.stack([f.u, f.v], -1) for f in fl]) for fl in
                 [list(synth.iter_flows(spec))[r.start : r.stop - 1] for r in segment_clips(300, 10)]]
    assert np.array_equal(est.predict(as_arrays), labels)


def test_grown_region_covers_injected_rect():
    """A fast cluster in a walking crowd: the detected cells cover >= 40% of its pixels."""
    spec = drift(0.5, 0.2, 100, seed=12, W=36, H=30, anomalies=[
        synth.Anomaly("biker", 20, 59, synth.Rect(12, 9, 9, 9), 3.5, -1.0)])
    spec = synth.SceneSpec(**{**spec.__dict__, "training_frames": 800})
    est = ShapeKnnAnomalyDetector(n_neighbors=20).fit(scene_clips(spec, training=True))
    grids = est.detect(scene_clips(spec))
    gt = synth.ground_truth(spec)
    for g in grids[2:6]:
        mask = est.grid_.rasterize(g.detected)
        gm = gt.mask(g.start_frame)
        assert (mask & gm).sum() / gm.sum() >= 0.4
