import dataclasses
import warnings

import numpy as np
import pytest

from ctd2gan.config import PRESETS, SceneConfig
from ctd2gan.data import (
    DatasetFormatError, Shape, VideoDataset, assemble_windows, dumps_dataset, estimate_flow, flows_from_frames,
    load_dataset, loads_dataset, render, save_dataset, synth_generate,
)

SMALL = SceneConfig(height=32, width=32, clips=2, frames_per_clip=20, n_shapes=2, size_min=6, size_max=8)
SMALL_TEST = dataclasses.replace(SMALL, clips=3, frames_per_clip=40, anomalies=("speed", "new_object", "reversal"),
                                 anomaly_min_len=8, anomaly_max_len=12, new_object_radius=4.0)


def textured(rng, h=32, w=32):
    return rng.uniform(size=(h, w, 1))


def test_static_scene_has_zero_flow_and_no_labels():
    ds = synth_generate(dataclasses.replace(SMALL, speed_max=0), seed=1)
    assert np.all(ds.flows == 0)
    assert np.all(ds.labels == 0)


def test_synthesis_is_deterministic():
    a, b = synth_generate(SMALL_TEST, seed=3), synth_generate(SMALL_TEST, seed=3)
    assert a.equals(b)
    assert not a.equals(synth_generate(SMALL_TEST, seed=4))


def test_square_moving_right_has_analytic_interior_flow():
    n = 4
    tex = np.full((10, 10), 0.7)
    sq = Shape("square", 10, 5.0, 3.0, np.tile([0, 2], (n, 1)), tex)
    frames, flows = render([sq], n, 32, 32, background=0.1)
    for t in range(1, n):
        x0 = 3 + 2 * t
        interior = flows[t, 6:14, x0 + 1:x0 + 9]
        np.testing.assert_array_equal(interior[..., 0], 2.0)
        np.testing.assert_array_equal(interior[..., 1], 0.0)
        np.testing.assert_array_equal(interior[..., 2], 2.0)
    assert np.all(flows[0] == 0)
    np.testing.assert_array_equal(flows[2, 0:4], 0.0)  # background


def test_antialiased_edges_are_fractional():
    sq = Shape("square", 6, 4.5, 4.5, np.zeros((3, 2), int), np.ones((6, 6)))
    frames, _ = render([sq], 3, 16, 16, background=0.0)
    assert frames[0, 4, 6, 0] == pytest.approx(0.5)
    assert frames[0, 4, 4, 0] == pytest.approx(0.25)


def test_shapes_wrap_around_the_canvas():
    sq = Shape("square", 6, 0.0, 13.0, np.zeros((1, 2), int), np.ones((6, 6)))
    frames, _ = render([sq], 1, 16, 16, background=0.0)
    assert frames[0, 2, 15, 0] == 1.0 and frames[0, 2, 0, 0] == 1.0 and frames[0, 2, 3, 0] == 0.0


def test_magnitude_channel_and_anomaly_labels():
    ds = synth_generate(SMALL_TEST, seed=5)
    np.testing.assert_allclose(ds.flows[..., 2], np.hypot(ds.flows[..., 0], ds.flows[..., 1]), atol=1e-6)
    for a, b in ds.clips:
        lab = ds.labels[a:b]
        assert 8 <= lab.sum() <= 12
        on = np.flatnonzero(lab)
        assert np.all(np.diff(on) == 1)  # one contiguous event
        assert on[0] >= 6
    first = [a for a, _ in ds.clips]
    assert np.all(ds.flows[first] == 0)


def test_speed_anomaly_exceeds_normal_bound():
    ds = synth_generate(dataclasses.replace(SMALL_TEST, clips=1, anomalies=("speed",)), seed=2)
    mag = ds.flows[..., 2].reshape(len(ds.labels), -1).max(axis=1)
    assert mag[ds.labels == 1].max() > SMALL_TEST.speed_max
    assert mag[ds.labels == 0].max() <= SMALL_TEST.speed_max


def test_new_object_visible_only_on_labelled_frames():
    cfg = dataclasses.replace(SMALL_TEST, clips=1, anomalies=("new_object",), intensity_max=0.6,
                              texture_amplitude=0.05)
    ds = synth_generate(cfg, seed=2)
    bright = (ds.frames[..., 0] > 0.85).reshape(len(ds.labels), -1).sum(1)
    assert np.all(bright[ds.labels == 1] > 10)
    assert np.all(bright[ds.labels == 0] == 0)


# -- block matching ---------------------------------------------------------
def test_identical_frames_give_zero_flow():
    f = textured(np.random.default_rng(0))
    assert np.all(estimate_flow(f, f) == 0)


def test_constructed_shift_right_by_three():
    prev = textured(np.random.default_rng(1))
    cur = np.roll(prev, 3, axis=1)
    flow = estimate_flow(prev, cur)
    np.testing.assert_array_equal(flow[8:24, 8:24, 0], 3)
    np.testing.assert_array_equal(flow[8:24, 8:24, 1], 0)
    np.testing.assert_array_equal(flow[8:24, 8:24, 2], 3)


def test_constructed_vertical_shift_is_positive_down():
    prev = textured(np.random.default_rng(2))
    flow = estimate_flow(prev, np.roll(prev, -2, axis=0))
    np.testing.assert_array_equal(flow[..., 1], -2)


def test_ties_prefer_smallest_then_lexicographic():
    flat = np.zeros((16, 16, 1))
    assert np.all(estimate_flow(flat, flat)[..., :2] == 0)
    # horizontal stripes repeat every 2 rows: (0, 0) is not a match but (u, +-1) all are
    stripes = np.zeros((16, 16, 1))
    stripes[::2] = 1.0
    flow = estimate_flow(stripes, np.roll(stripes, 1, axis=0))
    # candidates with |d| = 1 that match: (0, -1) and (0, 1); lexicographic order picks v = -1
    np.testing.assert_array_equal(flow[..., 0], 0)
    np.testing.assert_array_equal(flow[..., 1], -1)


def test_estimator_rejects_mismatched_extents():
    with pytest.raises(ValueError):
        estimate_flow(np.zeros((8, 8, 1)), np.zeros((8, 16, 1)))


def test_estimator_agrees_with_analytic_flow_on_block_interiors():
    ds = synth_generate(PRESETS["moving-squares"]["train"].__class__(clips=2, frames_per_clip=30), seed=11)
    est = flows_from_frames(ds.frames, ds.clips)
    agree = total = 0
    for t in range(ds.n_frames):
        for by in range(0, 64, 8):
            for bx in range(0, 64, 8):
                blk = ds.flows[t, by:by + 8, bx:bx + 8]
                if blk[..., 2].min() > 0 and np.all(blk == blk[0, 0]):
                    total += 64
                    agree += np.all(est[t, by:by + 8, bx:bx + 8, :2] == blk[..., :2], axis=-1).sum()
    assert total > 1000
    assert agree / total >= 0.95


def test_flow_is_causal():
    ds = synth_generate(SMALL, seed=0)
    frames = np.array(ds.frames)
    base = flows_from_frames(frames, ds.clips)
    frames[10] = np.random.default_rng(0).uniform(size=frames[10].shape)
    changed = flows_from_frames(frames, ds.clips)
    differs = np.flatnonzero(np.any(base != changed, axis=(1, 2, 3)))
    assert set(differs) <= {10, 11}


# -- windows ----------------------------------------------------------------
def dataset_with_clip_lengths(lengths):
    n = sum(lengths)
    bounds, a = [], 0
    for k in lengths:
        bounds.append((a, a + k))
        a += k
    frames = np.arange(n, dtype=np.float32)[:, None, None, None] * np.ones((1, 16, 16, 1), np.float32) / n
    labels = (np.arange(n) % 3 == 0).astype(np.uint8)
    return VideoDataset(frames, np.zeros((n, 16, 16, 3), np.float32), labels, tuple(bounds))


@pytest.mark.parametrize("length,expected", [(10, 5), (6, 1)])
def test_window_counts(length, expected):
    assert len(list(assemble_windows(dataset_with_clip_lengths([length])))) == expected


def test_short_clip_warns_and_yields_nothing():
    with pytest.warns(UserWarning, match="fewer than 6"):
        assert list(assemble_windows(dataset_with_clip_lengths([5]))) == []


def test_windows_stay_inside_clips_and_carry_target_label():
    ds = dataset_with_clip_lengths([8, 7])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        wins = list(assemble_windows(ds))
    assert len(wins) == 3 + 2
    for w in wins:
        a, b = ds.clips[w.clip]
        t = a + w.frame
        assert a + 5 <= t < b
        assert w.label == ds.labels[t]
        np.testing.assert_array_equal(w.inputs[:, 0, 0, 0], ds.frames[t - 5:t, 0, 0, 0])
        np.testing.assert_array_equal(w.target[..., 0], ds.frames[t, ..., 0])
        assert w.inputs.shape == (5, 16, 16, 4)


def test_mutating_a_later_frame_only_changes_windows_that_see_it():
    synth = synth_generate(SMALL, seed=0)
    frames = np.array(synth.frames)
    ds = VideoDataset(frames.copy(), flows_from_frames(frames, synth.clips).astype(np.float32), synth.labels, synth.clips)
    frames[12] += 0.3
    new = VideoDataset(frames, flows_from_frames(frames, ds.clips).astype(np.float32), ds.labels, ds.clips)
    for a, b in zip(assemble_windows(ds), assemble_windows(new)):
        t = a.frame  # clip 0 starts at frame 0
        if a.clip == 0 and t == 12:
            np.testing.assert_array_equal(a.inputs, b.inputs)
            assert not np.array_equal(a.target, b.target)
        if a.clip == 0 and t < 12:
            np.testing.assert_array_equal(a.inputs, b.inputs)
            np.testing.assert_array_equal(a.target, b.target)


def test_symmetric_image_range():
    ds = dataset_with_clip_lengths([6])
    np.testing.assert_allclose(ds.stacked("symmetric")[..., 0], 2 * ds.frames[..., 0] - 1)
    with pytest.raises(ValueError):
        ds.stacked("bogus")


# -- CTDS container ---------------------------------------------------------
def test_ctds_round_trip_is_bitwise(tmp_path):
    ds = synth_generate(SMALL_TEST, seed=9)
    path = tmp_path / "d.ctds"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.equals(ds)
    assert dumps_dataset(back) == path.read_bytes()
    assert path.read_bytes()[:4] == b"CTDS"


def test_ctds_truncation_names_offset():
    blob = dumps_dataset(dataset_with_clip_lengths([6, 7]))
    with pytest.raises(DatasetFormatError, match=r"offset \d+"):
        loads_dataset(blob[:-10])


def test_ctds_version_mismatch():
    blob = bytearray(dumps_dataset(dataset_with_clip_lengths([6])))
    blob[4:8] = (7).to_bytes(4, "little")
    with pytest.raises(DatasetFormatError, match="unsupported CTDS version 7"):
        loads_dataset(bytes(blob))


def test_ctds_bad_magic():
    with pytest.raises(DatasetFormatError, match="magic"):
        loads_dataset(b"NOPE" + bytes(8))


def test_dataset_is_read_only():
    ds = dataset_with_clip_lengths([6])
    with pytest.raises(ValueError):
        ds.frames[0] = 1.0
