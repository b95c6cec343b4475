import numpy as np
import pytest
from hypothesis import given, strategies as st

from blur2vid.datagen import (DatasetError, SceneSpec, SpriteSpec, augment,
                              form_blur, random_scene, render_background,
                              read_dataset, read_manifest, synth_sequence,
                              write_dataset)
from blur2vid.models import BlurPair, VideoSequence


def scene(velocity=(2.0, 0.0), radius=8.0, frames=5, size=64,
          shape="disk", position=(24.0, 32.0)):
    return SceneSpec(size=size, frames=frames, background_seed=3, sprites=[
        SpriteSpec(shape, 7, position, velocity, radius=radius)])


def centroid_track(seq, spec, seed):
    """Intensity-weighted centroids of the background-subtracted frames."""
    bg = render_background(spec, seed)
    xs, ys = [], []
    for frame in seq.frames:
        w = np.abs(frame.astype(np.float64) - bg).sum(axis=0)
        total = w.sum()
        gy, gx = np.mgrid[0:w.shape[0], 0:w.shape[1]]
        xs.append((w * gx).sum() / total)
        ys.append((w * gy).sum() / total)
    return np.array(xs), np.array(ys)


def test_static_scene_identical_frames():
    seq = synth_sequence(scene(velocity=(0.0, 0.0)), seed=9)
    for f in seq.frames[1:]:
        np.testing.assert_array_equal(f, seq.frames[0])


def test_centroid_tracks_velocity():
    spec = scene(velocity=(2.0, 0.0))
    seq = synth_sequence(spec, seed=5)
    xs, ys = centroid_track(seq, spec, 5)
    np.testing.assert_allclose(np.diff(xs), 2.0, atol=0.1)
    np.testing.assert_allclose(np.diff(ys), 0.0, atol=0.1)


def test_centroid_tracks_diagonal_subpixel_velocity():
    spec = scene(velocity=(1.3, -0.7), position=(26.0, 36.0), shape="square")
    seq = synth_sequence(spec, seed=2)
    xs, ys = centroid_track(seq, spec, 2)
    np.testing.assert_allclose(np.diff(xs), 1.3, atol=0.1)
    np.testing.assert_allclose(np.diff(ys), -0.7, atol=0.1)


def test_synth_deterministic():
    a = synth_sequence(scene(), seed=11)
    b = synth_sequence(scene(), seed=11)
    for fa, fb in zip(a.frames, b.frames):
        np.testing.assert_array_equal(fa, fb)


def test_trajectory_leaving_canvas_rejected():
    bad = scene(velocity=(8.0, 0.0), position=(40.0, 32.0))
    with pytest.raises(ValueError, match="leaves the canvas"):
        synth_sequence(bad, seed=0)


def test_per_frame_displacement_limit():
    # fits inside the canvas but moves faster than size/8 per frame
    bad = SceneSpec(size=64, frames=3, sprites=[
        SpriteSpec("disk", 1, (12.0, 32.0), (9.0, 0.0), radius=6.0)])
    with pytest.raises(ValueError, match="per-frame limit"):
        bad.validate()


def test_form_blur_static_equals_frames():
    seq = synth_sequence(scene(velocity=(0.0, 0.0)), seed=1)
    pair = form_blur(seq)
    np.testing.assert_allclose(pair.blurred, seq.frames[0], atol=1e-7)


def test_form_blur_two_frame_average():
    frames = [np.zeros((3, 8, 8), np.float32), np.ones((3, 8, 8), np.float32)]
    pair = form_blur(VideoSequence(frames, center_index=0))
    np.testing.assert_allclose(pair.blurred, 0.5, atol=1e-7)


def test_form_blur_matches_loop_average(rng):
    frames = [rng.uniform(0, 1, (3, 6, 6)).astype(np.float32)
              for _ in range(5)]
    pair = form_blur(VideoSequence(frames))
    want = np.zeros((3, 6, 6), np.float64)
    for f in frames:
        want += f
    np.testing.assert_allclose(pair.blurred, want / 5, atol=1e-6)


def test_augment_double_flip_is_identity():
    pair = form_blur(synth_sequence(scene(), seed=4))
    once = augment(pair, seed=0, flip=True, zoom=1.0)
    twice = augment(once, seed=0, flip=True, zoom=1.0)
    np.testing.assert_array_equal(twice.blurred, pair.blurred)
    for fa, fb in zip(twice.source.frames, pair.source.frames):
        np.testing.assert_array_equal(fa, fb)


def test_augment_identity_settings():
    pair = form_blur(synth_sequence(scene(), seed=4))
    out = augment(pair, seed=0, flip=False, zoom=1.0)
    np.testing.assert_array_equal(out.blurred, pair.blurred)


@given(st.integers(0, 400))
def test_augment_preserves_blur_identity(seed):
    pair = form_blur(synth_sequence(scene(velocity=(1.5, 1.0)), seed=3))
    out = augment(pair, seed=seed)
    mean = np.stack(out.source.frames).mean(axis=0)
    assert np.abs(out.blurred - mean).max() <= 1e-5


def test_augment_zoom_out_degenerates_to_identity():
    pair = form_blur(synth_sequence(scene(), seed=4))
    out = augment(pair, seed=0, flip=False, zoom=0.2)
    np.testing.assert_array_equal(out.blurred, pair.blurred)


def test_dataset_roundtrip(tmp_path, rng):
    pairs = [form_blur(synth_sequence(scene(velocity=(v, 0.0)), seed=i))
             for i, v in enumerate((0.5, 1.5, 2.5))]
    prov = [(scene(velocity=(v, 0.0)), i)
            for i, v in enumerate((0.5, 1.5, 2.5))]
    write_dataset(pairs, tmp_path, prov)
    back = read_dataset(tmp_path)
    assert len(back) == 3
    for orig, loaded in zip(pairs, back):
        assert len(loaded.source.frames) == 5
        for fa, fb in zip(orig.source.frames, loaded.source.frames):
            assert np.abs(fa - fb).max() <= 1.0 / 255 + 1e-6
        assert np.abs(orig.blurred - loaded.blurred).max() <= 1.0 / 255 + 1e-6


def test_manifest_carries_regenerable_spec(tmp_path):
    spec = scene(velocity=(1.0, 0.5))
    pair = form_blur(synth_sequence(spec, seed=21))
    write_dataset([pair], tmp_path, [(spec, 21)])
    manifest = read_manifest(tmp_path)
    entry = manifest["sequences"][0]
    regen = synth_sequence(SceneSpec.from_dict(entry["spec"]), entry["seed"])
    for fa, fb in zip(pair.source.frames, regen.frames):
        np.testing.assert_array_equal(fa, fb)


def test_empty_dataset_error(tmp_path):
    with pytest.raises(DatasetError, match="empty dataset"):
        read_dataset(tmp_path)


def test_frame_count_mismatch_error(tmp_path):
    pair = form_blur(synth_sequence(scene(), seed=4))
    write_dataset([pair], tmp_path, [(scene(), 4)])
    (tmp_path / "seq_00000" / "frame_04.png").unlink()
    with pytest.raises(DatasetError, match="frames"):
        read_dataset(tmp_path)


def test_sequence_count_mismatch_error(tmp_path):
    pair = form_blur(synth_sequence(scene(), seed=4))
    write_dataset([pair], tmp_path, [(scene(), 4)])
    (tmp_path / "seq_00777").mkdir()
    with pytest.raises(DatasetError, match="sequences"):
        read_dataset(tmp_path)


def test_random_scene_validates(rng):
    for _ in range(20):
        spec = random_scene(rng, 64, 5)
        spec.validate()
        seq = synth_sequence(spec, seed=int(rng.integers(1 << 30)))
        assert len(seq.frames) == 5
        assert seq.frames[0].shape == (3, 64, 64)
