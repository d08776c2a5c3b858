import json
import os

import numpy as np
import pytest

from pvseg.data_synth import (
    ConfigurationError,
    DatasetIntegrityError,
    SynthConfig,
    generate_clip,
    object_states,
    rasterize_shape,
    read_dataset,
    synth_dataset,
    write_dataset,
)


def test_determinism_bit_identical():
    cfg = SynthConfig(num_frames=6, height=64, width=64, num_objects=2, background="noise")
    clip1, ann1 = generate_clip(cfg, seed=11)
    clip2, ann2 = generate_clip(cfg, seed=11)
    assert np.array_equal(clip1.frames, clip2.frames)
    assert np.array_equal(ann1.masks, ann2.masks)
    assert np.array_equal(ann1.visibility, ann2.visibility)


def test_different_seed_differs():
    cfg = SynthConfig(num_frames=4)
    clip1, _ = generate_clip(cfg, seed=1)
    clip2, _ = generate_clip(cfg, seed=2)
    assert not np.array_equal(clip1.frames, clip2.frames)


def test_occlusion_schedule_forces_visibility():
    cfg = SynthConfig(num_frames=8, occlusion_schedule=[(0, 3, 5)])
    _, ann = generate_clip(cfg, seed=3)
    assert ann.visibility[0].tolist() == [1, 1, 1, 0, 0, 0, 1, 1]
    assert ann.masks[0, 3:6].sum() == 0


def brute_force_disk(cx, cy, r, h, w):
    """Independent per-pixel x^2 + y^2 <= r^2 scan."""
    mask = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            if (x - cx) ** 2 + (y - cy) ** 2 <= r * r:
                mask[y, x] = 1
    return mask


def test_disk_rasterization_matches_per_pixel_scan():
    # Fixed radius-4 disk, then a generated clip's drawn geometry.
    oracle = brute_force_disk(20.0, 30.5, 4.0, 64, 64)
    got = rasterize_shape("disk", (20.0, 30.5), 4.0, 1.0, 64, 64)
    assert np.array_equal(got.astype(np.uint8), oracle)
    assert got.sum() == oracle.sum()

    cfg = SynthConfig(num_frames=1, height=64, width=64, num_objects=1, shape_kind="disk")
    _, ann = generate_clip(cfg, seed=5)
    st = object_states(cfg, 5)[0]
    cx, cy = st.centers[0]
    oracle = brute_force_disk(cx, cy, st.size, 64, 64)
    assert ann.masks[0, 0].sum() == oracle.sum()
    assert np.array_equal(ann.masks[0, 0], oracle)


def test_mask_visibility_consistency_random_configs():
    rng = np.random.default_rng(0)
    for trial in range(10):
        cfg = SynthConfig(
            num_frames=int(rng.integers(1, 10)),
            height=64,
            width=96,
            num_objects=int(rng.integers(1, 4)),
            shape_kind=["disk", "rectangle", "l_shape"][trial % 3],
            background=["flat", "noise"][trial % 2],
        )
        _, ann = generate_clip(cfg, seed=trial)
        derived = (ann.masks.sum(axis=(2, 3)) > 0).astype(np.uint8)
        assert np.array_equal(derived, ann.visibility)


def test_reappearance_is_kinematic():
    # Huge frame, fixed velocity, no reflections: centers integrate linearly
    # straight through the occlusion window.
    cfg = SynthConfig(
        num_frames=8,
        height=256,
        width=256,
        num_objects=1,
        motion=[(2.0, 1.0)],
        occlusion_schedule=[(0, 2, 4)],
    )
    st = object_states(cfg, 9)[0]
    for t in range(8):
        assert np.allclose(st.centers[t], st.centers[0] + t * np.array([2.0, 1.0]))
    _, ann = generate_clip(cfg, 9)
    assert ann.visibility[0].tolist() == [1, 1, 0, 0, 0, 1, 1, 1]


def test_boundary_reflection_keeps_object_in_frame():
    cfg = SynthConfig(num_frames=32, height=64, width=64, num_objects=1, motion=[(7.3, -5.1)])
    _, ann = generate_clip(cfg, seed=2)
    assert ann.visibility[0].all()  # never leaves the frame
    st = object_states(cfg, 2)[0]
    assert (st.centers[:, 0] >= 0).all() and (st.centers[:, 0] <= 63).all()
    assert (st.centers[:, 1] >= 0).all() and (st.centers[:, 1] <= 63).all()


def test_frames_in_unit_range_and_finite():
    clip, _ = generate_clip(SynthConfig(background="noise"), seed=4)
    assert np.isfinite(clip.frames).all()
    assert clip.frames.min() >= 0.0 and clip.frames.max() <= 1.0


@pytest.mark.parametrize(
    "kwargs",
    [
        {"num_frames": 0},
        {"channels": 4},
        {"occlusion_schedule": [(0, 5, 3)]},
        {"occlusion_schedule": [(0, 0, 99)]},
        {"occlusion_schedule": [(7, 0, 1)]},
        {"shape_kind": "triangle"},
        {"motion": [(1.0, 1.0), (2.0, 2.0)]},
    ],
)
def test_invalid_config_raises(kwargs):
    with pytest.raises(ConfigurationError):
        generate_clip(SynthConfig(**kwargs), seed=0)


def test_write_read_round_trip_exact(tmp_path):
    cfg = SynthConfig(num_frames=3, height=32, width=64, num_objects=2, background="noise")
    clip, ann = generate_clip(cfg, seed=8)
    root = str(tmp_path / "ds")
    manifest = write_dataset([clip], [ann], root)
    assert os.path.isfile(manifest)
    clips2, anns2 = read_dataset(root)
    assert len(clips2) == 1
    assert np.array_equal(clips2[0].frames, clip.frames)
    assert np.array_equal(anns2[0].masks, ann.masks)


def test_dataset_layout(tmp_path):
    clip, ann = generate_clip(SynthConfig(num_frames=2, num_objects=2), seed=0)
    root = str(tmp_path / "ds")
    write_dataset([clip], [ann], root)
    assert os.path.isfile(os.path.join(root, "clip_0", "frames", "000000.png"))
    assert os.path.isfile(os.path.join(root, "clip_0", "masks", "obj_1", "000001.png"))
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    entry = manifest["clips"][0]
    assert entry == {"id": "clip_0", "n": 2, "h": 64, "w": 64, "num_objects": 2}


def test_read_empty_directory_errors(tmp_path):
    with pytest.raises(DatasetIntegrityError, match="0 clips"):
        read_dataset(str(tmp_path))


def test_missing_mask_file_named_in_error(tmp_path):
    clips, anns = synth_dataset({"num_clips": 3, "num_frames": 2}, seed=0)
    root = str(tmp_path / "ds")
    write_dataset(clips, anns, root)
    victim = os.path.join(root, "clip_1", "masks", "obj_0", "000001.png")
    os.remove(victim)
    with pytest.raises(DatasetIntegrityError, match="clip_1.*obj_0.*000001"):
        read_dataset(root)


def test_synth_dataset_deterministic_and_occlusions_bounded():
    spec = {"num_clips": 6, "num_frames": 8, "occlusion_prob": 1.0}
    a_clips, a_anns = synth_dataset(spec, seed=3)
    b_clips, b_anns = synth_dataset(spec, seed=3)
    for a, b in zip(a_clips, b_clips):
        assert np.array_equal(a.frames, b.frames)
    for ann in a_anns:
        # First and last frames stay visible so occluded objects reappear.
        assert ann.visibility[:, 0].all()
        assert ann.visibility[:, -1].all()
        assert (ann.visibility == 0).any()  # occlusion_prob=1 forces a gap

    with pytest.raises(ConfigurationError):
        synth_dataset({"bogus_key": 1}, seed=0)
