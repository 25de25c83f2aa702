import numpy as np
import pytest

from mmdit import synthface as sf
from mmdit.errors import ConfigError, ContractError
from mmdit.masks import region_masks_from_landmarks


class TestRender:
    def test_canonical_landmark_constants(self):
        _, lms = sf.render(sf.CANONICAL_PARAMS, 32)
        expected = np.array([
            [7, 9], [25, 9], [7, 13], [25, 13],
            [12, 21], [20, 21], [12, 25], [20, 25],
            [16, 3], [16, 29],
        ], dtype=float)
        assert np.array_equal(lms, expected)

    def test_rotation_equivariance(self):
        p = sf.FaceParams(rotation_deg=20.0)
        _, lms = sf.render(p, 32)
        _, base = sf.render(sf.CANONICAL_PARAMS, 32)
        phi = np.deg2rad(20.0)
        rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
        center = np.array([16.0, 16.0])
        expected = (base - center) @ rot.T + center
        assert np.abs(lms - expected).max() < 1e-12

    def test_mouth_openness_changes_only_inside_mouth_mask(self):
        closed, lms = sf.render(sf.FaceParams(mouth_open=0.0), 32)
        open_, _ = sf.render(sf.FaceParams(mouth_open=1.0), 32)
        masks = region_masks_from_landmarks(lms, 32)
        diff = np.any(closed != open_, axis=0)
        # the mask from m=1 landmarks covers every differing pixel
        open_masks = region_masks_from_landmarks(sf.render(sf.FaceParams(mouth_open=1.0), 32)[1], 32)
        assert np.all(open_masks.mouth[diff] == 1.0)
        del masks

    def test_eye_openness_never_touches_mouth_region(self):
        a, lms = sf.render(sf.FaceParams(eye_open=0.0), 32)
        b, _ = sf.render(sf.FaceParams(eye_open=1.0), 32)
        masks = region_masks_from_landmarks(sf.render(sf.CANONICAL_PARAMS, 32)[1], 32)
        diff = np.any(a != b, axis=0)
        assert not np.any(diff & (masks.mouth > 0))
        assert np.all(masks.eye[diff] == 1.0)

    def test_landmark_mask_consistency_exhaustive(self):
        # painted pixels for eyes/mouth, dilated by one, equal the masks
        def dilate(m):
            out = m.copy()
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    shifted = np.zeros_like(m)
                    src = m[max(-dr, 0):m.shape[0] - max(dr, 0), max(-dc, 0):m.shape[1] - max(dc, 0)]
                    shifted[max(dr, 0):m.shape[0] - max(-dr, 0), max(dc, 0):m.shape[1] - max(-dc, 0)] = src
                    out |= shifted
            return out

        for e in np.linspace(0, 1, 5):
            for m in np.linspace(0, 1, 5):
                p = sf.FaceParams(eye_open=float(e), mouth_open=float(m))
                img, lms = sf.render(p, 32)
                masks = region_masks_from_landmarks(lms, 32)
                skin = sf.skin_color(p.hue)
                lid = skin * 0.75
                painted_eye = (np.all(np.isclose(img, lid[:, None, None], atol=1e-12), axis=0)
                               | np.all(np.isclose(img, sf.PUPIL_COLOR[:, None, None], atol=1e-12), axis=0))
                painted_mouth = np.all(np.isclose(img, sf.MOUTH_COLOR[:, None, None], atol=1e-12), axis=0)
                assert np.array_equal(masks.eye > 0, dilate(painted_eye)), (e, m)
                assert np.array_equal(masks.mouth > 0, dilate(painted_mouth)), (e, m)

    def test_param_ranges_validated(self):
        with pytest.raises(ContractError):
            sf.FaceParams(eye_open=1.5)
        with pytest.raises(ContractError):
            sf.FaceParams(rotation_deg=60.0)
        with pytest.raises(ContractError):
            sf.FaceParams(scale=0.5)


class TestMakeClip:
    def test_single_frame_clip(self):
        clip = sf.make_clip(0, 1, "talking")
        assert clip.frames.shape[0] == 1
        assert clip.audio_track.shape == (1,)

    def test_fixed_seed_bitwise_identical(self):
        a = sf.make_clip(5, 6, "talking")
        b = sf.make_clip(5, 6, "talking")
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.landmarks, b.landmarks)
        assert np.array_equal(a.audio_track, b.audio_track)

    def test_silent_profile_has_zero_mouth(self):
        clip = sf.make_clip(3, 8, "silent")
        assert np.all(clip.audio_track == 0.0)
        assert all(p.mouth_open == 0.0 for p in clip.params)

    def test_audio_track_equals_mouth_series(self):
        clip = sf.make_clip(9, 12, "talking")
        assert np.array_equal(clip.audio_track, [p.mouth_open for p in clip.params])

    def test_unknown_profile_rejected(self):
        with pytest.raises(ConfigError):
            sf.make_clip(0, 4, "dancing")

    def test_moving_profile_varies_pose_only(self):
        clip = sf.make_clip(4, 8, "moving")
        rots = [p.rotation_deg for p in clip.params]
        assert max(rots) - min(rots) > 0.5
        assert len({p.mouth_open for p in clip.params}) == 1
        assert len({p.eye_open for p in clip.params}) == 1


class TestAudioEmbed:
    def test_equal_scalars_equal_embeddings(self):
        emb = sf.audio_embed([0.4, 0.4, 0.9], 16, seed=1)
        assert np.array_equal(emb[0], emb[1])
        assert not np.array_equal(emb[0], emb[2])

    def test_norm_ratio_matches_projection(self):
        u, p = sf.audio_projection(16, seed=1)
        emb0 = sf.audio_embed([0.0], 16, seed=1)[0]
        emb1 = sf.audio_embed([1.0], 16, seed=1)[0]
        assert abs(np.linalg.norm(emb0) - np.linalg.norm(p)) < 1e-12
        assert abs(np.linalg.norm(emb1) - np.linalg.norm(u + p)) < 1e-12
        ratio = np.linalg.norm(emb1) / np.linalg.norm(emb0)
        assert abs(ratio - np.linalg.norm(u + p) / np.linalg.norm(p)) < 1e-12

    def test_frozen_function_of_seed(self):
        a = sf.audio_embed([0.3, 0.7], 16, seed=4)
        b = sf.audio_embed([0.3, 0.7], 16, seed=4)
        c = sf.audio_embed([0.3, 0.7], 16, seed=5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_injective_on_distinct_scalars(self):
        emb = sf.audio_embed(np.linspace(0, 1, 11), 16, seed=2)
        flat = emb.reshape(11, -1)
        for i in range(11):
            for j in range(i + 1, 11):
                assert not np.array_equal(flat[i], flat[j])

    def test_min_width_enforced(self):
        with pytest.raises(ContractError):
            sf.audio_embed([0.1], 2, seed=0)


class TestClipDiskRoundTrip:
    def test_bit_exact_round_trip(self, tmp_path):
        clip = sf.make_clip(8, 5, "talking")
        d1 = tmp_path / "c1"
        d2 = tmp_path / "c2"
        sf.save_clip(clip, str(d1))
        loaded = sf.load_clip(str(d1))
        sf.save_clip(loaded, str(d2))
        for rel in ["landmarks.json", "audio.csv", "params.json"] + [
                f"frames/frame_{i:04d}.ppm" for i in range(5)]:
            assert (d1 / rel).read_bytes() == (d2 / rel).read_bytes(), rel

    def test_corpus_round_trip(self, tmp_path):
        clips = sf.generate_corpus(3, 4, ["talking", "silent"], seed=7)
        sf.save_corpus(clips, str(tmp_path / "corpus"), seed=7)
        loaded = sf.load_corpus(str(tmp_path / "corpus"))
        assert len(loaded) == 3
        assert loaded[1].profile == "silent"
        assert np.array_equal(loaded[0].landmarks, clips[0].landmarks)

    def test_corpus_determinism(self):
        a = sf.generate_corpus(2, 3, ["talking"], seed=11)
        b = sf.generate_corpus(2, 3, ["talking"], seed=11)
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.frames, cb.frames)
