import itertools

import numpy as np
import pytest

from mmdit import tensor as T
from mmdit.errors import ConfigError, ContractError, GeometryError
from mmdit.masks import (EYE_AND_MOUTH, EYE_ONLY, MOUTH_ONLY, DrivingSelection,
                         compose_driving, loss_mask_for, masked_mse, pool_to_tokens,
                         region_masks_from_landmarks, sample_dropout)
from mmdit.synthface import CANONICAL_PARAMS, render


@pytest.fixture(scope="module")
def canonical():
    img, lms = render(CANONICAL_PARAMS, 32)
    return img, lms, region_masks_from_landmarks(lms, 32, patch=2)


class TestRegionMasks:
    def test_canonical_extents(self, canonical):
        _, _, masks = canonical
        eye_rows = np.flatnonzero(masks.eye.any(axis=1))
        mouth_rows = np.flatnonzero(masks.mouth.any(axis=1))
        assert eye_rows.min() == 8 and eye_rows.max() == 14
        assert mouth_rows.min() == 20 and mouth_rows.max() == 26

    def test_translation_equivariance(self, canonical):
        _, lms, masks = canonical
        shifted = region_masks_from_landmarks(lms + np.array([2.0, 2.0]), 32, patch=2)
        assert np.array_equal(shifted.eye, np.roll(np.roll(masks.eye, 2, 0), 2, 1))
        assert np.array_equal(shifted.mouth, np.roll(np.roll(masks.mouth, 2, 0), 2, 1))

    def test_degenerate_point_regions_give_3x3(self):
        lms = np.zeros((10, 2))
        lms[0:4] = [10.0, 10.0]   # eye landmarks collapse to one point
        lms[4:8] = [10.0, 24.0]   # mouth landmarks collapse to another
        lms[8:] = [[16.0, 3.0], [16.0, 29.0]]
        masks = region_masks_from_landmarks(lms, 32, patch=2)
        assert masks.eye.sum() == 9
        assert np.array_equal(np.flatnonzero(masks.eye.any(axis=0)), [9, 10, 11])
        assert np.array_equal(np.flatnonzero(masks.eye.any(axis=1)), [9, 10, 11])
        assert masks.mouth.sum() == 9

    def test_overlapping_regions_raise(self):
        lms = np.zeros((10, 2))
        lms[0:4] = [[8, 8], [24, 8], [8, 20], [24, 20]]
        lms[4:8] = [[10, 12], [20, 12], [10, 18], [20, 18]]  # inside the eye box
        with pytest.raises(GeometryError):
            region_masks_from_landmarks(lms, 32, patch=2)

    def test_midline_clipping_keeps_masks_disjoint(self):
        lms = np.zeros((10, 2))
        lms[0:4] = [[7, 9], [25, 9], [7, 13], [25, 13]]
        lms[4:8] = [[12, 15], [20, 15], [12, 25], [20, 25]]  # dilated boxes touch
        masks = region_masks_from_landmarks(lms, 32, patch=2)
        assert not np.any((masks.eye > 0) & (masks.mouth > 0))

    def test_pixel_masks_binary_and_disjoint(self, canonical):
        _, _, masks = canonical
        for m in (masks.eye, masks.mouth):
            assert set(np.unique(m)) <= {0.0, 1.0}
        assert not np.any((masks.eye > 0) & (masks.mouth > 0))


class TestTokenPooling:
    def test_exhaustive_2x2_patterns(self):
        for bits in itertools.product([0.0, 1.0], repeat=4):
            mask = np.array(bits).reshape(2, 2)
            token = pool_to_tokens(mask, 2)
            assert token.shape == (1,)
            assert token[0] == bool(mask.any())

    def test_token_grid_layout(self, canonical):
        _, _, masks = canonical
        grid = masks.token_eye.reshape(16, 16)
        rows = np.flatnonzero(grid.any(axis=1))
        assert rows.min() == 4 and rows.max() == 7  # pixel rows 8..14 / patch 2


class TestComposeDriving:
    def test_full_selection_is_identity_under_full_masks(self, canonical):
        img, _, masks = canonical
        full = masks
        union = full.union(EYE_AND_MOUTH)
        out = compose_driving(img, full, EYE_AND_MOUTH)
        assert np.array_equal(out, img * union)

    def test_eye_only_zeroes_the_rest(self, canonical):
        img, _, masks = canonical
        out = compose_driving(img, masks, EYE_ONLY)
        outside = masks.eye == 0
        assert np.all(out[:, outside] == 0.0)
        inside = masks.eye == 1
        assert np.array_equal(out[:, inside], img[:, inside])

    def test_zero_image_annihilates(self, canonical):
        _, _, masks = canonical
        out = compose_driving(np.zeros((3, 32, 32)), masks, MOUTH_ONLY)
        assert np.all(out == 0.0)

    def test_union_additivity(self, canonical):
        img, _, masks = canonical
        both = compose_driving(img, masks, EYE_AND_MOUTH)
        split = compose_driving(img, masks, EYE_ONLY) + compose_driving(img, masks, MOUTH_ONLY)
        assert np.array_equal(both, split)


class TestMaskedMse:
    def test_all_ones_is_plain_mse(self):
        rng = np.random.default_rng(0)
        pred = T.Tensor(rng.standard_normal((4, 4)))
        target = rng.standard_normal((4, 4))
        loss = masked_mse(pred, target, np.ones((4, 4)))
        assert abs(loss.item() - np.mean((pred.data - target) ** 2)) < 1e-15

    def test_zero_residual(self):
        x = np.arange(16.0).reshape(4, 4)
        assert masked_mse(T.Tensor(x), x, np.ones((4, 4))).item() == 0.0

    def test_direct_sum_oracle(self):
        pred = T.Tensor([1.0, 2.0, 3.0, 4.0])
        loss = masked_mse(pred, np.zeros(4), np.array([1.0, 1.0, 0.0, 0.0]))
        assert abs(loss.item() - 2.5) < 1e-15

    def test_gradient_exactly_zero_where_masked(self):
        rng = np.random.default_rng(1)
        mask = (rng.random((6, 6)) > 0.5).astype(float)
        mask[0, 0] = 1.0
        pred = T.Tensor(rng.standard_normal((6, 6)), requires_grad=True)
        masked_mse(pred, rng.standard_normal((6, 6)), mask).backward()
        assert np.all(pred.grad[mask == 0] == 0.0)
        assert np.any(pred.grad[mask == 1] != 0.0)

    def test_equals_restricted_plain_mse(self):
        rng = np.random.default_rng(2)
        pred = rng.standard_normal((5, 7))
        target = rng.standard_normal((5, 7))
        mask = (rng.random((5, 7)) > 0.4).astype(float)
        mask[2, 2] = 1.0
        loss = masked_mse(T.Tensor(pred), target, mask).item()
        restricted = np.mean((pred[mask == 1] - target[mask == 1]) ** 2)
        assert abs(loss - restricted) < 1e-12

    def test_all_zero_mask_rejected(self):
        with pytest.raises(ContractError):
            masked_mse(T.Tensor(np.ones((2, 2))), np.zeros((2, 2)), np.zeros((2, 2)))


class TestSampleDropout:
    def test_stage1_uniform_over_three_subsets(self):
        rng = np.random.default_rng(42)
        counts = {EYE_ONLY: 0, MOUTH_ONLY: 0, EYE_AND_MOUTH: 0}
        n = 30000
        for _ in range(n):
            counts[sample_dropout(rng, 1)] += 1
        for sel, c in counts.items():
            assert abs(c / n - 1 / 3) < 0.01, (sel, c / n)

    def test_stage2_mixed_always_eye(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert sample_dropout(rng, 2, mixed=True) == EYE_ONLY

    def test_determinism(self):
        def draw_sequence():
            rng = np.random.default_rng(7)
            return [sample_dropout(rng, 1) for _ in range(50)]

        assert draw_sequence() == draw_sequence()

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError):
            sample_dropout(np.random.default_rng(0), 4)

    def test_selection_must_be_nonempty(self):
        with pytest.raises(ContractError):
            DrivingSelection(frozenset())


class TestMaskFixtures:
    def test_archive_round_trip(self, tmp_path, canonical):
        from mmdit.masks import load_mask_fixture, save_mask_fixture

        _, _, masks = canonical
        path = tmp_path / "fixture.mmt"
        save_mask_fixture(str(path), masks)
        loaded = load_mask_fixture(str(path))
        assert np.array_equal(loaded.eye, masks.eye)
        assert np.array_equal(loaded.mouth, masks.mouth)
        assert np.array_equal(loaded.token_eye, masks.token_eye)
        assert loaded.patch == masks.patch


class TestLossMaskFor:
    def test_eye_only_no_audio_excludes_mouth(self, canonical):
        _, _, masks = canonical
        mask = loss_mask_for(EYE_ONLY, False, masks)
        assert np.array_equal(mask, 1.0 - masks.mouth)

    def test_mouth_driven_gives_full_mask(self, canonical):
        _, _, masks = canonical
        assert np.all(loss_mask_for(EYE_AND_MOUTH, False, masks) == 1.0)
        assert np.all(loss_mask_for(MOUTH_ONLY, False, masks) == 1.0)

    def test_audio_present_gives_full_mask(self, canonical):
        _, _, masks = canonical
        assert np.all(loss_mask_for(EYE_ONLY, True, masks) == 1.0)
        assert np.all(loss_mask_for(None, True, masks) == 1.0)
