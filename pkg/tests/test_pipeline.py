"""CT pipeline: HU windowing, slice stacking/sampling, augmentation,
thresholding, connected components vs a flood-fill oracle, bounding boxes,
the two-stage merge, and the synthetic phantoms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fednet.pipeline import (Bbox3, EmptyMaskError, SliceSample, bbox_of_mask,
                             connected_components_3d, flip_augment,
                             hierarchical_postprocess, hu_window_normalize,
                             largest_component, sample_slices,
                             stack_adjacent_slices, threshold_mask)
from fednet.synth import synth_generate

from oracles import flood_fill_labels

RNG = np.random.default_rng(13)


class TestHuWindowNormalize:
    @pytest.mark.parametrize("hu,expected", [
        (-200, 0.0), (250, 1.0), (-300, 0.0), (400, 1.0), (25, 0.5), (-1000, 0.0),
    ])
    def test_anchors(self, hu, expected):
        out = hu_window_normalize(np.array([[[hu]]], dtype=np.int16))
        assert out[0, 0, 0] == pytest.approx(expected, abs=1e-7)

    def test_output_range_and_dtype(self):
        vol = RNG.integers(-2000, 3000, (4, 5, 6)).astype(np.int16)
        out = hu_window_normalize(vol)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(-1500, 1500), st.integers(0, 500))
    def test_monotone(self, hu, step):
        lo = hu_window_normalize(np.array([[[hu]]], dtype=np.float32))
        hi = hu_window_normalize(np.array([[[hu + step]]], dtype=np.float32))
        assert hi[0, 0, 0] >= lo[0, 0, 0]


class TestStackAdjacentSlices:
    def test_bottom_edge_replicates(self):
        vol = RNG.uniform(size=(4, 3, 3)).astype(np.float32)
        out = stack_adjacent_slices(vol, 0)
        np.testing.assert_array_equal(out[0], vol[0])
        np.testing.assert_array_equal(out[1], vol[0])
        np.testing.assert_array_equal(out[2], vol[1])

    def test_interior_slices_exact(self):
        vol = RNG.uniform(size=(5, 2, 2)).astype(np.float32)
        out = stack_adjacent_slices(vol, 2)
        np.testing.assert_array_equal(out, vol[1:4])

    def test_single_slice_volume_replicates_everywhere(self):
        vol = RNG.uniform(size=(1, 3, 3)).astype(np.float32)
        out = stack_adjacent_slices(vol, 0)
        for c in range(3):
            np.testing.assert_array_equal(out[c], vol[0])

    def test_out_of_range_rejected(self):
        with pytest.raises(IndexError):
            stack_adjacent_slices(np.zeros((3, 2, 2)), 3)


class TestSampleSlices:
    def _volumes(self, nz=20, positive_every=2):
        image = RNG.uniform(size=(nz, 4, 4)).astype(np.float32)
        target = np.zeros((nz, 4, 4), dtype=np.uint8)
        target[::positive_every, 1, 1] = 1
        return image, target

    def test_all_positive_kept_at_probability_one(self):
        image, target = self._volumes(positive_every=1)
        out = sample_slices(image, target, seed=0, p_pos=1.0, p_neg=0.0)
        assert [s.z_index for s in out] == list(range(20))
        assert all(s.is_positive for s in out)

    def test_zero_probabilities_keep_nothing(self):
        image, target = self._volumes()
        assert sample_slices(image, target, seed=0, p_pos=0.0, p_neg=0.0) == []

    def test_deterministic_per_seed(self):
        image, target = self._volumes()
        a = [s.z_index for s in sample_slices(image, target, seed=9)]
        b = [s.z_index for s in sample_slices(image, target, seed=9)]
        c = [s.z_index for s in sample_slices(image, target, seed=10)]
        assert a == b
        assert a == sorted(a)
        assert a != c

    def test_eligibility_mask_restricts_and_keeps_draw_stream(self):
        image, target = self._volumes()
        eligible = np.zeros(20, dtype=bool)
        eligible[5:10] = True
        out = sample_slices(image, target, seed=3, p_pos=1.0, p_neg=1.0, eligible=eligible)
        assert {s.z_index for s in out} == set(range(5, 10))

    def test_bernoulli_statistics(self):
        nz = 10000
        image = np.zeros((nz, 2, 2), dtype=np.float32)
        target = np.zeros((nz, 2, 2), dtype=np.uint8)
        target[:, 0, 0] = 1  # every slice positive
        kept = len(sample_slices(image, target, seed=1234, p_pos=0.9, p_neg=0.0))
        assert abs(kept / nz - 0.9) <= 0.01
        target[...] = 0  # every slice negative
        kept = len(sample_slices(image, target, seed=1234, p_pos=0.0, p_neg=0.1))
        assert abs(kept / nz - 0.1) <= 0.01

    def test_channel_structure(self):
        image, target = self._volumes()
        sample = sample_slices(image, target, seed=0, p_pos=1.0, p_neg=1.0)[3]
        np.testing.assert_array_equal(sample.image,
                                      stack_adjacent_slices(image, sample.z_index))
        assert sample.target.shape == (1, 4, 4)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dims mismatch"):
            sample_slices(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), seed=0)


class _FixedRng:
    """Deterministic stand-in for a Generator: yields preset uniforms."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


class TestFlipAugment:
    def _sample(self):
        image = RNG.uniform(size=(3, 4, 5)).astype(np.float32)
        target = (RNG.uniform(size=(1, 4, 5)) > 0.5).astype(np.float32)
        return SliceSample(image, target, 7, True)

    def test_double_flip_is_identity(self):
        s = self._sample()
        once = flip_augment(s, _FixedRng([0.0, 0.0]))      # flip both axes
        twice = flip_augment(once, _FixedRng([0.0, 0.0]))
        np.testing.assert_array_equal(twice.image, s.image)
        np.testing.assert_array_equal(twice.target, s.target)

    def test_image_and_target_flip_together(self):
        s = self._sample()
        flipped = flip_augment(s, _FixedRng([0.3, 0.8]))   # flip W only
        np.testing.assert_array_equal(flipped.image, np.flip(s.image, axis=2))
        np.testing.assert_array_equal(flipped.target, np.flip(s.target, axis=2))

    def test_no_flip_path(self):
        s = self._sample()
        out = flip_augment(s, _FixedRng([0.9, 0.9]))
        np.testing.assert_array_equal(out.image, s.image)
        assert out.z_index == s.z_index and out.is_positive == s.is_positive

    def test_seeded_generator_reproducible(self):
        s = self._sample()
        a = flip_augment(s, np.random.default_rng(5))
        b = flip_augment(s, np.random.default_rng(5))
        np.testing.assert_array_equal(a.image, b.image)


class TestThresholdMask:
    def test_ge_convention(self):
        out = threshold_mask(np.array([0.4, 0.5, 0.6]), 0.5)
        np.testing.assert_array_equal(out, [0, 1, 1])

    def test_zero_threshold_keeps_all(self):
        out = threshold_mask(RNG.uniform(size=8), 0.0)
        assert out.all()

    def test_above_one_threshold_keeps_none(self):
        out = threshold_mask(RNG.uniform(size=8), np.nextafter(1.0, 2.0))
        assert not out.any()


class TestConnectedComponents:
    def test_single_voxel(self):
        mask = np.zeros((3, 3, 3), dtype=np.uint8)
        mask[1, 1, 1] = 1
        labels, sizes = connected_components_3d(mask)
        assert labels[1, 1, 1] == 1
        np.testing.assert_array_equal(sizes, [1])

    def test_edge_touching_voxels_split_under_6_connectivity(self):
        mask = np.zeros((1, 2, 2), dtype=np.uint8)
        mask[0, 0, 0] = mask[0, 1, 1] = 1  # share an edge, not a face
        _, sizes6 = connected_components_3d(mask, connectivity=6)
        assert len(sizes6) == 2
        _, sizes26 = connected_components_3d(mask, connectivity=26)
        assert len(sizes26) == 1

    def test_labels_in_discovery_order(self):
        mask = np.zeros((1, 1, 5), dtype=np.uint8)
        mask[0, 0, 4] = 1
        mask[0, 0, 0] = 1
        mask[0, 0, 2] = 1
        labels, sizes = connected_components_3d(mask)
        assert labels[0, 0, 0] == 1 and labels[0, 0, 2] == 2 and labels[0, 0, 4] == 3
        np.testing.assert_array_equal(sizes, [1, 1, 1])

    @pytest.mark.parametrize("connectivity", [6, 26])
    def test_matches_flood_fill_oracle(self, connectivity):
        rng = np.random.default_rng(99)
        for _ in range(25):
            mask = (rng.uniform(size=(16, 16, 16)) > 0.72).astype(np.uint8)
            labels, sizes = connected_components_3d(mask, connectivity)
            expected = flood_fill_labels(mask, connectivity)
            np.testing.assert_array_equal(labels, expected)
            np.testing.assert_array_equal(
                sizes, np.bincount(expected.ravel())[1:])

    def test_partition_covers_foreground_exactly(self):
        mask = (RNG.uniform(size=(8, 8, 8)) > 0.6).astype(np.uint8)
        labels, sizes = connected_components_3d(mask)
        np.testing.assert_array_equal(labels > 0, mask.astype(bool))
        assert int(sizes.sum()) == int(mask.sum())

    def test_invalid_connectivity_rejected(self):
        with pytest.raises(ValueError, match="connectivity"):
            connected_components_3d(np.zeros((2, 2, 2)), connectivity=18)


class TestLargestComponent:
    def test_single_component_unchanged(self):
        mask = np.zeros((3, 3, 3), dtype=np.uint8)
        mask[1, 1, :] = 1
        np.testing.assert_array_equal(largest_component(mask), mask)

    def test_keeps_biggest(self):
        mask = np.zeros((1, 1, 9), dtype=np.uint8)
        mask[0, 0, 0:5] = 1
        mask[0, 0, 6:9] = 1
        out = largest_component(mask)
        assert out[0, 0, 0:5].all() and not out[0, 0, 6:9].any()

    def test_tie_keeps_earliest_discovered(self):
        mask = np.zeros((1, 1, 5), dtype=np.uint8)
        mask[0, 0, 0:2] = 1
        mask[0, 0, 3:5] = 1
        out = largest_component(mask)
        assert out[0, 0, 0:2].all() and not out[0, 0, 3:5].any()

    def test_empty_stays_empty(self):
        out = largest_component(np.zeros((2, 2, 2), dtype=np.uint8))
        assert out.shape == (2, 2, 2) and not out.any()


class TestBbox:
    def test_single_voxel_degenerate_box(self):
        mask = np.zeros((4, 5, 6), dtype=np.uint8)
        mask[2, 3, 4] = 1
        box = bbox_of_mask(mask)
        assert box.lo == (2, 3, 4) and box.hi == (2, 3, 4)

    def test_two_opposite_corners_span_volume(self):
        mask = np.zeros((3, 4, 5), dtype=np.uint8)
        mask[0, 0, 0] = mask[2, 3, 4] = 1
        box = bbox_of_mask(mask)
        assert box.lo == (0, 0, 0) and box.hi == (2, 3, 4)

    def test_matches_scan_oracle(self):
        mask = (RNG.uniform(size=(6, 7, 8)) > 0.8).astype(np.uint8)
        if not mask.any():
            mask[3, 3, 3] = 1
        box = bbox_of_mask(mask)
        los, his = [], []
        for axis_points in zip(*[(z, y, x) for z in range(6) for y in range(7)
                                 for x in range(8) if mask[z, y, x]]):
            los.append(min(axis_points))
            his.append(max(axis_points))
        assert box.lo == tuple(los) and box.hi == tuple(his)

    def test_empty_mask_rejected(self):
        with pytest.raises(EmptyMaskError):
            bbox_of_mask(np.zeros((2, 2, 2), dtype=np.uint8))

    def test_contains_mask(self):
        box = Bbox3((1, 1, 1), (2, 2, 2))
        inside = np.zeros((4, 4, 4), dtype=np.uint8)
        inside[1, 2, 2] = 1
        assert box.contains_mask(inside)
        inside[0, 0, 0] = 1
        assert not box.contains_mask(inside)

    def test_invalid_corners_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            Bbox3((2, 0, 0), (1, 3, 3))


class TestHierarchicalPostprocess:
    def test_lesions_outside_box_erased(self):
        liver = np.zeros((6, 6, 6), dtype=np.float32)
        liver[2:4, 2:4, 2:4] = 0.9
        lesion = np.zeros((6, 6, 6), dtype=np.float32)
        lesion[2, 2, 2] = 0.9   # inside box
        lesion[5, 5, 5] = 0.9   # outside box
        final = hierarchical_postprocess(liver, lesion)
        assert final[2, 2, 2] == 1 and final[5, 5, 5] == 0

    def test_empty_liver_short_circuits(self):
        lesion = np.ones((4, 4, 4), dtype=np.float32)
        final = hierarchical_postprocess(np.zeros((4, 4, 4), dtype=np.float32), lesion)
        assert not final.any()

    def test_matches_step_by_step_recomputation(self):
        rng = np.random.default_rng(55)
        liver = rng.uniform(size=(8, 8, 8)).astype(np.float32)
        lesion = rng.uniform(size=(8, 8, 8)).astype(np.float32)
        final = hierarchical_postprocess(liver, lesion)
        liver_mask = largest_component(threshold_mask(liver, 0.5))
        expected = np.zeros_like(final)
        if liver_mask.any():
            box = bbox_of_mask(liver_mask)
            sl = box.slices()
            expected[sl] = threshold_mask(lesion, 0.3)[sl]
        np.testing.assert_array_equal(final, expected)

    def test_output_contained_in_liver_bbox(self):
        rng = np.random.default_rng(56)
        liver = rng.uniform(size=(8, 8, 8)).astype(np.float32)
        lesion = rng.uniform(size=(8, 8, 8)).astype(np.float32)
        final = hierarchical_postprocess(liver, lesion)
        liver_mask = largest_component(threshold_mask(liver, 0.5))
        if liver_mask.any():
            assert bbox_of_mask(liver_mask).contains_mask(final)

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError, match="dims mismatch"):
            hierarchical_postprocess(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestSynthGenerate:
    def test_lesions_strictly_inside_liver(self):
        for _, seg in synth_generate(31, 3, (64, 32, 32)):
            lesion = seg.voxels == 2
            liver_or_lesion = seg.voxels >= 1
            assert not lesion.any() or liver_or_lesion[lesion].all()
            # every lesion voxel's 6-neighborhood stays inside the organ
            if lesion.any():
                padded = np.pad(liver_or_lesion, 1)
                for dz, dy, dx in [(-1, 0, 0), (1, 0, 0), (0, -1, 0),
                                   (0, 1, 0), (0, 0, -1), (0, 0, 1)]:
                    shifted = padded[1 + dz:lesion.shape[0] + 1 + dz,
                                     1 + dy:lesion.shape[1] + 1 + dy,
                                     1 + dx:lesion.shape[2] + 1 + dx]
                    assert shifted[lesion].all()

    def test_deterministic_per_seed(self):
        a = synth_generate(7, 2, (32, 32, 32))
        b = synth_generate(7, 2, (32, 32, 32))
        for (ct_a, seg_a), (ct_b, seg_b) in zip(a, b):
            assert ct_a.voxels.tobytes() == ct_b.voxels.tobytes()
            assert seg_a.voxels.tobytes() == seg_b.voxels.tobytes()
        c = synth_generate(8, 2, (32, 32, 32))
        assert a[0][0].voxels.tobytes() != c[0][0].voxels.tobytes()

    def test_label_set_and_dims(self):
        ct, seg = synth_generate(3, 1, (64, 32, 36))[0]
        assert ct.voxels.shape == (36, 32, 64)
        assert ct.voxels.dtype == np.int16
        assert seg.voxels.dtype == np.uint8
        assert set(np.unique(seg.voxels)) <= {0, 1, 2}
        assert (seg.voxels == 1).sum() > 0

    def test_background_statistics(self):
        ct, seg = synth_generate(17, 1, (64, 64, 48))[0]
        background = ct.voxels[seg.voxels == 0].astype(np.float64)
        assert abs(background.mean() + 100.0) <= 10.0
        assert 20.0 <= background.std() <= 40.0

    def test_small_dims_rejected(self):
        with pytest.raises(ValueError, match=">= 32"):
            synth_generate(0, 1, (31, 64, 64))

    def test_non_multiple_inplane_dims_rejected(self):
        with pytest.raises(ValueError, match="multiples of 32"):
            synth_generate(0, 1, (48, 48, 32))
