import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panocc.grid import (
    DEFAULT_CLASSES,
    GridSpec,
    PanopticGrid,
    SemanticGrid,
    VisibilityMask,
    compute_visibility,
    voxel_center,
    voxelize_points,
    world_to_voxel,
)

from conftest import SMALL, sampling_visibility


class TestGridSpec:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            GridSpec(voxel_size=(0.4, 0.0, 0.4))
        with pytest.raises(ValueError):
            GridSpec(dims=(0, 5, 5))

    def test_default_layout(self):
        spec = GridSpec()
        assert spec.dims == (50, 50, 8)
        assert spec.origin == (-10.0, -10.0, -1.6)
        assert np.allclose(spec.upper, (10.0, 10.0, 1.6))


class TestWorldToVoxel:
    def test_minimum_corner(self):
        assert world_to_voxel(SMALL, (0.0, 0.0, 0.0)) == (0, 0, 0)

    def test_floor(self):
        assert world_to_voxel(SMALL, (0.79, 0.41, 0.0)) == (1, 1, 0)

    def test_upper_boundary_excluded(self):
        assert world_to_voxel(SMALL, (4.0, 0.0, 0.0)) is None
        assert world_to_voxel(SMALL, (-1e-9, 0.0, 0.0)) is None

    def test_shared_face_resolves_by_floor(self):
        assert world_to_voxel(SMALL, (0.8, 0.0, 0.0)) == (2, 0, 0)


class TestVoxelCenter:
    def test_half_voxel_offset(self):
        assert np.allclose(voxel_center(SMALL, (0, 0, 0)), (0.2, 0.2, 0.2))
        assert np.allclose(voxel_center(SMALL, (1, 0, 0)), (0.6, 0.2, 0.2))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            voxel_center(SMALL, (10, 0, 0))

    @pytest.mark.parametrize("spec", [SMALL, GridSpec()])
    def test_round_trip_exhaustive(self, spec):
        for idx in np.ndindex(5, 5, 5):
            assert world_to_voxel(spec, voxel_center(spec, idx)) == idx


# dyadic coordinates keep the shifted sums exact in floating point
dyadic = st.integers(-64, 320).map(lambda v: v / 64)


@given(st.lists(st.tuples(dyadic, dyadic, dyadic), max_size=40),
       st.tuples(*[st.integers(-20, 20)] * 3))
@settings(max_examples=60, deadline=None)
def test_voxelization_translation_equivariant(points, shift_voxels):
    shift = np.asarray(shift_voxels) * 0.5
    spec = GridSpec((0.0, 0.0, 0.0), (0.5, 0.5, 0.5), (8, 8, 8))
    moved = GridSpec(tuple(np.asarray(spec.origin) + shift), spec.voxel_size, spec.dims)
    pts = np.asarray(points, float).reshape(-1, 3)
    a = voxelize_points(spec, pts)
    b = voxelize_points(moved, pts + shift)
    assert a == b


def test_voxel_center_idempotent_on_centers(rng):
    for _ in range(50):
        idx = tuple(int(v) for v in rng.integers(0, 10, 3))
        c = voxel_center(SMALL, idx)
        assert np.allclose(voxel_center(SMALL, world_to_voxel(SMALL, c)), c)


class TestVoxelize:
    def test_dedup(self):
        vox = voxelize_points(SMALL, [(0.1, 0.1, 0.1), (0.3, 0.2, 0.1)])
        assert vox.indices == {(0, 0, 0)}
        assert vox.dropped == 0

    def test_empty(self):
        assert voxelize_points(SMALL, []).indices == frozenset()

    def test_drops_out_of_range(self):
        vox = voxelize_points(SMALL, [(0.1, 0.1, 0.1), (9.0, 0.0, 0.0), (-0.1, 0, 0)])
        assert vox.indices == {(0, 0, 0)}
        assert vox.dropped == 2

    def test_matches_per_point_floor(self, rng):
        pts = rng.uniform(0.0, 3.999, size=(100, 3))
        expected = {tuple(int(np.floor(c / 0.4)) for c in p) for p in pts}
        assert voxelize_points(SMALL, pts).indices == expected


class TestContainers:
    def test_semantic_shape_checked(self):
        with pytest.raises(ValueError):
            SemanticGrid(SMALL, np.zeros((10, 10, 9), int))

    def test_semantic_label_range(self):
        labels = np.zeros(SMALL.dims, int)
        labels[0, 0, 0] = len(DEFAULT_CLASSES)
        with pytest.raises(ValueError):
            SemanticGrid(SMALL, labels)

    def test_semantic_immutable(self):
        g = SemanticGrid(SMALL, np.zeros(SMALL.dims, int))
        with pytest.raises(ValueError):
            g.labels[0, 0, 0] = 1

    def test_panoptic_id_on_stuff_rejected(self):
        labels = np.zeros(SMALL.dims, int)
        ids = np.full(SMALL.dims, -1)
        labels[0, 0, 0] = 4  # stuff
        ids[0, 0, 0] = 1
        with pytest.raises(ValueError, match="non-thing"):
            PanopticGrid(SMALL, labels, ids)

    def test_panoptic_id_single_class(self):
        labels = np.zeros(SMALL.dims, int)
        ids = np.full(SMALL.dims, -1)
        labels[0, 0, 0], labels[1, 0, 0] = 1, 2
        ids[0, 0, 0] = ids[1, 0, 0] = 3
        with pytest.raises(ValueError, match="spans classes"):
            PanopticGrid(SMALL, labels, ids)

    def test_mask_shape(self):
        with pytest.raises(ValueError):
            VisibilityMask(SMALL, np.ones((2, 2, 2), bool))


class TestVisibility:
    def test_empty_grid_all_visible(self):
        g = SemanticGrid(SMALL, np.zeros(SMALL.dims, int))
        assert compute_visibility(g, (1.0, 1.0, 1.0)).visible.all()

    def test_axis_aligned_occlusion(self):
        labels = np.zeros(SMALL.dims, int)
        labels[5, 0, 0] = 1
        g = SemanticGrid(SMALL, labels)
        vis = compute_visibility(g, voxel_center(SMALL, (0, 0, 0))).visible
        assert vis[1:6, 0, 0].all()
        assert not vis[6:, 0, 0].any()

    def test_ego_outside_rejected(self):
        g = SemanticGrid(SMALL, np.zeros(SMALL.dims, int))
        with pytest.raises(ValueError):
            compute_visibility(g, (-1.0, 0.0, 0.0))

    def test_ego_voxel_does_not_occlude(self):
        labels = np.zeros(SMALL.dims, int)
        labels[0, 0, 0] = 4
        g = SemanticGrid(SMALL, labels)
        assert compute_visibility(g, (0.2, 0.2, 0.2)).visible.all()

    def test_agrees_with_sampling_oracle(self, rng):
        spec = GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (8, 8, 8))
        for _ in range(3):
            labels = (rng.random(spec.dims) < 0.1).astype(int)
            ego = rng.uniform(0.5, 7.5, 3)
            g = SemanticGrid(spec, labels)
            agree = (compute_visibility(g, ego).visible == sampling_visibility(g, ego)).mean()
            assert agree >= 0.99

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_monotone_under_removal(self, seed):
        r = np.random.default_rng(seed)
        spec = GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (6, 6, 6))
        labels = (r.random(spec.dims) < 0.2).astype(int)
        ego = r.uniform(0.1, 5.9, 3)
        before = compute_visibility(SemanticGrid(spec, labels), ego).visible
        occ = np.argwhere(labels > 0)
        if len(occ) == 0:
            return
        drop = tuple(occ[r.integers(len(occ))])
        labels[drop] = 0
        after = compute_visibility(SemanticGrid(spec, labels), ego).visible
        assert not np.any(before & ~after)
