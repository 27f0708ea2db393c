import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from panocc.losses import (
    COUPLED,
    DECOUPLED,
    PredictionBatch,
    TargetSet,
    compute_matching,
    detection_loss,
    focal_loss,
    objects_loss,
    occupancy_loss,
    safe_norm,
)
from panocc.matching import LossWeights
from panocc.objects import GroundTruthObject

from conftest import SMALL

W = LossWeights()
C = 6


def t64(x):
    return torch.tensor(np.asarray(x, float), dtype=torch.float64)


def make_gts(rng, n=2, size=3):
    gts = []
    for j in range(n):
        base = rng.integers(0, 10 - size, 3)
        vox = np.unique(base + rng.integers(0, size, (size * 2, 3)), axis=0)
        gts.append(GroundTruthObject.from_voxels(SMALL, int(rng.integers(1, 4)), vox, j + 1))
    return gts


def make_batch(rng, q=4, k=27):
    return PredictionBatch(
        t64(rng.normal(size=(q, C))),
        t64(rng.uniform(0, 4, (q, 3))),
        t64(rng.normal(scale=0.5, size=(q, k, 3))),
        t64(rng.uniform(0.05, 0.95, (q, k))),
    )


def perfect_batch(gts, q=3, k=8):
    """Confident, exact predictions for each GT plus background queries."""
    logits = np.zeros((q, C))
    logits[:, 0] = 200.0
    centers = np.zeros((q, 3))
    offsets = np.zeros((q, k, 3))
    scores = np.full((q, k), 1e-9)
    for i, g in enumerate(gts):
        logits[i] = 0.0
        logits[i, g.class_id] = 200.0
        centers[i] = g.center
        n = len(g.voxels)
        offsets[i, :n] = g.voxel_centers - g.center
        scores[i, :n] = 1.0 - 1e-9
    return PredictionBatch(t64(logits), t64(centers), t64(offsets), t64(scores))


class TestFocal:
    def test_half_probability(self):
        assert float(focal_loss(0.5, 1.0)) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-15)

    def test_negative_uses_one_minus_alpha(self):
        assert float(focal_loss(0.5, 0.0)) == pytest.approx(0.75 * 0.25 * math.log(2), abs=1e-15)

    def test_finite_at_extremes(self):
        vals = focal_loss(t64([0.0, 1.0, 0.0, 1.0]), t64([1, 0, 0, 1]))
        assert torch.isfinite(vals).all()

    @pytest.mark.parametrize("p", [0.1, 0.37, 0.5, 0.83])
    @pytest.mark.parametrize("y", [0.0, 1.0])
    def test_finite_difference(self, p, y):
        x = t64(p).requires_grad_(True)
        focal_loss(x, y).backward()
        h = 1e-6
        fd = (float(focal_loss(p + h, y)) - float(focal_loss(p - h, y))) / (2 * h)
        assert float(x.grad) == pytest.approx(fd, rel=1e-6)


def test_safe_norm_zero_gradient_at_origin():
    x = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    safe_norm(x).backward()
    assert torch.equal(x.grad, torch.zeros(3, dtype=torch.float64))


class TestDetection:
    def test_one_meter_error(self):
        g = GroundTruthObject.from_voxels(SMALL, 1, [(2, 2, 2)], 1)
        logits = np.zeros((1, C))
        logits[0, 1] = 200.0
        batch = PredictionBatch(t64(logits), t64([g.center + [1.0, 0, 0]]), t64(np.zeros((1, 1, 3))), t64([[0.5]]))
        assert float(detection_loss(batch, [g], np.array([0]), W)) == pytest.approx(0.02, abs=1e-9)

    def test_linear_in_lambda2(self, rng):
        gts = make_gts(rng)
        batch = make_batch(rng)
        sigma = compute_matching(batch, gts, W).sigma_det
        base = LossWeights(W.lambda1, 0.0, W.lambda3, W.lambda4)
        l0 = float(detection_loss(batch, gts, sigma, base))
        l1 = float(detection_loss(batch, gts, sigma, LossWeights(W.lambda1, 1.0, W.lambda3, W.lambda4)))
        l2 = float(detection_loss(batch, gts, sigma, LossWeights(W.lambda1, 2.0, W.lambda3, W.lambda4)))
        assert l2 - l0 == pytest.approx(2 * (l1 - l0), rel=1e-12)


class TestAnchorModes:
    def test_decoupled_invariant_to_center_error(self, rng):
        gts = make_gts(rng)
        batch = make_batch(rng)
        match = compute_matching(batch, gts, W, DECOUPLED)
        ref = objects_loss(batch, gts, W, DECOUPLED, match=match).l_occ
        for _ in range(20):
            moved = PredictionBatch(batch.class_logits, batch.centers + t64(rng.normal(size=3)),
                                    batch.offsets, batch.scores)
            assert torch.equal(objects_loss(moved, gts, W, DECOUPLED, match=match).l_occ, ref)

    def test_coupled_shift_adds_lambda4_distance(self, rng):
        gts = make_gts(rng)
        batch = perfect_batch(gts)
        match = compute_matching(batch, gts, W, COUPLED)
        base = objects_loss(batch, gts, W, COUPLED, match=match)
        assert float(base.l_dist_offsets) == pytest.approx(0.0, abs=1e-12)
        delta = np.array([0.3, -0.4, 0.0])
        shifted = PredictionBatch(batch.class_logits, batch.centers + t64(delta), batch.offsets, batch.scores)
        out = objects_loss(shifted, gts, W, COUPLED, match=match)
        assert float(out.l_occ - base.l_occ) == pytest.approx(W.lambda4 * 0.5, abs=1e-9)

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError):
            objects_loss(make_batch(rng), make_gts(rng), W, "sideways")

    def test_occupancy_loss_single_pair(self, rng):
        gts = make_gts(rng, n=1)
        batch = perfect_batch(gts)
        match = compute_matching(batch, gts, W)
        assert float(occupancy_loss(batch, 0, gts[0], match.sigma_occ[0])) == pytest.approx(0.0, abs=1e-9)


class TestSpecialCases:
    def test_no_ground_truth(self, rng):
        batch = make_batch(rng)
        out = objects_loss(batch, [], W)
        assert float(out.l_dist_center) == 0.0
        assert float(out.l_occ) == 0.0
        probs = torch.softmax(batch.class_logits, -1)
        onehot = torch.zeros_like(probs)
        onehot[:, 0] = 1.0
        expected = W.lambda1 * focal_loss(probs, onehot).sum(-1).mean()
        assert float(out.l_objects) == pytest.approx(float(expected), rel=1e-12)

    def test_perfect_prediction_near_zero(self, rng):
        gts = make_gts(rng)
        out = objects_loss(perfect_batch(gts), gts, W)
        assert float(out.l_objects) < 1e-9

    def test_query_permutation_invariant(self, rng):
        gts = make_gts(rng)
        batch = make_batch(rng)
        perm = torch.as_tensor(rng.permutation(batch.q))
        permuted = PredictionBatch(batch.class_logits[perm], batch.centers[perm],
                                   batch.offsets[perm], batch.scores[perm])
        a = float(objects_loss(batch, gts, W).l_objects)
        b = float(objects_loss(permuted, gts, W).l_objects)
        assert b == pytest.approx(a, rel=1e-12)

    @given(st.integers(0, 2**32 - 1), st.sampled_from([DECOUPLED, COUPLED]))
    @settings(max_examples=30, deadline=None)
    def test_non_negative(self, seed, mode):
        r = np.random.default_rng(seed)
        out = objects_loss(make_batch(r), make_gts(r, n=int(r.integers(0, 3))), W, mode)
        for v in out.as_floats().values():
            assert v >= 0.0


@pytest.mark.parametrize("mode", [DECOUPLED, COUPLED])
def test_gradients_match_finite_differences(mode):
    r = np.random.default_rng(7)
    gts = make_gts(r)
    raw = {"class_logits": r.normal(size=(4, C)), "centers": r.uniform(0, 4, (4, 3)),
           "offsets": r.normal(scale=0.5, size=(4, 27, 3)), "score_logits": r.normal(size=(4, 27))}
    targets = TargetSet.from_objects(gts)

    def build(p):
        return PredictionBatch(p["class_logits"], p["centers"], p["offsets"], torch.sigmoid(p["score_logits"]))

    t = {k: t64(v).requires_grad_(True) for k, v in raw.items()}
    match = compute_matching(build(t), targets, W, mode)
    objects_loss(build(t), targets, W, mode, match=match).l_objects.backward()

    def value(p):
        with torch.no_grad():
            return float(objects_loss(build({k: t64(v) for k, v in p.items()}), targets, W, mode,
                                      match=match).l_objects)

    h = 1e-6
    for name in raw:
        for idx in [tuple(r.integers(0, s) for s in raw[name].shape) for _ in range(4)]:
            plus = {k: v.copy() for k, v in raw.items()}
            minus = {k: v.copy() for k, v in raw.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            fd = (value(plus) - value(minus)) / (2 * h)
            an = float(t[name].grad[idx])
            assert an == pytest.approx(fd, rel=1e-4, abs=1e-9), (name, idx)
