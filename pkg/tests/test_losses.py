"""Loss tests: pair-spec structure, zero-at-truth, brute-force parity,
finite-difference gradients."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fusedvo import losses, poses
from fusedvo.errors import EmptyBatch, InvalidK, ShapeMismatch
from fusedvo.losses import (
    LossWeights,
    WindowPrediction,
    WindowTarget,
    joint_loss,
    make_pair_spec,
    pose_mse,
    relative_loss,
)

RNG = np.random.default_rng(991)


def brute_pose_mse(pred7, gt_pose, beta_rot=1.0):
    """Loop-free reference in plain numpy."""
    pred7 = np.asarray(pred7, dtype=np.float64)
    t_pred, q_pred = pred7[:3], pred7[3:]
    q_pred = q_pred / np.linalg.norm(q_pred)
    q_gt = np.asarray(gt_pose.q, dtype=np.float64)
    if np.dot(q_pred, q_gt) < 0:
        q_gt = -q_gt
    return float(
        np.sum((t_pred - gt_pose.t) ** 2) + beta_rot * np.sum((q_pred - q_gt) ** 2)
    )


def random_window(rng, spec, noise=0.3):
    """Ground-truth window plus noisy raw predictions."""
    gt = [poses.random_pose(rng, t_scale=2.0) for _ in range(spec.k)]
    tgt = WindowTarget.from_global(gt, spec)
    pg = np.stack([p.as_vector() for p in gt]) + rng.normal(
        scale=noise, size=(spec.k, 7)
    )
    pp = np.stack([p.as_vector() for p in tgt.gt_pairs]) + rng.normal(
        scale=noise, size=(len(spec), 7)
    )
    pred = WindowPrediction(
        pred_global=torch.tensor(pg, dtype=torch.float64),
        pred_pairs=torch.tensor(pp, dtype=torch.float64),
    )
    return pred, tgt


def exact_window(rng, spec, flip_mask_pairs=None, flip_mask_global=None):
    """Predictions equal to truth, optionally with quaternion sign flips."""
    gt = [poses.random_pose(rng, t_scale=2.0) for _ in range(spec.k)]
    tgt = WindowTarget.from_global(gt, spec)
    pg = np.stack([p.as_vector() for p in gt])
    pp = np.stack([p.as_vector() for p in tgt.gt_pairs])
    if flip_mask_global is not None:
        pg[flip_mask_global, 3:] *= -1
    if flip_mask_pairs is not None:
        pp[flip_mask_pairs, 3:] *= -1
    pred = WindowPrediction(
        pred_global=torch.tensor(pg, dtype=torch.float64),
        pred_pairs=torch.tensor(pp, dtype=torch.float64),
    )
    return pred, tgt


class TestPairSpec:
    def test_k5_exact(self):
        spec = make_pair_spec(5)
        assert spec.pairs == ((0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (2, 4), (0, 4))

    def test_k2(self):
        assert make_pair_spec(2).pairs == ((0, 1),)

    def test_k3(self):
        assert make_pair_spec(3).pairs == ((0, 1), (1, 2), (0, 2))

    def test_k4(self):
        assert make_pair_spec(4).pairs == ((0, 1), (1, 2), (2, 3), (0, 2), (0, 3))

    def test_k8(self):
        spec = make_pair_spec(8)
        assert spec.pairs[:7] == ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7))
        assert (0, 7) == spec.pairs[-1]

    @given(st.integers(min_value=2, max_value=32))
    def test_structure_invariants(self, k):
        spec = make_pair_spec(k)
        assert spec.k == k
        assert len(set(spec.pairs)) == len(spec.pairs)
        # adjacent pairs always present, full-window pair always present
        for i in range(k - 1):
            assert (i, i + 1) in spec.pairs
        assert (0, k - 1) in spec.pairs
        for i, j in spec.pairs:
            assert 0 <= i < j <= k - 1

    def test_invalid_k(self):
        for k in (0, 1, 33, -2, 2.5, "5"):
            with pytest.raises(InvalidK):
                make_pair_spec(k)


class TestPoseMSE:
    def test_zero_at_truth(self):
        for _ in range(30):
            p = poses.random_pose(RNG, 2.0)
            v = torch.tensor(p.as_vector(), dtype=torch.float64)
            assert float(pose_mse(v, p)) < 1e-24

    def test_zero_under_sign_flip(self):
        for _ in range(30):
            p = poses.random_pose(RNG, 2.0)
            v = p.as_vector().copy()
            v[3:] *= -1
            assert float(pose_mse(torch.tensor(v), p)) < 1e-24

    def test_zero_under_unnormalized_pred(self):
        p = poses.random_pose(RNG, 2.0)
        v = p.as_vector().copy()
        v[3:] *= -4.2
        assert float(pose_mse(torch.tensor(v), p)) < 1e-24

    def test_matches_brute_force(self):
        for _ in range(200):
            p = poses.random_pose(RNG, 2.0)
            v = p.as_vector() + RNG.normal(scale=0.5, size=7)
            beta = float(RNG.uniform(0.1, 5.0))
            got = float(pose_mse(torch.tensor(v), p, LossWeights(beta_rot=beta)))
            want = brute_pose_mse(v, p, beta)
            assert abs(got - want) < 1e-12

    def test_beta_scales_rotation_only(self):
        p = poses.random_pose(RNG)
        v = p.as_vector().copy()
        v[:3] += 0.1  # translation error only
        l1 = float(pose_mse(torch.tensor(v), p, LossWeights(beta_rot=1.0)))
        l9 = float(pose_mse(torch.tensor(v), p, LossWeights(beta_rot=9.0)))
        assert abs(l1 - l9) < 1e-15

    def test_positive_off_truth(self):
        p = poses.random_pose(RNG)
        v = p.as_vector().copy()
        v[0] += 1e-3
        assert float(pose_mse(torch.tensor(v), p)) > 1e-7


class TestRelativeLoss:
    def test_zero_at_truth(self):
        spec = make_pair_spec(5)
        batch = [exact_window(RNG, spec) for _ in range(4)]
        assert float(relative_loss(batch, spec)) < 1e-22

    def test_zero_at_truth_with_flips(self):
        spec = make_pair_spec(5)
        mask = RNG.random(len(spec)) < 0.5
        batch = [exact_window(RNG, spec, flip_mask_pairs=mask)]
        assert float(relative_loss(batch, spec)) < 1e-22

    def test_brute_force_parity(self):
        # mean over batch of sum over pairs of pose_mse, by explicit loops
        for k in (2, 3, 5):
            spec = make_pair_spec(k)
            batch = [random_window(RNG, spec) for _ in range(3)]
            beta = 1.7
            w = LossWeights(beta_rot=beta)
            got = float(relative_loss(batch, spec, w))
            acc = 0.0
            for pred, tgt in batch:
                for idx in range(len(spec)):
                    acc += brute_pose_mse(
                        pred.pred_pairs[idx].numpy(), tgt.gt_pairs[idx], beta
                    )
            want = acc / len(batch)
            assert abs(got - want) < 1e-12

    def test_empty_batch_raises(self):
        with pytest.raises(EmptyBatch):
            relative_loss([], make_pair_spec(5))

    def test_pair_count_mismatch_raises(self):
        spec5 = make_pair_spec(5)
        spec3 = make_pair_spec(3)
        pred, tgt = random_window(RNG, spec3)
        with pytest.raises(ShapeMismatch):
            losses.ctc_residuals(pred, tgt, spec5)


class TestJointLoss:
    def test_zero_at_truth(self):
        spec = make_pair_spec(5)
        gmask = RNG.random(5) < 0.5
        pmask = RNG.random(len(spec)) < 0.5
        batch = [
            exact_window(RNG, spec, flip_mask_pairs=pmask, flip_mask_global=gmask)
        ]
        assert float(joint_loss(batch, spec)) < 1e-22

    def test_brute_force_parity(self):
        spec = make_pair_spec(5)
        batch = [random_window(RNG, spec) for _ in range(3)]
        beta, lam = 0.8, 2.5
        w = LossWeights(beta_rot=beta, lambda_global=lam)
        got = float(joint_loss(batch, spec, w))
        acc = 0.0
        for pred, tgt in batch:
            for idx in range(len(spec)):
                acc += brute_pose_mse(
                    pred.pred_pairs[idx].numpy(), tgt.gt_pairs[idx], beta
                )
            for j in range(spec.k):
                acc += lam * brute_pose_mse(
                    pred.pred_global[j].numpy(), tgt.gt_global[j], beta
                )
        want = acc / len(batch)
        assert abs(got - want) < 1e-12

    def test_reduces_to_relative_as_lambda_to_zero(self):
        # joint == relative + lambda * global_sum_mean, check linearity in lambda
        spec = make_pair_spec(3)
        batch = [random_window(RNG, spec) for _ in range(2)]
        j1 = float(joint_loss(batch, spec, LossWeights(lambda_global=1.0)))
        j2 = float(joint_loss(batch, spec, LossWeights(lambda_global=2.0)))
        rel = float(relative_loss(batch, spec))
        g = j1 - rel
        assert abs(j2 - (rel + 2 * g)) < 1e-10


class TestGradients:
    def test_fd_gradients(self):
        """Central finite differences vs autograd on full loss instances."""
        spec = make_pair_spec(5)
        step = 1e-5
        checked = 0
        rng = np.random.default_rng(5)
        for _ in range(8):
            pred, tgt = random_window(rng, spec, noise=0.4)
            pred.pred_global.requires_grad_(True)
            pred.pred_pairs.requires_grad_(True)
            loss = joint_loss([(pred, tgt)], spec)
            loss.backward()
            base_g = pred.pred_global.detach().numpy().copy()
            base_p = pred.pred_pairs.detach().numpy().copy()
            for which in ("global", "pairs"):
                grad = (
                    pred.pred_global if which == "global" else pred.pred_pairs
                ).grad.numpy()
                base = base_g if which == "global" else base_p
                idxs = list(np.ndindex(base.shape))
                for idx in idxs[:: max(1, len(idxs) // 4)]:
                    plus = base.copy()
                    minus = base.copy()
                    plus[idx] += step
                    minus[idx] -= step

                    def make(arr):
                        g = arr if which == "global" else base_g
                        p = arr if which == "pairs" else base_p
                        return WindowPrediction(
                            pred_global=torch.tensor(g),
                            pred_pairs=torch.tensor(p),
                        )

                    fd = (
                        float(joint_loss([(make(plus), tgt)], spec))
                        - float(joint_loss([(make(minus), tgt)], spec))
                    ) / (2 * step)
                    an = grad[idx]
                    denom = max(abs(fd), abs(an), 1e-8)
                    assert abs(fd - an) / denom < 1e-4
                    checked += 1
        assert checked >= 50

    def test_grad_nonzero_off_truth(self):
        spec = make_pair_spec(3)
        pred, tgt = random_window(RNG, spec, noise=0.5)
        pred.pred_global.requires_grad_(True)
        pred.pred_pairs.requires_grad_(True)
        joint_loss([(pred, tgt)], spec).backward()
        assert pred.pred_global.grad.abs().sum() > 0
        assert pred.pred_pairs.grad.abs().sum() > 0


class TestWindowTarget:
    def test_from_global_consistency(self):
        spec = make_pair_spec(5)
        gt = [poses.random_pose(RNG, 2.0) for _ in range(5)]
        tgt = WindowTarget.from_global(gt, spec)
        assert tgt.consistent(spec)
        # each gt pair maps frame-i coords onto frame-j
        for (i, j), rel in zip(spec.pairs, tgt.gt_pairs):
            assert poses.approx_equal(poses.compose(rel, gt[i]), gt[j], 1e-9)

    def test_from_global_wrong_count(self):
        spec = make_pair_spec(5)
        with pytest.raises(ShapeMismatch):
            WindowTarget.from_global([poses.identity()] * 4, spec)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(min_value=2, max_value=8),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_loss_nonnegative_property(k, seed):
    rng = np.random.default_rng(seed)
    spec = make_pair_spec(k)
    pred, tgt = random_window(rng, spec, noise=0.5)
    assert float(relative_loss([(pred, tgt)], spec)) >= 0
    assert float(joint_loss([(pred, tgt)], spec)) >= 0
