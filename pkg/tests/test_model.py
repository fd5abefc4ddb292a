"""Network structure, sharing/causality probes, mode semantics, gradients."""

import numpy as np
import pytest
import torch

from fusedvo import poses
from fusedvo.errors import ConfigError, DegenerateQuaternion, ShapeMismatch
from fusedvo.losses import WindowTarget, joint_loss, make_pair_spec
from fusedvo.model import (
    ModelConfig,
    VOModel,
    block_parameters,
    build_model,
    count_parameters,
    full_config,
    predict_window,
    tiny_config,
)

TINY = tiny_config(seed=3)


@pytest.fixture(scope="module")
def tiny_model():
    m = build_model(TINY)
    m.eval()
    return m


def rand_window(seed=0, cfg=TINY, batch=None):
    g = torch.Generator().manual_seed(seed)
    shape = (cfg.k, cfg.in_channels, *cfg.image_size)
    if batch:
        shape = (batch, *shape)
    return torch.rand(shape, generator=g)


class TestConfig:
    def test_full_preset_dimensions(self):
        cfg = full_config()
        assert cfg.backbone_channels == (64, 256, 512, 1024, 1024)
        assert cfg.stage_depths == (3, 4, 6, 3)
        assert cfg.lstm_hidden == 1000
        assert cfg.lstm_layers_relative == 2
        assert cfg.fc_width == 1024
        assert cfg.image_size == (224, 224)

    def test_tiny_widths_at_least_8(self):
        cfg = tiny_config()
        assert min(cfg.backbone_channels) >= 8
        assert cfg.lstm_hidden >= 8 and cfg.fc_width >= 8

    def test_tiny_param_budget(self):
        assert count_parameters(build_model(tiny_config())) < 5_000_000

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            ModelConfig(preset="huge")
        with pytest.raises(ConfigError):
            ModelConfig(k=1)
        with pytest.raises(ConfigError):
            ModelConfig(image_size=(100, 100))
        with pytest.raises(ConfigError):
            tiny = tiny_config()
            ModelConfig(
                **{**tiny.__dict__, "backbone_channels": (4, 24, 32, 48, 64)}
            )

    def test_with_k(self):
        assert tiny_config().with_k(3).k == 3


@pytest.fixture(scope="module")
def full_model():
    return VOModel(full_config())


class TestFullStructure:
    """Structural assertions only; no forward pass at full size."""

    def test_fc_widths(self, full_model):
        assert full_model.fc1.out_features == 1024
        assert full_model.fc2.out_features == 1024
        assert full_model.fc3.out_features == 1024
        assert full_model.fc3.in_features == 2048
        assert full_model.fc3.bias is None

    def test_heads(self, full_model):
        assert full_model.head_t.out_features == 3
        assert full_model.head_q.out_features == 4

    def test_recurrent_sizes(self, full_model):
        assert full_model.lstm_rel.hidden_size == 1000
        assert full_model.lstm_rel.num_layers == 2
        assert full_model.lstm_glob.hidden_size == 1000
        assert full_model.lstm_glob.num_layers == 1

    def test_stage5_channels(self, full_model):
        last_rel = full_model.stage5_rel[-1]
        last_glob = full_model.stage5_glob[-1]
        assert last_rel.conv3.out_channels == 1024
        assert last_glob.conv3.out_channels == 1024
        # relative stage 5 consumes channel-concatenated frame pairs
        assert full_model.stage5_rel[0].conv1.in_channels == 2048
        assert full_model.stage5_glob[0].conv1.in_channels == 1024


class TestFeatureExtractor:
    def test_downsampling_factor_16(self, tiny_model):
        feats = tiny_model.extract_features(rand_window())
        h, w = TINY.image_size
        assert feats.shape == (TINY.k, TINY.backbone_channels[3], h // 16, w // 16)

    def test_identical_frames_identical_features(self, tiny_model):
        frame = rand_window()[0]
        window = frame.expand(TINY.k, *frame.shape).clone()
        feats = tiny_model.extract_features(window)
        for i in range(1, TINY.k):
            assert torch.equal(feats[0], feats[i])

    def test_per_frame_independence(self, tiny_model):
        w1 = rand_window(seed=1)
        w2 = w1.clone()
        w2[2] = torch.rand(w1[2].shape, generator=torch.Generator().manual_seed(9))
        f1 = tiny_model.extract_features(w1)
        f2 = tiny_model.extract_features(w2)
        for i in range(TINY.k):
            if i == 2:
                assert not torch.equal(f1[i], f2[i])
            else:
                assert torch.equal(f1[i], f2[i])

    def test_finite(self, tiny_model):
        assert torch.isfinite(tiny_model.extract_features(rand_window())).all()

    def test_wrong_size_raises(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            tiny_model.extract_features(torch.rand(TINY.k, 3, 32, 32))
        with pytest.raises(ShapeMismatch):
            tiny_model.extract_features(torch.rand(TINY.k, 1, *TINY.image_size))


class TestBranches:
    def test_relative_branch_counts(self, tiny_model):
        feats = tiny_model.extract_features(rand_window()).unsqueeze(0)
        emb, adj = tiny_model.relative_branch(feats)
        assert emb.shape == (1, TINY.k - 1, TINY.fc_width)
        assert adj.shape == (1, TINY.k - 1, 7)
        pairs = tiny_model.compose_pairs(adj)
        assert pairs.shape == (1, 7, 7)  # K=5 -> 7 pairs

    def test_k2_single_pair(self):
        cfg = tiny_config(k=2, seed=1)
        m = build_model(cfg)
        m.eval()
        wp = m(rand_window(cfg=cfg), mode="relative_only")
        assert wp.pred_pairs.shape == (1, 7)

    def test_composition_consistency(self, tiny_model):
        # composed (0,2) equals compose of predicted (1,2) and (0,1)
        feats = tiny_model.extract_features(rand_window(seed=4)).unsqueeze(0)
        _, adj = tiny_model.relative_branch(feats)
        pairs = tiny_model.compose_pairs(adj)[0]
        spec = tiny_model.pair_spec
        idx02 = spec.pairs.index((0, 2))
        a01 = poses.Pose.from_vector(adj[0, 0].detach().double().numpy())
        a12 = poses.Pose.from_vector(adj[0, 1].detach().double().numpy())
        got = poses.Pose.from_vector(pairs[idx02].detach().double().numpy())
        want = poses.compose(a12, a01)
        assert poses.approx_equal(got, want, atol=1e-5)

    def test_global_branch_counts(self, tiny_model):
        feats = tiny_model.extract_features(rand_window()).unsqueeze(0)
        emb, glob = tiny_model.global_branch(feats)
        assert emb.shape == (1, TINY.k, TINY.fc_width)
        assert glob.shape == (1, TINY.k, 7)

    def test_branch_embedding_widths_match(self, tiny_model):
        feats = tiny_model.extract_features(rand_window()).unsqueeze(0)
        emb1, _ = tiny_model.relative_branch(feats)
        emb2, _ = tiny_model.global_branch(feats)
        assert emb1.shape[-1] == emb2.shape[-1]

    def test_global_causality(self, tiny_model):
        w1 = rand_window(seed=6)
        w2 = w1.clone()
        w2[-1] = torch.rand(w2[-1].shape, generator=torch.Generator().manual_seed(8))
        e1, g1 = tiny_model.global_branch(tiny_model.extract_features(w1).unsqueeze(0))
        e2, g2 = tiny_model.global_branch(tiny_model.extract_features(w2).unsqueeze(0))
        assert torch.equal(e1[0, : TINY.k - 1], e2[0, : TINY.k - 1])
        assert torch.equal(g1[0, : TINY.k - 1], g2[0, : TINY.k - 1])
        assert not torch.equal(g1[0, -1], g2[0, -1])


class TestFusion:
    def test_zero_embeddings_give_head_biases(self, tiny_model):
        z = torch.zeros(TINY.fc_width)
        out = tiny_model.fuse(z, z)
        want = torch.cat([tiny_model.head_t.bias, tiny_model.head_q.bias])
        assert torch.allclose(out, want, atol=0)

    def test_both_streams_carry_gradient(self, tiny_model):
        a = torch.randn(TINY.fc_width, requires_grad=True)
        b = torch.randn(TINY.fc_width, requires_grad=True)
        tiny_model.fuse(a, b).sum().backward()
        assert a.grad.abs().sum() > 0
        assert b.grad.abs().sum() > 0

    def test_width_mismatch_raises(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            tiny_model.fuse(torch.zeros(7), torch.zeros(TINY.fc_width))


class TestForwardModes:
    def test_fused_shapes(self, tiny_model):
        wp = tiny_model(rand_window(), mode="fused")
        assert wp.pred_global.shape == (5, 7)
        assert wp.pred_pairs.shape == (7, 7)
        assert wp.mode == "fused"

    def test_relative_only_integrates_from_anchor(self, tiny_model):
        anchor = poses.random_pose(np.random.default_rng(3), 2.0)
        wp = tiny_model(rand_window(), mode="relative_only", anchors=anchor)
        assert np.allclose(wp.pred_global[0].detach().numpy(), anchor.as_vector(), atol=1e-6)
        # frame i+1 pose = adjacent transform composed onto frame i pose
        adj0 = poses.Pose.from_vector(wp.pred_pairs[0].detach().double().numpy())
        p0 = poses.Pose.from_vector(wp.pred_global[0].detach().double().numpy())
        p1 = poses.Pose.from_vector(wp.pred_global[1].detach().double().numpy())
        assert poses.approx_equal(poses.compose(adj0, p0), p1, atol=1e-5)

    def test_relative_only_default_anchor_is_identity(self, tiny_model):
        wp = tiny_model(rand_window(), mode="relative_only")
        assert np.allclose(
            wp.pred_global[0].detach().numpy(), [0, 0, 0, 1, 0, 0, 0], atol=0
        )

    def test_global_only_pairs_match_globals(self, tiny_model):
        wp = tiny_model(rand_window(), mode="global_only")
        spec = tiny_model.pair_spec
        for (i, j), pair in zip(spec.pairs, wp.pred_pairs):
            gi = poses.Pose.from_vector(wp.pred_global[i].detach().double().numpy())
            gj = poses.Pose.from_vector(wp.pred_global[j].detach().double().numpy())
            got = poses.Pose.from_vector(pair.detach().double().numpy())
            assert poses.approx_equal(got, poses.relative(gi, gj), atol=1e-5)

    def test_global_only_composed_pair_source(self, tiny_model):
        wp_rel = tiny_model(rand_window(), mode="relative_only")
        wp_glob = tiny_model(rand_window(), mode="global_only", pair_source="composed")
        assert torch.allclose(wp_rel.pred_pairs, wp_glob.pred_pairs)

    def test_pair_source_rejected_outside_global_only(self, tiny_model):
        with pytest.raises(ConfigError):
            tiny_model(rand_window(), mode="fused", pair_source="from_global")

    def test_unknown_mode(self, tiny_model):
        with pytest.raises(ConfigError):
            tiny_model(rand_window(), mode="both")

    def test_wrong_window_length(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            tiny_model(rand_window()[:4])

    def test_batched_matches_single(self, tiny_model):
        batch = rand_window(seed=11, batch=3)
        outs = tiny_model(batch, mode="fused")
        assert len(outs) == 3
        for i in range(3):
            single = tiny_model(batch[i], mode="fused")
            assert torch.allclose(outs[i].pred_global, single.pred_global, atol=1e-5)
            assert torch.allclose(outs[i].pred_pairs, single.pred_pairs, atol=1e-5)


class TestDeterminism:
    def test_same_seed_same_outputs(self):
        w = rand_window(seed=5)
        outs = []
        for _ in range(2):
            m = build_model(tiny_config(seed=21))
            m.eval()
            with torch.no_grad():
                outs.append(m(w, mode="fused"))
        assert torch.equal(outs[0].pred_global, outs[1].pred_global)
        assert torch.equal(outs[0].pred_pairs, outs[1].pred_pairs)

    def test_different_seed_differs(self):
        w = rand_window(seed=5)
        m1 = build_model(tiny_config(seed=21))
        m2 = build_model(tiny_config(seed=22))
        m1.eval(), m2.eval()
        with torch.no_grad():
            a, b = m1(w), m2(w)
        assert not torch.equal(a.pred_global, b.pred_global)

    def test_repeat_forward_bit_identical(self, tiny_model):
        w = rand_window(seed=13)
        with torch.no_grad():
            a, b = tiny_model(w), tiny_model(w)
        assert torch.equal(a.pred_global, b.pred_global)
        assert torch.equal(a.pred_pairs, b.pred_pairs)


class TestDegenerateDetection:
    def test_zeroed_heads_raise(self):
        m = build_model(tiny_config(seed=2))
        with torch.no_grad():
            m.head_q.weight.zero_()
            m.head_q.bias.zero_()
        with pytest.raises(DegenerateQuaternion):
            predict_window(m, rand_window(), mode="relative_only")

    def test_predict_window_returns_poses(self, tiny_model):
        glob, pairs = predict_window(tiny_model, rand_window(), mode="fused")
        assert len(glob) == 5 and len(pairs) == 7
        assert all(isinstance(p, poses.Pose) for p in glob + pairs)


class TestBlocks:
    def test_blocks_partition_parameters(self, tiny_model):
        named = dict(tiny_model.named_parameters())
        seen = []
        for block in ("features", "relative", "global", "fusion", "heads"):
            seen += [n for n, _ in block_parameters(tiny_model, block)]
        assert sorted(seen) == sorted(named)

    def test_head_init_near_identity_quaternion(self, tiny_model):
        assert torch.allclose(
            tiny_model.head_q.bias, torch.tensor([1.0, 0, 0, 0]), atol=0
        )


class TestEndToEndGradients:
    def test_all_parameters_receive_gradients(self):
        m = build_model(tiny_config(seed=7))
        m.train()
        spec = make_pair_spec(TINY.k)
        gt = [poses.random_pose(np.random.default_rng(i), 1.0) for i in range(5)]
        tgt = WindowTarget.from_global(gt, spec)
        wp = m(rand_window(seed=17), mode="fused")
        loss = joint_loss([(wp, tgt)], spec)
        loss.backward()
        for name, p in m.named_parameters():
            assert p.grad is not None, name
            assert torch.isfinite(p.grad).all(), name

    def test_finite_difference_gradients(self):
        """Autograd vs central differences on sampled parameters, float64."""
        m = build_model(tiny_config(seed=8)).double()
        m.eval()  # fixed batchnorm stats so FD perturbs a pure function
        spec = make_pair_spec(TINY.k)
        rng = np.random.default_rng(0)
        gt = [poses.random_pose(rng, 1.0) for _ in range(5)]
        tgt = WindowTarget.from_global(gt, spec)
        w = rand_window(seed=19).double()

        def loss_value():
            with torch.no_grad():
                return float(joint_loss([(m(w, mode="fused"), tgt)], spec))

        loss = joint_loss([(m(w, mode="fused"), tgt)], spec)
        loss.backward()
        step = 1e-5
        checked = 0
        names = [
            "stem.0.weight",
            "stage4.0.conv2.weight",
            "stage5_rel.0.conv1.weight",
            "stage5_glob.0.conv3.weight",
            "lstm_rel.weight_ih_l0",
            "lstm_glob.weight_hh_l0",
            "fc1.weight",
            "fc2.bias",
            "fc3.weight",
            "head_t.weight",
            "head_q.bias",
        ]
        params = dict(m.named_parameters())
        for name in names:
            p = params[name]
            flat = p.detach().reshape(-1)
            gflat = p.grad.reshape(-1)
            for idx in rng.choice(flat.numel(), size=3, replace=False):
                idx = int(idx)
                orig = float(flat[idx])
                with torch.no_grad():
                    flat[idx] = orig + step
                lp = loss_value()
                with torch.no_grad():
                    flat[idx] = orig - step
                lm = loss_value()
                with torch.no_grad():
                    flat[idx] = orig
                fd = (lp - lm) / (2 * step)
                an = float(gflat[idx])
                denom = max(abs(fd), abs(an), 1e-6)
                assert abs(fd - an) / denom < 1e-3, (name, idx, fd, an)
                checked += 1
        assert checked == 3 * len(names)
