import numpy as np
import pytest
import torch

from crossfeat.model import (
    CheckpointError,
    FeatureNet,
    FeatureOutput,
    ModelConfig,
    ModelError,
    describe_at,
    extract_keypoints,
    load_model,
    read_checkpoint,
    save_model,
    score_at,
    soft_detection_scores,
    write_checkpoint,
)
from oracles import bilinear_sample_oracle, greedy_nms_oracle, unit_descriptor_oracle

TINY = ModelConfig(channels=(8, 8, 12), descriptor_dim=8, stride=1, seed=0)


def random_image(h, w, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (h, w))


def synthetic_output(h, w, c, seed=0, stride=1, dtype=torch.float64):
    """A FeatureOutput built directly from random maps (no network)."""
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(h, w, c))
    desc = feats / np.linalg.norm(feats, axis=-1, keepdims=True)
    scores = rng.uniform(0.05, 1.0, size=(h, w))
    scores = scores / scores.sum()
    return FeatureOutput(
        features=torch.as_tensor(feats, dtype=dtype),
        descriptors=torch.as_tensor(desc, dtype=dtype),
        scores=torch.as_tensor(scores, dtype=dtype),
        stride=stride,
    )


class TestForward:
    def test_shapes_and_normalization(self):
        config = ModelConfig(channels=(16, 16, 24), descriptor_dim=32, stride=1, seed=1)
        net = FeatureNet(config)
        out = net(random_image(64, 64))
        assert out.features.shape == (64, 64, 32)
        assert out.descriptors.shape == (64, 64, 32)
        assert out.scores.shape == (64, 64)
        norms = torch.linalg.norm(out.descriptors, dim=-1)
        assert torch.max(torch.abs(norms - 1.0)) < 1e-5
        assert float(out.scores.sum()) == pytest.approx(1.0, abs=1e-5)
        assert float(out.scores.min()) >= 0.0

    def test_stride_downsampling(self):
        for stride in (2, 4):
            net = FeatureNet(ModelConfig(channels=(8, 8, 8), descriptor_dim=8, stride=stride))
            out = net(random_image(64, 64))
            assert out.scores.shape == (64 // stride, 64 // stride)
            assert out.stride == stride

    def test_indivisible_size_rejected(self):
        net = FeatureNet(ModelConfig(channels=(8, 8, 8), descriptor_dim=8, stride=2))
        with pytest.raises(ModelError):
            net(random_image(63, 64))

    def test_constant_zero_image_uniform_scores(self):
        # interior = cells whose 31-px receptive field avoids the border
        net = FeatureNet(TINY)
        out = net(np.zeros((64, 64)))
        interior = out.scores[16:-16, 16:-16]
        assert float(interior.max() - interior.min()) < 1e-5

    def test_translation_equivariance(self):
        # interior cells must shift with the input; borders excluded by the
        # 31-px receptive field (dilations 1/2/4/8); rolling keeps the
        # per-image normalization statistics bit-identical
        net = FeatureNet(TINY, dtype=torch.float64)
        img = random_image(80, 80, seed=3)
        shifted = np.roll(img, 1, axis=1)
        d0 = net(img).descriptors.detach().numpy()
        d1 = net(shifted).descriptors.detach().numpy()
        deviation = np.abs(d1[20:-20, 20:-20] - d0[20:-20, 19:-21]).max()
        assert deviation < 1e-4

    def test_deterministic_initialization(self):
        a = FeatureNet(TINY).parameter_arrays()
        b = FeatureNet(TINY).parameter_arrays()
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_multichannel_input_rejected(self):
        net = FeatureNet(TINY)
        with pytest.raises(ModelError):
            net(np.zeros((8, 8, 3)))


class TestScoreMap:
    def test_scores_differentiable_to_input(self):
        # finite differences on sum(scores * mask) at float64
        from gradcheck import check_entry

        net = FeatureNet(TINY, dtype=torch.float64)
        rng = np.random.default_rng(5)
        img = rng.uniform(0.2, 0.8, (8, 8))
        mask = torch.as_tensor(rng.normal(size=(8, 8)))

        def objective():
            x = torch.as_tensor(img, dtype=torch.float64)
            return float(((net(x).scores * mask).sum()).detach())

        x = torch.as_tensor(img, dtype=torch.float64).clone().requires_grad_(True)
        (net(x).scores * mask).sum().backward()
        grad = x.grad.numpy()
        results = []
        for i, j in [(2, 2), (4, 5), (7, 7), (0, 3), (5, 1)]:
            def perturb(delta, i=i, j=j):
                img[i, j] += delta

            results.append(check_entry(objective, perturb, grad[i, j]))
        assert "fail" not in results
        assert results.count("pass") >= 3

    def test_uniform_fallback_on_dead_features(self):
        feats = torch.full((1, 4, 6, 6), -1.0, dtype=torch.float64)
        scores = soft_detection_scores(feats)
        assert torch.allclose(scores, torch.full((6, 6), 1.0 / 36, dtype=torch.float64))


class TestExtractKeypoints:
    def test_five_isolated_peaks(self):
        scores = np.full((8, 8), 0.001)
        peaks = [(1, 1), (1, 6), (6, 1), (6, 6), (4, 4)]
        for i, j in peaks:
            scores[i, j] = 1.0
        scores /= scores.sum()
        out = FeatureOutput(
            features=torch.zeros((8, 8, 4)),
            descriptors=torch.full((8, 8, 4), 0.5),
            scores=torch.as_tensor(scores),
            stride=1,
        )
        kps = extract_keypoints(out, k=5, nms_radius=2)
        got = {(int(y - 0.5), int(x - 0.5)) for x, y in kps.points}
        assert got == set(peaks)

    def test_k1_is_argmax(self):
        out = synthetic_output(12, 12, 4, seed=7)
        kps = extract_keypoints(out, k=1, nms_radius=4)
        scores = out.scores_numpy()
        i, j = np.unravel_index(np.argmax(scores), scores.shape)
        assert np.allclose(kps.points[0], [(j + 0.5), (i + 0.5)])

    def test_adjacent_peaks_suppressed(self):
        scores = np.full((16, 16), 1e-6)
        scores[8, 8] = 1.0
        scores[8, 9] = 0.9  # 1 px away, suppressed at radius 4
        scores[2, 2] = 0.5
        out = FeatureOutput(
            features=torch.zeros((16, 16, 4)),
            descriptors=torch.full((16, 16, 4), 0.5),
            scores=torch.as_tensor(scores / scores.sum()),
            stride=1,
        )
        kps = extract_keypoints(out, k=2, nms_radius=4)
        got = {(int(y - 0.5), int(x - 0.5)) for x, y in kps.points}
        assert got == {(8, 8), (2, 2)}

    def test_matches_greedy_oracle(self):
        rng = np.random.default_rng(17)
        for trial in range(200):
            h = int(rng.integers(4, 17))
            w = int(rng.integers(4, 17))
            k = int(rng.integers(1, 33))
            radius = int(rng.integers(1, 5))
            out = synthetic_output(h, w, 4, seed=trial)
            kps = extract_keypoints(out, k=k, nms_radius=radius)
            rows, cols = greedy_nms_oracle(out.scores_numpy(), k, radius)
            got = [(int(y - 0.5), int(x - 0.5)) for x, y in kps.points]
            assert got == list(zip(rows, cols))

    def test_stride_cell_centers(self):
        out = synthetic_output(8, 8, 4, seed=2, stride=2)
        kps = extract_keypoints(out, k=3, nms_radius=1)
        assert np.all((kps.points / 2 - 0.5) % 1 == 0)
        assert np.all(kps.points >= 0) and np.all(kps.points <= 16)

    def test_descriptor_unit_norm(self):
        net = FeatureNet(TINY)
        kps = extract_keypoints(net(random_image(32, 32)), k=20, nms_radius=2)
        assert np.max(np.abs(np.linalg.norm(kps.descriptors, axis=1) - 1.0)) < 1e-5


class TestDescribeAt:
    def test_cell_center_exact(self):
        out = synthetic_output(10, 10, 6, seed=1)
        d = describe_at(out, np.array([[3.5, 7.5]]))
        expected = out.descriptors[7, 3]
        assert torch.allclose(d[0], expected, atol=1e-12)

    def test_midpoint_of_orthogonal_descriptors(self):
        desc = np.zeros((2, 2, 4))
        desc[0, 0] = [1, 0, 0, 0]
        desc[0, 1] = [0, 1, 0, 0]
        desc[1, 0] = [0, 0, 1, 0]
        desc[1, 1] = [0, 0, 0, 1]
        out = FeatureOutput(
            features=torch.as_tensor(desc, dtype=torch.float64),
            descriptors=torch.as_tensor(desc, dtype=torch.float64),
            scores=torch.full((2, 2), 0.25, dtype=torch.float64),
            stride=1,
        )
        d = describe_at(out, np.array([[1.0, 0.5]]))  # midpoint of (0,0) and (0,1)
        expected = np.array([1, 1, 0, 0]) / np.sqrt(2)
        assert np.allclose(d[0].numpy(), expected, atol=1e-12)
        assert abs(float(torch.linalg.norm(d[0])) - 1.0) < 1e-6

    def test_matches_scalar_bilinear_oracle(self):
        rng = np.random.default_rng(23)
        for trial in range(20):
            stride = int(rng.choice([1, 2]))
            out = synthetic_output(9, 11, 5, seed=trial, stride=stride)
            pts = np.column_stack([
                rng.uniform(0, 11 * stride, 30), rng.uniform(0, 9 * stride, 30)])
            got = describe_at(out, pts).numpy()
            desc_map = out.descriptors_numpy()
            for p, g in zip(pts, got):
                expected = unit_descriptor_oracle(desc_map, p[0], p[1], stride)
                assert np.max(np.abs(g - expected)) < 1e-6

    def test_score_at_matches_oracle(self):
        rng = np.random.default_rng(29)
        out = synthetic_output(8, 8, 4, seed=5)
        pts = np.column_stack([rng.uniform(0, 8, 20), rng.uniform(0, 8, 20)])
        got = score_at(out, pts).numpy()
        smap = out.scores_numpy()
        for p, g in zip(pts, got):
            assert abs(g - bilinear_sample_oracle(smap, p[0], p[1], 1)) < 1e-12

    def test_out_of_bounds_listed(self):
        out = synthetic_output(8, 8, 4)
        with pytest.raises(ModelError, match="9"):
            describe_at(out, np.array([[9.0, 1.0]]))

    def test_sampled_descriptors_differentiable(self):
        net = FeatureNet(TINY, dtype=torch.float64)
        img = random_image(8, 8, seed=9)
        pts = np.array([[3.3, 4.1], [5.7, 2.2]])

        def objective(arr):
            x = torch.as_tensor(arr, dtype=torch.float64)
            return float(describe_at(net(x), pts).sum())

        x = torch.as_tensor(img).clone().requires_grad_(True)
        describe_at(net(x), pts).sum().backward()
        grad = x.grad.numpy()
        for i, j in [(3, 3), (4, 5), (2, 2)]:
            step = np.zeros_like(img)
            step[i, j] = 1e-4
            fd = (objective(img + step) - objective(img - step)) / 2e-4
            if abs(fd) > 1e-8:
                assert abs(grad[i, j] - fd) / abs(fd) < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = FeatureNet(TINY)
        path = tmp_path / "model.ckpt"
        save_model(path, net, meta={"step": 12})
        loaded, meta = load_model(path)
        assert meta["step"] == 12
        a, b = net.parameter_arrays(), loaded.parameter_arrays()
        for name in a:
            assert np.array_equal(a[name], b[name])

    def test_shape_mismatch_names_field(self, tmp_path):
        net = FeatureNet(TINY)
        arrays = net.parameter_arrays()
        arrays["conv1.weight"] = arrays["conv1.weight"][:, :, :2, :2]
        path = tmp_path / "model.ckpt"
        write_checkpoint(path, TINY, arrays)
        with pytest.raises(CheckpointError, match="conv1.weight"):
            load_model(path)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        net = FeatureNet(TINY)
        path = tmp_path / "model.ckpt"
        save_model(path, net)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_bytes_deterministic(self, tmp_path):
        net = FeatureNet(TINY)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_model(p1, net, meta={"step": 1})
        save_model(p2, net, meta={"step": 1})
        assert p1.read_bytes() == p2.read_bytes()
