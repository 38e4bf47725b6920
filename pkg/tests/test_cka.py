import numpy as np
import pytest
import torch
from scipy.stats import ortho_group

from miscalib.cka import (MAX_FEATURES, CKAMatrix, capture, capture_encoder, cka_grid, export,
                          linear_cka)
from miscalib.model import Encoder, EncoderConfig, MiscalibrationDetector


def feature_space_cka(x, y):
    """Oracle: ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on centered features."""
    x = x - x.mean(0)
    y = y - y.mean(0)
    return np.linalg.norm(y.T @ x) ** 2 / (np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y))


class TestLinearCKA:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(50, 20))
        assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_matches_feature_space_form(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(40, 30)), rng.normal(size=(40, 12))
        y[:, :5] += x[:, :5]
        assert linear_cka(x, y) == pytest.approx(feature_space_cka(x, y), abs=1e-10)

    def test_orthogonal_and_scale_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(60, 16)), rng.normal(size=(60, 24))
        y[:, :8] += 2 * x[:, :8]
        q = ortho_group.rvs(16, random_state=3)
        base = linear_cka(x, y)
        assert abs(linear_cka(x @ q, y) - base) < 1e-6
        assert abs(linear_cka(7.5 * x, 0.01 * y) - base) < 1e-6
        assert abs(linear_cka(x + 3.0, y) - base) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(30, 9)), rng.normal(size=(30, 14))
        assert abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-9

    @pytest.mark.parametrize("n,p", [(100, 64), (1000, 64)])
    def test_random_baseline_matches_analytic_level(self, n, p):
        # independent Gaussian X, Y concentrate at p / (p + n)
        vals = [linear_cka(*np.random.default_rng(s).normal(size=(2, n, p))) for s in range(100)]
        assert abs(np.mean(vals) - p / (p + n)) < 0.01

    def test_random_baseline_low_when_samples_dominate(self):
        worst = max(linear_cka(*np.random.default_rng(s).normal(size=(2, 1000, 64)))
                    for s in range(100))
        assert worst < 0.2

    def test_degenerate(self):
        x = np.random.default_rng(0).normal(size=(10, 4))
        assert linear_cka(np.ones((10, 3)), x) == 0.0
        with pytest.raises(ValueError):
            linear_cka(x, x[:9])
        with pytest.raises(ValueError):
            linear_cka(x[:1], x[:1])


class TestCapture:
    def test_small_has_five_points(self):
        enc = Encoder(EncoderConfig("resnet18_small", 1))
        tr = capture_encoder(enc, torch.rand(4, 1, 64, 64))
        assert tr.names == ["stem", "layer1.0", "layer1.1", "layer2.0", "layer2.1"]
        assert tr.n_samples == 4

    def test_subsamples_large_layers(self):
        enc = Encoder(EncoderConfig("resnet18_small", 1))
        tr = capture_encoder(enc, torch.rand(2, 1, 64, 128), ["stem"])
        # stem: 64 x 16 x 32 = 32768 > MAX_FEATURES, so every 4th row and column
        assert 64 * 16 * 32 > MAX_FEATURES and tr.layers["stem"].shape == (2, 64 * 4 * 8)

    def test_unknown_layer(self):
        with pytest.raises(KeyError):
            capture_encoder(Encoder(EncoderConfig("resnet18_small", 1)), torch.rand(2, 1, 32, 32),
                            ["layer4.1"])

    def test_restores_mode_and_removes_hooks(self):
        enc = Encoder(EncoderConfig("resnet18_small", 1)).train()
        capture_encoder(enc, torch.rand(2, 1, 32, 32))
        assert enc.training
        assert all(not m._forward_hooks for m in enc.modules())


def test_grid_and_export(tmp_path):
    torch.manual_seed(0)
    model = MiscalibrationDetector()
    images, depths = torch.rand(6, 3, 32, 64), torch.rand(6, 1, 32, 64)
    ti, tl = capture(model, images, depths)
    m = cka_grid(ti, ti)
    np.testing.assert_allclose(np.diag(m.values), 1.0, atol=1e-6)
    m = cka_grid(ti, tl)
    assert m.values.shape == (5, 5) and ((m.values >= 0) & (m.values <= 1)).all()
    assert m.deepest_block().shape == (2, 2)
    np.testing.assert_array_equal(m.deepest_block(), m.values[-2:, -2:])
    csv_path, png_path = export(m, tmp_path, "calibrated")
    back = CKAMatrix.from_csv(csv_path.read_text())
    np.testing.assert_allclose(back.values, m.values, atol=1e-9)
    assert back.image_layers == m.image_layers and png_path.stat().st_size > 0
