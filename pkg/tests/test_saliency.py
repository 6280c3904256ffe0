"""Saliency-map oracles: analytic linear model, shift-map contracts, and
dispersion normalization closed forms."""

import numpy as np
import pytest

from centerbias import data, saliency, tensor_core as tc, unet


def linear_model(seed=0, base=4, scale=1.0):
    """Depth-1 U-Net rigged to be linear: encoder convs are identity kernels,
    so logits_k = sum_c w_head[k,c] * x + b_k for non-negative inputs."""
    cfg = unet.UNetConfig(depth=1, base_channels=base, padding=tc.ZERO,
                          precision="f64", seed=seed)
    model = unet.build_unet(cfg)
    for layer in model.encoder[0]:
        layer.weight[...] = 0
        for o in range(layer.spec.out_channels):
            layer.weight[o, o % layer.spec.in_channels, 1, 1] = 1.0
        layer.bias[...] = 0
    model.head.weight[...] *= scale
    return model


def centered_sample(H=16, W=16, size=4, cls=2):
    bg = np.full((H, W), 0.25, dtype=np.float32)
    return data.composite_sample(np.ones((size, size)), cls, bg, (0, 0))


class TestSaliencyMap:
    def test_linear_model_analytic_oracle(self):
        model = linear_model()
        s = centered_sample()
        m = saliency.saliency_map(model, s)
        mask = s.target > 0
        count = mask.sum()
        k = s.meta.digit_class + 1
        expected = abs(model.head.weight[k, :, 0, 0].sum()) / count
        np.testing.assert_allclose(m[mask], expected, rtol=1e-12)
        assert (m[~mask] == 0).all()

    def test_gradient_linearity_under_logit_scaling(self):
        s = centered_sample()
        m1 = saliency.saliency_map(linear_model(), s)
        m2 = saliency.saliency_map(linear_model(scale=2.0), s)
        np.testing.assert_allclose(m2, 2 * m1, rtol=1e-10)

    def test_map_dims_match_input(self):
        model = unet.build_unet(unet.UNetConfig(depth=2, base_channels=4))
        s = centered_sample(24, 32)
        assert saliency.saliency_map(model, s).shape == (24, 32)

    def test_empty_mask_rejected(self):
        model = linear_model()
        s = centered_sample()
        s.target[...] = 0
        with pytest.raises(ValueError):
            saliency.saliency_map(model, s)

    def test_nonnegative(self):
        model = unet.build_unet(unet.UNetConfig(depth=2, base_channels=4,
                                                seed=3))
        m = saliency.saliency_map(model, centered_sample(24, 32))
        assert (m >= 0).all()


class TestDispersionNormalize:
    def test_closed_form_2x2(self):
        m = np.array([[0.0, 2.0], [4.0, 6.0]])
        out, flag = saliency.dispersion_normalize(m)
        assert flag
        np.testing.assert_allclose(
            out, np.array([[0.0, 0.894], [1.789, 2.683]]), atol=5e-4)

    def test_constant_matrix_flagged(self):
        m = np.full((3, 3), 1.5)
        out, flag = saliency.dispersion_normalize(m)
        assert not flag
        np.testing.assert_array_equal(out, m)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        m = rng.random((4, 5))
        a, _ = saliency.dispersion_normalize(m)
        b, _ = saliency.dispersion_normalize(3.7 * m)
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestScene:
    def test_crop_contains_glyph_everywhere(self):
        glyph = data.builtin_glyphs().images[3]
        scene = saliency.make_scene(glyph, 3, (64, 96), (16, 8))
        for dx, dy in ((0, 0), (16, 8), (-16, -8), (16, -8)):
            s = scene.crop(dx, dy)
            assert (s.target > 0).sum() == (glyph > 0.5).sum()
            assert s.input.shape == (1, 1, 64, 96)

    def test_shift_beyond_margin_rejected(self):
        glyph = data.builtin_glyphs().images[0]
        scene = saliency.make_scene(glyph, 0, (64, 96), (4, 4))
        with pytest.raises(ValueError):
            scene.crop(5, 0)

    def test_excessive_extent_rejected(self):
        glyph = data.builtin_glyphs().images[0]
        with pytest.raises(ValueError):
            saliency.make_scene(glyph, 0, (32, 32), (16, 16))

    def test_grid_requires_stride_alignment(self):
        with pytest.raises(ValueError):
            saliency.ShiftGrid(extent_x=6, extent_y=4, stride=4)


class TestShiftMap:
    def make(self, padding, seed=0):
        cfg = unet.UNetConfig(depth=3, base_channels=4, padding=padding,
                              seed=seed)
        model = unet.build_unet(cfg)
        # non-zero biases matter: with all-zero biases a black region stays
        # exactly zero in every layer and zero padding becomes a no-op
        rng = np.random.default_rng(seed + 100)
        for layer in model.layers():
            layer.bias[...] = rng.uniform(-0.3, 0.3, layer.bias.shape)
        glyph = data.builtin_glyphs().images[5]
        scene = saliency.make_scene(glyph, 5, (64, 96), (8, 8))
        return model, scene

    def test_origin_entry_exactly_zero(self):
        model, scene = self.make(tc.ZERO)
        grid = saliency.ShiftGrid(4, 4, 4)
        sm = saliency.saliency_shift_map(model, scene, grid)
        assert sm.raw[1, 1] == 0.0

    def test_recompute_identical(self):
        model, scene = self.make(tc.ZERO)
        grid = saliency.ShiftGrid(4, 4, 4)
        a = saliency.saliency_shift_map(model, scene, grid)
        b = saliency.saliency_shift_map(model, scene, grid)
        np.testing.assert_array_equal(a.values, b.values)

    def test_circular_model_near_zero_at_aligned_shifts(self):
        # black canvas: crop translation equals a circular roll, which a
        # circular-padding net commutes with at pool-aligned shifts
        model, scene = self.make(tc.CIRCULAR, seed=4)
        grid = saliency.ShiftGrid(8, 8, 4)
        sm = saliency.saliency_shift_map(model, scene, grid)
        assert sm.raw.max() < 1e-4, sm.raw.max()

    def test_zero_model_not_equivariant(self):
        # same weights, same scene: only the padding mode differs, and the
        # zero-padded net's saliency drifts orders of magnitude more
        model_z, scene = self.make(tc.ZERO, seed=0)
        model_c, _ = self.make(tc.CIRCULAR, seed=0)
        grid = saliency.ShiftGrid(8, 8, 4)
        raw_z = saliency.saliency_shift_map(model_z, scene, grid).raw
        raw_c = saliency.saliency_shift_map(model_c, scene, grid).raw
        assert raw_z.max() > 1e-4
        assert raw_z.max() > 100 * raw_c.max()

    def test_export_roundtrip(self, tmp_path):
        model, scene = self.make(tc.ZERO)
        grid = saliency.ShiftGrid(4, 4, 4)
        sm = saliency.saliency_shift_map(model, scene, grid)
        saliency.export_shift_map(sm, tmp_path / "probe")
        rows = (tmp_path / "probe.csv").read_text().strip().splitlines()
        assert rows[0].split(",")[1:] == ["-4", "0", "4"]
        assert len(rows) == 4
        back = np.array([[float(v) for v in r.split(",")[1:]]
                         for r in rows[1:]])
        np.testing.assert_allclose(back, sm.values, rtol=1e-6)
        assert (tmp_path / "probe.pgm").exists()
