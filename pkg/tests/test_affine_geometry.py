import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose, assert_array_equal

from models.exceptions import ConfigurationError, ContractError, NumericError
from models.schemas import AffineParams, AffineRanges, ComponentMask
from services.affine_geometry import (
    AffineMatrix,
    bounded_warp_matrix,
    build_matrices,
    build_matrix,
    denormalize_params,
    footprint_polygon,
    invert,
    invert_matrices,
    max_inscribed_rect,
    normalize_param_array,
    normalize_params,
    point_in_polygon,
    polygon_area,
    sample_affine_param_array,
    sample_affine_params,
    warp_image,
    warp_tensor,
)


def oracle_matrix(p: AffineParams, width: int, height: int) -> np.ndarray:
    """Explicit product C T R Sh Sc C^-1."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    t = np.deg2rad(p.theta)
    c = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=float)
    c_inv = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=float)
    tr = np.array([[1, 0, p.tx * width], [0, 1, p.ty * height], [0, 0, 1]], dtype=float)
    rot = np.array([[np.cos(t), -np.sin(t), 0], [np.sin(t), np.cos(t), 0], [0, 0, 1]])
    shx = np.array([[1, np.tan(np.deg2rad(p.sx)), 0], [0, 1, 0], [0, 0, 1]])
    shy = np.array([[1, 0, 0], [np.tan(np.deg2rad(p.sy)), 1, 0], [0, 0, 1]])
    sh = shx @ shy
    sc = np.diag([p.sigma, p.sigma, 1.0])
    return c @ tr @ rot @ sh @ sc @ c_inv


def grid_search_rect_area(poly: np.ndarray, samples: int = 400) -> float:
    """Best rectangle whose band edges lie on a regular grid of heights."""
    ys = np.linspace(poly[:, 1].min(), poly[:, 1].max(), samples)

    def extent(y):
        xs = []
        for a, b in zip(poly, np.roll(poly, -1, axis=0)):
            if (a[1] - y) * (b[1] - y) <= 0 and a[1] != b[1]:
                xs.append(a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1]))
        return (min(xs), max(xs)) if xs else (np.inf, -np.inf)

    bounds = np.array([extent(y) for y in ys])
    left = np.maximum(bounds[:, None, 0], bounds[None, :, 0])
    right = np.minimum(bounds[:, None, 1], bounds[None, :, 1])
    height = ys[None, :] - ys[:, None]
    area = np.where(height > 0, height * np.clip(right - left, 0.0, None), 0.0)
    return float(np.nanmax(area))


class TestSampling:
    def test_samples_lie_in_ranges(self):
        ranges = AffineRanges()
        params = sample_affine_param_array(np.random.default_rng(0), ComponentMask(), ranges, 500)
        assert params.shape == (500, 6)
        assert np.all((params[:, 0] >= -90) & (params[:, 0] <= 90))
        assert np.all(np.abs(params[:, 1:3]) <= 0.25)
        assert np.all((params[:, 3] >= 0.7) & (params[:, 3] <= 1.3))
        assert np.all(np.abs(params[:, 4:6]) <= 25)

    def test_signed_translation_covers_both_signs(self):
        params = sample_affine_param_array(np.random.default_rng(1), ComponentMask(), AffineRanges(), 200)
        assert (params[:, 1] < 0).any() and (params[:, 1] > 0).any()

    def test_one_sided_translation(self):
        ranges = AffineRanges(signed_translation=False)
        params = sample_affine_param_array(np.random.default_rng(1), ComponentMask(), ranges, 200)
        assert np.all(params[:, 1:3] >= 0.0)

    def test_rotation_only_mask(self):
        p = sample_affine_params(np.random.default_rng(3), ComponentMask.only("rotation"), AffineRanges())
        assert p.tx == 0.0 and p.ty == 0.0 and p.sigma == 1.0 and p.sx == 0.0 and p.sy == 0.0
        assert -90.0 <= p.theta <= 90.0

    def test_mask_does_not_shift_other_components(self):
        full = sample_affine_param_array(np.random.default_rng(5), ComponentMask(), AffineRanges(), 10)
        rot = sample_affine_param_array(np.random.default_rng(5), ComponentMask.only("rotation"), AffineRanges(), 10)
        assert_array_equal(full[:, 0], rot[:, 0])

    def test_collapsed_ranges_give_identity(self):
        p = sample_affine_params(np.random.default_rng(0), ComponentMask(), AffineRanges.identity())
        assert_array_equal(build_matrix(p, 32, 32).m, np.eye(3))

    def test_inverted_interval_is_rejected(self):
        with pytest.raises(ConfigurationError):
            sample_affine_params(np.random.default_rng(0), ComponentMask(), AffineRanges(scale=(1.3, 0.7)))

    def test_non_positive_scale_is_rejected(self):
        with pytest.raises(ConfigurationError):
            sample_affine_params(np.random.default_rng(0), ComponentMask(), AffineRanges(scale=(0.0, 1.0)))

    def test_large_sample_bounds(self):
        ranges = AffineRanges()
        params = sample_affine_param_array(np.random.default_rng(42), ComponentMask(), ranges, 100_000)
        bounds = ranges.target_intervals()
        assert np.all(params.min(axis=0) >= bounds[:, 0])
        assert np.all(params.max(axis=0) <= bounds[:, 1])
        assert abs(params[:, 0].mean()) < 1.0

    def test_empty_mask_is_rejected(self):
        empty = ComponentMask(use_translation=False, use_shear=False, use_rotation=False, use_scale=False)
        with pytest.raises(ConfigurationError):
            sample_affine_params(np.random.default_rng(0), empty, AffineRanges())


class TestBuildMatrix:
    def test_identity_is_exact(self):
        assert_array_equal(build_matrix(AffineParams.identity(), 64, 48).m, np.eye(3))

    def test_matches_explicit_product(self):
        rng = np.random.default_rng(0)
        params = sample_affine_param_array(rng, ComponentMask(), AffineRanges(), 1000)
        built = build_matrices(params, 32, 24)
        for row, m in zip(params, built):
            assert_allclose(m, oracle_matrix(AffineParams.from_vector(row), 32, 24), atol=1e-9, rtol=0)

    def test_rotation_by_90_maps_corner(self):
        m = build_matrix(AffineParams(theta=90.0), 3, 3)
        # centre (1, 1); (2, 1) rotates onto (1, 2) with y pointing down
        assert_allclose(m.m @ np.array([2.0, 1.0, 1.0]), [1.0, 2.0, 1.0], atol=1e-12)

    def test_translation_is_relative_to_size(self):
        m = build_matrix(AffineParams(tx=0.25), 100, 100)
        assert_allclose(m.m[:2, 2], [25.0, 0.0], atol=1e-12)

    def test_composition_and_inverse(self):
        m = build_matrix(AffineParams(theta=30.0, tx=0.1, sigma=1.2, sx=10.0), 32, 32)
        assert_allclose((m @ invert(m)).m, np.eye(3), atol=1e-12)

    def test_equal_shear_angles_stay_invertible(self):
        m = build_matrix(AffineParams(sx=45.0, sy=45.0), 32, 32)
        assert np.linalg.det(m.m[:2, :2]) == pytest.approx(1.0, abs=1e-12)
        assert_allclose((m @ invert(m)).m, np.eye(3), atol=1e-9)

    def test_determinant_is_scale_squared(self):
        ranges = AffineRanges(shear=(-60.0, 60.0))
        params = sample_affine_param_array(np.random.default_rng(2), ComponentMask(), ranges, 1000)
        dets = np.linalg.det(build_matrices(params, 32, 32)[:, :2, :2])
        assert_allclose(dets, params[:, 3] ** 2, rtol=1e-9)

    def test_singular_matrix(self):
        singular = AffineMatrix(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]), 8, 8)
        with pytest.raises(NumericError):
            invert(singular)

    def test_bad_bottom_row(self):
        with pytest.raises(ContractError):
            AffineMatrix(np.ones((3, 3)), 8, 8)


class TestWarp:
    def test_identity_warp_is_lossless(self, image_batch):
        out = warp_tensor(image_batch, np.eye(3))
        torch.testing.assert_close(out, image_batch, atol=1e-6, rtol=0)

    def test_integer_translation_moves_pixels(self):
        img = torch.zeros(1, 1, 8, 8)
        img[0, 0, 2, 3] = 1.0
        m = build_matrix(AffineParams(tx=1 / 8, ty=2 / 8), 8, 8)
        out = warp_image(img, m)
        assert out[0, 0, 4, 4].item() == pytest.approx(1.0, abs=1e-6)
        assert out.sum().item() == pytest.approx(1.0, abs=1e-6)

    def test_outside_source_is_zero(self):
        img = torch.ones(1, 3, 8, 8)
        out = warp_image(img, build_matrix(AffineParams(tx=0.5), 8, 8))
        assert torch.all(out[..., :, :3] == 0.0)

    def test_half_turn_is_a_double_flip(self):
        img = (torch.arange(16, dtype=torch.float32) / 15.0).reshape(1, 1, 4, 4)
        out = warp_image(img, build_matrix(AffineParams(theta=180.0), 4, 4))
        torch.testing.assert_close(out, img.flip(-1).flip(-2), atol=1e-5, rtol=0)

    def test_inverse_warp_restores_interior_pixels(self):
        size = 32
        coords = torch.arange(size, dtype=torch.float64)
        smooth = 0.5 + 0.25 * torch.sin(2 * np.pi * coords / 40)[None, :] + 0.25 * torch.cos(2 * np.pi * coords / 40)[:, None]
        images = smooth.expand(20, 3, size, size).contiguous()
        params = sample_affine_param_array(np.random.default_rng(9), ComponentMask(), AffineRanges(), 20)
        matrices = build_matrices(params, size, size)
        restored = warp_tensor(warp_tensor(images, matrices), invert_matrices(matrices))

        ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        q = np.stack([xs.ravel(), ys.ravel(), np.ones(size * size)])
        checked = 0
        for n, m in enumerate(matrices):
            r = m @ q
            # both the output pixel and its round-trip source stay clear of the zero fill
            inside = np.all((q[:2] >= 4) & (q[:2] <= size - 5), axis=0)
            inside &= np.all((r[:2] >= 2) & (r[:2] <= size - 3), axis=0)
            diff = (restored[n, 0] - images[n, 0]).numpy().ravel()[inside]
            assert np.all(np.abs(diff) <= 2e-2)
            checked += int(inside.sum())
        assert checked > 0

    def test_per_element_matrices(self, image_batch):
        matrices = np.stack([np.eye(3)] * 4)
        matrices[1] = build_matrix(AffineParams(theta=45.0), 16, 16).m
        out = warp_tensor(image_batch, matrices)
        torch.testing.assert_close(out[0], image_batch[0], atol=1e-6, rtol=0)
        assert not torch.allclose(out[1], image_batch[1])

    def test_gradients_reach_the_image(self, image_batch):
        x = image_batch.clone().double().requires_grad_(True)
        m = build_matrix(AffineParams(theta=20.0, sigma=0.9), 16, 16)
        warp_tensor(x, m.m).sum().backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()

    def test_size_mismatch(self, image_batch):
        with pytest.raises(ContractError):
            warp_image(image_batch, build_matrix(AffineParams(), 32, 32))


class TestBoundedCrop:
    def test_identity_footprint_is_full_image(self):
        poly = footprint_polygon(build_matrix(AffineParams(), 32, 32), 32, 32)
        rect = max_inscribed_rect(poly)
        assert rect.area == pytest.approx(31.0 * 31.0, rel=1e-5)

    def test_rotated_footprint_corners(self):
        poly = footprint_polygon(build_matrix(AffineParams(theta=45.0), 33, 33), 33, 33)
        r = 16.0 * np.sqrt(2.0)
        expected = np.array([[16.0, 16.0 - r], [16.0 + r, 16.0], [16.0, 16.0 + r], [16.0 - r, 16.0]])
        assert_allclose(poly, expected, atol=1e-9, rtol=0)

    def test_sheared_footprint_is_a_parallelogram(self):
        poly = footprint_polygon(build_matrix(AffineParams(sx=25.0), 32, 32), 32, 32)
        edges = np.roll(poly, -1, axis=0) - poly

        def cross(a, b):
            return a[0] * b[1] - a[1] * b[0]

        assert abs(cross(edges[0], edges[2])) <= 1e-9
        assert abs(cross(edges[1], edges[3])) <= 1e-9
        assert abs(float(edges[0] @ edges[1])) > 1.0

    def test_rotated_square_gives_inner_square(self):
        m = build_matrix(AffineParams(theta=45.0), 33, 33)
        rect = max_inscribed_rect(footprint_polygon(m, 33, 33))
        # diamond with half-diagonal 16 * sqrt(2): inscribed square side 16 * sqrt(2)
        assert rect.area == pytest.approx((16.0 * np.sqrt(2.0)) ** 2, rel=1e-3)

    def test_against_grid_search(self):
        rng = np.random.default_rng(7)
        mask = ComponentMask(use_translation=False, use_scale=False)
        for _ in range(100):
            p = sample_affine_params(rng, mask, AffineRanges())
            poly = footprint_polygon(build_matrix(p, 32, 32), 32, 32)
            rect = max_inscribed_rect(poly)
            assert rect.area >= 0.99 * grid_search_rect_area(poly, samples=400)
            for corner in rect.corners():
                assert point_in_polygon(corner, poly)

    def test_degenerate_polygon(self):
        with pytest.raises(NumericError):
            max_inscribed_rect(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))

    def test_polygon_area_orientation(self):
        square = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        assert polygon_area(square) == pytest.approx(1.0)
        assert polygon_area(square[::-1]) == pytest.approx(-1.0)

    def test_bounded_warp_has_no_background(self):
        img = torch.ones(1, 3, 32, 32)
        m = build_matrix(AffineParams(theta=30.0, sx=15.0), 32, 32)
        composite, _ = bounded_warp_matrix(m)
        out = warp_image(img, composite)
        assert out.min().item() > 0.99


class TestNormalization:
    def test_endpoints(self):
        ranges = AffineRanges()
        low = normalize_params(AffineParams(theta=-90.0, tx=-0.25, ty=-0.25, sigma=0.7, sx=-25.0, sy=-25.0), ranges)
        high = normalize_params(AffineParams(theta=90.0, tx=0.25, ty=0.25, sigma=1.3, sx=25.0, sy=25.0), ranges)
        assert_allclose(low, -np.ones(6))
        assert_allclose(high, np.ones(6))

    def test_identity_with_signed_translation(self):
        assert_allclose(normalize_params(AffineParams(), AffineRanges()), np.zeros(6), atol=1e-12)

    def test_one_sided_translation_identity_is_minus_one(self):
        values = normalize_params(AffineParams(), AffineRanges(signed_translation=False))
        assert values[1] == pytest.approx(-1.0)

    def test_denormalize_inverts(self):
        p = AffineParams(theta=12.0, tx=0.1, ty=-0.2, sigma=1.1, sx=-5.0, sy=20.0)
        back = denormalize_params(normalize_params(p, AffineRanges()), AffineRanges())
        assert_allclose(back.to_vector(), p.to_vector(), atol=1e-12)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            normalize_params(AffineParams(theta=120.0), AffineRanges())

    def test_collapsed_interval_maps_to_zero(self):
        values = normalize_param_array(np.array([[5.0]]), AffineRanges(rotation=(5.0, 5.0)), columns=[0])
        assert_array_equal(values, [[0.0]])
