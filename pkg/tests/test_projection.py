"""Projector oracles: chord lengths, mass conservation, adjointness, FBP,
visibility masks, phantoms."""

import math

import numpy as np
import pytest

from sinostd.metrics import psnr
from sinostd.projection import (Geometry, Image, ProjectionError, Sinogram,
                                back_project, disk_phantom, fbp,
                                forward_project, random_ellipse_phantom,
                                shepp_logan, visibility_mask, _fov_mask,
                                _project_view)


@pytest.fixture(scope="module")
def geom64():
    return Geometry(64, 64)


@pytest.fixture(scope="module")
def disk64(geom64):
    image = disk_phantom(64, radius=20.0)
    return image, forward_project(image, geom64)


@pytest.fixture(scope="module")
def disk128():
    geometry = Geometry(128, 128)
    image = disk_phantom(128, radius=40.0)
    return geometry, forward_project(image, geometry)


class TestGeometry:
    def test_default_angles_even_half_turn(self):
        g = Geometry(8, 16)
        assert np.allclose(g.angles, np.arange(8) * math.pi / 8)
        assert g.fov_radius == 8.0

    def test_invalid_counts(self):
        with pytest.raises(ProjectionError):
            Geometry(0, 8)
        with pytest.raises(ProjectionError):
            Geometry(8, 0)

    def test_angles_must_increase(self):
        with pytest.raises(ProjectionError, match="increasing"):
            Geometry(3, 8, angles=np.array([0.0, 0.5, 0.2]))

    def test_angles_range_checked(self):
        with pytest.raises(ProjectionError, match="2\\*pi"):
            Geometry(2, 8, angles=np.array([0.0, 7.0]))


class TestForwardProject:
    def test_zero_image_zero_sinogram(self, geom64):
        sino = forward_project(Image(np.zeros((64, 64), dtype=np.float32)), geom64)
        assert np.all(sino.values == 0)

    def test_disk_views_identical(self, disk128):
        geometry, sino = disk128
        sel = np.abs(geometry.bin_centers) < 0.9 * 40.0
        spread = np.abs(sino.values[:, sel] - sino.values[0][sel]).max() / sino.values.max()
        assert spread < 0.02

    def test_disk_chord_lengths_every_view(self, disk128):
        geometry, sino = disk128
        s = geometry.bin_centers
        r = 40.0
        sel = np.abs(s) < 0.9 * r
        chord = 2.0 * np.sqrt(r * r - s[sel] ** 2)
        rel = np.abs(sino.values[:, sel] - chord[None, :]) / chord[None, :]
        assert rel.max() < 0.02

    def test_per_view_mass_equals_disk_area(self, disk128):
        geometry, sino = disk128
        mass = sino.values.sum(axis=1) * geometry.detector_spacing
        area = math.pi * 40.0 ** 2
        assert np.abs(mass - area).max() / area < 0.01
        assert (mass.max() - mass.min()) / mass.mean() < 0.01

    def test_linearity(self, geom64):
        a = random_ellipse_phantom(64, seed=1)
        b = random_ellipse_phantom(64, seed=2)
        combo = Image(2.0 * a.values + 3.0 * b.values)
        lhs = forward_project(combo, geom64).values
        rhs = 2.0 * forward_project(a, geom64).values + 3.0 * forward_project(b, geom64).values
        assert np.abs(lhs - rhs).max() <= 1e-5 * np.abs(rhs).max()

    def test_mass_conservation_any_image(self, geom64):
        rng = np.random.default_rng(5)
        image = Image((rng.random((64, 64)) * _fov_mask(64, 1.0, 24.0)).astype(np.float32))
        sums = forward_project(image, geom64).values.sum(axis=1)
        assert (sums.max() - sums.min()) / sums.mean() < 0.01


class TestBackProjectAndFbp:
    def test_zero_sinogram_zero_image(self, geom64):
        out = back_project(Sinogram(geom64, np.zeros((64, 64), dtype=np.float32)))
        assert np.all(out.values == 0)

    @pytest.mark.parametrize("n_bins", [64, 128, 384])
    def test_adjoint_identity(self, n_bins):
        geometry = Geometry(32, n_bins)
        rng = np.random.default_rng(n_bins)
        side = n_bins
        x = rng.normal(size=(side, side)).astype(np.float32)
        y = rng.normal(size=(32, n_bins)).astype(np.float32)
        px = forward_project(Image(x), geometry).values.astype(np.float64)
        bpy = back_project(Sinogram(geometry, y), side=side).values.astype(np.float64)
        lhs = float((px * y).sum())
        rhs = float((x * bpy).sum())
        assert abs(lhs - rhs) / abs(lhs) < 1e-4

    def test_constant_sinogram_rotationally_symmetric(self, geom64):
        image = back_project(Sinogram(geom64, np.ones((64, 64), dtype=np.float32)))
        c = (64 - 1) / 2.0
        radii = np.arange(4, 26)
        profiles = []
        for ang in np.linspace(0, 2 * math.pi, 12, endpoint=False):
            px = np.round(c + radii * math.cos(ang)).astype(int)
            py = np.round(c + radii * math.sin(ang)).astype(int)
            profiles.append(image.values[py, px])
        profiles = np.array(profiles)
        rel_std = profiles.std(axis=0) / profiles.mean(axis=0)
        assert rel_std.max() < 0.02

    def test_fbp_zero(self, geom64):
        out = fbp(Sinogram(geom64, np.zeros((64, 64), dtype=np.float32)))
        assert np.all(out.values == 0)

    def test_fbp_shepp_logan_roundtrip(self):
        geometry = Geometry(128, 128)
        phantom = shepp_logan(128)
        rec = fbp(forward_project(phantom, geometry))
        assert psnr(rec.values, phantom.values) >= 25.0

    def test_fbp_disk_mean_value(self, geom64, disk64):
        _, sino = disk64
        rec = fbp(sino)
        inside = _fov_mask(64, 1.0, 0.8 * 20.0)
        assert abs(rec.values[inside].mean() - 1.0) < 0.1


class TestVisibilityMask:
    def test_full_support_two_views_matches_disk_projection(self):
        geometry = Geometry(32, 32)
        full = Sinogram(geometry, np.ones((32, 32), dtype=np.float32))
        target = geometry.angles[8]
        vm = visibility_mask(full, [0, 16], target)
        region = _fov_mask(32, 1.0, geometry.fov_radius).astype(np.float64)
        proj = _project_view(region, geometry, 1.0, target)
        assert np.array_equal(vm.mask, proj > 0)

    def test_known_angle_self_consistency(self):
        geometry = Geometry(32, 32)
        phantom = random_ellipse_phantom(32, seed=4)
        sino = forward_project(phantom, geometry)
        vm = visibility_mask(sino, [0, 5, 16], geometry.angles[5])
        row = sino.values[5]
        support = row > 1e-6 * row.max()
        assert np.all(vm.mask[support])

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_phantom_projection_zero_outside_mask(self, seed):
        geometry = Geometry(32, 32)
        phantom = random_ellipse_phantom(32, seed=seed)
        sino = forward_project(phantom, geometry)
        known = [0, 8, 16, 24]
        for target_idx in (3, 11, 21):
            vm = visibility_mask(sino, known, geometry.angles[target_idx])
            outside = sino.values[target_idx][~vm.mask]
            assert outside.size == 0 or np.abs(outside).max() == 0.0

    def test_monotone_in_known_set(self):
        geometry = Geometry(32, 32)
        phantom = random_ellipse_phantom(32, seed=9)
        sino = forward_project(phantom, geometry)
        target = geometry.angles[13]
        small = visibility_mask(sino, [0, 16], target).mask
        large = visibility_mask(sino, [0, 8, 16, 24], target).mask
        assert np.all(large <= small)

    def test_empty_support_gives_all_false(self):
        geometry = Geometry(16, 16)
        sino = Sinogram(geometry, np.zeros((16, 16), dtype=np.float32))
        vm = visibility_mask(sino, [0], geometry.angles[4])
        assert not vm.mask.any()

    def test_needs_known_views(self):
        geometry = Geometry(16, 16)
        sino = Sinogram(geometry, np.ones((16, 16), dtype=np.float32))
        with pytest.raises(ProjectionError, match="at least one"):
            visibility_mask(sino, [], 0.5)


class TestPhantoms:
    def test_shepp_logan_range(self):
        values = shepp_logan(64).values
        assert values.min() >= 0.0
        assert np.isclose(values.max(), 1.0)

    def test_random_phantom_deterministic(self):
        a = random_ellipse_phantom(64, seed=12)
        b = random_ellipse_phantom(64, seed=12)
        assert np.array_equal(a.values, b.values)
        c = random_ellipse_phantom(64, seed=13)
        assert not np.array_equal(a.values, c.values)

    @pytest.mark.parametrize("seed", [0, 5, 11])
    def test_support_inside_fov_disk(self, seed):
        values = random_ellipse_phantom(64, seed=seed).values
        outside = ~_fov_mask(64, 1.0, 32.0)
        assert np.all(values[outside] == 0.0)

    def test_nonnegative(self):
        for seed in range(6):
            assert random_ellipse_phantom(48, seed=seed).values.min() >= 0.0

    def test_min_side(self):
        with pytest.raises(ProjectionError, match=">= 16"):
            shepp_logan(8)
