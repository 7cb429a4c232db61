"""Tests for template construction, filtering, and serialization."""

import time

import numpy as np
import pytest

from fixtures import blob_volume, unit_frobenius
from sfn.errors import ArgumentError, DegenerateTemplateError, ShapeError
from sfn.metrics import pcc
from sfn.templates import (
    TemplateSet,
    external_templates,
    load_templates,
    lowpass,
    make_projection_templates,
    make_rotation_templates,
    save_templates,
)
from sfn.tensors import RotationGrid, project_volume, sample_rotation_grid


def _random_set(count, side, seed, ndim=2):
    rng = np.random.default_rng(seed)
    shape = (count,) + (side,) * ndim
    return np.stack([unit_frobenius(t) for t in rng.standard_normal(shape)])


class TestTemplateSet:
    def test_rejects_non_unit_norm(self):
        stack = _random_set(2, 6, 0)
        stack[1] *= 1.5
        with pytest.raises(ArgumentError, match="norm"):
            TemplateSet(stack, kind="external")

    def test_rejects_duplicates(self):
        stack = _random_set(3, 6, 1)
        stack[2] = stack[0]
        with pytest.raises(ArgumentError, match="not distinct"):
            TemplateSet(stack, kind="external")

    def test_rejects_unknown_kind(self):
        with pytest.raises(ArgumentError, match="kind"):
            TemplateSet(_random_set(2, 6, 2), kind="mystery")

    def test_rejects_grid_length_mismatch(self):
        with pytest.raises(ArgumentError, match="grid"):
            TemplateSet(
                _random_set(2, 6, 3),
                kind="projection-2d",
                grid=sample_rotation_grid(3, 5),
            )

    def test_rejects_ragged_rank(self):
        with pytest.raises(ShapeError):
            TemplateSet(np.zeros((2, 4)), kind="external")

    def test_immutable_stack(self):
        ts = TemplateSet(_random_set(2, 6, 4), kind="external")
        with pytest.raises(ValueError):
            ts.templates[0, 0, 0] = 5.0


class TestProjectionTemplates:
    def test_identity_grid_is_straight_projection(self):
        v = blob_volume(12)
        ts = make_projection_templates(v, 1, seed=0, grid=RotationGrid.identity())
        expected = project_volume(v)
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(ts[0], expected, atol=1e-12)
        assert ts.kind == "projection-2d"

    def test_unit_norms(self):
        ts = make_projection_templates(blob_volume(12), 4, seed=9)
        norms = np.linalg.norm(ts.templates.reshape(4, -1), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_spherical_blob_projections_nearly_agree(self):
        """A centered symmetric blob projects to almost the same image from
        every direction; only interpolation keeps the five apart."""
        v = blob_volume(16, centers=[(0.5, 0.5, 0.5)], widths=[0.09], weights=[1.0])
        ts = make_projection_templates(v, 5, seed=77)
        scores = [pcc(ts[i], ts[j]) for i in range(5) for j in range(i + 1, 5)]
        assert min(scores) >= 0.99

    def test_deterministic(self):
        v = blob_volume(10)
        a = make_projection_templates(v, 3, seed=4)
        b = make_projection_templates(v, 3, seed=4)
        assert a.templates.tobytes() == b.templates.tobytes()

    def test_zero_volume_degenerate(self):
        with pytest.raises(DegenerateTemplateError):
            make_projection_templates(np.zeros((8, 8, 8)), 2, seed=1)


class TestRotationTemplates:
    def test_identity_is_normalized_copy(self):
        v = blob_volume(10)
        ts = make_rotation_templates(v, 1, seed=0, grid=RotationGrid.identity())
        np.testing.assert_allclose(ts[0], v / np.linalg.norm(v), atol=1e-12)
        assert ts.kind == "rotation-3d"

    def test_deterministic(self):
        v = blob_volume(10)
        a = make_rotation_templates(v, 3, seed=11)
        b = make_rotation_templates(v, 3, seed=11)
        assert a.templates.tobytes() == b.templates.tobytes()

    def test_fifty_rotations_build_quickly(self):
        v = blob_volume(24)
        start = time.monotonic()
        ts = make_rotation_templates(v, 50, seed=3)
        elapsed = time.monotonic() - start
        assert len(ts) == 50
        assert elapsed < 10.0


class TestLowpass:
    def test_full_band_is_identity(self):
        ts = external_templates(_random_set(3, 8, 6))
        assert lowpass(ts, 1.0) is ts

    def test_matches_direct_mask(self):
        """Hard mask + renormalize, recomputed in the test from scratch."""
        ts = external_templates(_random_set(2, 16, 7))
        out = lowpass(ts, 0.5)
        freqs = np.fft.fftfreq(16)
        fy, fx = np.meshgrid(freqs, freqs, indexing="ij")
        mask = fy ** 2 + fx ** 2 <= 0.25 ** 2
        for got, raw in zip(out, ts):
            want = np.fft.ifftn(np.fft.fftn(raw) * mask).real
            want /= np.linalg.norm(want)
            np.testing.assert_allclose(got, want, atol=1e-12)

    def test_white_noise_energy_fraction(self):
        """Retained energy tracks the fraction of Fourier bins kept, which
        for a half-Nyquist disk is about pi/16 of a 2D spectrum."""
        side = 64
        ts = external_templates(_random_set(1, side, 8))
        freqs = np.fft.fftfreq(side)
        fy, fx = np.meshgrid(freqs, freqs, indexing="ij")
        mask = fy ** 2 + fx ** 2 <= 0.25 ** 2
        bin_fraction = mask.mean()
        spectrum = np.abs(np.fft.fftn(ts[0])) ** 2
        energy_fraction = spectrum[mask].sum() / spectrum.sum()
        assert abs(bin_fraction - np.pi / 16) < 0.01
        assert abs(energy_fraction - bin_fraction) < 0.02
        filtered = np.fft.ifftn(np.fft.fftn(ts[0]) * mask).real
        np.testing.assert_allclose(
            np.linalg.norm(filtered) ** 2, energy_fraction, rtol=1e-10
        )

    def test_filtered_set_unit_norm(self):
        ts = lowpass(external_templates(_random_set(3, 12, 9)), 0.4)
        norms = np.linalg.norm(ts.templates.reshape(3, -1), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-9)

    def test_all_energy_removed_degenerate(self):
        """Zero-mean oscillation has nothing below a tiny cutoff."""
        side = 16
        row = np.cos(2 * np.pi * np.arange(side) * 8 / side)
        t = unit_frobenius(np.tile(row, (side, 1)))
        ts = TemplateSet(np.stack([t, unit_frobenius(np.roll(t, 1, axis=1) + 0.3 * t)]), kind="external")
        with pytest.raises(DegenerateTemplateError):
            lowpass(ts, 0.05)

    def test_rejects_bad_cutoff(self):
        ts = external_templates(_random_set(2, 8, 10))
        for cutoff in (0.0, -0.5, 1.5):
            with pytest.raises(ArgumentError):
                lowpass(ts, cutoff)


class TestSerialization:
    def test_roundtrip_projection_set(self, tmp_path):
        ts = make_projection_templates(blob_volume(12), 4, seed=5)
        save_templates(ts, tmp_path / "set")
        back = load_templates(tmp_path / "set")
        assert back.kind == ts.kind
        assert len(back) == len(ts)
        for a, b in zip(back.grid, ts.grid):
            np.testing.assert_array_equal(a.quaternion, b.quaternion)
        np.testing.assert_allclose(back.templates, ts.templates, atol=1e-6)
        for a, b in zip(back, ts):
            assert pcc(a, b) > 0.999999

    def test_roundtrip_external_has_no_grid(self, tmp_path):
        ts = external_templates(_random_set(2, 8, 11))
        save_templates(ts, tmp_path / "ext")
        back = load_templates(tmp_path / "ext")
        assert back.kind == "external"
        assert back.grid is None

    def test_saves_are_byte_identical(self, tmp_path):
        ts = make_rotation_templates(blob_volume(10), 3, seed=12)
        save_templates(ts, tmp_path / "a")
        save_templates(ts, tmp_path / "b")
        for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ArgumentError, match="manifest"):
            load_templates(tmp_path)
