"""Tests for labeled means and the two EM estimators."""

import numpy as np
import pytest

from fixtures import blob_volume
from sfn.em import (
    Gmm2dConfig,
    Gmm2dState,
    Recon3dConfig,
    Recon3dState,
    em_classify2d,
    em_reconstruct3d,
    labeled_class_means,
    load_gmm_state,
    load_recon_state,
    save_gmm_state,
    save_recon_state,
)
from sfn.errors import (
    ArgumentError,
    DegenerateDataError,
    EmptyClassError,
)
from sfn.metrics import best_rotation_pcc, match_classes, pcc
from sfn.picker import PickSet
from sfn.tensors import RotationGrid, rotate_volume, sample_rotation_grid
from sfn.templates import external_templates, make_rotation_templates
from sfn.truncgauss import (
    TruncMixture,
    TruncSpec,
    sample_component,
    sample_mixture,
    trunc_mean,
)


def _basis_stack(side, count):
    stack = np.zeros((count, side, side))
    for i in range(count):
        stack[i, 0, i] = 1.0
    return stack


def _component_pickset(template, threshold, count, seed):
    samples = sample_component(template, TruncSpec(1.0, threshold), count, seed)
    scores = samples.reshape(count, -1) @ template.reshape(-1)
    return PickSet(patches=samples, scores=scores, threshold=float(threshold))


class TestLabeledClassMeans:
    def test_single_patch_subset(self):
        patch = np.arange(16.0).reshape(4, 4)
        picks = PickSet(patches=patch[None], scores=np.array([100.0]), threshold=0.0)
        means = labeled_class_means([picks])
        np.testing.assert_array_equal(means[0], patch)

    def test_empty_subset_raises(self):
        empty = PickSet(patches=np.empty((0, 4, 4)), scores=np.empty(0), threshold=0.0)
        with pytest.raises(EmptyClassError):
            labeled_class_means([empty])

    def test_mean_norm_ratio_shrinks_with_threshold(self):
        """The labeled mean's length per threshold unit approaches 1 from
        above as the bar rises."""
        template = _basis_stack(16, 1)[0]
        picks3 = _component_pickset(template, 3.0, 20_000, seed=50)
        picks6 = _component_pickset(template, 6.0, 20_000, seed=51)
        mean3, mean6 = labeled_class_means([picks3, picks6])
        ratio3 = np.linalg.norm(mean3) / 3.0
        ratio6 = np.linalg.norm(mean6) / 6.0
        assert 1.0 <= ratio3 <= 1.4
        assert 1.0 <= ratio6 <= 1.05
        assert ratio6 < ratio3

    def test_mean_matches_truncated_moment(self):
        template = _basis_stack(16, 1)[0]
        count = 20_000
        picks = _component_pickset(template, 3.0, count, seed=52)
        mean = labeled_class_means([picks])[0]
        along = float(np.vdot(mean, template))
        expected = trunc_mean(TruncSpec(1.0, 3.0))
        assert abs(along - expected) <= 4.0 * 0.27 / np.sqrt(count)
        orth = mean - along * template
        bound = (np.sqrt(255.0) + 4.0 / np.sqrt(2.0)) / np.sqrt(count)
        assert np.linalg.norm(orth) <= bound


class TestGmmConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ArgumentError):
            Gmm2dConfig(class_count=0)
        with pytest.raises(ArgumentError):
            Gmm2dConfig(class_count=1, sigma=0.0)
        with pytest.raises(ArgumentError):
            Gmm2dConfig(class_count=1, weights_mode="other")
        with pytest.raises(ArgumentError):
            Gmm2dConfig(class_count=1, rel_tol=0.0)

    def test_state_rejects_decreasing_trace(self):
        with pytest.raises(ArgumentError, match="decreased"):
            Gmm2dState(
                means=np.zeros((1, 2, 2)),
                weights=np.array([1.0]),
                log_likelihoods=np.array([-10.0, -20.0]),
                class_totals=np.array([5.0]),
                converged=True,
            )

    def test_state_rejects_bad_weights(self):
        with pytest.raises(ArgumentError, match="weights"):
            Gmm2dState(
                means=np.zeros((2, 2, 2)),
                weights=np.array([0.7, 0.7]),
                log_likelihoods=np.array([-10.0]),
                class_totals=np.array([1.0, 1.0]),
                converged=True,
            )


class TestEmClassify2d:
    def test_single_class_is_sample_mean(self):
        rng = np.random.default_rng(53)
        patches = rng.standard_normal((50, 6, 6))
        state = em_classify2d(patches, Gmm2dConfig(class_count=1, seed=1))
        np.testing.assert_allclose(state.means[0], patches.mean(axis=0), atol=1e-12)
        assert state.converged

    def test_too_few_patches(self):
        with pytest.raises(ArgumentError):
            em_classify2d(np.zeros((2, 4, 4)), Gmm2dConfig(class_count=3))

    def test_identical_patches_degenerate(self):
        patches = np.ones((10, 4, 4))
        with pytest.raises(DegenerateDataError):
            em_classify2d(patches, Gmm2dConfig(class_count=2))

    def test_well_specified_mixture_recovered(self):
        """Separated Gaussian blobs: every true mean is found to within a
        few standard errors of the per-class sample mean."""
        rng = np.random.default_rng(54)
        truth = 10.0 * _basis_stack(4, 3)
        labels = rng.integers(0, 3, size=10_000)
        patches = truth[labels] + rng.standard_normal((10_000, 4, 4))
        state = em_classify2d(patches, Gmm2dConfig(class_count=3, sigma=1.0, seed=2))
        assert state.converged
        for ell in range(3):
            scores = [pcc(mean, truth[ell]) for mean in state.means]
            fitted = state.means[int(np.argmax(scores))]
            assert np.linalg.norm(fitted - truth[ell]) <= 5.0 / np.sqrt(10_000 / 3)

    def test_truncated_mixture_biases_toward_templates(self):
        """Fitting the plain mixture to threshold-conditioned data lands
        the class means close to scaled copies of the templates."""
        templates = external_templates(_basis_stack(16, 3))
        threshold = 5.0
        mixture = TruncMixture(TruncSpec(1.0, threshold), templates)
        samples, _ = sample_mixture(mixture, 15_000, seed=55)
        state = em_classify2d(samples, Gmm2dConfig(class_count=3, sigma=1.0, seed=3, restarts=2))
        report = match_classes(state.means, templates, threshold=threshold)
        assert report.mean_pcc >= 0.95
        scaled_distance = np.sqrt(report.scaled_errors) / threshold
        assert scaled_distance.max() <= 0.15

    def test_within_class_scores_stay_truncated(self):
        """The fitted classes inherit the truncated score law, not the
        postulated zero-mean one."""
        templates = external_templates(_basis_stack(16, 3))
        threshold = 5.0
        mixture = TruncMixture(TruncSpec(1.0, threshold), templates)
        samples, _ = sample_mixture(mixture, 15_000, seed=56)
        state = em_classify2d(samples, Gmm2dConfig(class_count=3, sigma=1.0, seed=4, restarts=2))
        report = match_classes(state.means, templates, threshold=threshold)
        flat = samples.reshape(len(samples), -1)
        expected = trunc_mean(TruncSpec(1.0, threshold))
        for ell in range(3):
            fitted = state.means[report.permutation[ell]].reshape(-1)
            assigned = np.argmin(
                ((flat[:, None, :] - state.means.reshape(3, 1, -1).swapaxes(0, 1)) ** 2).sum(axis=2),
                axis=1,
            )
            member = assigned == report.permutation[ell]
            scores = flat[member] @ templates[ell].reshape(-1)
            assert abs(scores.mean() - expected) <= 0.05

    def test_estimated_weights_recover_mixing(self):
        templates = external_templates(_basis_stack(16, 3))
        mixing = np.array([0.5, 0.3, 0.2])
        mixture = TruncMixture(TruncSpec(1.0, 5.0), templates, mixing=mixing)
        samples, _ = sample_mixture(mixture, 20_000, seed=57)
        state = em_classify2d(
            samples,
            Gmm2dConfig(class_count=3, sigma=1.0, weights_mode="estimated", seed=5, restarts=2),
        )
        report = match_classes(state.means, templates, threshold=5.0)
        matched = state.weights[report.permutation]
        np.testing.assert_allclose(matched, mixing, atol=0.02)

    def test_deterministic(self):
        rng = np.random.default_rng(58)
        patches = rng.standard_normal((500, 5, 5))
        config = Gmm2dConfig(class_count=2, seed=6)
        a = em_classify2d(patches, config)
        b = em_classify2d(patches, config)
        assert a.means.tobytes() == b.means.tobytes()
        np.testing.assert_array_equal(a.log_likelihoods, b.log_likelihoods)

    def test_trace_monotone(self):
        rng = np.random.default_rng(59)
        patches = rng.standard_normal((800, 4, 4)) + 2.0
        state = em_classify2d(patches, Gmm2dConfig(class_count=3, seed=7))
        diffs = np.diff(state.log_likelihoods)
        assert diffs.min() >= -1e-9 * max(1.0, abs(state.log_likelihoods[-1]))


class TestEmReconstruct3d:
    def test_identity_grid_noiseless(self):
        volume = blob_volume(8)
        patches = np.repeat(volume[None], 20, axis=0)
        config = Recon3dConfig(grid=RotationGrid.identity(), sigma=1.0, seed=8)
        state = em_reconstruct3d(patches, config)
        np.testing.assert_allclose(state.volume, volume, atol=1e-12)
        assert state.converged

    def test_well_specified_rotations(self):
        """Patches that really are rotated noisy copies reproduce the
        volume up to a grid rotation."""
        volume = blob_volume(16)
        grid = sample_rotation_grid(6, seed=60)
        rng = np.random.default_rng(61)
        assignments = rng.integers(0, 6, size=2000)
        patches = np.stack(
            [rotate_volume(volume, grid[n]) for n in range(6)]
        )[assignments] + 0.05 * rng.standard_normal((2000, 16, 16, 16))
        config = Recon3dConfig(grid=grid, sigma=0.2, seed=9, restarts=4, max_iters=80)
        state = em_reconstruct3d(patches, config)
        # Gauge freedom spans the grid and its trivial element, so the
        # probe must include the identity rotation as well.
        probe = RotationGrid(
            np.concatenate([[[1.0, 0.0, 0.0, 0.0]], grid.quaternions]), seed=-1
        )
        corr, _ = best_rotation_pcc(state.volume, volume, probe, refine=0)
        assert corr >= 0.99

    def test_aligned_grid_beats_mismatched_grid(self):
        """Reconstructing threshold-conditioned noise with the template
        grid correlates better with the source volume than using an
        unrelated grid, though both stay well above chance."""
        volume = blob_volume(12)
        templates = make_rotation_templates(volume, 8, seed=62)
        mixture = TruncMixture(TruncSpec(1.0, 3.5), templates)
        samples, _ = sample_mixture(mixture, 4000, seed=63)
        aligned = em_reconstruct3d(
            samples,
            Recon3dConfig(grid=templates.grid, sigma=1.0, seed=10, max_iters=60),
        )
        other_grid = sample_rotation_grid(8, seed=999)
        mismatched = em_reconstruct3d(
            samples,
            Recon3dConfig(grid=other_grid, sigma=1.0, seed=10, max_iters=60),
        )
        probe = sample_rotation_grid(40, seed=64)
        aligned_pcc, _ = best_rotation_pcc(aligned.volume, volume, probe, refine=40, seed=11)
        mismatched_pcc, _ = best_rotation_pcc(mismatched.volume, volume, probe, refine=40, seed=11)
        assert mismatched_pcc >= 0.5
        assert aligned_pcc > mismatched_pcc

    def test_no_patches(self):
        config = Recon3dConfig(grid=RotationGrid.identity())
        with pytest.raises(ArgumentError):
            em_reconstruct3d(np.empty((0, 4, 4, 4)), config)

    def test_empty_grid(self):
        with pytest.raises(ArgumentError):
            Recon3dConfig(grid=RotationGrid(np.empty((0, 4)), seed=-1))

    def test_state_rejects_decreasing_trace(self):
        with pytest.raises(ArgumentError, match="decreased"):
            Recon3dState(
                volume=np.zeros((4, 4, 4)),
                log_likelihoods=np.array([-5.0, -6.0]),
                converged=True,
            )

    def test_deterministic(self):
        rng = np.random.default_rng(65)
        patches = rng.standard_normal((40, 6, 6, 6))
        grid = sample_rotation_grid(3, seed=66)
        config = Recon3dConfig(grid=grid, seed=12, max_iters=10)
        a = em_reconstruct3d(patches, config)
        b = em_reconstruct3d(patches, config)
        assert a.volume.tobytes() == b.volume.tobytes()


class TestStateSerialization:
    def test_gmm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(67)
        patches = rng.standard_normal((300, 4, 4))
        state = em_classify2d(patches, Gmm2dConfig(class_count=2, seed=13))
        save_gmm_state(state, tmp_path)
        back = load_gmm_state(tmp_path)
        np.testing.assert_allclose(back.means, state.means, atol=1e-5)
        np.testing.assert_array_equal(back.weights, state.weights)
        np.testing.assert_array_equal(back.log_likelihoods, state.log_likelihoods)
        assert back.converged == state.converged

    def test_recon_roundtrip(self, tmp_path):
        rng = np.random.default_rng(68)
        patches = rng.standard_normal((30, 5, 5, 5))
        grid = sample_rotation_grid(2, seed=69)
        state = em_reconstruct3d(patches, Recon3dConfig(grid=grid, seed=14, max_iters=5))
        save_recon_state(state, tmp_path)
        back = load_recon_state(tmp_path)
        np.testing.assert_allclose(back.volume, state.volume, atol=1e-5)
        np.testing.assert_array_equal(back.log_likelihoods, state.log_likelihoods)
