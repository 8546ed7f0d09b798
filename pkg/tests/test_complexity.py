import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jano.complexity import (AnalyzerConfig, block_gradients, complexity_map, convergence_ground_truth,
                             default_warmup, fft_ground_truth, high_freq_ratio, minmax,
                             permutation_pvalue, quantile_levels, rank_correlation, recognition_accuracy,
                             second_order_diffs, spatial_gradient, temporal_gradient)
from jano.errors import CorrelationUndefinedError, InvalidInputError
from jano.latents import BlockGrid, partition_blocks
from jano.scenes import DenoisingRun, Region, SceneSpec, render_scene, synth_trajectory
from jano.suite import make_scene

from oracles import pearson_two_pass, spatial_gradient_loop, spearman_two_pass, temporal_gradient_loop


# --- gradients ------------------------------------------------------------------

def test_temporal_gradient_cases():
    assert temporal_gradient(np.ones((3, 2, 2))) == 0.0
    assert temporal_gradient(np.random.default_rng(0).standard_normal((1, 4, 4))) == 0.0
    block = np.stack([np.full((2, 3), v) for v in (0.0, 1.0, 3.0)])
    assert temporal_gradient(block) == pytest.approx(np.sqrt(5.0), abs=1e-15)
    assert temporal_gradient_loop(block) == pytest.approx(np.sqrt(5.0), abs=1e-15)


def test_spatial_gradient_cases():
    assert spatial_gradient(np.full((2, 3, 3), 4.0)) == 0.0
    assert spatial_gradient(np.array([[[0.0, 3.0]]])) == 3.0
    assert spatial_gradient_loop(np.array([[[0.0, 3.0]]])) == 3.0


def test_checkerboard_beats_ramp_of_same_amplitude():
    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    checker = np.where((i + j) % 2 == 0, 1.0, -1.0)[None]
    ramp = (2.0 * j / 7 - 1.0)[None]
    assert spatial_gradient(checker) > spatial_gradient(ramp)


def test_vectorised_gradients_match_loops():
    rng = np.random.default_rng(1)
    avg = rng.standard_normal((5, 9, 7))
    bs = (2, 4, 4)
    tg, sg = block_gradients(avg, bs)
    for b, blk in enumerate(partition_blocks(avg, bs)):
        assert tg[b] == pytest.approx(temporal_gradient_loop(blk.values), rel=1e-12)
        assert sg[b] == pytest.approx(spatial_gradient_loop(blk.values), rel=1e-12)


def test_second_order_diffs_cases():
    assert second_order_diffs(np.full(6, 2.0)) == 0.0
    assert second_order_diffs(np.array([1.0, 2.0, 3.0, 4.0])) == 4.0
    assert second_order_diffs(np.array([0.5, 2.0])) == 1.5
    # K = 5: half window 2, last sample unused
    assert second_order_diffs(np.array([1.0, 0.0, 4.0, 2.0, 100.0])) == 5.0
    with pytest.raises(InvalidInputError):
        second_order_diffs(np.array([1.0]))


def test_default_warmup():
    assert default_warmup(50) == 5 and default_warmup(10) == 2 and default_warmup(70) == 7


# --- complexity map -----------------------------------------------------------------

def test_identical_blocks_give_zero_map():
    spec = SceneSpec((2, 2, 16, 16), (Region((0, 2, 0, 16, 0, 16), "checkerboard", amplitude=3.0, period=2),),
                     phase_jitter=0.0)
    clean = render_scene(spec).data.astype(np.float64)
    lat = [t * clean for t in np.arange(1, 6) / 50]
    cmap = complexity_map(lat, AnalyzerConfig(5, block_size=(2, 8, 8)))
    assert np.all(cmap.normalized == 0.0)


def test_textured_patch_ranks_above_background():
    spec = SceneSpec((16, 4, 32, 32), (Region((0, 4, 0, 32, 0, 32), "constant", amplitude=0.2),
                                       Region((0, 4, 8, 24, 8, 24), "sinusoid", amplitude=16.0,
                                              freq=(0.4, 0.45))), seed=2)
    clean = render_scene(spec)
    run = synth_trajectory(clean, 50, seed=5)
    grid = BlockGrid(clean.spatial_shape, (2, 8, 8))
    cmap = complexity_map(run, AnalyzerConfig(default_warmup(50), block_size=(2, 8, 8)))
    gt = fft_ground_truth(clean, grid)
    patch = gt > 0.5
    assert patch.sum() == 8
    assert cmap.normalized[patch].min() > cmap.normalized[~patch].max()


def test_temporal_weight_only_flags_moving_patch():
    regions = (Region((0, 4, 0, 16, 0, 16), "sinusoid", amplitude=1.0, freq=(0.2, 0.1)),
               Region((0, 4, 0, 8, 0, 8), "moving-sinusoid", amplitude=1.0, freq=(0.1, 0.25), velocity=1.0))
    clean = render_scene(SceneSpec((2, 4, 16, 16), regions, seed=1)).data.astype(np.float64)
    lat = [t * clean for t in np.arange(1, 6) / 50]  # noise-free path
    cmap = complexity_map(lat, AnalyzerConfig(5, w_temporal=1.0, w_spatial=0.0, block_size=(2, 8, 8)))
    moving = np.zeros(8, bool)
    moving[[0, 4]] = True  # (fi, 0, 0) for both frame slabs
    assert np.all(cmap.scores[moving] > 0)
    np.testing.assert_allclose(cmap.scores[~moving], 0.0, atol=1e-12)


def test_single_frame_uses_spatial_score_only():
    clean = render_scene(make_scene(0, canvas=(4, 1, 16, 16), block=(1, 8, 8))[0])
    run = synth_trajectory(clean, 20, seed=0)
    a = complexity_map(run, AnalyzerConfig(4, 0.7, 0.3, (1, 8, 8)))
    b = complexity_map(run, AnalyzerConfig(4, 0.0, 1.0, (1, 8, 8)))
    np.testing.assert_allclose(a.scores, b.scores)


def test_warmup_longer_than_run_rejected():
    with pytest.raises(InvalidInputError):
        complexity_map([np.zeros((1, 2, 8, 8))] * 3, AnalyzerConfig(5, block_size=(2, 8, 8)))


@settings(max_examples=15, deadline=None)
@given(st.floats(0.01, 100.0))
def test_analyzer_is_scale_invariant(c):
    clean = render_scene(make_scene(5, canvas=(2, 2, 16, 16))[0])
    run = synth_trajectory(clean, 10, seed=1)
    cfg = AnalyzerConfig(5, block_size=(2, 8, 8))
    a = complexity_map(run, cfg).normalized
    b = complexity_map(run.scaled(c), cfg).normalized
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_minmax_range_and_constant():
    x = np.array([3.0, 1.0, 2.0])
    assert np.array_equal(minmax(x), [1.0, 0.0, 0.5])
    assert np.array_equal(minmax(np.full(4, 7.0)), np.zeros(4))


# --- FFT ground truth -------------------------------------------------------------------

def test_fft_constant_is_zero():
    assert high_freq_ratio(np.full((8, 8), 3.0)) == 0.0


def test_fft_nyquist_checkerboard_is_one():
    i, j = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    assert high_freq_ratio(np.where((i + j) % 2 == 0, 1.0, -1.0)) == pytest.approx(1.0, abs=1e-12)


def test_fft_tone_inside_and_outside_radius():
    j = np.arange(8)[None, :] * np.ones((8, 1))
    inside = np.sin(2 * np.pi * 1 / 8 * j)  # radius 1 < 2
    outside = np.sin(2 * np.pi * 3 / 8 * j)  # radius 3 > 2
    assert high_freq_ratio(inside) == pytest.approx(0.0, abs=1e-12)
    assert high_freq_ratio(outside) == pytest.approx(1.0, abs=1e-12)


def test_fft_ground_truth_needs_4x4_blocks():
    with pytest.raises(InvalidInputError):
        fft_ground_truth(np.zeros((1, 2, 8, 8)), BlockGrid((2, 8, 8), (2, 2, 2)))


# --- convergence ground truth ---------------------------------------------------------------

def test_convergence_frozen_trajectory_is_zero():
    lat = np.ones((20, 1, 2, 8, 8), np.float32)
    run = DenoisingRun(lat, np.linspace(0.05, 1, 20), lat[0], lat[0])
    assert np.all(convergence_ground_truth(run, BlockGrid((2, 8, 8), (2, 4, 4))) == 0)


def test_convergence_matches_closed_form_on_exact_path():
    clean = render_scene(make_scene(6, canvas=(4, 2, 16, 16), block=(2, 4, 4))[0])
    grid = BlockGrid(clean.spatial_shape, (2, 4, 4))
    run = synth_trajectory(clean, 50, seed=4)
    per_block = np.array([np.abs(run.x1 - run.x0).reshape(4, -1)[:, idx].mean() for idx in grid.token_index_map])
    np.testing.assert_allclose(convergence_ground_truth(run, grid), per_block / per_block.max(), rtol=1e-3)


def test_convergence_orders_amplitudes():
    regions = (Region((0, 2, 0, 8, 0, 16), "sinusoid", amplitude=1.0, freq=(0.25, 0.25)),
               Region((0, 2, 8, 16, 0, 16), "sinusoid", amplitude=6.0, freq=(0.25, 0.25)))
    clean = render_scene(SceneSpec((4, 2, 16, 16), regions, seed=2))
    grid = BlockGrid(clean.spatial_shape, (2, 8, 8))
    cg = convergence_ground_truth(synth_trajectory(clean, 50, seed=1), grid)
    assert cg[2:].min() > cg[:2].max()


def test_convergence_needs_enough_steps():
    run = synth_trajectory(np.zeros((1, 2, 8, 8)), 12, 0)
    with pytest.raises(InvalidInputError):
        convergence_ground_truth(run, BlockGrid((2, 8, 8), (2, 4, 4)))


# --- correlation ---------------------------------------------------------------------------

def test_affine_and_reversed():
    a = np.random.default_rng(2).standard_normal(30)
    r, rho = rank_correlation(a, 2 * a + 1)
    assert r == pytest.approx(1.0) and rho == pytest.approx(1.0)
    assert rank_correlation(a, -np.sort(a)[np.argsort(np.argsort(a))])[1] == pytest.approx(-1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 60), st.integers(0, 10_000), st.booleans())
def test_correlation_matches_two_pass(n, seed, ties):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(n)
    b = rng.standard_normal(n) + 0.3 * a
    if ties:
        a = np.round(a, 0)
        b = np.round(b, 0)
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        with pytest.raises(CorrelationUndefinedError):
            rank_correlation(a, b)
        return
    r, rho = rank_correlation(a, b)
    assert r == pytest.approx(pearson_two_pass(list(a), list(b)), abs=1e-12)
    assert rho == pytest.approx(spearman_two_pass(a, b), abs=1e-12)


def test_correlation_errors():
    with pytest.raises(CorrelationUndefinedError):
        rank_correlation(np.ones(5), np.arange(5.0))
    with pytest.raises(InvalidInputError):
        rank_correlation(np.arange(4.0), np.arange(5.0))


def test_permutation_pvalue():
    a = np.arange(40.0)
    assert permutation_pvalue(a, a, n_perm=999) == pytest.approx(1 / 1000)
    rng = np.random.default_rng(3)
    ps = [permutation_pvalue(rng.standard_normal(30), rng.standard_normal(30), n_perm=500, seed=i)
          for i in range(20)]
    # null p-values are roughly uniform
    assert 0.25 < np.mean(ps) < 0.75


# --- accuracy -------------------------------------------------------------------------------

def test_accuracy_identity_and_shuffle():
    rng = np.random.default_rng(4)
    ref = rng.random(99)
    assert recognition_accuracy(ref, ref) == 1.0
    acc = [recognition_accuracy(rng.permutation(ref), ref) for _ in range(400)]
    assert np.mean(acc) == pytest.approx(1 / 3, abs=0.02)


def test_quantile_levels_split_evenly():
    lv = quantile_levels(np.arange(30.0))
    assert np.bincount(lv)[1:].tolist() == [10, 10, 10]
    with pytest.raises(InvalidInputError):
        quantile_levels(np.arange(3.0), (0.5, 0.6, 0.1))
