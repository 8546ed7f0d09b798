"""Early-step block complexity recognition and the reference metrics it is
judged against.

The analyzer looks only at the first ``K`` step latents. Each block gets a
temporal and a spatial gradient per step. The score is the total absolute
change of those gradients over a half-window interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import CorrelationUndefinedError, InvalidInputError
from .latents import BlockGrid, block_view, channel_average


@dataclass(frozen=True)
class AnalyzerConfig:
    warmup: int = 5
    w_temporal: float = 0.7
    w_spatial: float = 0.3
    block_size: tuple = (2, 8, 8)

    def __post_init__(self):
        if self.warmup < 2:
            raise InvalidInputError(f"warm-up must be >= 2 steps, got {self.warmup}")
        if min(self.w_temporal, self.w_spatial) < 0 or abs(self.w_temporal + self.w_spatial - 1) > 1e-9:
            raise InvalidInputError("analyzer weights must be non-negative and sum to 1")
        object.__setattr__(self, "block_size", tuple(int(b) for b in self.block_size))


def default_warmup(steps):
    """About 10% of the sampling steps, never fewer than two."""
    return max(2, math.ceil(0.10 * steps))


@dataclass(frozen=True)
class ComplexityMap:
    grid: BlockGrid
    scores: np.ndarray
    normalized: np.ndarray

    @classmethod
    def from_scores(cls, grid, scores):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (grid.num_blocks,):
            raise InvalidInputError(f"expected {grid.num_blocks} scores, got shape {scores.shape}")
        if not np.all(np.isfinite(scores)):
            raise InvalidInputError("complexity scores must be finite")
        return cls(grid, scores, minmax(scores))


@dataclass(frozen=True)
class GroundTruthMaps:
    fft_complexity: np.ndarray
    convergence: np.ndarray


def minmax(x):
    """Scale to [0, 1]; a constant array maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# --- per-block gradients -------------------------------------------------

def _as_fhw(block):
    vals = getattr(block, "values", block)
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim == 2:  # (f, s) with unknown layout: treat as a single row of cells
        vals = vals[:, None, :]
    return vals


def temporal_gradient(block):
    """Mean over cells of the L2 norm of adjacent-frame differences."""
    v = _as_fhw(block)
    if v.shape[0] < 2:
        return 0.0
    d = np.diff(v, axis=0)
    return float(np.sqrt((d * d).sum(axis=0)).mean())


def spatial_gradient(block):
    """Mean over frames of the L2 norm of all row/column neighbour differences."""
    v = _as_fhw(block)
    if v.shape[1] * v.shape[2] < 2:
        return 0.0
    sq = np.zeros(v.shape[0])
    if v.shape[1] > 1:
        d = np.diff(v, axis=1)
        sq += (d * d).sum(axis=(1, 2))
    if v.shape[2] > 1:
        d = np.diff(v, axis=2)
        sq += (d * d).sum(axis=(1, 2))
    return float(np.sqrt(sq).mean())


def block_gradients(avg, block_size):
    """Vectorised temporal and spatial gradients for every block of an (F, H, W) map.

    Returns two arrays of shape (num_blocks,).
    """
    v = block_view(np.asarray(avg, dtype=np.float64), block_size)
    nb = v.shape[0] * v.shape[1] * v.shape[2]
    v = v.reshape(nb, *v.shape[3:])
    f, h, w = v.shape[1:]
    if f > 1:
        d = np.diff(v, axis=1)
        tg = np.sqrt((d * d).sum(axis=1)).mean(axis=(1, 2))
    else:
        tg = np.zeros(nb)
    sq = np.zeros((nb, f))
    if h > 1:
        d = np.diff(v, axis=2)
        sq += (d * d).sum(axis=(2, 3))
    if w > 1:
        d = np.diff(v, axis=3)
        sq += (d * d).sum(axis=(2, 3))
    sg = np.sqrt(sq).mean(axis=1) if h * w > 1 else np.zeros(nb)
    return tg, sg


def second_order_diffs(gradients):
    """Sum of ``|g[k + K//2] - g[k]|`` for k = 1..K//2.

    ``gradients`` has the step axis first; trailing axes (e.g. blocks) are
    kept.
    """
    g = np.asarray(gradients, dtype=np.float64)
    K = g.shape[0]
    if K < 2:
        raise InvalidInputError(f"need at least 2 steps of gradients, got {K}")
    dk = K // 2
    total = np.abs(g[dk : 2 * dk] - g[:dk]).sum(axis=0)
    return float(total) if np.ndim(total) == 0 else total


def complexity_map(run, cfg):
    """Block complexity from the first ``cfg.warmup`` step latents of ``run``.

    ``run`` may be a :class:`~jano.scenes.DenoisingRun` or a sequence of
    (C, F, H, W) latents.
    """
    latents = getattr(run, "latents", run)
    K = cfg.warmup
    if len(latents) < K:
        raise InvalidInputError(f"warm-up of {K} steps exceeds the {len(latents)} available")
    first = np.asarray(latents[0])
    grid = BlockGrid(first.shape[1:], cfg.block_size)
    T = np.empty((K, grid.num_blocks))
    S = np.empty((K, grid.num_blocks))
    for k in range(K):
        T[k], S[k] = block_gradients(channel_average(np.asarray(latents[k])), cfg.block_size)
    if grid.spatial_shape[0] == 1:
        score = second_order_diffs(S)
    else:
        score = cfg.w_temporal * second_order_diffs(T) + cfg.w_spatial * second_order_diffs(S)
    return ComplexityMap.from_scores(grid, score)


# --- reference metrics ---------------------------------------------------

def high_freq_ratio(slices):
    """Energy outside radius ``min(h, w)/4`` over non-DC energy of each (..., h, w) slice."""
    x = np.asarray(slices, dtype=np.float64)
    h, w = x.shape[-2:]
    spec = np.fft.fftshift(np.fft.fft2(x), axes=(-2, -1))
    power = spec.real**2 + spec.imag**2
    ky = np.arange(h) - h // 2
    kx = np.arange(w) - w // 2
    r = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    outside = power[..., r > min(h, w) / 4.0].sum(axis=-1)
    total = power.sum(axis=(-2, -1)) - power[..., h // 2, w // 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(total > 1e-12 * (1.0 + power[..., h // 2, w // 2]), outside / total, 0.0)
    return np.clip(ratio, 0.0, 1.0)


def fft_ground_truth(clean, grid):
    """Per-block high-frequency energy ratio, averaged over channels and frames."""
    x = getattr(clean, "data", clean)
    x = np.asarray(x, dtype=np.float64)
    f, h, w = grid.block_size
    if h < 4 or w < 4:
        raise InvalidInputError(f"block spatial size must be at least 4x4, got {h}x{w}")
    v = block_view(x, grid.block_size)  # (C, nF, nH, nW, f, h, w)
    ratio = high_freq_ratio(v)  # (C, nF, nH, nW, f)
    per_block = ratio.mean(axis=(0, -1))
    return per_block.reshape(-1)


def block_mean(values, grid):
    """Mean of a (C, F, H, W) or (F, H, W) array over each block's real cells."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 4:
        v = v.mean(axis=0)
    ids = grid.token_block_ids()
    return np.bincount(ids, weights=v.reshape(-1), minlength=grid.num_blocks) / grid.block_sizes()


def convergence_ground_truth(run, grid, start=10, interval=5):
    """Accumulated per-block mean |x_{k+5} - x_k| for k = 10, 15, ...; max-normalised."""
    T = run.steps
    if T < start + interval:
        raise InvalidInputError(f"need at least {start + interval} steps, got {T}")
    acc = np.zeros(grid.num_blocks)
    for k in range(start, T - interval + 1, interval):
        diff = np.abs(run.step(k + interval).astype(np.float64) - run.step(k))
        acc += block_mean(diff, grid)
    top = acc.max()
    return acc / top if top > 0 else acc


# --- evaluation ------------------------------------------------------------

def _check_pair(a, b):
    a = np.asarray(getattr(a, "scores", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "scores", b), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"score maps differ in size: {a.size} vs {b.size}")
    return a, b


def _pearson(a, b):
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        raise CorrelationUndefinedError("correlation is undefined for a constant input")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def rank_correlation(a, b):
    """Pearson r and Spearman rho (average ranks for ties)."""
    a, b = _check_pair(a, b)
    if a.size < 3:
        raise InvalidInputError("need at least 3 blocks for a correlation")
    return _pearson(a, b), _pearson(rankdata(a), rankdata(b))


def permutation_pvalue(a, b, n_perm=10_000, seed=0, method="spearman"):
    """Two-sided permutation p-value, ``(1 + #{|stat*| >= |stat|}) / (n_perm + 1)``."""
    a, b = _check_pair(a, b)
    if method == "spearman":
        a, b = rankdata(a), rankdata(b)
    obs = abs(_pearson(a, b))
    a = (a - a.mean()) / np.linalg.norm(a - a.mean())
    b = (b - b.mean()) / np.linalg.norm(b - b.mean())
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 1000
    for start in range(0, n_perm, chunk):
        n = min(chunk, n_perm - start)
        perm = rng.permuted(np.broadcast_to(b, (n, b.size)), axis=1)
        hits += int(np.sum(np.abs(perm @ a) >= obs - 1e-12))
    return (1 + hits) / (n_perm + 1)


def quantile_levels(scores, level_fractions=(1 / 3, 1 / 3, 1 / 3)):
    """Bucket scores into levels 1/2/3 at the cumulative level fractions."""
    scores = np.asarray(getattr(scores, "normalized", scores), dtype=np.float64)
    fr = np.asarray(level_fractions, dtype=np.float64)
    if fr.size != 3 or np.any(fr < 0) or abs(fr.sum() - 1) > 1e-9:
        raise InvalidInputError("level fractions must be three non-negative numbers summing to 1")
    q1, q2 = np.quantile(scores, [fr[0], fr[0] + fr[1]])
    return np.where(scores <= q1, 1, np.where(scores <= q2, 2, 3))


def recognition_accuracy(predicted, reference, level_fractions=(1 / 3, 1 / 3, 1 / 3)):
    """Fraction of blocks put in the same three-level quantile bucket."""
    p, r = _check_pair(predicted, reference)
    return float(np.mean(quantile_levels(p, level_fractions) == quantile_levels(r, level_fractions)))


def fft_baseline_map(run, grid, step):
    """FFT high-frequency ratio of the latent after ``step`` (the naive early estimator)."""
    return fft_ground_truth(run.step(step), grid)
