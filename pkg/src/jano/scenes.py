"""Procedural latent "videos" with regions of known complexity, and their
denoising trajectories.

Two trajectory modes are provided:

* :func:`synth_trajectory` follows the exact straight path between seeded
  noise and the rendered scene.
* :func:`oracle_rollout` Euler-integrates the optimal velocity of a
  block-factorised Gaussian target centred on the scene. Textured blocks get
  a wider target, so their paths curve and freezing them costs accuracy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .flow import T_EPS
from .latents import BlockGrid, LatentTensor

PATTERNS = ("constant", "linear-ramp", "sinusoid", "checkerboard", "moving-sinusoid")


@dataclass(frozen=True)
class Region:
    """A pattern painted over ``box = (f0, f1, h0, h1, w0, w1)`` (half-open).

    ``freq`` is (cycles per row, cycles per column); ``velocity`` is the
    column shift per frame of a moving sinusoid; ``offset`` is added to the
    pattern.
    """

    box: tuple
    kind: str
    amplitude: float = 1.0
    freq: tuple = (0.0, 0.0)
    period: int = 2
    velocity: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in PATTERNS:
            raise InvalidInputError(f"unknown pattern kind {self.kind!r}; expected one of {PATTERNS}")
        if len(self.box) != 6:
            raise InvalidInputError("region box must be (f0, f1, h0, h1, w0, w1)")
        if any(abs(f) > 0.5 for f in self.freq):
            raise InvalidInputError(f"frequency {self.freq} exceeds Nyquist (0.5 cycles/cell)")
        if self.kind == "checkerboard" and self.period < 2:
            raise InvalidInputError("checkerboard period must be >= 2")


@dataclass(frozen=True)
class SceneSpec:
    canvas: tuple  # (C, F, H, W)
    regions: tuple = field(default_factory=tuple)
    seed: int = 0
    phase_jitter: float = 0.125  # channel phase offsets drawn from [0, 2*pi*phase_jitter)

    def __post_init__(self):
        if len(self.canvas) != 4 or any(int(c) < 1 for c in self.canvas):
            raise InvalidInputError(f"canvas must be four positive dims, got {self.canvas}")
        object.__setattr__(self, "canvas", tuple(int(c) for c in self.canvas))
        object.__setattr__(self, "regions", tuple(self.regions))


@dataclass
class DenoisingRun:
    """Per-step latents ``latents[k-1] = x at t_k`` for k = 1..T."""

    latents: np.ndarray  # (T, C, F, H, W) float32
    times: np.ndarray  # (T,)
    x0: np.ndarray
    x1: np.ndarray

    @property
    def steps(self):
        return self.latents.shape[0]

    @property
    def shape(self):
        return self.latents.shape[1:]

    def step(self, k):
        """Latent after step ``k`` (1-based)."""
        return self.latents[k - 1]

    def scaled(self, c):
        return DenoisingRun(self.latents * np.float32(c), self.times, self.x0 * c, self.x1 * c)


def _check_box(box, canvas):
    _, F, H, W = canvas
    f0, f1, h0, h1, w0, w1 = (int(b) for b in box)
    if not (0 <= f0 < f1 <= F and 0 <= h0 < h1 <= H and 0 <= w0 < w1 <= W):
        raise InvalidInputError(f"region {box} lies outside canvas (F, H, W) = {(F, H, W)}")
    return f0, f1, h0, h1, w0, w1


def _pattern(region, frames, rows, cols, phase):
    A = region.amplitude
    fy, fx = region.freq
    if region.kind == "constant":
        return np.full(np.broadcast(frames, rows, cols).shape, A, dtype=np.float64)
    if region.kind == "linear-ramp":
        f0, f1, h0, h1, w0, w1 = region.box
        span = max(w1 - w0 - 1, 1)
        u = (cols - w0) / span + phase / (2 * np.pi)
        return A * (2.0 * u - 1.0) + 0 * frames + 0 * rows
    if region.kind == "sinusoid":
        return A * np.sin(2 * np.pi * (fy * rows + fx * cols) + phase) + 0 * frames
    if region.kind == "moving-sinusoid":
        return A * np.sin(2 * np.pi * (fy * rows + fx * (cols - region.velocity * frames)) + phase)
    # checkerboard: phase shifts the board along columns by whole cells
    half = region.period / 2.0
    shift = int(round(phase / (2 * np.pi) * region.period))
    cell = np.floor(rows / half) + np.floor((cols + shift) / half)
    return A * np.where(cell % 2 == 0, 1.0, -1.0) + 0 * frames


def render_scene(spec):
    """Render the clean latent. Later regions overwrite earlier ones."""
    C, F, H, W = spec.canvas
    rng = np.random.default_rng(spec.seed)
    out = np.zeros((C, F, H, W), dtype=np.float64)
    frames, rows, cols = np.meshgrid(np.arange(F), np.arange(H), np.arange(W), indexing="ij")
    for region in spec.regions:
        f0, f1, h0, h1, w0, w1 = _check_box(region.box, spec.canvas)
        phases = rng.uniform(0.0, 2 * np.pi * spec.phase_jitter, size=C)
        sl = (slice(f0, f1), slice(h0, h1), slice(w0, w1))
        for c in range(C):
            out[c][sl] = region.offset + _pattern(region, frames[sl], rows[sl], cols[sl], phases[c])
    return LatentTensor(out)


def time_grid(steps):
    """Output times ``t_k = min(k/T, 1 - T_EPS)`` for k = 1..T."""
    return np.minimum(np.arange(1, steps + 1) / steps, 1.0 - T_EPS)


def synth_trajectory(clean, steps, seed):
    """Exact straight-path run from seeded standard-normal noise to ``clean``."""
    if steps < 2:
        raise InvalidInputError(f"need at least 2 steps, got {steps}")
    x1 = clean.data.astype(np.float64) if isinstance(clean, LatentTensor) else np.asarray(clean, np.float64)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(x1.shape)
    t = time_grid(steps)
    lat = t[:, None, None, None, None] * x1 + (1.0 - t)[:, None, None, None, None] * x0
    return DenoisingRun(lat.astype(np.float32), t, x0, x1)


def block_texture(clean, grid):
    """RMS adjacent-cell difference inside each block (frames, rows and columns).

    Zero for constant blocks; grows with amplitude and spatial frequency.
    """
    x = clean.data.astype(np.float64) if isinstance(clean, LatentTensor) else np.asarray(clean, np.float64)
    C = x.shape[0]
    tokens = x.reshape(C, -1)
    out = np.zeros(grid.num_blocks)
    F, H, W = grid.spatial_shape
    for b, idx in enumerate(grid.token_index_map):
        fi, hi, wi = np.unravel_index(idx, (F, H, W))
        shape = (len(np.unique(fi)), len(np.unique(hi)), len(np.unique(wi)))
        vals = tokens[:, idx].reshape(C, *shape)
        sq, n = 0.0, 0
        for ax in (2, 3):
            if vals.shape[ax] > 1:
                d = np.diff(vals, axis=ax)
                sq += float(np.sum(d * d))
                n += d.size
        out[b] = np.sqrt(sq / n) if n else 0.0
    return out


class BlockTargetField:
    """Optimal velocity for a target that factorises over blocks.

    Block ``b`` is an isotropic Gaussian ``N(mean_b, var_b I)`` over its
    ``C * |block|`` values. Velocities are exact for the rectified path.
    """

    def __init__(self, means, variances, grid):
        self.grid = grid
        self.means = np.asarray(means, dtype=np.float64)  # (C, F, H, W)
        self.variances = np.asarray(variances, dtype=np.float64)  # (num_blocks,)
        C = self.means.shape[0]
        self._mu_tokens = self.means.reshape(C, -1).T  # (N, C)
        self._var_tokens = grid.expand(self.variances)  # (N,)

    @classmethod
    def from_scene(cls, clean, grid, sigma_scale=0.5):
        var = (sigma_scale * block_texture(clean, grid)) ** 2
        return cls(clean.data, var, grid)

    def velocity_tokens(self, tokens, t, ids=None):
        """Velocity for token rows ``ids`` (all tokens when None) of ``tokens``.

        ``tokens`` holds the current values of the listed tokens only, shape
        (len(ids), C).
        """
        if t > 1.0 - T_EPS:
            t = 1.0 - T_EPS
        mu = self._mu_tokens if ids is None else self._mu_tokens[ids]
        var = self._var_tokens if ids is None else self._var_tokens[ids]
        x = np.asarray(tokens, dtype=np.float64)
        s2 = (1.0 - t) ** 2 + t * t * var
        m = mu + (t * var / s2)[:, None] * (x - t * mu)
        return (m - x) / (1.0 - t)

    def __call__(self, x, t):
        """Velocity of a full (C, F, H, W) latent."""
        C = x.shape[0]
        v = self.velocity_tokens(np.asarray(x).reshape(C, -1).T, t)
        return v.T.reshape(x.shape)


def oracle_rollout(clean, steps, seed, block_size, sigma_scale=0.5):
    """Euler rollout of the block-factorised Gaussian field from seeded noise.

    Returns the run and the field so callers can reuse it as a velocity model.
    """
    if steps < 2:
        raise InvalidInputError(f"need at least 2 steps, got {steps}")
    grid = BlockGrid(clean.spatial_shape, block_size)
    field = BlockTargetField.from_scene(clean, grid, sigma_scale)
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(clean.shape)
    x = x0.copy()
    dt = 1.0 / steps
    lat = np.empty((steps,) + clean.shape, dtype=np.float32)
    for k in range(steps):
        x = x + dt * field(x, k / steps)
        lat[k] = x
    return DenoisingRun(lat, time_grid(steps), x0, x), field
