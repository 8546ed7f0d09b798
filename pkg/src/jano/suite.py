"""The fixed synthetic scene suite used by the experiments.

Each scene tiles the canvas with block-aligned regions from three texture
families:

* ``flat`` - constants near zero and the occasional gentle ramp,
* ``mid`` - sinusoids around a quarter of the block Nyquist band,
* ``high`` - checkerboards, near-Nyquist sinusoids and moving sinusoids.

Textured amplitudes are large compared with the channel-averaged noise. The
analyzer only ranks blocks monotonically once texture dominates the
shrinking noise within the warm-up window, so weak textures would rank
below flat blocks.
"""
from __future__ import annotations

import numpy as np

from .scenes import Region, SceneSpec

FAMILIES = ("flat", "mid", "high")


def make_scene(index, canvas=(16, 4, 32, 32), block=(2, 8, 8), fractions=(1 / 3, 1 / 3, 1 / 3),
               mid_amplitude=8.0, high_amplitude=16.0, seed_base=1000):
    """Scene ``index`` of the suite. Returns ``(SceneSpec, family per spatial tile)``."""
    C, F, H, W = canvas
    rng = np.random.default_rng(seed_base + index)
    nh, nw = H // block[1], W // block[2]
    n = nh * nw
    counts = np.floor(np.asarray(fractions) * n).astype(int)
    counts[0] += n - counts.sum()
    fams = np.repeat(np.arange(3), counts)
    rng.shuffle(fams)
    regions = []
    for j, fam in enumerate(fams):
        hi, wi = divmod(j, nw)
        box = (0, F, hi * block[1], (hi + 1) * block[1], wi * block[2], (wi + 1) * block[2])
        regions.append(_region(FAMILIES[fam], box, rng, mid_amplitude, high_amplitude))
    return SceneSpec(canvas, tuple(regions), seed=seed_base + index), [FAMILIES[f] for f in fams]


def _region(family, box, rng, mid_amp, high_amp):
    if family == "flat":
        if rng.random() < 0.8:
            return Region(box, "constant", amplitude=rng.uniform(-0.3, 0.3))
        return Region(box, "linear-ramp", amplitude=rng.uniform(0.1, 0.5))
    if family == "mid":
        f, th = rng.uniform(0.22, 0.32), rng.uniform(0, np.pi / 2)
        return Region(box, "sinusoid", amplitude=mid_amp * rng.uniform(0.8, 1.2),
                      freq=(f * np.sin(th), f * np.cos(th)))
    amp = high_amp * rng.uniform(0.8, 1.2)
    kind = rng.integers(3)
    if kind == 0:
        return Region(box, "checkerboard", amplitude=amp, period=int(rng.choice([2, 4])))
    if kind == 1:
        f, th = rng.uniform(0.35, 0.5), rng.uniform(0, np.pi / 2)
        return Region(box, "sinusoid", amplitude=amp,
                      freq=(min(0.5, f * np.sin(th)), min(0.5, f * np.cos(th))))
    return Region(box, "moving-sinusoid", amplitude=amp,
                  freq=(rng.uniform(0.2, 0.4), rng.uniform(0.2, 0.4)), velocity=rng.uniform(0.5, 1.5))


def standard_suite(n=20, **kwargs):
    """``n`` balanced scenes (one third of the tiles per family)."""
    return [make_scene(i, **kwargs)[0] for i in range(n)]


def static_heavy_suite(n=10, **kwargs):
    """Scenes where half of the tiles are flat, for the freezing experiments."""
    kwargs.setdefault("fractions", (0.5, 0.25, 0.25))
    kwargs.setdefault("seed_base", 5000)
    return [make_scene(i, **kwargs)[0] for i in range(n)]
