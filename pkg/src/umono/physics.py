"""Underwater image formation, UDCP transmission estimation and synthetic scenes.

Everything here runs on plain ``float64`` numpy arrays: transmission maps
are preprocessing inputs to the network, never differentiated through.
Images are channel-first (``[3, H, W]``), maps are ``[1, H, W]``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

logger = logging.getLogger(__name__)

T_MIN = 0.05
PATCH_RADIUS = 7
DARK_SPACING = 8
SCENE_KINDS = ("ramp", "boxes", "spheres")
DEPTH_NEAR, DEPTH_FAR = 0.1, 1.0

# number of T > 1 inputs clamped by transmission_to_depth
clamp_warnings = 0


@dataclass
class FormationParams:
    beta: tuple = (1.2, 1.5, 1.5)
    ambient: tuple = (0.1, 0.55, 0.65)

    def __post_init__(self):
        self.beta = tuple(float(b) for b in self.beta)
        self.ambient = tuple(float(a) for a in self.ambient)
        if len(self.beta) != 3 or any(b < 0 for b in self.beta):
            raise ValueError(f"beta must be three nonnegative values, got {self.beta}")
        if len(self.ambient) != 3 or any(not 0 <= a <= 1 for a in self.ambient):
            raise ValueError(f"ambient must be three values in [0, 1], got {self.ambient}")


@dataclass
class TransmissionMap:
    t: np.ndarray
    provenance: str = "analytic"


@dataclass
class SyntheticScene:
    image: np.ndarray  # clean radiance J, [3, H, W]
    depth: np.ndarray  # [1, H, W]
    seed: int = 0
    kind: str = "ramp"
    meta: dict = field(default_factory=dict)


def depth_to_transmission(depth, beta):
    """``exp(-beta * d)`` elementwise."""
    depth = np.asarray(depth, dtype=np.float64)
    if beta < 0:
        raise ValueError(f"attenuation must be nonnegative, got {beta}")
    if (depth < 0).any():
        raise ValueError("depth must be nonnegative")
    return np.exp(-beta * depth)


def transmission_to_depth(t, beta):
    """Invert ``T = exp(-beta d)``; values slightly above 1 are clamped and counted."""
    global clamp_warnings
    t = np.asarray(t, dtype=np.float64)
    if beta <= 0:
        raise ValueError(f"attenuation must be positive to invert, got {beta}")
    if (t <= 0).any():
        raise ValueError("transmission <= 0 has no finite depth")
    over = t > 1
    if over.any():
        clamp_warnings += int(over.sum())
        logger.warning("clamped %d transmission values above 1", int(over.sum()))
        t = np.minimum(t, 1.0)
    return -np.log(t) / beta


def synthesize_underwater(scene: SyntheticScene, params: FormationParams):
    """Observed image ``I_c = J_c T_c + A_c (1 - T_c)`` with ``T_c = exp(-beta_c d)``."""
    j = np.asarray(scene.image, dtype=np.float64)
    d = np.asarray(scene.depth, dtype=np.float64)[0]
    out = np.empty_like(j)
    for c in range(3):
        t = depth_to_transmission(d, params.beta[c])
        out[c] = j[c] * t + params.ambient[c] * (1 - t)
    return np.clip(out, 0.0, 1.0)


def _min_filter(x, radius):
    # window truncated at the border == edge replication for a min
    if radius == 0:
        return x.copy()
    k = 2 * radius + 1
    padded = np.pad(x, radius, mode="edge")
    rows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0).min(axis=-1)
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1).min(axis=-1)


def dark_channel_gb(image, ambient, radius=PATCH_RADIUS):
    """Patch minimum of ``min(I_G / A_G, I_B / A_B)``."""
    image = np.asarray(image, dtype=np.float64)
    if ambient[1] <= 0 or ambient[2] <= 0:
        raise ValueError(f"ambient G/B components must be positive, got {tuple(ambient)}")
    ratio = np.minimum(image[1] / ambient[1], image[2] / ambient[2])
    return _min_filter(ratio, radius)


def estimate_transmission_udcp(image, ambient, radius=PATCH_RADIUS, t_min=T_MIN):
    """UDCP transmission ``1 - patchmin(min_{G,B} I_c / A_c)``, clamped to ``[t_min, 1]``."""
    t = 1.0 - dark_channel_gb(image, ambient, radius)
    return TransmissionMap(np.clip(t, t_min, 1.0)[None], provenance="udcp")


def estimate_ambient(image, fraction=0.001):
    """Mean colour of the brightest ``fraction`` of pixels ranked by ``min(G, B)``.

    Ties are broken toward the later pixel in row-major order so results are
    deterministic.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3 or image[0].size == 0:
        raise ShapeError(f"estimate_ambient expects a nonempty [3, H, W] image, got {image.shape}")
    flat = image.reshape(3, -1)
    score = np.minimum(flat[1], flat[2])
    n = max(1, int(math.floor(score.size * fraction)))
    top = np.argsort(score, kind="stable")[-n:]
    return tuple(float(v) for v in flat[:, top].mean(axis=1))


# ---------------------------------------------------------------------------
# procedural scenes
# ---------------------------------------------------------------------------

def value_noise(rng, h, w, octaves=3, base=4):
    """Seeded multi-octave value noise in [0, 1]."""
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for o in range(octaves):
        cells = base * 2 ** o
        grid = rng.random((cells + 1, cells + 1))
        ys = np.linspace(0, cells, h, endpoint=False)
        xs = np.linspace(0, cells, w, endpoint=False)
        y0, x0 = ys.astype(int), xs.astype(int)
        fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
        fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
        g00 = grid[y0][:, x0]
        g01 = grid[y0][:, x0 + 1]
        g10 = grid[y0 + 1][:, x0]
        g11 = grid[y0 + 1][:, x0 + 1]
        out += amp * ((g00 * (1 - fx) + g01 * fx) * (1 - fy) + (g10 * (1 - fx) + g11 * fx) * fy)
        total += amp
        amp *= 0.5
    return out / total


def _ramp_depth(rng, h, w):
    axis = int(rng.integers(2))
    flip = bool(rng.integers(2))
    n = h if axis == 0 else w
    gamma = rng.uniform(0.7, 1.4)
    prof = DEPTH_NEAR + (DEPTH_FAR - DEPTH_NEAR) * (np.arange(n) / (n - 1)) ** gamma
    if flip:
        prof = prof[::-1]
    depth = np.broadcast_to(prof[:, None] if axis == 0 else prof[None, :], (h, w)).copy()
    return depth, {"axis": axis, "flip": flip}


def _boxes_depth(rng, h, w):
    # boxes stacked toward the camera, each 0.08-0.2 nearer than the last
    z = rng.uniform(0.7, DEPTH_FAR)
    depth = np.full((h, w), z)
    count = int(rng.integers(1, 4))
    for _ in range(count):
        z = max(z - rng.uniform(0.08, 0.2), DEPTH_NEAR)
        bh = int(rng.integers(h // 4, h // 2 + 1))
        bw = int(rng.integers(w // 4, w // 2 + 1))
        y = int(rng.integers(0, h - bh + 1))
        x = int(rng.integers(0, w - bw + 1))
        depth[y:y + bh, x:x + bw] = z
    return depth, {"boxes": count}


def _spheres_depth(rng, h, w):
    # ground plane receding toward the top of the frame
    rows = np.arange(h)[:, None] / (h - 1)
    depth = np.broadcast_to(DEPTH_FAR - (DEPTH_FAR - 0.4) * rows, (h, w)).copy()
    yy, xx = np.mgrid[0:h, 0:w]
    count = int(rng.integers(1, 3))
    for _ in range(count):
        r = rng.uniform(0.12, 0.25) * min(h, w)
        cy = rng.uniform(r, h - r)
        cx = rng.uniform(r, w - r)
        # resting just in front of the ground at the sphere's centre row
        zc = DEPTH_FAR - (DEPTH_FAR - 0.4) * cy / (h - 1) - rng.uniform(0.1, 0.2)
        rho2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (r * r)
        inside = rho2 < 1
        bulge = 0.1 * np.sqrt(np.clip(1 - rho2, 0, None))
        depth = np.where(inside, np.minimum(depth, zc - bulge), depth)
    return depth, {"spheres": count}


def generate_scene(seed, h, w, kind="ramp"):
    """Deterministic synthetic clean image + depth for ``seed``.

    Depth lies in ``[DEPTH_NEAR, DEPTH_FAR]``.  The texture carries a lattice
    of black pixels (spacing :data:`DARK_SPACING`) so that every UDCP patch
    of radius >= 7, including border-truncated ones, contains a pixel with
    ``J_G = J_B = 0``.
    """
    if h % 32 or w % 32:
        raise ShapeError(f"scene extents must be divisible by 32, got {h}x{w}")
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    rng = np.random.default_rng(seed)
    builder = {"ramp": _ramp_depth, "boxes": _boxes_depth, "spheres": _spheres_depth}[kind]
    depth, meta = builder(rng, h, w)

    tint = rng.uniform(0.3, 1.0, size=3)
    img = np.empty((3, h, w))
    for c in range(3):
        img[c] = 0.1 + 0.8 * tint[c] * value_noise(rng, h, w)
    oy, ox = rng.integers(0, DARK_SPACING, size=2)
    img[:, oy::DARK_SPACING, ox::DARK_SPACING] = 0.0
    return SyntheticScene(image=img, depth=depth[None], seed=seed, kind=kind, meta=meta)
