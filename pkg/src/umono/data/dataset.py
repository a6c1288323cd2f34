"""Manifest-driven RGB-D datasets with cached UDCP transmission maps."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import physics
from ..errors import FormatError, ShapeError
from ..physics import TransmissionMap
from .netpbm import quantize, read_pgm, read_ppm, write_pgm, write_ppm

logger = logging.getLogger(__name__)

CACHE_SUFFIX = ".t.pgm"
CACHE_TAG = "umono-transmission"
CACHE_VERSION = 1


@dataclass
class RgbdSample:
    id: str
    rgb: np.ndarray  # [3, H, W] in [0, 1]
    depth: np.ndarray  # [1, H, W] in [0, 1]
    transmission: TransmissionMap


def read_manifest(path):
    """Parse ``id rgb_path depth_path`` lines; ``#`` starts a comment."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'id rgb_path depth_path', got {line!r}")
        entries.append(tuple(parts))
    return entries


def write_manifest(path, entries):
    Path(path).write_text("".join(f"{i} {r} {d}\n" for i, r, d in entries))


def _cache_key(rgb_bytes: bytes, radius: int, t_min: float) -> str:
    h = hashlib.sha256(rgb_bytes)
    h.update(f"|v{CACHE_VERSION}|r{radius}|t{t_min!r}".encode())
    return h.hexdigest()


def compute_transmission(rgb, radius=physics.PATCH_RADIUS, t_min=physics.T_MIN):
    """UDCP map with estimated ambient light, snapped to the 16-bit storage grid.

    Snapping makes cached and freshly computed maps identical.
    """
    ambient = physics.estimate_ambient(rgb)
    t = physics.estimate_transmission_udcp(rgb, ambient, radius, t_min).t
    return quantize(t) / 65535.0


def _load_cached(path, key):
    try:
        t, comments = read_pgm(path, with_comments=True)
    except (FormatError, OSError) as exc:
        logger.info("discarding unreadable transmission cache %s: %s", path, exc)
        return None
    if f"{CACHE_TAG} sha256={key}" not in comments:
        return None
    return t


def load_transmission(rgb_path, rgb, radius=physics.PATCH_RADIUS, t_min=physics.T_MIN,
                      cache_path=None, use_cache=True):
    key = _cache_key(Path(rgb_path).read_bytes(), radius, t_min)
    if use_cache and cache_path is not None and Path(cache_path).exists():
        t = _load_cached(cache_path, key)
        if t is not None and t.shape == (1,) + rgb.shape[1:]:
            return TransmissionMap(t, provenance="udcp")
    t = compute_transmission(rgb, radius, t_min)
    if use_cache and cache_path is not None:
        write_pgm(cache_path, t, comments=[f"{CACHE_TAG} sha256={key}"])
    return TransmissionMap(t, provenance="udcp")


def load_sample(sample_id, rgb_path, depth_path, radius=physics.PATCH_RADIUS, use_cache=True):
    rgb_path, depth_path = Path(rgb_path), Path(depth_path)
    for p in (rgb_path, depth_path):
        if not p.exists():
            raise FileNotFoundError(f"sample {sample_id}: missing file {p}")
    rgb = read_ppm(rgb_path)
    depth = read_pgm(depth_path)
    if rgb.shape[1:] != depth.shape[1:]:
        raise ShapeError(f"sample {sample_id}: rgb {rgb.shape[1:]} and depth {depth.shape[1:]} extents differ")
    cache = rgb_path.with_name(sample_id + CACHE_SUFFIX)
    trans = load_transmission(rgb_path, rgb, radius, cache_path=cache, use_cache=use_cache)
    return RgbdSample(sample_id, rgb, depth, trans)


def load_dataset(manifest, root=None, radius=physics.PATCH_RADIUS, use_cache=True):
    """Samples in manifest order; relative paths resolve against ``root`` (default: manifest dir)."""
    manifest = Path(manifest)
    root = Path(root) if root is not None else manifest.parent
    samples = []
    for sid, rgb, depth in read_manifest(manifest):
        samples.append(load_sample(sid, root / rgb, root / depth, radius, use_cache))
    return samples


def export_depth_visual(depth, path_prefix, error_map=None):
    """Write ``<prefix>.depth.pgm`` and, with ``error_map``, ``<prefix>.error.pgm`` (16-bit)."""
    depth = np.asarray(depth, dtype=np.float64).reshape((1,) + np.shape(depth)[-2:])
    written = [Path(f"{path_prefix}.depth.pgm")]
    write_pgm(written[0], depth)
    if error_map is not None:
        err = np.abs(np.asarray(error_map, dtype=np.float64)).reshape(depth.shape)
        written.append(Path(f"{path_prefix}.error.pgm"))
        write_pgm(written[1], err)
    return written


def batch_arrays(samples, dtype=np.float32):
    """Stack samples into ``(rgb [B,3,H,W], transmission [B,1,H,W], depth [B,1,H,W])``."""
    rgb = np.stack([s.rgb for s in samples]).astype(dtype)
    trans = np.stack([s.transmission.t for s in samples]).astype(dtype)
    depth = np.stack([s.depth for s in samples]).astype(dtype)
    return rgb, trans, depth


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def synthetic_pair(seed, index, h, w, params: physics.FormationParams):
    """Observed image and depth for the ``index``-th scene of a seeded set."""
    kind = physics.SCENE_KINDS[index % len(physics.SCENE_KINDS)]
    scene = physics.generate_scene(scene_seed(seed, index), h, w, kind)
    return physics.synthesize_underwater(scene, params), scene.depth


def synthetic_samples(count, h, w, seed=0, params=None, radius=physics.PATCH_RADIUS):
    """In-memory dataset equivalent to writing then loading :func:`write_synthetic_dataset`."""
    params = params or physics.FormationParams()
    samples = []
    for i in range(count):
        rgb, depth = synthetic_pair(seed, i, h, w, params)
        rgb, depth = quantize(rgb) / 65535.0, quantize(depth) / 65535.0
        t = compute_transmission(rgb, radius)
        samples.append(RgbdSample(f"scene{i:05d}", rgb, depth, TransmissionMap(t, "udcp")))
    return samples


def write_synthetic_dataset(out_dir, count, h, w, seed=0, params=None, manifest_name="manifest.txt"):
    """Write ``count`` RGB PPM / depth PGM pairs plus a manifest; returns the manifest path."""
    params = params or physics.FormationParams()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        sid = f"scene{i:05d}"
        rgb, depth = synthetic_pair(seed, i, h, w, params)
        write_ppm(out / f"{sid}.ppm", rgb)
        write_pgm(out / f"{sid}.depth.pgm", depth)
        entries.append((sid, f"{sid}.ppm", f"{sid}.depth.pgm"))
    manifest = out / manifest_name
    write_manifest(manifest, entries)
    return manifest
