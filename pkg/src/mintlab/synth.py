"""Procedural image sources for desk-scale audits.

Every source renders scenes from the same content distribution (ten shape
classes on smooth backgrounds) and then pushes them through its own
acquisition pipeline: optical blur, sharpening, sensor grain of a given
strength and spatial correlation, tone curve and colour balance.  Sources
therefore differ the way separately collected datasets do, not in what they
depict.
"""
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import stable_id, write_records

NATIVE = 64
NUM_CLASSES = 10


@dataclass(frozen=True)
class Acquisition:
    blur: float = 0.0  # optical blur sigma, native pixels
    sharpen: float = 0.0  # unsharp-mask amount
    grain: float = 0.0  # sensor noise std in [0, 1] units
    grain_corr: float = 0.0  # sigma of the noise's spatial correlation
    gamma: float = 1.0
    tint: tuple = (1.0, 1.0, 1.0)


# The audited training source shoots sharp images with fine white grain; the
# external sources use softer optics with correlated grain.
DEFAULT_SOURCES = {
    "atlas": Acquisition(blur=0.0, sharpen=0.6, grain=0.03, grain_corr=0.0),
    "ext-a": Acquisition(blur=0.8, grain=0.02, grain_corr=0.8, gamma=0.9, tint=(1.05, 1.0, 0.95)),
    "ext-b": Acquisition(blur=0.5, grain=0.015, grain_corr=0.5, gamma=1.1, tint=(0.95, 1.0, 1.05)),
    "ext-c": Acquisition(blur=0.7, grain=0.02, grain_corr=0.6, tint=(1.0, 1.03, 0.97)),
}


def _smooth(edge):
    return np.clip(edge + 0.5, 0.0, 1.0)


def _shape_mask(cls, u, v, size, rng):
    """Antialiased mask in [0, 1]; u, v are pixel offsets from the object centre."""
    r = np.hypot(u, v)
    if cls == 0:  # disc
        return _smooth(size - r)
    if cls == 1:  # ring
        return _smooth(size - r) * _smooth(r - 0.55 * size)
    theta = rng.uniform(0, np.pi / 2)
    ru = u * np.cos(theta) - v * np.sin(theta)
    rv = u * np.sin(theta) + v * np.cos(theta)
    if cls == 2:  # square
        return _smooth(0.85 * size - np.maximum(np.abs(ru), np.abs(rv)))
    if cls == 3:  # triangle
        a = -rv + 0.5 * size
        b = 0.866 * ru + 0.5 * rv + 0.5 * size
        c = -0.866 * ru + 0.5 * rv + 0.5 * size
        return _smooth(np.minimum(np.minimum(a, b), c))
    if cls == 4:  # plus
        arm = 0.28 * size
        bar1 = np.minimum(_smooth(arm - np.abs(u)), _smooth(size - np.abs(v)))
        bar2 = np.minimum(_smooth(arm - np.abs(v)), _smooth(size - np.abs(u)))
        return np.maximum(bar1, bar2)
    box = _smooth(size - np.maximum(np.abs(u), np.abs(v)))
    period = size / 2.0
    if cls == 5:  # horizontal stripes
        return box * (np.sin(2 * np.pi * v / period) > 0)
    if cls == 6:  # vertical stripes
        return box * (np.sin(2 * np.pi * u / period) > 0)
    if cls == 7:  # checker
        return box * ((np.sin(2 * np.pi * u / period) * np.sin(2 * np.pi * v / period)) > 0)
    if cls == 8:  # diamond
        return _smooth(size - (np.abs(u) + np.abs(v)))
    # two discs
    d = 0.55 * size
    small = 0.45 * size
    return np.maximum(_smooth(small - np.hypot(u - d, v)), _smooth(small - np.hypot(u + d, v)))


def render_scene(cls, rng, size=NATIVE):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c0, c1 = rng.uniform(0.15, 0.85, 3), rng.uniform(0.15, 0.85, 3)
    ang = rng.uniform(0, 2 * np.pi)
    t = ((xx * np.cos(ang) + yy * np.sin(ang)) / size + 1) / 2
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    cy, cx = size / 2 + rng.uniform(-0.2, 0.2, 2) * size
    obj = rng.uniform(0.18, 0.3) * size
    mask = _shape_mask(cls, xx - cx, yy - cy, obj, rng)[..., None]
    fg = rng.uniform(0, 1, 3)
    # keep the object visible against the local background
    bg_mean = img.mean(axis=(0, 1))
    if np.abs(fg - bg_mean).max() < 0.35:
        fg = np.where(bg_mean > 0.5, bg_mean - 0.45, bg_mean + 0.45)
    return np.clip(img * (1 - mask) + fg * mask, 0, 1)


def acquire(img, style, rng):
    out = img
    if style.blur > 0:
        out = gaussian_filter(out, sigma=(style.blur, style.blur, 0))
    if style.sharpen > 0:
        out = out + style.sharpen * (out - gaussian_filter(out, sigma=(1.0, 1.0, 0)))
    out = np.clip(out, 0, 1) ** style.gamma * np.asarray(style.tint)
    if style.grain > 0:
        noise = rng.standard_normal(out.shape)
        if style.grain_corr > 0:
            noise = gaussian_filter(noise, sigma=(style.grain_corr, style.grain_corr, 0))
            noise /= noise.std() + 1e-12
        out = out + style.grain * noise
    return np.clip(np.round(np.clip(out, 0, 1) * 255), 0, 255).astype(np.uint8)


def make_source(source_id, n, style, seed, size=NATIVE, num_classes=NUM_CLASSES):
    """Render ``n`` labelled images; returns (ids, classes, pixels)."""
    rng = np.random.default_rng([seed, *source_id.encode()])
    classes = np.arange(n) % num_classes
    rng.shuffle(classes)
    pixels = np.empty((n, size, size, 3), np.uint8)
    for i in range(n):
        pixels[i] = acquire(render_scene(int(classes[i]), rng, size), style, rng)
    ids = np.array([stable_id(source_id, i) for i in range(n)], dtype=np.uint64)
    return ids, classes.astype(np.int32), pixels


def write_corpus(out_dir, sizes, seed=0, styles=None):
    """Write one MINTIMG1 file per source; returns {source_id: path}."""
    styles = styles or DEFAULT_SOURCES
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for source_id, n in sizes.items():
        ids, classes, pixels = make_source(source_id, n, styles[source_id], seed)
        path = os.path.join(out_dir, f"{source_id}.mimg")
        write_records(path, ids, classes, pixels)
        paths[source_id] = path
    return paths
