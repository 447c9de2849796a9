"""Procedural miniature labeled image set for the toy backend."""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

SHAPES = ("disk", "square", "stripes")
COLOR_FAMILIES = ("red", "green", "blue")
# a class is a shape in a color family: each family draws hues from most of a
# third of the hue circle centred on its primary (small gaps between families),
# so labels depend on both geometry and color
CLASS_NAMES = tuple(f"{f} {s}" for f in COLOR_FAMILIES for s in SHAPES)
SHAPE_PHRASES = ("a disk", "a square", "stripes")
HUE_SPREAD = 0.4  # half-width of a family's hue range, in units of a third


def class_prompt(label: int) -> str:
    """Caption-style prompt: names the shape only, not the color family."""
    return f"a photo of {SHAPE_PHRASES[label % len(SHAPES)]}"


def _shape_mask(shape, yy, xx, cy, cx, r, phase, period):
    dy, dx = yy - cy, xx - cx
    if shape == 0:
        d = r - np.hypot(dy, dx)
    elif shape == 1:
        d = r * 0.85 - np.maximum(np.abs(dy), np.abs(dx))
    elif shape == 2:
        d = np.cos(2 * np.pi * (yy / period) + phase) * 1.5
    elif shape == 3:
        arm = r * 0.35
        d = np.maximum(np.minimum(arm - np.abs(dy), r - np.abs(dx)),
                       np.minimum(arm - np.abs(dx), r - np.abs(dy)))
    else:
        raise ValueError(f"unknown shape {shape}")
    return 1.0 / (1.0 + np.exp(-2.5 * d))


def render(label: int, rng: np.random.Generator, size: int = 16) -> np.ndarray:
    """Render one ``(3, size, size)`` image in [0, 1] of the given class."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if not 0 <= label < len(CLASS_NAMES):
        raise ValueError(f"unknown class {label}")
    family, shape = divmod(label, len(SHAPES))
    hue = ((family + rng.uniform(-HUE_SPREAD, HUE_SPREAD)) / len(COLOR_FAMILIES)) % 1.0
    fg = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.4, 0.95), rng.uniform(0.6, 0.95)))
    while True:
        bg = np.full(3, rng.uniform(0.05, 0.95)) + rng.uniform(-0.1, 0.1, 3)
        if np.abs(fg - bg).sum() > 0.5:
            break
    cy, cx = rng.uniform(0.35, 0.65, 2) * size
    r = rng.uniform(0.22, 0.38) * size
    mask = _shape_mask(shape, yy, xx, cy, cx, r, rng.uniform(0, 2 * np.pi),
                       rng.uniform(0.22, 0.34) * size)
    grad = rng.normal(0, 0.08, 3)[:, None, None] * ((xx - size / 2) / size)[None]
    img = bg[:, None, None] + grad + mask[None] * (fg - bg)[:, None, None]
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def make_dataset(n: int, seed: int = 0, size: int = 16, num_classes: int = len(CLASS_NAMES)):
    """Balanced set of ``n`` images; returns ``(images, labels, prompts)``."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.stack([render(int(y), rng, size) for y in labels]) if n else np.zeros((0, 3, size, size), np.float32)
    prompts = [class_prompt(int(y)) for y in labels]
    return images, labels.astype(np.int64), prompts


def save_dataset(path, images, labels, prompts) -> None:
    np.savez(Path(path), images=images.astype(np.float32), labels=labels.astype(np.int64),
             prompts=np.asarray(prompts, dtype=str))


def load_dataset(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    with np.load(path) as f:
        return f["images"].astype(np.float32), f["labels"].astype(np.int64), [str(p) for p in f["prompts"]]
