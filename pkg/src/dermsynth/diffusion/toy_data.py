"""Procedural image/caption corpora for the toy backend."""

from __future__ import annotations

import numpy as np
import torch

SHAPES = ("square", "circle", "diamond")
SIZES = ("small", "large")


def _shape_mask(shape, cy, cx, r, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    return np.abs(yy - cy) + np.abs(xx - cx) <= r * 1.3


def draw(shape, color, size=32, radius=None, center=None, background=0.5, rng=None):
    """One RGB image in [-1, 1], (3, size, size)."""
    rng = rng or np.random.default_rng(0)
    r = radius if radius is not None else rng.uniform(0.18, 0.32) * size
    cy, cx = center if center is not None else rng.uniform(r + 1, size - r - 1, 2)
    img = np.empty((size, size, 3))
    img[:] = background
    img[_shape_mask(shape, cy, cx, r, size)] = color
    img += rng.normal(0, 0.02, img.shape)
    return torch.tensor(np.clip(img, 0, 1) * 2 - 1, dtype=torch.float32).permute(2, 0, 1).contiguous()


COLORS = {"red": (0.9, 0.1, 0.1), "blue": (0.1, 0.1, 0.9)}

# Colour words the base model learns. Must stay disjoint from COLORS so the
# round trip exercises vocabulary the base has never seen.
PALETTE = {
    "green": (0.1, 0.8, 0.1),
    "yellow": (0.9, 0.9, 0.1),
    "cyan": (0.1, 0.8, 0.9),
    "magenta": (0.9, 0.1, 0.8),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.5, 0.1, 0.7),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
}


def base_corpus(n, size=32, seed=0, named_fraction=0.75):
    """Shapes for pretraining the toy base.

    A ``named_fraction`` share is drawn from PALETTE with the colour word in the
    caption ("a large green circle"); the rest get a uniform random colour and
    a caption that names only size and shape.
    """
    rng = np.random.default_rng(seed)
    names = list(PALETTE)
    out = []
    for _ in range(n):
        shape = SHAPES[rng.integers(len(SHAPES))]
        large = rng.random() < 0.5
        r = size * (rng.uniform(0.26, 0.34) if large else rng.uniform(0.14, 0.2))
        size_word = "large" if large else "small"
        if rng.random() < named_fraction:
            name = names[rng.integers(len(names))]
            color = np.clip(np.array(PALETTE[name]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
            caption = f"a {size_word} {name} {shape}"
        else:
            color = rng.uniform(0, 1, 3)
            caption = f"a {size_word} {shape}"
        bg = rng.uniform(0.3, 0.8)
        out.append((draw(shape, color, size, radius=r, background=bg, rng=rng), caption))
    return out


def colored_squares(n_per_class, size=32, seed=0):
    """The red-square / blue-square pairs used for the conditional round trip."""
    rng = np.random.default_rng(seed)
    out = []
    for name, color in COLORS.items():
        for _ in range(n_per_class):
            r = rng.uniform(0.22, 0.32) * size
            img = draw("square", color, size, radius=r, background=rng.uniform(0.4, 0.6), rng=rng)
            out.append((img, f"{name} square"))
    return out


def color_oracle(image):
    """'red' if the mean red channel beats the mean blue channel, else 'blue'."""
    x = torch.as_tensor(image, dtype=torch.float32)
    if x.shape[0] != 3:
        x = x.permute(2, 0, 1)
    return "red" if x[0].mean() > x[2].mean() else "blue"
