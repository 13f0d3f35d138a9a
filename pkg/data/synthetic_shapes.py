"""
Built-in benchmark: class-balanced circles and squares drawn with Pillow.

The "public" style draws bright filled shapes on a dark background; the "private"
style shifts size, intensity, outline width and background noise by an amount
controlled by `gap`, so the public/private domain gap is a single knob.
"""

import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from data.datasets import DatasetArchive
from utils.errors import ConfigError
from utils.helpers import make_rng

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square")
SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapeStyle:
    radius: tuple
    intensity: tuple
    outline: int
    noise: float
    jitter: float

    @classmethod
    def for_domain(cls, domain: str, gap: float = 1.0) -> "ShapeStyle":
        if domain == "public":
            return cls(radius=(0.22, 0.32), intensity=(220, 255), outline=0, noise=0.0, jitter=0.10)
        if domain == "private":
            return cls(
                radius=(0.22 + 0.06 * gap, 0.32 + 0.06 * gap),
                intensity=(int(max(60, 220 - 80 * gap)), int(max(90, 255 - 60 * gap))),
                outline=int(round(2 * gap)),
                noise=6.0 * gap,
                jitter=0.10 + 0.05 * gap,
            )
        raise ConfigError(f"unknown shapes domain {domain!r}; use public or private")


def _draw(shape: str, size: int, style: ShapeStyle, rng: np.random.Generator) -> np.ndarray:
    big = size * SUPERSAMPLE
    img = Image.new("L", (big, big), 0)
    draw = ImageDraw.Draw(img)
    radius = rng.uniform(*style.radius) * big
    cx = big / 2 + rng.uniform(-style.jitter, style.jitter) * big
    cy = big / 2 + rng.uniform(-style.jitter, style.jitter) * big
    box = [cx - radius, cy - radius, cx + radius, cy + radius]
    value = int(rng.integers(style.intensity[0], style.intensity[1] + 1))
    if style.outline:
        width = style.outline * SUPERSAMPLE
        if shape == "circle":
            draw.ellipse(box, outline=value, width=width)
        else:
            draw.rectangle(box, outline=value, width=width)
    elif shape == "circle":
        draw.ellipse(box, fill=value)
    else:
        draw.rectangle(box, fill=value)
    arr = np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float64)
    if style.noise:
        arr = arr + rng.normal(0.0, style.noise, arr.shape)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8)


def generate_shapes(n: int, size: int = 16, domain: str = "public", gap: float = 1.0,
                    seed: int = 0) -> DatasetArchive:
    """n images, labels 0=circle 1=square in equal counts (up to one when n is odd)."""
    if n < 1 or size < 4:
        raise ConfigError("shapes generator needs n >= 1 and size >= 4")
    style = ShapeStyle.for_domain(domain, gap)
    rng = make_rng(seed)
    labels = rng.permutation(np.arange(n) % len(SHAPES))
    pixels = np.stack([_draw(SHAPES[k], size, style, rng) for k in labels])[:, :, :, None]
    logger.info("generated %d %s shapes (%dx%d, gap=%.2f)", n, domain, size, size, gap)
    return DatasetArchive(pixels, labels, num_classes=len(SHAPES))
