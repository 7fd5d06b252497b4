"""Parametric shape/texture corpus with fixture detections, for exercising the pipeline offline.

Each class is a (shape, texture, palette) triple; images place one textured
object of controlled relative area on a cluttered background. A detection
sidecar with a jittered ground-truth box is written next to every image.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SHAPES = ("disk", "square", "triangle", "diamond")
# all symmetric under horizontal flip, so flip augmentation keeps the class
TEXTURES = ("hstripes", "vstripes", "checker", "dots", "rings", "grid", "solid", "diamonds")


@dataclass
class SynthConfig:
    num_classes: int = 8
    images_per_class: int = 40
    size: int = 256
    object_area: tuple[float, float] = (0.2, 0.4)
    clutter: int = 12
    low_confidence_rate: float = 0.1
    box_jitter: float = 0.03
    seed: int = 0
    meta_category: str = "shape"


def class_spec(label: int) -> dict:
    return {
        "shape": SHAPES[label % len(SHAPES)],
        "texture": TEXTURES[label % len(TEXTURES)],
        "hue": (label * 0.381966) % 1.0,
    }


def _rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    return tuple(int(round(255 * c)) for c in colorsys.hsv_to_rgb(h % 1.0, s, v))


def _shape_mask(shape: str, side: int) -> Image.Image:
    mask = Image.new("L", (side, side), 0)
    d = ImageDraw.Draw(mask)
    s = side - 1
    if shape == "disk":
        d.ellipse((0, 0, s, s), fill=255)
    elif shape == "square":
        d.rectangle((0, 0, s, s), fill=255)
    elif shape == "triangle":
        d.polygon([(s / 2, 0), (s, s), (0, s)], fill=255)
    else:
        d.polygon([(s / 2, 0), (s, s / 2), (s / 2, s), (0, s / 2)], fill=255)
    return mask


# fraction of the bounding square each shape covers
_FILL = {"disk": math.pi / 4, "square": 1.0, "triangle": 0.5, "diamond": 0.5}


def _texture(texture: str, side: int, c1, c2, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    period = side / rng.uniform(4.5, 6.0)
    py, px = rng.uniform(0, period, 2)
    y, x = yy + py, xx + px
    half = period / 2
    if texture == "hstripes":
        on = (y // half) % 2 == 0
    elif texture == "vstripes":
        on = (x // half) % 2 == 0
    elif texture == "checker":
        on = ((y // half) + (x // half)) % 2 == 0
    elif texture == "dots":
        on = (x % period - half) ** 2 + (y % period - half) ** 2 < (period * 0.3) ** 2
    elif texture == "rings":
        on = ((np.hypot(yy - side / 2, xx - side / 2) + py) // half) % 2 == 0
    elif texture == "grid":
        on = (x % period > period * 0.2) & (y % period > period * 0.2)
    elif texture == "solid":
        on = np.ones_like(x, dtype=bool)
    else:
        on = (np.abs(x % period - half) + np.abs(y % period - half)) < half * 0.6
    return np.where(on[..., None], np.array(c1, np.float32), np.array(c2, np.float32))


def _background(size: int, rng: np.random.Generator, clutter: int) -> Image.Image:
    base = np.array(_rgb(rng.uniform(), rng.uniform(0.1, 0.35), rng.uniform(0.45, 0.8)), np.float32)
    tilt = np.array(_rgb(rng.uniform(), rng.uniform(0.1, 0.35), rng.uniform(0.45, 0.8)), np.float32)
    ramp = np.linspace(0, 1, size, dtype=np.float32)[:, None, None]
    pixels = base * (1 - ramp) + tilt * ramp + rng.normal(0, 8, (size, size, 3))
    img = Image.fromarray(np.clip(pixels, 0, 255).astype(np.uint8))
    d = ImageDraw.Draw(img)
    for _ in range(clutter):
        r = rng.uniform(0.02, 0.06) * size
        x, y = rng.uniform(0, size, 2)
        color = _rgb(rng.uniform(), rng.uniform(0.2, 0.8), rng.uniform(0.3, 0.9))
        if rng.random() < 0.5:
            d.ellipse((x - r, y - r, x + r, y + r), fill=color)
        else:
            d.rectangle((x - r, y - r * 0.6, x + r, y + r * 0.6), fill=color)
    return img


def render(label: int, cfg: SynthConfig, rng: np.random.Generator) -> tuple[Image.Image, tuple[int, int, int, int]]:
    """One image of class ``label`` and the object's tight bounding box."""
    spec = class_spec(label)
    img = _background(cfg.size, rng, cfg.clutter)
    area = rng.uniform(*cfg.object_area) * cfg.size**2
    side = int(round(math.sqrt(area / _FILL[spec["shape"]])))
    side = max(8, min(side, cfg.size))
    hue = spec["hue"] + rng.uniform(-0.03, 0.03)
    c1 = _rgb(hue, rng.uniform(0.7, 0.95), rng.uniform(0.8, 1.0))
    c2 = _rgb(hue + 0.5, rng.uniform(0.5, 0.8), rng.uniform(0.15, 0.35))
    tex = Image.fromarray(_texture(spec["texture"], side, c1, c2, rng).astype(np.uint8))
    x = int(rng.integers(0, cfg.size - side + 1))
    y = int(rng.integers(0, cfg.size - side + 1))
    img.paste(tex, (x, y), _shape_mask(spec["shape"], side))
    return img, (x, y, x + side, y + side)


def generate(out_root: str | Path, cfg: SynthConfig) -> dict:
    """Write ``images/<class>/<n>.png`` and ``detections/<class>/<n>.json`` under ``out_root``."""
    out_root = Path(out_root)
    rng = np.random.default_rng(cfg.seed)
    counts = {"images": 0, "low_confidence": 0}
    for label in range(cfg.num_classes):
        spec = class_spec(label)
        name = f"c{label:03d}_{spec['shape']}_{spec['texture']}"
        (out_root / "images" / name).mkdir(parents=True, exist_ok=True)
        (out_root / "detections" / name).mkdir(parents=True, exist_ok=True)
        for i in range(cfg.images_per_class):
            img, (x1, y1, x2, y2) = render(label, cfg, rng)
            img.save(out_root / "images" / name / f"{i:04d}.png")
            j = cfg.box_jitter * (x2 - x1)
            box = [
                float(np.clip(x1 + rng.uniform(-j, j), 0, cfg.size - 2)),
                float(np.clip(y1 + rng.uniform(-j, j), 0, cfg.size - 2)),
                float(np.clip(x2 + rng.uniform(-j, j), 2, cfg.size)),
                float(np.clip(y2 + rng.uniform(-j, j), 2, cfg.size)),
            ]
            low = rng.random() < cfg.low_confidence_rate
            score = float(rng.uniform(0.1, 0.45) if low else rng.uniform(0.55, 0.95))
            payload = {"boxes": [box], "scores": [round(score, 4)]}
            (out_root / "detections" / name / f"{i:04d}.json").write_text(json.dumps(payload))
            counts["images"] += 1
            counts["low_confidence"] += low
    (out_root / "synth.json").write_text(json.dumps({"config": _cfg_json(cfg), **counts}, indent=1))
    return counts


def _cfg_json(cfg: SynthConfig) -> dict:
    d = asdict(cfg)
    d["object_area"] = list(cfg.object_area)
    return d
