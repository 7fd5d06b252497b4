"""Object-oriented visual filtering: detection self-check, box enlargement, aspect padding, crop.

Box arithmetic is done with exact rationals so containment and monotonicity
in the enlargement factor hold without floating-point slack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from PIL import Image

from dvf.detector import DetectionResult, rank_detections
from dvf.errors import ConfigurationError, GeometryError

Box = tuple[int, int, int, int]

# snaps values that are integers up to float noise in the factor (1.1 is not exact in binary)
_SNAP = Fraction(1, 10**6)


@dataclass
class OvfConfig:
    alpha: float = 0.5
    enlarge_factor: float = 1.1
    target_aspect: tuple[int, int] = (3, 4)
    pad_value: tuple[int, int, int] = (128, 128, 128)

    def __post_init__(self):
        self.target_aspect = tuple(int(v) for v in self.target_aspect)
        self.pad_value = tuple(int(v) for v in self.pad_value)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.enlarge_factor < 1.0:
            raise ConfigurationError(f"enlarge_factor must be >= 1, got {self.enlarge_factor}")
        if len(self.target_aspect) != 2 or min(self.target_aspect) <= 0:
            raise ConfigurationError(f"target_aspect components must be positive, got {self.target_aspect}")


@dataclass
class CropSpec:
    source_box: Box | None
    padded_size: tuple[int, int]
    used_detection: bool
    score: float | None = None

    def to_json(self, image_id: str) -> dict:
        return {
            "id": image_id,
            "used_detection": self.used_detection,
            "source_box": list(self.source_box) if self.source_box else None,
            "padded_size": list(self.padded_size),
            "score": self.score,
        }


def _floor(x: Fraction) -> int:
    return math.floor(x + _SNAP)


def _ceil(x: Fraction) -> int:
    return math.ceil(x - _SNAP)


def enlarge_box(box: Sequence[float], factor: float, image_size: tuple[int, int]) -> Box:
    """Scale width and height by ``factor`` about the box center, then clamp to the image.

    The result is the smallest integer pixel box holding the scaled box, so it
    always contains the input box's intersection with the image.
    """
    if factor < 1:
        raise GeometryError(f"enlarge factor must be >= 1, got {factor}")
    W, H = image_size
    x1, y1, x2, y2 = (Fraction(v) for v in box)
    if not (x1 < x2 and y1 < y2):
        raise GeometryError(f"degenerate box {tuple(box)}")
    f = Fraction(factor)
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    hw, hh = f * (x2 - x1) / 2, f * (y2 - y1) / 2
    # min/max against the input keeps containment for fractional boxes despite the snap
    out = (
        max(0, min(_floor(cx - hw), math.floor(x1))),
        max(0, min(_floor(cy - hh), math.floor(y1))),
        min(W, max(_ceil(cx + hw), math.ceil(x2))),
        min(H, max(_ceil(cy + hh), math.ceil(y2))),
    )
    if not (out[0] < out[2] and out[1] < out[3]):
        raise GeometryError(f"box {tuple(box)} does not intersect the {W}x{H} image")
    return out


def aspect_padding(width: int, height: int, target_aspect: tuple[int, int]) -> tuple[int, int]:
    """Smallest (W', H') >= (width, height) with W' * hr == H' * wr exactly."""
    wr, hr = target_aspect
    g = math.gcd(wr, hr)
    wr, hr = wr // g, hr // g
    t = max(-(-width // wr), -(-height // hr))
    return wr * t, hr * t


def pad_to_aspect(
    image: Image.Image, target_aspect: tuple[int, int] = (3, 4), pad_value: tuple[int, int, int] = (128, 128, 128)
) -> tuple[Image.Image, tuple[int, int]]:
    """Add margins so the image ratio is exactly ``wr:hr``; never crops.

    Margins are split evenly with the odd pixel going to the bottom/right.
    The short axis (relative to the target) takes the bulk of the padding; the
    other axis grows by at most ``wr - 1`` or ``hr - 1`` pixels for integrality.
    """
    w, h = image.size
    new_w, new_h = aspect_padding(w, h, target_aspect)
    if (new_w, new_h) == (w, h):
        return image, (w, h)
    canvas = Image.new("RGB", (new_w, new_h), tuple(pad_value))
    canvas.paste(image, ((new_w - w) // 2, (new_h - h) // 2))
    return canvas, (new_w, new_h)


def top_detection(detections: Sequence[DetectionResult]) -> DetectionResult | None:
    ranked = rank_detections(detections)
    return ranked[0] if ranked else None


def apply_ovf(image: Image.Image, detections: Sequence[DetectionResult], cfg: OvfConfig) -> tuple[Image.Image, CropSpec]:
    best = top_detection(detections)
    if best is None or best.score < cfg.alpha:
        return image, CropSpec(None, image.size, False, None if best is None else best.score)
    box = enlarge_box(best.box, cfg.enlarge_factor, image.size)
    cropped = image.crop(box)
    if box == (0, 0, *image.size):
        cropped = image
    out, size = pad_to_aspect(cropped, cfg.target_aspect, cfg.pad_value)
    return out, CropSpec(box, size, True, best.score)
