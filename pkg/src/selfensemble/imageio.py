"""Grayscale PNG input/output with values in [0, 1]."""

import numpy as np
from PIL import Image

# Rec.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


def load_gray(path):
    """Load an image as float32 in [0, 1]; RGB(A) is reduced to Rec.601 luma."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return (arr / 65535.0).astype(np.float32)
        if im.mode == "L":
            return (np.asarray(im, dtype=np.float64) / 255.0).astype(np.float32)
        if im.mode == "1":
            return np.asarray(im, dtype=np.float32)
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
        return (rgb @ _LUMA / 255.0).astype(np.float32)


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_gray(path, image):
    """Save as an 8-bit grayscale PNG (values clipped to [0, 1])."""
    Image.fromarray(to_uint8(image), mode="L").save(path, format="PNG")
