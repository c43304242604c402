"""Input manipulations feeding the virtual ensemble.

Seven lossless spatial manipulations (the non-identity elements of the
dihedral group of the square) and five DCT-II band masks. All functions act
on the last two axes of a numpy array, so ``[H, W]`` images and
``[N, C, H, W]`` batches are handled alike.

Conventions
-----------
``rot90`` maps pixel ``(i, j)`` of an ``H x W`` image to ``(j, H - 1 - i)``
of the ``W x H`` result. ``vmirror`` reverses the row order. Composite
manipulations rotate first and mirror second.
"""

from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache

import numpy as np

__all__ = [
    "ManipulationId", "FrequencyMask", "MASK_CATALOG", "SPATIAL_IDS", "FREQUENCY_IDS",
    "apply_spatial", "invert_spatial", "dct2", "idct2", "dct_matrix", "build_mask",
    "apply_frequency_mask", "catalog_masks", "format_mask_catalog", "parse_mask_catalog",
]


class ManipulationId(IntEnum):
    IDENTITY = 0
    SM1 = 1  # rot90 + vmirror
    SM2 = 2  # vmirror
    SM3 = 3  # rot270 + vmirror
    SM4 = 4  # rot180 + vmirror
    SM5 = 5  # rot90
    SM6 = 6  # rot180
    SM7 = 7  # rot270
    FM1 = 8
    FM2 = 9
    FM3 = 10
    FM4 = 11
    FM5 = 12

    @property
    def kind(self):
        if self is ManipulationId.IDENTITY:
            return "identity"
        return "spatial" if self <= 7 else "frequency"

    @property
    def label(self):
        if self.kind == "spatial":
            quarter_turns, mirror = _SPATIAL_OPS[self]
            parts = [f"rot{90 * quarter_turns}"] if quarter_turns else []
            return "+".join(parts + (["vmirror"] if mirror else []))
        if self.kind == "frequency":
            lo, hi = MASK_CATALOG[self - 8]
            return f"dct_band[{lo:g},{hi:g}]"
        return "identity"


# manipulation -> (clockwise-in-array-coordinates quarter turns, mirror after rotation)
_SPATIAL_OPS = {
    ManipulationId.SM1: (1, True),
    ManipulationId.SM2: (0, True),
    ManipulationId.SM3: (3, True),
    ManipulationId.SM4: (2, True),
    ManipulationId.SM5: (1, False),
    ManipulationId.SM6: (2, False),
    ManipulationId.SM7: (3, False),
}

SPATIAL_IDS = tuple(_SPATIAL_OPS)
FREQUENCY_IDS = tuple(ManipulationId(i) for i in range(8, 13))

# (r_low_frac, r_high_frac) of the zeroed band, in FM1..FM5 order
MASK_CATALOG = ((0.1, 1.0), (0.3, 1.0), (0.5, 1.0), (0.4, 0.5), (0.8, 0.9))


def _spatial_op(manipulation):
    try:
        return _SPATIAL_OPS[ManipulationId(manipulation)]
    except (KeyError, ValueError):
        raise ValueError(f"{manipulation!r} is not a spatial manipulation") from None


def _rot90(x, quarter_turns):
    # (i, j) -> (j, H - 1 - i) per quarter turn
    return np.rot90(x, k=-quarter_turns, axes=(-2, -1))


def _vmirror(x):
    return x[..., ::-1, :]


def apply_spatial(image, manipulation):
    """Apply one of the seven spatial manipulations (an exact pixel permutation)."""
    quarter_turns, mirror = _spatial_op(manipulation)
    out = _rot90(np.asarray(image), quarter_turns)
    if mirror:
        out = _vmirror(out)
    return np.ascontiguousarray(out)


def invert_spatial(image, manipulation):
    """Undo :func:`apply_spatial` for the same manipulation, bit for bit."""
    quarter_turns, mirror = _spatial_op(manipulation)
    out = np.asarray(image)
    if mirror:
        out = _vmirror(out)
    out = _rot90(out, -quarter_turns)
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------- DCT-II

@lru_cache(maxsize=32)
def dct_matrix(n):
    """Orthonormal DCT-II matrix ``C`` with ``C @ x`` the transform of ``x``."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * j + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    c.setflags(write=False)
    return c


def _out_dtype(x):
    return x.dtype if x.dtype in (np.float32, np.float64) else np.float64


def dct2(image):
    """Separable orthonormal 2-D DCT-II over the last two axes; ``[..., 0, 0]`` is DC."""
    x = np.asarray(image)
    ch, cw = dct_matrix(x.shape[-2]), dct_matrix(x.shape[-1])
    return (ch @ x.astype(np.float64) @ cw.T).astype(_out_dtype(x))


def idct2(coeffs):
    """Inverse of :func:`dct2` (the transposed transform)."""
    x = np.asarray(coeffs)
    ch, cw = dct_matrix(x.shape[-2]), dct_matrix(x.shape[-1])
    return (ch.T @ x.astype(np.float64) @ cw).astype(_out_dtype(x))


# ---------------------------------------------------------------- masks

@dataclass(frozen=True, eq=False)
class FrequencyMask:
    """Binary DCT-domain mask, zero over a closed quarter annulus.

    The annulus spans radii ``[r_low_frac * r_max, r_high_frac * r_max]``
    measured in coefficient-index units from DC, with
    ``r_max = sqrt((H - 1)**2 + (W - 1)**2)``.
    """

    r_low_frac: float
    r_high_frac: float
    height: int
    width: int
    values: np.ndarray

    @property
    def zero_count(self):
        return int((self.values == 0).sum())


def _radius_grid(height, width):
    u = np.arange(height, dtype=np.float64)[:, None]
    v = np.arange(width, dtype=np.float64)[None, :]
    return np.sqrt(u * u + v * v), float(np.sqrt((height - 1) ** 2 + (width - 1) ** 2))


def build_mask(r_low_frac, r_high_frac, height, width):
    if not 0.0 <= r_low_frac <= r_high_frac <= 1.0:
        raise ValueError(f"need 0 <= r_low_frac <= r_high_frac <= 1, "
                         f"got ({r_low_frac}, {r_high_frac})")
    if height < 1 or width < 1:
        raise ValueError(f"mask size must be positive, got {height}x{width}")
    r, r_max = _radius_grid(int(height), int(width))
    zeroed = (r >= r_low_frac * r_max) & (r <= r_high_frac * r_max)
    values = np.where(zeroed, 0.0, 1.0)
    values.setflags(write=False)
    return FrequencyMask(float(r_low_frac), float(r_high_frac), int(height), int(width), values)


def catalog_masks(height, width, catalog=MASK_CATALOG):
    return [build_mask(lo, hi, height, width) for lo, hi in catalog]


def apply_frequency_mask(image, mask):
    """Zero the masked DCT band: ``idct2(dct2(image) * mask.values)``."""
    x = np.asarray(image)
    if x.shape[-2:] != (mask.height, mask.width):
        raise ValueError(f"image spatial size {x.shape[-2:]} does not match mask "
                         f"{(mask.height, mask.width)}")
    return idct2(dct2(x.astype(np.float64)) * mask.values).astype(_out_dtype(x))


def format_mask_catalog(catalog=MASK_CATALOG):
    """Human-readable listing, one ``index,r_low_frac,r_high_frac`` row per mask."""
    lines = ["index,r_low_frac,r_high_frac"]
    for i, (lo, hi) in enumerate(catalog):
        lines.append(f"{FREQUENCY_IDS[0] + i},{lo!r},{hi!r}")
    return "\n".join(lines) + "\n"


def parse_mask_catalog(text):
    rows = [line.strip() for line in text.strip().splitlines() if line.strip()]
    if rows and rows[0].startswith("index"):
        rows = rows[1:]
    catalog = []
    for row in rows:
        _, lo, hi = row.split(",")
        catalog.append((float(lo), float(hi)))
    if len(catalog) != len(FREQUENCY_IDS):
        raise ValueError(f"mask catalog needs {len(FREQUENCY_IDS)} rows, got {len(catalog)}")
    return tuple(catalog)
