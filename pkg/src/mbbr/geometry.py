"""Box normalisation and the 256-d sinusoidal geometry embedding."""

from __future__ import annotations

import numpy as np

from .errors import DataError

# Each of the 4 normalised corner coordinates is expanded to 2 * NUM_FREQS
# values, giving 4 * 64 = 256 dimensions.
NUM_FREQS = 32
BLOCK_DIM = 2 * NUM_FREQS
EMBED_DIM = 4 * BLOCK_DIM
WAVELENGTH_BASE = 10000.0

# wavelength_i = base ** (2i / 64) for i in [0, 32)
WAVELENGTHS = WAVELENGTH_BASE ** (2.0 * np.arange(NUM_FREQS) / BLOCK_DIM)


def normalize_box(box, width: float, height: float) -> np.ndarray:
    """Return ``(x_lt/W, y_lt/H, x_rb/W, y_rb/H)``.

    ``box`` is a :class:`~mbbr.scenes.BoundingBox` or any 4-sequence.
    """
    if not (width > 0 and height > 0):
        raise DataError(f"image size must be positive, got {width}x{height}")
    coords = np.asarray(box.as_tuple() if hasattr(box, "as_tuple") else box, dtype=np.float64)
    x0, y0, x1, y1 = coords
    if not (x0 < x1 and y0 < y1):
        raise DataError(f"degenerate box {tuple(coords)}")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise DataError(f"box {tuple(coords)} outside image {width}x{height}")
    return coords / np.array([width, height, width, height])


def sinusoidal_embed(normalized) -> np.ndarray:
    """Embed one normalised box (shape (4,)) or a stack of them (shape (n, 4)).

    For coordinate v and frequency i the block holds ``sin(v / w_i)`` at even
    and ``cos(v / w_i)`` at odd offsets; blocks follow coordinate order.
    """
    nb = np.asarray(normalized, dtype=np.float64)
    single = nb.ndim == 1
    nb = nb.reshape(-1, 4)
    angles = nb[:, :, None] / WAVELENGTHS  # (n, 4, 32)
    out = np.empty(nb.shape[:2] + (BLOCK_DIM,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    out = out.reshape(nb.shape[0], EMBED_DIM)
    return out[0] if single else out


def scene_geometry(scene) -> np.ndarray:
    """f_pos for every entity of a scene, shape (n, 256)."""
    if scene.num_entities == 0:
        return np.zeros((0, EMBED_DIM))
    nb = np.stack([normalize_box(e.box, scene.width, scene.height) for e in scene.entities])
    return sinusoidal_embed(nb)
