"""Positional encodings: Fourier features of physical wavelengths, and the
classic discrete sinusoidal encoding (1D and 2D grid variants).

The wavelength encoding is what lets one parameter set serve cameras with
different channel counts: a channel is located by its center wavelength in
nanometers, not by its index.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .rng import stream


class WavelengthEncoder:
    """Frozen Fourier-feature encoding of wavelengths.

    Row for wavelength w (nm) is [cos(2*pi*alpha*w*B), sin(2*pi*alpha*w*B)]
    with B a fixed draw of dim/2 frequencies from N(0, sigma^2). B is sampled
    once at construction and never trained; checkpoints carry it verbatim.
    """

    def __init__(self, dim: int, sigma: float = 3.0, alpha: float = 1e-3,
                 b: np.ndarray | None = None, seed: int = 0):
        if dim % 2 != 0 or dim <= 0:
            raise ValidationError(f"encoding dim must be positive and even, got {dim}")
        self.dim = dim
        self.sigma = float(sigma)
        self.alpha = float(alpha)
        if b is None:
            b = stream(seed, "wavelength-pe").normal(0.0, self.sigma, size=dim // 2)
        b = np.array(b, dtype=np.float64)  # private copy; frozen below
        if b.shape != (dim // 2,):
            raise ValidationError(f"frequency bank shape {b.shape} != ({dim // 2},)")
        self.b = b
        self.b.setflags(write=False)

    def encode(self, wavelengths_nm) -> np.ndarray:
        """(C,) wavelengths -> (C, dim) encoding matrix."""
        w = np.asarray(wavelengths_nm, dtype=np.float64).reshape(-1)
        if w.size == 0:
            raise ValidationError("empty wavelength list")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("wavelengths must be finite and nonnegative")
        phase = 2.0 * np.pi * self.alpha * np.outer(w, self.b)
        return np.concatenate([np.cos(phase), np.sin(phase)], axis=1)


from functools import lru_cache


@lru_cache(maxsize=64)
def _discrete_pe_cached(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = np.exp(-np.log(10000.0) * (2.0 * np.arange(dim // 2) / dim))
    out = np.zeros((n_positions, dim))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq)
    out.setflags(write=False)
    return out


def discrete_pe(n_positions: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding of integer positions 0..n-1, sin/cos interleaved."""
    if n_positions < 1:
        raise ValidationError(f"need at least one position, got {n_positions}")
    if dim % 2 != 0 or dim <= 0:
        raise ValidationError(f"encoding dim must be positive and even, got {dim}")
    return _discrete_pe_cached(n_positions, dim)


@lru_cache(maxsize=64)
def _grid_pe_cached(h: int, w: int, dim: int) -> np.ndarray:
    rows = discrete_pe(h, dim // 2)
    cols = discrete_pe(w, dim // 2)
    out = np.zeros((h * w, dim))
    for r in range(h):
        out[r * w:(r + 1) * w, :dim // 2] = rows[r]
        out[r * w:(r + 1) * w, dim // 2:] = cols
    out.setflags(write=False)
    return out


def grid_pe(h: int, w: int, dim: int) -> np.ndarray:
    """2D grid encoding: row encoding in the first dim/2 features, column in
    the second. Returns (h*w, dim), rows in row-major cell order."""
    if dim % 4 != 0:
        raise ValidationError(f"2d encoding dim must be divisible by 4, got {dim}")
    return _grid_pe_cached(h, w, dim)
