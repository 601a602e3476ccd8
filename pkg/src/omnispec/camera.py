"""Synthetic multispectral camera simulator.

A virtual camera is a bank of L1-normalized Gaussian filter responses over
a fixed 100-point wavelength grid (500..995 nm, 5 nm step). Applying a bank
to a 100-channel cube is a per-pixel matrix-vector product, which alters
spectra while preserving geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

GRID_START_NM = 500.0
GRID_STEP_NM = 5.0
GRID_POINTS = 100

#: canonical acquisition grid: 500, 505, ..., 995 nm
WAVELENGTH_GRID = GRID_START_NM + GRID_STEP_NM * np.arange(GRID_POINTS)
WAVELENGTH_GRID.setflags(write=False)

CENTER_LO_NM = 550.0
CENTER_HI_NM = 950.0
VARIANCE_RANGE = (5.0, 25.0)
CHANNEL_RANGE = (10, 25)


@dataclass
class FilterBank:
    """C Gaussian channel responses, rows L1-normalized on the grid."""

    means_nm: np.ndarray        # (C,) center wavelengths
    variances: np.ndarray       # (C,) Gaussian variances
    response: np.ndarray        # (C, 100) normalized rows

    @property
    def n_channels(self) -> int:
        return int(self.means_nm.shape[0])

    def validate(self) -> None:
        c = self.n_channels
        if self.response.shape != (c, GRID_POINTS):
            raise ValidationError(f"response shape {self.response.shape} != ({c}, {GRID_POINTS})")
        if np.any(self.response < 0):
            raise ValidationError("filter rows must be nonnegative")
        sums = self.response.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-9:
            raise ValidationError("filter rows must sum to 1 (L1 normalized)")
        if len(np.unique(self.means_nm)) != c:
            raise ValidationError("filter centers must be distinct")


def gaussian_filter_row(mean_nm: float, variance: float,
                        grid: np.ndarray = WAVELENGTH_GRID) -> np.ndarray:
    """One normalized Gaussian response evaluated on the grid."""
    if variance <= 0:
        raise ValidationError(f"variance must be positive, got {variance}")
    raw = np.exp(-((grid - mean_nm) ** 2) / (2.0 * variance))
    return raw / np.abs(raw).sum()


def farthest_point_centers(c: int, lo: float = CENTER_LO_NM, hi: float = CENTER_HI_NM,
                           grid: np.ndarray = WAVELENGTH_GRID) -> np.ndarray:
    """Greedy max-min selection of C center wavelengths from grid points in
    [lo, hi]. Starts at lo; ties break toward the smaller wavelength, so the
    output is a deterministic function of (c, lo, hi, grid)."""
    candidates = grid[(grid >= lo) & (grid <= hi)]
    if c < 1 or c > candidates.size:
        raise ValidationError(f"cannot place {c} centers on {candidates.size} grid points")
    chosen = [float(candidates[0])]
    mindist = np.abs(candidates - chosen[0])
    while len(chosen) < c:
        nxt = int(np.argmax(mindist))  # argmax takes the first (smallest wavelength) tie
        chosen.append(float(candidates[nxt]))
        mindist = np.minimum(mindist, np.abs(candidates - candidates[nxt]))
    return np.array(chosen)


def sample_camera(rng: np.random.Generator) -> FilterBank:
    """Draw a virtual camera: C ~ U{10..25}, centers by farthest-point
    sampling, variances ~ U[5, 25]. Channels are sorted by center wavelength
    so converted images keep strictly increasing wavelengths."""
    c = int(rng.integers(CHANNEL_RANGE[0], CHANNEL_RANGE[1] + 1))
    means = farthest_point_centers(c)
    variances = rng.uniform(VARIANCE_RANGE[0], VARIANCE_RANGE[1], size=c)
    order = np.argsort(means)
    means = means[order]
    variances = variances[order]
    rows = np.stack([gaussian_filter_row(m, v) for m, v in zip(means, variances)])
    bank = FilterBank(means_nm=means, variances=variances, response=rows)
    bank.validate()
    return bank


def apply_filter_bank(bank: FilterBank, cube: np.ndarray,
                      wavelengths_nm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Convert an (H, W, 100) cube on the canonical grid to (H, W, C).

    Returns the converted cube and its nominal wavelengths (the bank's
    channel centers)."""
    wavelengths_nm = np.asarray(wavelengths_nm, dtype=np.float64)
    if wavelengths_nm.shape != WAVELENGTH_GRID.shape or \
            not np.allclose(wavelengths_nm, WAVELENGTH_GRID, atol=1e-9):
        raise ValidationError("input wavelengths do not match the canonical "
                              f"{GRID_POINTS}-point grid")
    if cube.ndim != 3 or cube.shape[2] != GRID_POINTS:
        raise ValidationError(f"expected (H, W, {GRID_POINTS}) cube, got {cube.shape}")
    out = cube @ bank.response.T
    return out, bank.means_nm.copy()


# ---------------------------------------------------------------------------
# bank serialization: text document, 17 significant digits


_BANK_MAGIC = "OSFB1"


def write_bank(path, bank: FilterBank) -> None:
    bank.validate()
    lines = [_BANK_MAGIC, str(bank.n_channels)]
    for m, v in zip(bank.means_nm, bank.variances):
        lines.append(f"{m:.17g} {v:.17g}")
    for row in bank.response:
        lines.append(" ".join(f"{x:.17g}" for x in row))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_bank(path) -> FilterBank:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != _BANK_MAGIC:
        raise FormatError(f"{path}: not a filter bank file (missing {_BANK_MAGIC})")
    try:
        c = int(lines[1])
        pairs = [tuple(map(float, lines[2 + i].split())) for i in range(c)]
        rows = [np.array(list(map(float, lines[2 + c + i].split())))
                for i in range(c)]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: truncated or malformed filter bank") from exc
    bank = FilterBank(
        means_nm=np.array([p[0] for p in pairs]),
        variances=np.array([p[1] for p in pairs]),
        response=np.stack(rows),
    )
    bank.validate()
    return bank
