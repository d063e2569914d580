"""Polychromatic Beer-Lambert forward model, Poisson noise, full-spectrum fusion."""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from .geometry import FanBeamGeometry, ImageGrid, forward_project


class ConfigurationError(ValueError):
    pass


# Bundled per-path photon flux presets for low-dose studies.
PHOTON_FLUX_PRESETS = (3.0e3, 1.2e4)

# Bundled six energy-resolved channels (keV edges).
BUNDLED_BIN_EDGES = [(52.0, 64.0), (64.0, 73.0), (73.0, 80.0),
                   (80.0, 87.0), (87.0, 99.0), (99.0, 120.0)]


def _load_two_column(name: str):
    text = importlib.resources.files("spectract.data").joinpath(name).read_text()
    rows = [ln.split() for ln in text.splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
    a = np.array(rows, dtype=float)
    return a[:, 0], a[:, 1]


@dataclass
class EnergySpectrum:
    energies_keV: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.energies_keV = np.asarray(self.energies_keV, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.energies_keV.shape != self.weights.shape:
            raise ConfigurationError("energies and weights must have equal length")
        if np.any(np.diff(self.energies_keV) <= 0):
            raise ConfigurationError("energies must be strictly ascending")
        if np.any(self.weights < 0):
            raise ConfigurationError("weights must be non-negative")
        total = self.weights.sum()
        if total <= 0:
            raise ConfigurationError("spectrum weights sum to zero")
        self.weights = self.weights / total

    @classmethod
    def bundled(cls) -> "EnergySpectrum":
        e, w = _load_two_column("spectrum_120kvp.txt")
        return cls(e, w)


@dataclass
class Material:
    name: str
    energies_keV: np.ndarray
    mass_attenuation: np.ndarray  # cm^2/g
    density: float                # g/cm^3

    def mu_over_rho(self, energies_keV) -> np.ndarray:
        # piecewise-linear in energy, clamped at the table ends
        return np.interp(energies_keV, self.energies_keV, self.mass_attenuation)


@dataclass
class AttenuationTable:
    materials: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in self.materials.values():
            if np.any(np.asarray(m.mass_attenuation) <= 0):
                raise ConfigurationError("attenuation values must be > 0")

    @classmethod
    def bundled(cls) -> "AttenuationTable":
        se, sm = _load_two_column("mu_soft_tissue.txt")
        be, bm = _load_two_column("mu_bone.txt")
        return cls({
            "soft_tissue": Material("soft_tissue", se, sm, density=1.06),
            "bone": Material("bone", be, bm, density=1.92),
        })


@dataclass
class EnergyBinSet:
    edges: list  # [(lo, hi), ...] contiguous, ascending

    def __post_init__(self):
        edges = [(float(a), float(b)) for a, b in self.edges]
        for lo, hi in edges:
            if hi <= lo:
                raise ConfigurationError("bin edges must be ascending")
        for (_, hi), (lo2, _) in zip(edges[:-1], edges[1:]):
            if lo2 != hi:
                raise ConfigurationError("bins must be contiguous and non-overlapping")
        self.edges = edges

    def __len__(self):
        return len(self.edges)

    @classmethod
    def bundled6(cls) -> "EnergyBinSet":
        return cls(BUNDLED_BIN_EDGES)

    def mask(self, energies_keV: np.ndarray, index: int) -> np.ndarray:
        lo, hi = self.edges[index]
        m = (energies_keV >= lo) & (energies_keV < hi)
        if index == len(self.edges) - 1:
            m |= energies_keV == hi
        return m


@dataclass
class SinogramStack:
    """Per-energy-bin line integrals, bins x views x detectors."""

    y: np.ndarray            # (bins, views, detectors)
    flat_counts: np.ndarray  # per-bin flat-field counts I0_b

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.flat_counts = np.asarray(self.flat_counts, dtype=float)
        if self.y.ndim != 3:
            raise ConfigurationError("y must be bins x views x detectors")
        if self.flat_counts.shape != (self.y.shape[0],):
            raise ConfigurationError("one flat count per bin required")
        if np.any(~np.isfinite(self.y)):
            raise ConfigurationError("line integrals must be finite")
        if np.any(self.flat_counts <= 0):
            raise ConfigurationError("flat counts must be > 0")

    @property
    def n_bins(self) -> int:
        return self.y.shape[0]


def polychromatic_sinogram(material_maps: dict, spectrum: EnergySpectrum,
                           bins: EnergyBinSet, geom: FanBeamGeometry,
                           grid: ImageGrid, table: AttenuationTable,
                           photons: float) -> SinogramStack:
    """Clean multi-energy line integrals via the discrete Beer-Lambert model.

    `material_maps` holds per-material density images (g/cm^3) on `grid`.
    Returns per-bin y = -ln(counts_b / flat_b) with flat_b = photons * sum of
    spectral weight inside the bin.
    """
    names = sorted(material_maps)
    # path integrals of density, converted mm -> cm
    rho_L = {n: forward_project(material_maps[n], geom, grid) / 10.0
             for n in names}
    E = spectrum.energies_keV
    counts = np.zeros((len(bins),) + next(iter(rho_L.values())).shape)
    flats = np.zeros(len(bins))
    for b in range(len(bins)):
        m = bins.mask(E, b)
        if not np.any(m):
            raise ConfigurationError(
                f"no spectrum samples fall inside bin {bins.edges[b]}")
        flats[b] = photons * spectrum.weights[m].sum()
        for e, w in zip(E[m], spectrum.weights[m]):
            expo = np.zeros_like(counts[b])
            for n in names:
                mat = table.materials[n]
                expo += mat.mu_over_rho(e) * rho_L[n]
            counts[b] += photons * w * np.exp(-expo)
    y = -np.log(counts / flats[:, None, None])
    return SinogramStack(y=y, flat_counts=flats)


def stack_to_counts(stack: SinogramStack) -> np.ndarray:
    """Expected photon counts implied by a clean SinogramStack."""
    return stack.flat_counts[:, None, None] * np.exp(-stack.y)


def poisson_corrupt(clean_counts: np.ndarray, seed: int) -> np.ndarray:
    """Independent Poisson draws with the clean counts as means."""
    clean_counts = np.asarray(clean_counts, dtype=float)
    if np.any(clean_counts < 0):
        raise ValueError("Poisson means must be non-negative")
    rng = np.random.default_rng(seed)
    return rng.poisson(clean_counts).astype(float)


def counts_to_lineintegral(counts: np.ndarray, flat: np.ndarray,
                           floor: float = 0.5) -> np.ndarray:
    """Log transform with a count floor so the result is finite everywhere."""
    counts = np.asarray(counts, dtype=float)
    flat = np.asarray(flat, dtype=float)
    if np.any(flat <= 0):
        raise ValueError("flat counts must be > 0")
    return -np.log(np.maximum(counts, floor) / flat)


def noisy_stack(clean: SinogramStack, seed: int, floor: float = 0.5) -> SinogramStack:
    """Poisson-corrupt a clean stack and return the noisy line integrals."""
    noisy = poisson_corrupt(stack_to_counts(clean), seed)
    y = counts_to_lineintegral(noisy, clean.flat_counts[:, None, None], floor)
    return SinogramStack(y=y, flat_counts=clean.flat_counts.copy())


def fuse_full_spectrum(y_stack: np.ndarray) -> np.ndarray:
    """Full-spectrum projection: y_F = -ln(mean_n exp(-y_n)) per pixel."""
    y_stack = np.asarray(y_stack, dtype=float)
    if y_stack.ndim < 1 or y_stack.shape[0] < 1:
        raise ValueError("need at least one energy bin to fuse")
    # log-mean-exp of -y, computed stably
    ymin = y_stack.min(axis=0)
    return ymin - np.log(np.mean(np.exp(-(y_stack - ymin)), axis=0))
