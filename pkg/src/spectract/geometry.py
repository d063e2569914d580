"""Fan-beam acquisition geometry, Siddon ray tracing, FBP reconstruction."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _kernels


class GeometryError(ValueError):
    pass


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class FanBeamGeometry:
    """Flat-detector fan-beam acquisition over a circular source orbit."""

    source_to_detector_mm: float
    source_to_object_mm: float
    detector_width_mm: float
    n_detectors: int
    n_views: int
    angular_range_rad: float = 2.0 * math.pi

    def __post_init__(self):
        if self.source_to_detector_mm <= 0 or self.source_to_object_mm <= 0 \
                or self.detector_width_mm <= 0:
            raise GeometryError("all lengths must be > 0")
        if self.n_detectors < 2:
            raise GeometryError("n_detectors must be >= 2")
        if self.n_views < 2:
            raise GeometryError("n_views must be >= 2")
        if self.source_to_object_mm >= self.source_to_detector_mm:
            raise GeometryError("source_to_object_mm must be < source_to_detector_mm")

    @property
    def view_angles(self) -> np.ndarray:
        return np.arange(self.n_views) * (self.angular_range_rad / self.n_views)

    @property
    def detector_pitch_mm(self) -> float:
        return self.detector_width_mm / self.n_detectors

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FanBeamGeometry":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class ImageGrid:
    """Regular pixel raster; `origin` is the grid center position in mm."""

    n_rows: int
    n_cols: int
    pixel_size_mm: float
    origin: tuple = (0.0, 0.0)

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise GeometryError("grid must have at least one row and column")
        if self.pixel_size_mm <= 0:
            raise GeometryError("pixel_size_mm must be > 0")

    @property
    def xmin(self) -> float:
        return self.origin[0] - 0.5 * self.n_cols * self.pixel_size_mm

    @property
    def ymin(self) -> float:
        return self.origin[1] - 0.5 * self.n_rows * self.pixel_size_mm

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ImageGrid":
        d = json.loads(text)
        d["origin"] = tuple(d["origin"])
        return cls(**d)


@dataclass
class RayPath:
    """Ordered list of (row, col) cells and intersection lengths (mm)."""

    cells: list = field(default_factory=list)       # [(row, col), ...]
    lengths_mm: list = field(default_factory=list)  # same order

    def total_length(self) -> float:
        return float(sum(self.lengths_mm))

    def __len__(self):
        return len(self.cells)


# Full-scale simulation geometry (detector wider than SDD; exposed
# verbatim as a preset, physical plausibility not asserted).
FULL_SCALE_GEOMETRY = FanBeamGeometry(
    source_to_detector_mm=500.0,
    source_to_object_mm=250.0,
    detector_width_mm=720.0,
    n_detectors=512,
    n_views=512,
)

# Desk-scale profile used by the toy experiments (64x64 grid, 3 mm pixels).
TOY_GEOMETRY = FanBeamGeometry(
    source_to_detector_mm=1000.0,
    source_to_object_mm=500.0,
    detector_width_mm=420.0,
    n_detectors=96,
    n_views=96,
)

TOY_GRID = ImageGrid(n_rows=64, n_cols=64, pixel_size_mm=3.0)


def siddon_path(grid: ImageGrid, p0, p1) -> RayPath:
    """Exact ray-grid intersection path between two distinct endpoints.

    Returns an empty path when the ray misses the grid bounding box.
    """
    x0, y0 = float(p0[0]), float(p0[1])
    x1, y1 = float(p1[0]), float(p1[1])
    if x0 == x1 and y0 == y1:
        raise ValueError("ray endpoints must be distinct")
    h = grid.pixel_size_mm
    xmin, ymin = grid.xmin, grid.ymin
    xmax = xmin + grid.n_cols * h
    ymax = ymin + grid.n_rows * h
    dx, dy = x1 - x0, y1 - y0
    amin, amax = _kernels._ray_box_alphas(x0, y0, dx, dy, xmin, xmax, ymin, ymax)
    path = RayPath()
    if amax <= amin + 1e-12:
        return path
    ray_len = math.hypot(dx, dy)
    ax, dax = _kernels._first_crossing(x0, dx, xmin, h, amin)
    ay, day = _kernels._first_crossing(y0, dy, ymin, h, amin)
    a_cur = amin
    while a_cur < amax - 1e-12:
        a_next = min(ax, ay, amax)
        amid = 0.5 * (a_cur + a_next)
        col = _kernels._cell_index((x0 + amid * dx - xmin) / h, grid.n_cols)
        row = _kernels._cell_index((y0 + amid * dy - ymin) / h, grid.n_rows)
        seg = (a_next - a_cur) * ray_len
        if seg > 0.0:
            path.cells.append((row, col))
            path.lengths_mm.append(seg)
        a_cur = a_next
        if ax == ay:
            ax += dax
            ay += day
        elif ax < ay:
            ax += dax
        else:
            ay += day
    return path


def forward_project(image: np.ndarray, geom: FanBeamGeometry,
                    grid: ImageGrid) -> np.ndarray:
    """Siddon line integrals of `image` (views x detectors), linear in the image."""
    image = np.ascontiguousarray(image, dtype=np.float64)
    if image.shape != (grid.n_rows, grid.n_cols):
        raise DimensionError(
            f"image shape {image.shape} does not match grid "
            f"({grid.n_rows}, {grid.n_cols})")
    return _kernels.fan_forward(
        image, grid.pixel_size_mm, grid.xmin, grid.ymin,
        geom.source_to_object_mm, geom.source_to_detector_mm,
        geom.detector_width_mm, geom.n_detectors, geom.view_angles)


def back_project(sinogram: np.ndarray, geom: FanBeamGeometry,
                 grid: ImageGrid) -> np.ndarray:
    """Exact adjoint of forward_project (unfiltered backprojection)."""
    sinogram = np.ascontiguousarray(sinogram, dtype=np.float64)
    if sinogram.shape != (geom.n_views, geom.n_detectors):
        raise DimensionError("sinogram shape does not match geometry")
    return _kernels.fan_backproject_adjoint(
        sinogram, grid.n_rows, grid.n_cols, grid.pixel_size_mm,
        grid.xmin, grid.ymin, geom.source_to_object_mm,
        geom.source_to_detector_mm, geom.detector_width_mm, geom.view_angles)


def _ramp_kernel(n: int, ds: float) -> np.ndarray:
    """Spatial-domain band-limited ramp (Ram-Lak) kernel of length n."""
    k = np.fft.ifftshift(np.arange(-n // 2, n // 2))
    h = np.zeros(n)
    h[0] = 1.0 / (4.0 * ds * ds)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * ds) ** 2
    return h


def ramp_filter_response(n_det: int, ds: float, window: str = "ramp"):
    """Frequency response of the (optionally Hann-apodized) ramp filter."""
    n = 1
    while n < 2 * n_det:
        n *= 2
    H = np.real(np.fft.fft(_ramp_kernel(n, ds)))
    if window == "hann":
        f = np.fft.fftfreq(n)
        H = H * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif window != "ramp":
        raise ValueError(f"unknown filter window: {window!r}")
    return H, n


def fbp_reconstruct(sinogram: np.ndarray, geom: FanBeamGeometry,
                    grid: ImageGrid, filter: str = "ramp") -> np.ndarray:
    """Flat-detector fan-beam FBP.

    Cosine pre-weighting, ramp filtering along the detector axis on the
    virtual detector through the isocenter, then distance-weighted
    pixel-driven backprojection.
    """
    sinogram = np.ascontiguousarray(sinogram, dtype=np.float64)
    if sinogram.shape != (geom.n_views, geom.n_detectors):
        raise DimensionError("sinogram shape does not match geometry")
    if geom.n_views < 2:
        raise GeometryError("need at least 2 views")
    sod = geom.source_to_object_mm
    sdd = geom.source_to_detector_mm
    nd = geom.n_detectors
    ds = geom.detector_pitch_mm * sod / sdd  # virtual-detector pitch
    s = (np.arange(nd) - (nd - 1) / 2.0) * ds
    weighted = sinogram * (sod / np.sqrt(sod * sod + s * s))[None, :]
    H, n = ramp_filter_response(nd, ds, filter)
    freq = np.fft.rfft(weighted, n=n, axis=1)
    filtered = np.fft.irfft(freq * H[: n // 2 + 1], n=n, axis=1)[:, :nd]
    # ds approximates the convolution integral; the extra 1/2 folds the
    # duplicated coverage of a full-scan fan geometry into the filter.
    q = np.ascontiguousarray(filtered * (0.5 * ds))
    dbeta = geom.angular_range_rad / geom.n_views
    return _kernels.fan_fbp_backproject(
        q, grid.n_rows, grid.n_cols, grid.pixel_size_mm,
        grid.xmin, grid.ymin, sod, ds, geom.view_angles, dbeta)


def set_thread_cap():
    """Honor the SPECTRACT_THREADS env var for numba parallel sections."""
    cap = os.environ.get("SPECTRACT_THREADS")
    if cap:
        import numba

        numba.set_num_threads(max(1, int(cap)))
