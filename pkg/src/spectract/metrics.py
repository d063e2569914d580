"""PSNR/SSIM metrics and the TV iterative-reconstruction comparator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .geometry import FanBeamGeometry, ImageGrid, forward_project, back_project

IDENTICAL = "identical"  # sentinel for MSE == 0


class TrainingDivergence(RuntimeError):
    def __init__(self, msg, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory


def psnr(x: np.ndarray, ref: np.ndarray, peak: float):
    """10*log10(peak^2 / MSE); returns the `identical` sentinel at MSE 0."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError("shape mismatch")
    if peak <= 0:
        raise ValueError("peak must be > 0")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return IDENTICAL
    return 10.0 * np.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    if size % 2 == 0:
        raise ValueError("window size must be odd")
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_terms(x, y, win, K1, K2, peak):
    C1 = (K1 * peak) ** 2
    C2 = (K2 * peak) ** 2
    conv = lambda a: fftconvolve(a, win, mode="valid")
    mx = conv(x)
    my = conv(y)
    vx = conv(x * x) - mx * mx
    vy = conv(y * y) - my * my
    cxy = conv(x * y) - mx * my
    A1 = 2.0 * mx * my + C1
    A2 = 2.0 * cxy + C2
    B1 = mx * mx + my * my + C1
    B2 = vx + vy + C2
    S = (A1 * A2) / (B1 * B2)
    return S, (mx, my, vx, vy, cxy, A1, A2, B1, B2)


def ssim(x: np.ndarray, ref: np.ndarray, window: int = 11, K1: float = 0.01,
         K2: float = 0.03, peak: float = 1.0, sigma: float = 1.5) -> float:
    """Mean windowed SSIM over valid positions (Gaussian window)."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape:
        raise ValueError("shape mismatch")
    if window > min(x.shape):
        raise ValueError("window larger than image")
    win = gaussian_window(window, sigma)
    S, _ = _ssim_terms(x, ref, win, K1, K2, peak)
    return float(np.mean(S))


def ssim_with_grad(x: np.ndarray, ref: np.ndarray, window: int = 11,
                   K1: float = 0.01, K2: float = 0.03, peak: float = 1.0,
                   sigma: float = 1.5):
    """Mean SSIM and its gradient with respect to the first argument."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(ref, dtype=float)
    win = gaussian_window(window, sigma)
    S, (mx, my, vx, vy, cxy, A1, A2, B1, B2) = _ssim_terms(x, y, win, K1, K2, peak)
    n_pos = S.size
    # dS w.r.t. the local statistics of x
    dS_dmx = (2.0 * my * A2 / (B1 * B2) - 2.0 * mx * S / B1) / n_pos
    dS_dvx = (-S / B2) / n_pos
    dS_dcxy = (2.0 * A1 / (B1 * B2)) / n_pos
    # adjoint of the 'valid' correlation is the 'full' convolution
    spread = lambda a: fftconvolve(a, win, mode="full")
    gx = spread(dS_dmx - 2.0 * mx * dS_dvx - my * dS_dcxy)
    gx += 2.0 * x * spread(dS_dvx) + y * spread(dS_dcxy)
    return float(np.mean(S)), gx


@dataclass
class MetricReport:
    """Per-bin PSNR/SSIM rows plus aggregates, serializable to CSV/JSON."""

    psnr_db: list = field(default_factory=list)   # entries may be the sentinel
    ssim: list = field(default_factory=list)
    label: str = ""

    def add(self, p, s):
        self.psnr_db.append(p)
        self.ssim.append(float(s))

    def _finite_psnr(self):
        return [p for p in self.psnr_db if p != IDENTICAL]

    def summary(self) -> dict:
        fp = self._finite_psnr()
        return {
            "label": self.label,
            "psnr_mean": float(np.mean(fp)) if fp else None,
            "psnr_median": float(np.median(fp)) if fp else None,
            "ssim_mean": float(np.mean(self.ssim)) if self.ssim else None,
            "ssim_median": float(np.median(self.ssim)) if self.ssim else None,
        }

    def to_json(self) -> str:
        return json.dumps({"label": self.label, "psnr_db": self.psnr_db,
                           "ssim": self.ssim, "summary": self.summary()},
                          indent=2)

    def to_csv(self) -> str:
        lines = ["bin,psnr_db,ssim"]
        for i, (p, s) in enumerate(zip(self.psnr_db, self.ssim)):
            lines.append(f"{i},{p},{s}")
        return "\n".join(lines) + "\n"


def _tv_value_grad(x, lam, eps):
    gx = np.diff(x, axis=1, append=x[:, -1:])
    gy = np.diff(x, axis=0, append=x[-1:, :])
    mag = np.sqrt(gx * gx + gy * gy + eps * eps)
    val = lam * float(mag.sum())
    nx = gx / mag
    ny = gy / mag
    # negative divergence of the normalized gradient field
    div = np.zeros_like(x)
    div[:, 0] += nx[:, 0]
    div[:, 1:] += nx[:, 1:] - nx[:, :-1]
    div[0, :] += ny[0, :]
    div[1:, :] += ny[1:, :] - ny[:-1, :]
    return val, -lam * div


def tv_reconstruct(y: np.ndarray, geom: FanBeamGeometry, grid: ImageGrid,
                   lambda_tv: float, iterations: int = 60,
                   epsilon: float = 1e-4, x0: np.ndarray | None = None):
    """Smoothed-TV least squares by gradient descent with backtracking.

    Minimizes 0.5*||A x - y||^2 + lambda_tv * sum sqrt(|grad x|^2 + eps^2).
    Returns (image, objective trajectory); the trajectory is monotone
    non-increasing by construction.
    """
    if lambda_tv < 0:
        raise ValueError("lambda_tv must be >= 0")
    x = np.zeros((grid.n_rows, grid.n_cols)) if x0 is None else x0.copy()

    def objective_grad(xc):
        r = forward_project(xc, geom, grid) - y
        data = 0.5 * float(np.sum(r * r))
        g = back_project(r, geom, grid)
        if lambda_tv > 0:
            tv, gtv = _tv_value_grad(xc, lambda_tv, epsilon)
            return data + tv, g + gtv
        return data, g

    f, g = objective_grad(x)
    traj = [f]
    step = 1.0 / max(1e-12, float(np.max(np.abs(g))))
    for _ in range(iterations):
        accepted = False
        for _ in range(40):
            xn = x - step * g
            fn, gn = objective_grad(xn)
            if np.isfinite(fn) and fn <= f:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break  # converged to line-search resolution
        x, f, g = xn, fn, gn
        traj.append(f)
        step *= 1.3
        if not np.isfinite(f):
            raise TrainingDivergence("TV objective diverged", traj)
    return x, traj
