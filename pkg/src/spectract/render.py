"""PNG rendering of arrays and a small dependency-free line-chart writer."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw


def window_to_u8(image: np.ndarray, lo: float | None = None,
                 hi: float | None = None) -> np.ndarray:
    """Linear window [lo, hi] -> [0, 255]; defaults to the data range."""
    image = np.asarray(image, dtype=float)
    if lo is None:
        lo = float(np.min(image))
    if hi is None:
        hi = float(np.max(image))
    if hi <= lo:
        hi = lo + 1e-12
    u = np.clip((image - lo) / (hi - lo), 0.0, 1.0)
    return np.round(u * 255.0).astype(np.uint8)


def render_image(path: str, image: np.ndarray, lo: float | None = None,
                 hi: float | None = None) -> None:
    """Write a 2D array as an 8-bit grayscale PNG."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise ValueError("render_image expects a 2D array")
    Image.fromarray(window_to_u8(image, lo, hi), mode="L").save(path)


def render_residual(path: str, recon: np.ndarray, ref: np.ndarray,
                    lo: float = 0.0, hi: float = 0.2) -> None:
    """Absolute-difference map |ref - recon| under a fixed window."""
    recon = np.asarray(recon, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if recon.shape != ref.shape:
        raise ValueError("shape mismatch")
    render_image(path, np.abs(ref - recon), lo=lo, hi=hi)


def plot_lines(path: str, series: dict, title: str = "",
               size=(640, 400), log_y: bool = False) -> None:
    """Plot named 1D series as a simple line chart PNG.

    series maps label -> sequence of y values (x is the index).
    """
    w, h = size
    ml, mr, mt, mb = 56, 16, 28, 34
    img = Image.new("RGB", (w, h), "white")
    d = ImageDraw.Draw(img)
    colors = ["#1f5fbf", "#bf3f1f", "#2f8f4f", "#8f2f8f", "#7f7f1f", "#1f8f8f"]
    ys_all = np.concatenate([np.asarray(v, dtype=float)
                             for v in series.values() if len(v)])
    if log_y:
        ys_all = np.log10(np.maximum(ys_all, 1e-30))
    ylo, yhi = float(ys_all.min()), float(ys_all.max())
    if yhi <= ylo:
        yhi = ylo + 1.0
    nmax = max(len(v) for v in series.values())
    xhi = max(nmax - 1, 1)

    def to_px(i, y):
        if log_y:
            y = np.log10(max(y, 1e-30))
        px = ml + (w - ml - mr) * i / xhi
        py = h - mb - (h - mt - mb) * (y - ylo) / (yhi - ylo)
        return px, py

    d.rectangle([ml, mt, w - mr, h - mb], outline="#444444")
    for frac in (0.0, 0.5, 1.0):
        yv = ylo + frac * (yhi - ylo)
        _, py = to_px(0, 10 ** yv if log_y else yv)
        label = f"{yv:.3g}"
        d.text((4, py - 6), label, fill="#444444")
    d.text((ml, 6), title, fill="#000000")
    for k, (label, vals) in enumerate(series.items()):
        vals = np.asarray(vals, dtype=float)
        pts = [to_px(i, v) for i, v in enumerate(vals)]
        if len(pts) == 1:
            pts = pts * 2
        d.line(pts, fill=colors[k % len(colors)], width=2)
        d.text((ml + 8 + 110 * k, h - mb + 8), label,
               fill=colors[k % len(colors)])
    img.save(path)
