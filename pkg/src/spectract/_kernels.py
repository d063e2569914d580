"""Numba kernels for ray tracing and backprojection.

Coordinate conventions: x runs along columns, y along rows (row 0 at the
lowest y). The source rotates counter-clockwise on a circle of radius
`sod` around the grid origin; view angle beta puts the source at
(sod*cos(beta), sod*sin(beta)). The flat detector is centered on the line
from the source through the origin at distance `sdd`.
"""

import math

import numpy as np
from numba import njit, prange

_EPS = 1e-12


@njit(cache=True, inline="always")
def _cell_index(v, n):
    # v is a coordinate in pixel units; grazing hits on a gridline go to
    # the lower-index cell (deterministic tie-break).
    iv = int(math.floor(v))
    if iv > 0 and v == float(iv):
        iv -= 1
    if iv < 0:
        iv = 0
    elif iv >= n:
        iv = n - 1
    return iv


@njit(cache=True)
def _ray_box_alphas(x0, y0, dx, dy, xmin, xmax, ymin, ymax):
    """Entry/exit parameters of the segment p0 + a*(dx,dy), a in [0,1]."""
    amin = 0.0
    amax = 1.0
    if abs(dx) > _EPS:
        a1 = (xmin - x0) / dx
        a2 = (xmax - x0) / dx
        if a1 > a2:
            a1, a2 = a2, a1
        amin = max(amin, a1)
        amax = min(amax, a2)
    elif x0 < xmin or x0 > xmax:
        return 1.0, 0.0
    if abs(dy) > _EPS:
        a1 = (ymin - y0) / dy
        a2 = (ymax - y0) / dy
        if a1 > a2:
            a1, a2 = a2, a1
        amin = max(amin, a1)
        amax = min(amax, a2)
    elif y0 < ymin or y0 > ymax:
        return 1.0, 0.0
    return amin, amax


@njit(cache=True, inline="always")
def _first_crossing(p0, d, pmin, h, amin):
    """First gridline crossing parameter strictly after amin, and its step."""
    if abs(d) <= _EPS:
        return 1e300, 1e300
    da = h / abs(d)
    p_at = p0 + amin * d
    k = (p_at - pmin) / h
    if d > 0.0:
        knext = math.floor(k) + 1.0
        a = amin + (knext * h - (p_at - pmin)) / d
    else:
        kf = math.ceil(k) - 1.0
        a = amin + (kf * h - (p_at - pmin)) / d
    if a <= amin:
        a += da
    return a, da


@njit(cache=True)
def _trace_accumulate(image, n_rows, n_cols, h, xmin, ymin,
                      x0, y0, x1, y1):
    """Line integral of `image` along the segment (x0,y0)-(x1,y1)."""
    dx = x1 - x0
    dy = y1 - y0
    xmax = xmin + n_cols * h
    ymax = ymin + n_rows * h
    amin, amax = _ray_box_alphas(x0, y0, dx, dy, xmin, xmax, ymin, ymax)
    if amax <= amin + _EPS:
        return 0.0
    ray_len = math.sqrt(dx * dx + dy * dy)
    ax, dax = _first_crossing(x0, dx, xmin, h, amin)
    ay, day = _first_crossing(y0, dy, ymin, h, amin)
    acc = 0.0
    a_cur = amin
    while a_cur < amax - _EPS:
        a_next = ax if ax < ay else ay
        if a_next > amax:
            a_next = amax
        amid = 0.5 * (a_cur + a_next)
        j = _cell_index((x0 + amid * dx - xmin) / h, n_cols)
        i = _cell_index((y0 + amid * dy - ymin) / h, n_rows)
        acc += image[i, j] * (a_next - a_cur) * ray_len
        a_cur = a_next
        if ax == ay:
            ax += dax
            ay += day
        elif ax < ay:
            ax += dax
        else:
            ay += day
    return acc


@njit(cache=True)
def _trace_scatter(image, n_rows, n_cols, h, xmin, ymin,
                   x0, y0, x1, y1, value):
    """Adjoint of _trace_accumulate: scatter value*length into cells."""
    dx = x1 - x0
    dy = y1 - y0
    xmax = xmin + n_cols * h
    ymax = ymin + n_rows * h
    amin, amax = _ray_box_alphas(x0, y0, dx, dy, xmin, xmax, ymin, ymax)
    if amax <= amin + _EPS:
        return
    ray_len = math.sqrt(dx * dx + dy * dy)
    ax, dax = _first_crossing(x0, dx, xmin, h, amin)
    ay, day = _first_crossing(y0, dy, ymin, h, amin)
    a_cur = amin
    while a_cur < amax - _EPS:
        a_next = ax if ax < ay else ay
        if a_next > amax:
            a_next = amax
        amid = 0.5 * (a_cur + a_next)
        j = _cell_index((x0 + amid * dx - xmin) / h, n_cols)
        i = _cell_index((y0 + amid * dy - ymin) / h, n_rows)
        image[i, j] += value * (a_next - a_cur) * ray_len
        a_cur = a_next
        if ax == ay:
            ax += dax
            ay += day
        elif ax < ay:
            ax += dax
        else:
            ay += day


@njit(cache=True, parallel=True)
def fan_forward(image, h, xmin, ymin, sod, sdd, det_width, n_det, angles):
    n_rows, n_cols = image.shape
    n_views = angles.shape[0]
    du = det_width / n_det
    sino = np.zeros((n_views, n_det))
    for v in prange(n_views):
        beta = angles[v]
        cb = math.cos(beta)
        sb = math.sin(beta)
        sx = sod * cb
        sy = sod * sb
        # detector center and axis
        dcx = sx - sdd * cb
        dcy = sy - sdd * sb
        ex = -sb
        ey = cb
        for k in range(n_det):
            u = (k - (n_det - 1) * 0.5) * du
            px = dcx + u * ex
            py = dcy + u * ey
            sino[v, k] = _trace_accumulate(
                image, n_rows, n_cols, h, xmin, ymin, sx, sy, px, py)
    return sino


@njit(cache=True)
def fan_backproject_adjoint(sino, n_rows, n_cols, h, xmin, ymin,
                            sod, sdd, det_width, angles):
    """Exact adjoint of fan_forward (unfiltered, ray-driven scatter)."""
    n_views, n_det = sino.shape
    du = det_width / n_det
    image = np.zeros((n_rows, n_cols))
    for v in range(n_views):
        beta = angles[v]
        cb = math.cos(beta)
        sb = math.sin(beta)
        sx = sod * cb
        sy = sod * sb
        dcx = sx - sdd * cb
        dcy = sy - sdd * sb
        ex = -sb
        ey = cb
        for k in range(n_det):
            u = (k - (n_det - 1) * 0.5) * du
            px = dcx + u * ex
            py = dcy + u * ey
            _trace_scatter(image, n_rows, n_cols, h, xmin, ymin,
                           sx, sy, px, py, sino[v, k])
    return image


@njit(cache=True, parallel=True)
def fan_fbp_backproject(qsino, n_rows, n_cols, h, xmin, ymin,
                        sod, ds, angles, dbeta):
    """Distance-weighted pixel-driven backprojection of filtered data.

    `qsino` is indexed by virtual-detector coordinate s_k = (k-(nd-1)/2)*ds
    on the flat detector translated through the origin.
    """
    n_views, n_det = qsino.shape
    image = np.zeros((n_rows, n_cols))
    half = (n_det - 1) * 0.5
    for i in prange(n_rows):
        y = ymin + (i + 0.5) * h
        for jj in range(n_cols):
            x = xmin + (jj + 0.5) * h
            acc = 0.0
            for v in range(n_views):
                beta = angles[v]
                cb = math.cos(beta)
                sb = math.sin(beta)
                L = sod - x * cb - y * sb
                if L <= 1e-6:
                    continue
                t = -x * sb + y * cb
                s = sod * t / L
                f = s / ds + half
                k0 = int(math.floor(f))
                if k0 < -1 or k0 > n_det - 1:
                    continue
                w = f - k0
                q0 = qsino[v, k0] if k0 >= 0 else 0.0
                q1 = qsino[v, k0 + 1] if k0 + 1 <= n_det - 1 else 0.0
                q = (1.0 - w) * q0 + w * q1
                U = L / sod
                acc += q / (U * U)
            image[i, jj] = acc * dbeta
    return image
