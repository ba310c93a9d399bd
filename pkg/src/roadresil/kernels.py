"""Hot numeric kernels with a numba path and a vectorised numpy path.

The public names at module level are bound to the numba implementations when
numba is importable and not disabled through ``ROADRESIL_DISABLE_NUMBA``;
otherwise they point at the numpy versions. Both families are exposed through
:data:`NUMPY_KERNELS` and :data:`NUMBA_KERNELS` so that tests and the
benchmark can exercise them side by side.

Conventions: angles in degrees, distances in metres, times in integer hours.
"""
import math

import numpy as np

from roadresil._accel import HAVE_NUMBA, njit

EARTH_RADIUS_M = 6_371_008.8
METERS_PER_MILE = 1609.344


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _haversine_np(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=float)) for v in (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(a, 1.0)))


def _polyline_length_np(lat, lon):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    return float(np.sum(_haversine_np(lat[:-1], lon[:-1], lat[1:], lon[1:])))


def _project_np(plat, plon, lat, lon):
    dlon = (np.asarray(lon, dtype=float) - plon + 180.0) % 360.0 - 180.0
    x = np.radians(dlon) * math.cos(math.radians(plat)) * EARTH_RADIUS_M
    y = np.radians(np.asarray(lat, dtype=float) - plat) * EARTH_RADIUS_M
    return x, y


def _polyline_distance_np(plat, plon, lat, lon):
    x, y = _project_np(plat, plon, lat, lon)
    x0, y0, x1, y1 = x[:-1], y[:-1], x[1:], y[1:]
    dx, dy = x1 - x0, y1 - y0
    seg2 = dx * dx + dy * dy
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(seg2 > 0, -(x0 * dx + y0 * dy) / seg2, 0.0)
    u = np.clip(u, 0.0, 1.0)
    cx = x0 + u * dx
    cy = y0 + u * dy
    return float(np.sqrt(np.min(cx * cx + cy * cy)))


def _runs_below_np(hours, f, threshold):
    hours = np.asarray(hours, dtype=np.int64)
    below = np.asarray(f, dtype=float) < threshold
    if not below.any():
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    idx = np.flatnonzero(below)
    h = hours[idx]
    breaks = np.flatnonzero(np.diff(h) != 1)
    starts = np.concatenate(([h[0]], h[breaks + 1]))
    ends = np.concatenate((h[breaks], [h[-1]]))
    return starts.astype(np.int64), ends.astype(np.int64)


def _trapezoid_np(t, f):
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    return float(0.5 * np.sum(np.diff(t) * (f[1:] + f[:-1])))


def _bin_sums_np(keys, values, nbins):
    keys = np.asarray(keys, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    sums = np.bincount(keys, weights=values, minlength=nbins)[:nbins]
    counts = np.bincount(keys, minlength=nbins)[:nbins].astype(np.int64)
    return sums, counts


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


@njit
def _haversine_nb(lat1, lon1, lat2, lon2):
    n = lat1.shape[0]
    out = np.empty(n)
    rad = math.pi / 180.0
    for i in range(n):
        p1 = lat1[i] * rad
        p2 = lat2[i] * rad
        sdp = math.sin((p2 - p1) / 2)
        sdl = math.sin((lon2[i] - lon1[i]) * rad / 2)
        a = sdp * sdp + math.cos(p1) * math.cos(p2) * sdl * sdl
        if a > 1.0:
            a = 1.0
        out[i] = 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))
    return out


@njit
def _polyline_length_nb(lat, lon):
    total = 0.0
    rad = math.pi / 180.0
    for i in range(lat.shape[0] - 1):
        p1 = lat[i] * rad
        p2 = lat[i + 1] * rad
        sdp = math.sin((p2 - p1) / 2)
        sdl = math.sin((lon[i + 1] - lon[i]) * rad / 2)
        a = sdp * sdp + math.cos(p1) * math.cos(p2) * sdl * sdl
        if a > 1.0:
            a = 1.0
        total += 2 * EARTH_RADIUS_M * math.asin(math.sqrt(a))
    return total


@njit
def _polyline_distance_nb(plat, plon, lat, lon):
    rad = math.pi / 180.0
    kx = math.cos(plat * rad) * EARTH_RADIUS_M * rad
    ky = EARTH_RADIUS_M * rad
    best = np.inf
    dl = (lon[0] - plon + 180.0) % 360.0 - 180.0
    x0 = dl * kx
    y0 = (lat[0] - plat) * ky
    for i in range(1, lat.shape[0]):
        dl = (lon[i] - plon + 180.0) % 360.0 - 180.0
        x1 = dl * kx
        y1 = (lat[i] - plat) * ky
        dx = x1 - x0
        dy = y1 - y0
        seg2 = dx * dx + dy * dy
        u = 0.0
        if seg2 > 0:
            u = -(x0 * dx + y0 * dy) / seg2
            if u < 0.0:
                u = 0.0
            elif u > 1.0:
                u = 1.0
        cx = x0 + u * dx
        cy = y0 + u * dy
        d2 = cx * cx + cy * cy
        if d2 < best:
            best = d2
        x0 = x1
        y0 = y1
    return math.sqrt(best)


@njit
def _runs_below_nb(hours, f, threshold):
    n = hours.shape[0]
    starts = np.empty(n, dtype=np.int64)
    ends = np.empty(n, dtype=np.int64)
    k = 0
    open_run = False
    for i in range(n):
        if f[i] < threshold:
            if open_run and hours[i] == ends[k - 1] + 1:
                ends[k - 1] = hours[i]
            else:
                starts[k] = hours[i]
                ends[k] = hours[i]
                k += 1
                open_run = True
        else:
            open_run = False
    return starts[:k], ends[:k]


@njit
def _trapezoid_nb(t, f):
    acc = 0.0
    for j in range(1, t.shape[0]):
        acc += (t[j] - t[j - 1]) * (f[j - 1] + f[j])
    return 0.5 * acc


@njit
def _bin_sums_nb(keys, values, nbins):
    sums = np.zeros(nbins)
    counts = np.zeros(nbins, dtype=np.int64)
    for i in range(keys.shape[0]):
        k = keys[i]
        if 0 <= k < nbins:
            sums[k] += values[i]
            counts[k] += 1
    return sums, counts


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _wrap_nb():
    def haversine_m(lat1, lon1, lat2, lon2):
        b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lat1, lon1, lat2, lon2)))
        shape = b[0].shape
        out = _haversine_nb(*(_f64(v.ravel()) for v in b))
        return out.reshape(shape) if shape else float(out[0])

    def polyline_length_m(lat, lon):
        return float(_polyline_length_nb(_f64(lat), _f64(lon)))

    def polyline_distance_m(plat, plon, lat, lon):
        return float(_polyline_distance_nb(float(plat), float(plon), _f64(lat), _f64(lon)))

    def runs_below(hours, f, threshold):
        return _runs_below_nb(_i64(hours), _f64(f), float(threshold))

    def trapezoid(t, f):
        return float(_trapezoid_nb(_f64(t), _f64(f)))

    def bin_sums(keys, values, nbins):
        return _bin_sums_nb(_i64(keys), _f64(values), int(nbins))

    return dict(
        haversine_m=haversine_m,
        polyline_length_m=polyline_length_m,
        polyline_distance_m=polyline_distance_m,
        runs_below=runs_below,
        trapezoid=trapezoid,
        bin_sums=bin_sums,
    )


def _haversine_np_public(lat1, lon1, lat2, lon2):
    out = _haversine_np(lat1, lon1, lat2, lon2)
    return float(out) if np.ndim(out) == 0 else out


NUMPY_KERNELS = dict(
    haversine_m=_haversine_np_public,
    polyline_length_m=_polyline_length_np,
    polyline_distance_m=_polyline_distance_np,
    runs_below=_runs_below_np,
    trapezoid=_trapezoid_np,
    bin_sums=_bin_sums_np,
)
NUMBA_KERNELS = _wrap_nb() if HAVE_NUMBA else None
BACKEND = "numba" if HAVE_NUMBA else "numpy"

_active = NUMBA_KERNELS if HAVE_NUMBA else NUMPY_KERNELS
haversine_m = _active["haversine_m"]
polyline_length_m = _active["polyline_length_m"]
polyline_distance_m = _active["polyline_distance_m"]
runs_below = _active["runs_below"]
trapezoid = _active["trapezoid"]
bin_sums = _active["bin_sums"]
