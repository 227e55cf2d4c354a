"""Exact Euclidean distance transforms on anisotropic voxel grids.

The squared transform is separable: one pass per axis, each computing the
lower envelope of parabolas ``f[p] + w * (q - p)**2`` with ``w = spacing**2``
(Felzenszwalb & Huttenlocher). Every value is a true center-to-center squared
distance, so integer or dyadic spacings give results that are exact in float64.
"""
import math
import warnings

import numpy as np

from .volume import Volume, as_volume

INF = math.inf


class NoSitesWarning(RuntimeWarning):
    """Raised as a warning when a transform has no site voxels (result is all +INF)."""


def _envelope_1d(f, w):
    """Squared distance envelope of one line.

    ``f`` holds per-position costs (``inf`` for positions that are not sites),
    ``w`` is the squared spacing along the line.
    """
    n = len(f)
    sites = [p for p in range(n) if f[p] != INF]
    if not sites:
        return [INF] * n

    v = [0] * len(sites)  # parabola apexes kept on the envelope
    z = [0.0] * (len(sites) + 1)  # boundaries between envelope pieces
    k = 0
    v[0] = sites[0]
    z[0] = -INF
    z[1] = INF
    for q in sites[1:]:
        fq = f[q] + w * q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + w * p * p)) / (2.0 * w * (q - p))
            if s <= z[k]:
                k -= 1
            else:
                break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = INF

    out = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d = q - p
        out[q] = f[p] + w * (d * d)
    return out


def _sq_edt_array(sites: np.ndarray, spacing) -> np.ndarray:
    f = np.where(sites, 0.0, INF)
    for axis in range(3):
        w = float(spacing[axis]) ** 2
        moved = np.moveaxis(f, axis, -1)
        lines = moved.reshape(-1, moved.shape[-1])
        res = np.array([_envelope_1d(line.tolist(), w) for line in lines], dtype=np.float64)
        f = np.moveaxis(res.reshape(moved.shape), -1, axis)
    return np.ascontiguousarray(f)


def squared_edt(binary, spacing=None) -> Volume:
    """Squared distance from every voxel center to the nearest 1-voxel center.

    Parameters
    ----------
    binary : Volume or array
        Voxels with nonzero value are the sites.
    spacing : sequence of 3 floats, optional
        Physical voxel size; defaults to the volume's own spacing.

    Returns
    -------
    Volume
        float64 distances squared in physical units; sites hold 0. With no sites
        at all every voxel is ``+inf`` and a :class:`NoSitesWarning` is issued.
    """
    vol = as_volume(binary, spacing)
    sites = vol.data != 0
    if not sites.any():
        warnings.warn("squared_edt called without any site voxels", NoSitesWarning, stacklevel=2)
        return vol.with_data(np.full(vol.shape, INF))
    return vol.with_data(_sq_edt_array(sites, vol.spacing))


def _signed_array(fg: np.ndarray, spacing) -> np.ndarray:
    out = np.empty(fg.shape, dtype=np.float64)
    bg = ~fg
    if fg.any():
        out[bg] = -np.sqrt(_sq_edt_array(fg, spacing)[bg])
    else:
        out[bg] = -INF
    if bg.any():
        out[fg] = np.sqrt(_sq_edt_array(bg, spacing)[fg])
    else:
        out[fg] = INF
    return out


def signed_distance(binary, spacing=None) -> Volume:
    """Signed center-to-center distance to the opposite phase.

    Positive on foreground voxels, negative on background voxels, never zero.
    A voxel whose opposite phase is empty gets ``+inf`` / ``-inf``.
    """
    vol = as_volume(binary, spacing)
    return vol.with_data(_signed_array(vol.data != 0, vol.spacing))
