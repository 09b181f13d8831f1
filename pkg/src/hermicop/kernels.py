"""Hot loops: the Dykstra sweep and the piecewise-Gaussian marginal CDF.

Each kernel exists twice, a numba version and a plain numpy version with
identical semantics. ``dykstra_chunk`` and ``piecewise_gauss_cdf`` dispatch
on :data:`hermicop._jit.USE_NUMBA`.

Dykstra state layout (all arrays are flat over grid nodes):

* ``rows``: (R, N) test functions of affine constraints, ``kinds`` 0 for
  equality, 1 for ``<= target``, 2 for ``>= target``. The Dykstra increment
  of a row is always a multiple of the row, so only the scalar ``lam[r]`` is
  stored.
* ``slice_ids``: (M, N) slice index of each node for M marginal constraints,
  with per-slice targets, weight norms and scalar increments (M, S).
* ``cone_inc``: (N,) full increment of the non-negativity cone.
"""
from __future__ import annotations

import math

import numpy as np

from . import _jit

EQ, LE, GE = 0, 1, 2


def _dykstra_chunk_py(phi, omega, rows, row_norm2, targets, kinds, lam,
                      slice_ids, slice_targets, slice_norm2, slice_lam,
                      use_cone, cone_inc, max_sweeps, tol):
    start = np.empty_like(phi)
    change = np.inf
    done = 0
    for sweep in range(max_sweeps):
        start[:] = phi
        for r in range(rows.shape[0]):
            t = rows[r]
            a = float(np.dot(omega * phi, t)) + lam[r] * row_norm2[r]
            excess = a - targets[r]
            if kinds[r] == LE:
                excess = max(excess, 0.0)
            elif kinds[r] == GE:
                excess = min(excess, 0.0)
            mu = excess / row_norm2[r]
            phi += (lam[r] - mu) * t
            lam[r] = mu
        for m in range(slice_ids.shape[0]):
            ids = slice_ids[m]
            nslice = slice_targets.shape[1]
            sums = np.bincount(ids, weights=omega * phi, minlength=nslice)
            a = sums + slice_lam[m] * slice_norm2[m]
            mu = np.where(slice_norm2[m] > 0, (a - slice_targets[m]) / np.where(slice_norm2[m] > 0, slice_norm2[m], 1.0), 0.0)
            phi += (slice_lam[m] - mu)[ids]
            slice_lam[m, :] = mu
        if use_cone:
            y = phi + cone_inc
            np.maximum(y, 0.0, out=phi)
            cone_inc[:] = y - phi
        d = phi - start
        change = math.sqrt(float(np.dot(omega * d, d)))
        done = sweep + 1
        if change < tol:
            break
    return done, change


def _dykstra_chunk_nb(phi, omega, rows, row_norm2, targets, kinds, lam,
                      slice_ids, slice_targets, slice_norm2, slice_lam,
                      use_cone, cone_inc, max_sweeps, tol):
    n = phi.shape[0]
    start = np.empty(n)
    nslice = slice_targets.shape[1]
    sums = np.empty(nslice)
    mu_s = np.empty(nslice)
    change = np.inf
    done = 0
    for sweep in range(max_sweeps):
        for j in range(n):
            start[j] = phi[j]
        for r in range(rows.shape[0]):
            a = 0.0
            for j in range(n):
                a += omega[j] * phi[j] * rows[r, j]
            a += lam[r] * row_norm2[r]
            excess = a - targets[r]
            if kinds[r] == 1:
                excess = max(excess, 0.0)
            elif kinds[r] == 2:
                excess = min(excess, 0.0)
            mu = excess / row_norm2[r]
            step = lam[r] - mu
            for j in range(n):
                phi[j] += step * rows[r, j]
            lam[r] = mu
        for m in range(slice_ids.shape[0]):
            for k in range(nslice):
                sums[k] = 0.0
            for j in range(n):
                sums[slice_ids[m, j]] += omega[j] * phi[j]
            for k in range(nslice):
                if slice_norm2[m, k] > 0:
                    mu_s[k] = (sums[k] + slice_lam[m, k] * slice_norm2[m, k] - slice_targets[m, k]) / slice_norm2[m, k]
                else:
                    mu_s[k] = 0.0
            for j in range(n):
                k = slice_ids[m, j]
                phi[j] += slice_lam[m, k] - mu_s[k]
            for k in range(nslice):
                slice_lam[m, k] = mu_s[k]
        if use_cone:
            for j in range(n):
                y = phi[j] + cone_inc[j]
                p = y if y > 0.0 else 0.0
                cone_inc[j] = y - p
                phi[j] = p
        acc = 0.0
        for j in range(n):
            d = phi[j] - start[j]
            acc += omega[j] * d * d
        change = math.sqrt(acc)
        done = sweep + 1
        if change < tol:
            break
    return done, change


_dykstra_chunk_nb = _jit.njit(_dykstra_chunk_nb)


def dykstra_chunk(*args, force_numpy: bool = False):
    """Run up to ``max_sweeps`` sweeps in place; returns (sweeps done, last L2 change)."""
    if _jit.USE_NUMBA and not force_numpy:
        return _dykstra_chunk_nb(*args)
    return _dykstra_chunk_py(*args)


def _pw_gauss_cdf_py(t, atoms, atom_w, edges, cum, dens, scale):
    """sum_j atom_w[j] * F((t - atoms[j]) / scale) for the piecewise law below.

    The law along the second axis has density dens[k] * phi(s) on
    [edges[k], edges[k+1]); ``cum[k]`` is its CDF at ``edges[k]``.
    """
    from scipy.special import ndtr

    out = np.zeros_like(t)
    for j in range(atoms.shape[0]):
        s = (t - atoms[j]) / scale
        k = np.clip(np.searchsorted(edges, s, side="right") - 1, 0, edges.shape[0] - 2)
        below = s < edges[0]
        above = s >= edges[-1]
        val = cum[k] + dens[k] * (ndtr(np.minimum(s, edges[k + 1])) - ndtr(edges[k]))
        val = np.where(below, 0.0, np.where(above, cum[-1], val))
        out += atom_w[j] * val
    return out


def _ndtr_nb(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


_ndtr_nb = _jit.njit(_ndtr_nb)


def _pw_gauss_cdf_nb(t, atoms, atom_w, edges, cum, dens, scale):
    nt = t.shape[0]
    ne = edges.shape[0]
    out = np.zeros(nt)
    for j in range(atoms.shape[0]):
        for q in range(nt):
            s = (t[q] - atoms[j]) / scale
            if s < edges[0]:
                continue
            if s >= edges[ne - 1]:
                out[q] += atom_w[j] * cum[ne - 1]
                continue
            k = np.searchsorted(edges, s, side="right") - 1
            if k > ne - 2:
                k = ne - 2
            out[q] += atom_w[j] * (cum[k] + dens[k] * (_ndtr_nb(s) - _ndtr_nb(edges[k])))
    return out


_pw_gauss_cdf_nb = _jit.njit(_pw_gauss_cdf_nb)


def piecewise_gauss_cdf(t, atoms, atom_w, edges, cum, dens, scale, force_numpy: bool = False):
    args = (np.ascontiguousarray(t, dtype=float), np.ascontiguousarray(atoms, dtype=float),
            np.ascontiguousarray(atom_w, dtype=float), np.ascontiguousarray(edges, dtype=float),
            np.ascontiguousarray(cum, dtype=float), np.ascontiguousarray(dens, dtype=float), float(scale))
    if _jit.USE_NUMBA and not force_numpy:
        return _pw_gauss_cdf_nb(*args)
    return _pw_gauss_cdf_py(*args)
