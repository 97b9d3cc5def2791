"""Radial transforms of pseudopotential data and spherical harmonics of G-vectors."""

from __future__ import annotations

import numpy as np
from scipy.special import erf, sph_harm_y, spherical_jn

from .errors import NumericalError

TAIL_TOL = 1e-6
_CHUNK = 2048


def ylm(l: int, m: int, vectors: np.ndarray) -> np.ndarray:
    """Complex Y_lm (Condon-Shortley phase) of the directions of ``vectors``.

    The zero vector is assigned the +z direction; only l = 0 survives there
    in any physical contraction because j_l(0) = 0 for l >= 1.
    """
    v = np.asarray(vectors, dtype=float).reshape(-1, 3)
    r = np.linalg.norm(v, axis=1)
    safe = np.where(r > 0, r, 1.0)
    cos_t = np.where(r > 0, v[:, 2] / safe, 1.0)
    theta = np.arccos(np.clip(cos_t, -1.0, 1.0))
    phi = np.arctan2(v[:, 1], v[:, 0])
    return sph_harm_y(l, m, theta, phi)


def projector_transform(r, weights, beta, l: int, q) -> np.ndarray:
    """F(q) = int r^2 beta(r) j_l(q r) dr on the pseudopotential mesh."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    out = np.empty(q.size)
    f = weights * r * r * beta
    for s in range(0, q.size, _CHUNK):
        qs = q[s : s + _CHUNK]
        out[s : s + _CHUNK] = spherical_jn(l, np.outer(qs, r)) @ f
    return out


def check_local_tail(pp) -> None:
    r = pp.r_grid
    tail = r[-1] * pp.v_local[-1] + pp.z_valence * erf(r[-1])
    if abs(tail) >= TAIL_TOL:
        raise NumericalError(
            f"non-Coulombic tail in {pp.element} local potential: r*V_loc + Z erf(r) = {tail:.3g} at r_max"
        )


def local_form_factor(pp, q, volume: float) -> np.ndarray:
    """Plane-wave matrix element of the local potential at momentum transfer |q|, without phase.

    The Coulomb tail is handled by subtracting -Z erf(r)/r in real space and
    adding back its analytic transform; q = 0 keeps only the non-Coulombic part.
    """
    check_local_tail(pp)
    q = np.atleast_1d(np.asarray(q, dtype=float))
    r, w, z = pp.r_grid, pp.r_weights, pp.z_valence
    out = np.empty(q.size)
    zero = q < 1e-12
    if np.any(zero):
        out[zero] = np.sum(w * r * (r * pp.v_local + z))
    nz = np.nonzero(~zero)[0]
    short = w * (r * pp.v_local + z * erf(r))
    for s in range(0, nz.size, _CHUNK):
        idx = nz[s : s + _CHUNK]
        qs = q[idx]
        radial = np.sin(np.outer(qs, r)) @ short / qs
        out[idx] = -z * np.exp(-qs * qs / 4.0) / (qs * qs) + radial
    return 4.0 * np.pi / volume * out


def unique_norms(g: np.ndarray, decimals: int = 10):
    """Unique |g| values and the inverse map, to evaluate radial functions once per shell."""
    norms = np.linalg.norm(np.asarray(g).reshape(-1, 3), axis=1)
    keys, inverse = np.unique(np.round(norms, decimals), return_inverse=True)
    return keys, inverse.reshape(-1)
