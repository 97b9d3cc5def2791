"""Constant energy terms: Ewald nuclear repulsion and the electron image self-energy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import NumericalError
from .lattice import TWO_PI, reciprocal_vectors

SIGMA_TOL = 1e-7
SHELL_TOL = 1e-12
MAX_HALVINGS = 60


@dataclass(frozen=True)
class EwaldParameters:
    sigma: float
    real_shell_count: int
    recip_shell_count: int


def sigma_bound(charges, g_cut: float, sigma: float) -> float:
    """Left-hand side of the sigma selection rule; must be <= 1e-7."""
    z = np.abs(np.asarray(charges, dtype=float))
    if np.isinf(g_cut):
        return 0.0
    return float(np.sum(2.0 * z * np.sqrt(sigma / np.pi)) * erfc(np.sqrt((4.0 * g_cut) ** 2 / (4.0 * sigma))))


def _shell_size(n: int) -> int:
    return (2 * n + 1) ** 3 - (2 * n - 1) ** 3 if n > 0 else 1


def _real_shells(lattice, zsum: float, sigma: float, tol: float = SHELL_TOL) -> int:
    # Every displacement R_I - R_J - T with T in cube shell n is at least (n-1)*d_perp long.
    d_perp = TWO_PI / np.linalg.norm(reciprocal_vectors(lattice), axis=0).max()
    n = 1
    while True:
        r_min = (n - 1) * d_perp
        if r_min > 0:
            bound = _shell_size(n) * zsum**2 * erfc(np.sqrt(sigma) * r_min) / r_min
            if bound < tol:
                return n
        n += 1


def _recip_shells(lattice, zsum: float, sigma: float, tol: float = SHELL_TOL) -> int:
    volume = abs(np.linalg.det(lattice))
    g_step = TWO_PI / np.linalg.norm(lattice, axis=0).max()
    n = 1
    while True:
        g = n * g_step
        bound = _shell_size(n) * TWO_PI / volume * zsum**2 * np.exp(-g * g / (4.0 * sigma)) / (g * g)
        if bound < tol:
            return n
        n += 1


def ewald_parameters(cell, charges, sigma: float) -> EwaldParameters:
    """Shell counts meeting the tail bound for a given splitting parameter."""
    zsum = max(float(np.sum(np.abs(charges))), 1.0)
    lat = cell.lattice_vectors
    return EwaldParameters(float(sigma), _real_shells(lat, zsum, sigma), _recip_shells(lat, zsum, sigma))


def select_sigma(cell, charges, g_cut: float) -> EwaldParameters:
    """Largest sigma in 1, 1/2, 1/4, ... satisfying the erfc tolerance rule."""
    charges = np.asarray(charges, dtype=float)
    if np.any(charges <= 0):
        raise ValueError("all charges must be positive")
    if not g_cut > 0:
        raise ValueError("g_cut must be positive")
    sigma = 1.0
    for _ in range(MAX_HALVINGS + 1):
        if sigma_bound(charges, g_cut, sigma) <= SIGMA_TOL:
            return ewald_parameters(cell, charges, sigma)
        sigma *= 0.5
    raise NumericalError(f"Ewald sigma selection did not converge after {MAX_HALVINGS} halvings")


def _cube(n: int) -> np.ndarray:
    r = np.arange(-n, n + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def _lattice_sums(cell, positions, charges, params: EwaldParameters, min_dist: float = 1e-6) -> float:
    lat = cell.lattice_vectors
    volume = cell.volume
    sigma = params.sigma
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    z = np.asarray(charges, dtype=float)

    # real space
    translations = _cube(params.real_shell_count) @ lat.T
    is_origin = np.all(translations == 0, axis=1)
    e_real = 0.0
    for i in range(len(z)):
        d = positions[i] - positions[:, None, :] - translations[None, :, :]
        r = np.linalg.norm(d, axis=-1)
        r[i, is_origin] = np.inf
        if np.any(r < min_dist):
            j = int(np.argwhere(r < min_dist)[0, 0])
            raise NumericalError(f"coincident nuclei: atoms {i} and {j} (including periodic images)")
        e_real += 0.5 * z[i] * np.sum(z[:, None] * erfc(np.sqrt(sigma) * r) / r)

    # reciprocal space
    miller = _cube(params.recip_shell_count)
    miller = miller[np.any(miller != 0, axis=1)]
    g = miller @ reciprocal_vectors(lat).T
    g2 = np.sum(g * g, axis=1)
    structure = np.exp(1j * g @ positions.T) @ z
    e_recip = TWO_PI / volume * np.sum(np.abs(structure) ** 2 * np.exp(-g2 / (4.0 * sigma)) / g2)

    e_self = -np.sqrt(sigma / np.pi) * np.sum(z * z)
    e_charged = -np.pi / (2.0 * volume * sigma) * np.sum(z) ** 2
    return float(e_real + e_recip + e_self + e_charged)


def nuclear_repulsion(cell, charges, params: EwaldParameters) -> float:
    """Ewald energy of point nuclei in a neutralizing background (Hartree)."""
    charges = np.asarray(charges, dtype=float)
    if charges.size != len(cell.atoms):
        raise ValueError("one charge per atom required")
    return _lattice_sums(cell, cell.positions, charges, params)


def image_potential(cell, params: EwaldParameters) -> float:
    """Background-regularized sum over T != 0 of 1/|T| for a unit charge."""
    unit = ewald_parameters(cell, [1.0], params.sigma)
    p = EwaldParameters(
        params.sigma,
        max(params.real_shell_count, unit.real_shell_count),
        max(params.recip_shell_count, unit.recip_shell_count),
    )
    return 2.0 * _lattice_sums(cell, np.zeros((1, 3)), [1.0], p)


def electron_self_energy(n_electrons: int, cell, params: EwaldParameters) -> float:
    if n_electrons < 0:
        raise ValueError("n_electrons must be non-negative")
    if n_electrons == 0:
        return 0.0
    return n_electrons * image_potential(cell, params)
