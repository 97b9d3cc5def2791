"""Valence density on the real-space grid and grid-based Bader partitioning.

Basins are found with the near-grid steepest-ascent scheme: each step
moves to the grid point nearest to the continuous ascent direction, and
the accumulated off-lattice remainder is carried as a correction vector
so trajectories do not drift along grid axes.  Points on a trajectory
inherit the label of the maximum it reaches; points at basin edges are
then re-ascended independently until the labels stop changing.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .errors import InputError, NumericalError, UnresolvedBasinError
from .lattice import RealSpaceGrid, check_band_limit, orbitals_on_grid

VACUUM = -1
VACUUM_THRESHOLD = 1e-6
OCCUPANCY_TOL = 1e-8

_ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr "
    "Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb "
    "Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn"
).split()


def atomic_number(species: str) -> int:
    """Atomic number from a species label such as ``Mg`` or ``Mg_central``; 0 if unknown."""
    symbol = "".join(ch for ch in species.split("_")[0] if ch.isalpha())
    symbol = symbol[:1].upper() + symbol[1:].lower()
    return _ELEMENTS.index(symbol) + 1 if symbol in _ELEMENTS else 0


@dataclass(frozen=True, eq=False)
class VolumetricDensity:
    grid: RealSpaceGrid
    total_charge: float

    def __post_init__(self):
        values = self.grid.values
        if np.iscomplexobj(values) or np.min(values) < -1e-10:
            raise NumericalError("density must be real and non-negative")

    @classmethod
    def from_values(cls, values: np.ndarray, cell) -> "VolumetricDensity":
        values = np.ascontiguousarray(values, dtype=float)
        grid = RealSpaceGrid(values.shape, values, cell)
        return cls(grid, float(grid.integrate()))


def assemble_density(orbitals, occupations, dims) -> VolumetricDensity:
    """rho(r) = sum_t f_t |psi_t(r)|^2 for an occupation per orbital index.

    ``occupations`` maps orbital index -> f (frozen orbitals at 2, active at
    solver occupancies); orbitals with f <= 1e-12 may be omitted.
    """
    dims = tuple(int(n) for n in dims)
    check_band_limit(dims, 2 * np.abs(orbitals.miller).max(axis=0))
    occ = {int(t): float(f) for t, f in dict(occupations).items()}
    for t, f in occ.items():
        if not -OCCUPANCY_TOL <= f <= 2.0 + OCCUPANCY_TOL:
            raise NumericalError(f"occupancy {f:.10g} of orbital {t} outside [0, 2]")
        if not 0 <= t < orbitals.n_orbitals:
            raise InputError(f"occupation given for orbital {t}, which does not exist")
    used = sorted(t for t, f in occ.items() if f > 1e-12)
    rho = np.zeros(dims)
    if used:
        psi = orbitals_on_grid(orbitals, used, dims)
        for k, t in enumerate(used):
            rho += occ[t] * (psi[k].real ** 2 + psi[k].imag ** 2)
    grid = RealSpaceGrid(dims, rho, orbitals.cell)
    return VolumetricDensity(grid, float(grid.integrate()))


# ---------------------------------------------------------------------------
# near-grid ascent kernels


@numba.njit(cache=True)
def _wrap(i, n):
    i = i % n
    return i + n if i < 0 else i


@numba.njit(cache=True)
def _best_neighbor(rho, i, j, k):
    """Highest strictly-higher neighbor among the 26, or (i, j, k) at a maximum."""
    n1, n2, n3 = rho.shape
    best = rho[i, j, k]
    bi, bj, bk = i, j, k
    for di in range(-1, 2):
        for dj in range(-1, 2):
            for dk in range(-1, 2):
                if di == 0 and dj == 0 and dk == 0:
                    continue
                a, b, c = _wrap(i + di, n1), _wrap(j + dj, n2), _wrap(k + dk, n3)
                if rho[a, b, c] > best:
                    best = rho[a, b, c]
                    bi, bj, bk = a, b, c
    return bi, bj, bk


@numba.njit(cache=True)
def _ascend(rho, metric, i, j, k, labels, stop_on_known, path):
    """Near-grid ascent from (i, j, k).

    Returns (label or -1, final flat index, path length).  With
    ``stop_on_known`` the walk ends at the first already-labelled point.
    """
    n1, n2, n3 = rho.shape
    ci = 0.0
    cj = 0.0
    ck = 0.0
    length = 0
    max_steps = n1 * n2 * n3
    while True:
        flat = (i * n2 + j) * n3 + k
        path[length] = flat
        length += 1
        if stop_on_known and labels[flat] >= 0 and length > 1:
            return labels[flat], flat, length
        mi, mj, mk = _best_neighbor(rho, i, j, k)
        if mi == i and mj == j and mk == k:
            return -1, flat, length
        if length >= max_steps:
            return -1, flat, length
        # gradient in index space, mapped to the ascent direction via the inverse metric
        g1 = 0.5 * (rho[_wrap(i + 1, n1), j, k] - rho[_wrap(i - 1, n1), j, k])
        g2 = 0.5 * (rho[i, _wrap(j + 1, n2), k] - rho[i, _wrap(j - 1, n2), k])
        g3 = 0.5 * (rho[i, j, _wrap(k + 1, n3)] - rho[i, j, _wrap(k - 1, n3)])
        d1 = metric[0, 0] * g1 + metric[0, 1] * g2 + metric[0, 2] * g3
        d2 = metric[1, 0] * g1 + metric[1, 1] * g2 + metric[1, 2] * g3
        d3 = metric[2, 0] * g1 + metric[2, 1] * g2 + metric[2, 2] * g3
        scale = max(abs(d1), abs(d2), abs(d3))
        moved = False
        if scale > 0.0:
            d1 /= scale
            d2 /= scale
            d3 /= scale
            s1 = round(d1)
            s2 = round(d2)
            s3 = round(d3)
            ci += d1 - s1
            cj += d2 - s2
            ck += d3 - s3
            r1 = round(ci)
            r2 = round(cj)
            r3 = round(ck)
            s1 += r1
            s2 += r2
            s3 += r3
            ci -= r1
            cj -= r2
            ck -= r3
            a, b, c = _wrap(i + int(s1), n1), _wrap(j + int(s2), n2), _wrap(k + int(s3), n3)
            if rho[a, b, c] > rho[i, j, k]:
                i, j, k = a, b, c
                moved = True
        if not moved:
            # on-grid fallback keeps the walk strictly uphill
            i, j, k = mi, mj, mk
            ci = 0.0
            cj = 0.0
            ck = 0.0


@numba.njit(cache=True)
def _first_pass(rho, metric, labels, max_index):
    n1, n2, n3 = rho.shape
    path = np.empty(n1 * n2 * n3 + 1, dtype=np.int64)
    n_max = 0
    for start in range(n1 * n2 * n3):
        if labels[start] >= 0:
            continue
        i = start // (n2 * n3)
        j = (start // n3) % n2
        k = start % n3
        lab, flat, length = _ascend(rho, metric, i, j, k, labels, True, path)
        if lab < 0:
            lab = max_index[flat]
            if lab < 0:
                lab = n_max
                max_index[flat] = lab
                n_max += 1
        for s in range(length):
            labels[path[s]] = lab
    return n_max


@numba.njit(cache=True)
def _is_edge(labels3, i, j, k):
    n1, n2, n3 = labels3.shape
    own = labels3[i, j, k]
    for di in range(-1, 2):
        for dj in range(-1, 2):
            for dk in range(-1, 2):
                if labels3[_wrap(i + di, n1), _wrap(j + dj, n2), _wrap(k + dk, n3)] != own:
                    return True
    return False


@numba.njit(cache=True)
def _refine(rho, metric, labels, max_index, n_max):
    """Re-ascend edge points without shortcuts; returns (changed count, n_max)."""
    n1, n2, n3 = rho.shape
    labels3 = labels.reshape((n1, n2, n3))
    edges = []
    for i in range(n1):
        for j in range(n2):
            for k in range(n3):
                if _is_edge(labels3, i, j, k):
                    edges.append((i * n2 + j) * n3 + k)
    path = np.empty(n1 * n2 * n3 + 1, dtype=np.int64)
    new = np.empty(len(edges), dtype=np.int64)
    for e in range(len(edges)):
        flat = edges[e]
        i = flat // (n2 * n3)
        j = (flat // n3) % n2
        k = flat % n3
        _, top, _ = _ascend(rho, metric, i, j, k, labels, False, path)
        lab = max_index[top]
        if lab < 0:
            lab = n_max
            max_index[top] = lab
            n_max += 1
        new[e] = lab
    changed = 0
    for e in range(len(edges)):
        if labels[edges[e]] != new[e]:
            labels[edges[e]] = new[e]
            changed += 1
    return changed, n_max


def near_grid_basins(rho: np.ndarray, lattice: np.ndarray, max_refinements: int = 50):
    """Basin label per grid point and the flat index of each basin maximum."""
    rho = np.ascontiguousarray(rho, dtype=float)
    dims = np.array(rho.shape)
    steps = lattice / dims[None, :]  # columns: grid step vectors
    metric = np.linalg.inv(steps.T @ steps)
    labels = np.full(rho.size, -1, dtype=np.int64)
    max_index = np.full(rho.size, -1, dtype=np.int64)
    n_max = _first_pass(rho, metric, labels, max_index)
    for _ in range(max_refinements):
        changed, n_max = _refine(rho, metric, labels, max_index, n_max)
        if changed == 0:
            break
    else:
        raise NumericalError("Bader edge refinement did not settle")
    maxima = np.full(n_max, -1, dtype=np.int64)
    where = np.nonzero(max_index >= 0)[0]
    maxima[max_index[where]] = where
    return labels.reshape(rho.shape), maxima


# ---------------------------------------------------------------------------
# partition


@dataclass(frozen=True, eq=False)
class BaderPartition:
    labels: np.ndarray
    charges: np.ndarray
    vacuum_charge: float
    total_charge: float


def _min_image_distance(cell, frac_a: np.ndarray, frac_b: np.ndarray) -> np.ndarray:
    d = frac_a[:, None, :] - frac_b[None, :, :]
    d -= np.round(d)
    return np.linalg.norm(d @ cell.lattice_vectors.T, axis=-1)


def _exact_sum(values: np.ndarray) -> float:
    # correctly rounded, so the result does not depend on point order
    return math.fsum(values.tolist())


def bader_partition(density: VolumetricDensity, cell, vacuum_threshold: float = VACUUM_THRESHOLD) -> BaderPartition:
    rho = np.asarray(density.grid.values, dtype=float)
    if not np.any(rho > 0):
        raise NumericalError("density is zero everywhere")
    if not cell.atoms:
        raise InputError("Bader partition needs at least one atom")
    dims = np.array(rho.shape)
    basins, maxima = near_grid_basins(rho, cell.lattice_vectors)
    n_basins = maxima.size

    # each nucleus claims the basin of its nearest grid point
    frac_atoms = np.array([cell.fractional(a.position) for a in cell.atoms]) % 1.0
    nearest = np.mod(np.rint(frac_atoms * dims).astype(int), dims)
    atom_basin = basins[nearest[:, 0], nearest[:, 1], nearest[:, 2]]
    owner = np.full(n_basins, VACUUM, dtype=np.int64)
    for atom, b in enumerate(atom_basin.tolist()):
        if owner[b] != VACUUM:
            raise UnresolvedBasinError((int(owner[b]), atom))
        owner[b] = atom

    peak = rho.reshape(-1)[maxima]
    orphans = np.nonzero((owner == VACUUM) & (peak >= vacuum_threshold))[0]
    if orphans.size:
        idx = np.stack(np.unravel_index(maxima[orphans], rho.shape), axis=-1)
        dist = _min_image_distance(cell, idx / dims, frac_atoms)
        owner[orphans] = np.argmin(dist, axis=1)

    labels = owner[basins]
    weight = density.grid.weight
    flat_rho = rho.reshape(-1)
    flat_labels = labels.reshape(-1)
    order = np.argsort(flat_labels, kind="stable")
    sorted_labels = flat_labels[order]
    bounds = np.searchsorted(sorted_labels, np.arange(-1, len(cell.atoms) + 1))
    groups = [flat_rho[order[bounds[k] : bounds[k + 1]]] for k in range(len(cell.atoms) + 1)]
    vacuum = _exact_sum(groups[0]) * weight
    charges = np.array([_exact_sum(g) * weight for g in groups[1:]])
    return BaderPartition(labels, charges, vacuum, _exact_sum(flat_rho) * weight)


def excess_charges(partition: BaderPartition, z_valence) -> np.ndarray:
    """Bader excess charge Z_I - Q_I (positive for cations)."""
    z = np.asarray(z_valence, dtype=float)
    if z.shape != partition.charges.shape:
        raise ValueError("one valence charge per atom required")
    return z - partition.charges


# ---------------------------------------------------------------------------
# file formats


def write_cube(path, density: VolumetricDensity, cell, z_valence=None, comment: str = "valence density") -> None:
    """Cube file in Bohr, z index fastest, six values per line."""
    rho = np.asarray(density.grid.values, dtype=float)
    dims = rho.shape
    z_valence = [0.0] * len(cell.atoms) if z_valence is None else list(z_valence)
    out = io.StringIO()
    out.write(f"{comment}\n")
    out.write("z fastest, atomic units\n")
    out.write(f"{len(cell.atoms):5d} {0.0:12.6f} {0.0:12.6f} {0.0:12.6f}\n")
    for axis in range(3):
        step = cell.lattice_vectors[:, axis] / dims[axis]
        out.write(f"{dims[axis]:5d} {step[0]:12.6f} {step[1]:12.6f} {step[2]:12.6f}\n")
    for atom, zv in zip(cell.atoms, z_valence):
        p = atom.position
        out.write(f"{atomic_number(atom.species):5d} {zv:12.6f} {p[0]:12.6f} {p[1]:12.6f} {p[2]:12.6f}\n")
    rows = rho.reshape(-1, dims[2])
    for row in rows:
        for s in range(0, row.size, 6):
            out.write(" ".join(f"{v:13.5E}" for v in row[s : s + 6]) + "\n")
    Path(path).write_text(out.getvalue())


def read_cube(path):
    """Returns ``(values, lattice_columns, atoms)`` with atoms as (number, charge, position)."""
    try:
        lines = Path(path).read_text().splitlines()
        n_atoms = abs(int(lines[2].split()[0]))
        dims, steps = [], []
        for axis in range(3):
            parts = lines[3 + axis].split()
            dims.append(int(parts[0]))
            steps.append([float(x) for x in parts[1:4]])
        atoms = []
        for line in lines[6 : 6 + n_atoms]:
            parts = line.split()
            atoms.append((int(parts[0]), float(parts[1]), np.array([float(x) for x in parts[2:5]])))
        data = np.array(" ".join(lines[6 + n_atoms :]).split(), dtype=float)
        values = data.reshape(dims)
    except (OSError, IndexError, ValueError) as exc:
        raise InputError(f"malformed cube file {path}: {exc}") from exc
    lattice = (np.array(steps) * np.array(dims)[:, None]).T
    return values, lattice, atoms


def charges_csv(cell, partition: BaderPartition, z_valence) -> str:
    bec = excess_charges(partition, z_valence)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["atom", "species", "Z", "Q", "BEC"])
    for k, atom in enumerate(cell.atoms):
        writer.writerow([k, atom.species, f"{z_valence[k]:.6f}", f"{partition.charges[k]:.8f}", f"{bec[k]:.8f}"])
    return out.getvalue()
