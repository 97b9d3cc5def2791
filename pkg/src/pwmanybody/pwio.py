"""Input parsing and validation: wavefunction bundles, crystal cells, UPF v2 pseudopotentials.

Bundle layout (a directory)::

    manifest.json   version, e_cut_hartree, n_electrons, gamma_only,
                    lattice_bohr (rows are a1, a2, a3), atoms[{species, pos_bohr, upf}],
                    n_orbitals, n_gvecs, optional orbital_energies_hartree
    gvecs.i32       n_gvecs x 3 Miller indices, little-endian int32
    coeffs.c128     n_orbitals x n_gvecs complex128, orbital-major, little-endian

Gamma-only bundles store the half sphere (origin plus one member of each
+-G pair); it is expanded to the full sphere with c(-G) = c(G)^* on load.
"""

from __future__ import annotations

import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BundleError, PseudopotentialError
from .lattice import ReciprocalBasis, canonical_g_order, reciprocal_vectors

log = logging.getLogger(__name__)

BUNDLE_VERSION = 1
RYDBERG = 0.5  # Hartree per Rydberg
NORM_TOL = 1e-8


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Atom:
    species: str
    position: np.ndarray
    upf: str = ""


@dataclass(frozen=True, eq=False)
class CrystalCell:
    """Periodic cell; ``lattice_vectors`` holds a1, a2, a3 as columns (Bohr)."""

    lattice_vectors: np.ndarray
    atoms: tuple[Atom, ...] = ()

    def __post_init__(self):
        lat = _frozen(self.lattice_vectors, float)
        if lat.shape != (3, 3):
            raise BundleError("lattice must be 3x3")
        if abs(np.linalg.det(lat)) <= 0:
            raise BundleError("lattice vectors are linearly dependent (zero volume)")
        object.__setattr__(self, "lattice_vectors", lat)
        inv = np.linalg.inv(lat)
        wrapped = []
        for atom in self.atoms:
            pos = np.asarray(atom.position, dtype=float)
            frac = inv @ pos
            if np.any(frac < 0) or np.any(frac >= 1):
                frac = frac - np.floor(frac)
                frac[frac >= 1.0] = 0.0
                pos = lat @ frac
            wrapped.append(Atom(atom.species, _frozen(pos), atom.upf))
        object.__setattr__(self, "atoms", tuple(wrapped))

    @property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.lattice_vectors)))

    @property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.atoms]).reshape(-1, 3)

    @property
    def species(self) -> list[str]:
        return [a.species for a in self.atoms]

    def fractional(self, positions: np.ndarray) -> np.ndarray:
        return np.asarray(positions) @ np.linalg.inv(self.lattice_vectors).T


@dataclass(frozen=True, eq=False)
class PlaneWaveOrbitalSet:
    """Gamma-point Kohn-Sham orbitals; ``coefficients[G, t]`` over the full sphere."""

    cell: CrystalCell
    e_cut: float
    miller: np.ndarray
    coefficients: np.ndarray
    orbital_energies: np.ndarray
    n_electrons: int
    gamma_only: bool = False
    basis: ReciprocalBasis = field(init=False, repr=False)
    g_vectors: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        miller = np.asarray(self.miller, dtype=np.int64).reshape(-1, 3)
        coeffs = np.asarray(self.coefficients, dtype=complex)
        if coeffs.ndim != 2 or coeffs.shape[0] != miller.shape[0]:
            raise BundleError(
                f"coefficient/G-vector count mismatch: {coeffs.shape} vs {miller.shape[0]} G-vectors"
            )
        basis = ReciprocalBasis(reciprocal_vectors(self.cell.lattice_vectors), math.sqrt(2.0 * self.e_cut))
        g = basis.cartesian(miller)
        g2 = np.sum(g * g, axis=1)
        bad = np.nonzero(0.5 * g2 > self.e_cut * (1.0 + 1e-10))[0]
        if bad.size:
            m = tuple(int(x) for x in miller[bad[0]])
            raise BundleError(f"cutoff violation: G {m} has G^2/2 = {0.5 * g2[bad[0]]:.6g} > e_cut {self.e_cut}")
        norms = np.sqrt(np.sum(np.abs(coeffs) ** 2, axis=0))
        for t, n in enumerate(norms):
            if abs(n - 1.0) > NORM_TOL:
                raise BundleError(f"orbital {t} norm {n:.6g}")
        energies = np.asarray(self.orbital_energies, dtype=float)
        if energies.size == 0:
            energies = np.full(coeffs.shape[1], np.nan)
        if energies.shape != (coeffs.shape[1],):
            raise BundleError("orbital_energies length does not match n_orbitals")
        if self.n_electrons < 0:
            raise BundleError("n_electrons must be non-negative")
        object.__setattr__(self, "miller", _frozen(miller))
        object.__setattr__(self, "coefficients", _frozen(coeffs))
        object.__setattr__(self, "orbital_energies", _frozen(energies))
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "g_vectors", _frozen(g))

    @property
    def n_orbitals(self) -> int:
        return self.coefficients.shape[1]

    @property
    def n_gvecs(self) -> int:
        return self.miller.shape[0]

    @property
    def g2(self) -> np.ndarray:
        return np.sum(self.g_vectors**2, axis=1)


def _half_sphere_mask(miller: np.ndarray) -> np.ndarray:
    """True for the origin and the lexicographically positive member of each +-G pair."""
    m1, m2, m3 = miller.T
    return (m1 > 0) | ((m1 == 0) & (m2 > 0)) | ((m1 == 0) & (m2 == 0) & (m3 >= 0))


def expand_half_sphere(miller: np.ndarray, coeffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rebuild the full sphere from half-sphere storage via c(-G) = c(G)^*."""
    miller = np.asarray(miller, dtype=np.int64)
    keys = {tuple(m) for m in miller.tolist()}
    for m in miller.tolist():
        if any(m) and tuple(-x for x in m) in keys:
            raise BundleError(f"gamma-only bundle stores both G and -G for {tuple(m)}")
    origin = np.all(miller == 0, axis=1)
    if np.any(origin):
        c0 = coeffs[origin]
        if np.any(np.abs(c0.imag) > 1e-10 * max(1.0, np.abs(c0).max())):
            raise BundleError("gamma-only bundle has complex G=0 coefficient")
    rest = ~origin
    full_m = np.concatenate([miller, -miller[rest]])
    full_c = np.concatenate([coeffs, np.conj(coeffs[rest])])
    return full_m, full_c


def _canonicalize(miller, coeffs, b_vectors):
    order = canonical_g_order(miller, b_vectors)
    return miller[order], coeffs[order]


def load_wavefunction_bundle(path) -> tuple[CrystalCell, PlaneWaveOrbitalSet]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise BundleError(f"no manifest.json in {path}") from exc
    except json.JSONDecodeError as exc:
        raise BundleError(f"malformed manifest: {exc}") from exc
    required = ("e_cut_hartree", "n_electrons", "gamma_only", "lattice_bohr", "atoms", "n_orbitals", "n_gvecs")
    missing = [k for k in required if k not in manifest]
    if missing:
        raise BundleError(f"malformed manifest: missing {', '.join(missing)}")
    if int(manifest.get("version", BUNDLE_VERSION)) != BUNDLE_VERSION:
        raise BundleError(f"unsupported bundle version {manifest.get('version')}")
    try:
        lattice = np.array(manifest["lattice_bohr"], dtype=float).T
        atoms = tuple(
            Atom(a["species"], np.array(a["pos_bohr"], dtype=float), a.get("upf", "")) for a in manifest["atoms"]
        )
        n_orb, n_g = int(manifest["n_orbitals"]), int(manifest["n_gvecs"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"malformed manifest: {exc}") from exc
    cell = CrystalCell(lattice, atoms)

    miller = np.fromfile(path / "gvecs.i32", dtype="<i4")
    coeffs = np.fromfile(path / "coeffs.c128", dtype="<c16")
    if miller.size != 3 * n_g:
        raise BundleError(f"coefficient/G-vector count mismatch: gvecs.i32 holds {miller.size // 3}, manifest says {n_g}")
    if coeffs.size != n_orb * n_g:
        raise BundleError(
            f"coefficient/G-vector count mismatch: coeffs.c128 holds {coeffs.size} values, expected {n_orb}x{n_g}"
        )
    miller = miller.reshape(n_g, 3).astype(np.int64)
    coeffs = coeffs.reshape(n_orb, n_g).T
    gamma_only = bool(manifest["gamma_only"])
    if gamma_only:
        miller, coeffs = expand_half_sphere(miller, coeffs)
    miller, coeffs = _canonicalize(miller, coeffs, reciprocal_vectors(lattice))
    energies = manifest.get("orbital_energies_hartree", [])
    orbitals = PlaneWaveOrbitalSet(
        cell=cell,
        e_cut=float(manifest["e_cut_hartree"]),
        miller=miller,
        coefficients=coeffs,
        orbital_energies=np.array(energies, dtype=float),
        n_electrons=int(manifest["n_electrons"]),
        gamma_only=gamma_only,
    )
    log.info("loaded bundle %s: %d orbitals, %d G-vectors", path, n_orb, orbitals.n_gvecs)
    return cell, orbitals


def write_bundle(path, cell: CrystalCell, orbitals: PlaneWaveOrbitalSet) -> None:
    """Write the canonical form of a bundle (half sphere if gamma-only, canonical G order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    miller, coeffs = _canonicalize(np.asarray(orbitals.miller), np.asarray(orbitals.coefficients), orbitals.basis.b_vectors)
    if orbitals.gamma_only:
        keep = _half_sphere_mask(miller)
        miller, coeffs = miller[keep], coeffs[keep]
    manifest = {
        "version": BUNDLE_VERSION,
        "e_cut_hartree": orbitals.e_cut,
        "n_electrons": orbitals.n_electrons,
        "gamma_only": orbitals.gamma_only,
        "lattice_bohr": cell.lattice_vectors.T.tolist(),
        "atoms": [{"species": a.species, "pos_bohr": a.position.tolist(), "upf": a.upf} for a in cell.atoms],
        "n_orbitals": orbitals.n_orbitals,
        "n_gvecs": int(miller.shape[0]),
    }
    if not np.all(np.isnan(orbitals.orbital_energies)):
        manifest["orbital_energies_hartree"] = orbitals.orbital_energies.tolist()
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    miller.astype("<i4").tofile(path / "gvecs.i32")
    np.ascontiguousarray(coeffs.T).astype("<c16").tofile(path / "coeffs.c128")


# ---------------------------------------------------------------------------
# Pseudopotentials


@dataclass(frozen=True, eq=False)
class Projector:
    l: int
    beta: np.ndarray


@dataclass(frozen=True, eq=False)
class NormConservingPseudopotential:
    """Radial data in Hartree atomic units; ``beta`` is the bare radial projector (not r*beta)."""

    element: str
    z_valence: float
    r_grid: np.ndarray
    r_weights: np.ndarray
    v_local: np.ndarray
    projectors: tuple[Projector, ...]
    d_matrix: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r_grid, dtype=float)
        n = r.size
        if np.any(np.diff(r) <= 0):
            raise PseudopotentialError("radial mesh is not strictly increasing")
        for name in ("r_weights", "v_local"):
            if np.asarray(getattr(self, name)).size != n:
                raise PseudopotentialError(f"{name} length differs from mesh length {n}")
        d = np.asarray(self.d_matrix, dtype=float).reshape(len(self.projectors), len(self.projectors))
        if not np.allclose(d, d.T, rtol=0, atol=1e-12):
            raise PseudopotentialError("D_ij is not symmetric")
        for k, p in enumerate(self.projectors):
            if np.asarray(p.beta).size != n:
                raise PseudopotentialError(f"projector {k} length differs from mesh length {n}")
            if abs(p.beta[-1]) >= 1e-8:
                raise PseudopotentialError(f"projector {k} not compactly supported: beta(r_max) = {p.beta[-1]:.3g}")
        tail = r[-1] * self.v_local[-1]
        if self.z_valence <= 0 or abs(tail + self.z_valence) > 1e-3 * self.z_valence:
            raise PseudopotentialError(
                f"local potential lacks Coulomb tail: r*V_loc(r_max) = {tail:.6g}, expected {-self.z_valence}"
            )
        object.__setattr__(self, "r_grid", _frozen(r))
        object.__setattr__(self, "r_weights", _frozen(self.r_weights, float))
        object.__setattr__(self, "v_local", _frozen(self.v_local, float))
        object.__setattr__(self, "d_matrix", _frozen(d))
        object.__setattr__(self, "projectors", tuple(Projector(int(p.l), _frozen(p.beta, float)) for p in self.projectors))

    @property
    def angular_momenta(self) -> list[int]:
        return [p.l for p in self.projectors]

    def d_blocks(self) -> dict[int, np.ndarray]:
        """D_ij split into one block per angular momentum channel."""
        ls = np.array(self.angular_momenta, dtype=int)
        return {int(l): self.d_matrix[np.ix_(ls == l, ls == l)] for l in sorted(set(ls.tolist()))}


def radial_weights(rab: np.ndarray) -> np.ndarray:
    """Composite Simpson weights on a mapped mesh with Jacobian ``rab`` = dr/di.

    For an even point count the last interval uses the trapezoid rule.
    """
    n = rab.size
    w = np.zeros(n)
    m = n if n % 2 == 1 else n - 1
    if m >= 3:
        s = np.ones(m)
        s[1:-1:2] = 4.0
        s[2:-1:2] = 2.0
        w[:m] = s / 3.0
    elif m == 1:
        w[0] = 0.0
    if m != n:
        w[-2] += 0.5
        w[-1] += 0.5
    return w * rab


def _floats(node) -> np.ndarray:
    text = (node.text or "").strip()
    if not text:
        return np.zeros(0)
    try:
        return np.array(text.replace(",", " ").split(), dtype=float)
    except ValueError as exc:
        raise PseudopotentialError(f"non-numeric data in <{node.tag}>") from exc


def _required(root, path):
    node = root.find(path)
    if node is None:
        raise PseudopotentialError(f"missing mandatory tag {path}")
    return node


def _truthy(value) -> bool:
    return str(value).strip().strip(".").upper() in {"T", "TRUE"}


def load_pseudopotential(path) -> NormConservingPseudopotential:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise PseudopotentialError(f"pseudopotential file not found: {path}") from exc
    text = text.replace("&", "&amp;")
    if not text.lstrip().startswith("<UPF"):
        # Some generators prepend an XML declaration; keep only the UPF element.
        start = text.find("<UPF")
        if start < 0:
            raise PseudopotentialError(f"{path.name}: not a UPF v2 file")
        text = text[start:]
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise PseudopotentialError(f"{path.name}: malformed XML ({exc})") from exc
    if not str(root.attrib.get("version", "")).startswith("2"):
        raise PseudopotentialError(f"{path.name}: only UPF v2 is supported")

    header = _required(root, "PP_HEADER").attrib
    ptype = header.get("pseudo_type", "NC").strip().upper()
    if ptype in {"US", "USPP"} or _truthy(header.get("is_ultrasoft", "F")):
        raise PseudopotentialError("ultrasoft unsupported: norm-conserving pseudopotentials only")
    if ptype == "PAW" or _truthy(header.get("is_paw", "F")):
        raise PseudopotentialError("PAW unsupported: norm-conserving pseudopotentials only")
    if "z_valence" not in header:
        raise PseudopotentialError("missing mandatory attribute PP_HEADER/z_valence")
    z_valence = float(header["z_valence"])

    r = _floats(_required(root, "PP_MESH/PP_R"))
    rab = _floats(_required(root, "PP_MESH/PP_RAB"))
    v_local = _floats(_required(root, "PP_LOCAL")) * RYDBERG
    n = r.size
    if rab.size != n or v_local.size != n:
        raise PseudopotentialError(f"radial arrays differ in length (r {n}, rab {rab.size}, local {v_local.size})")

    n_proj = int(header.get("number_of_proj", 0))
    projectors = []
    d = np.zeros((n_proj, n_proj))
    if n_proj:
        nonlocal_node = _required(root, "PP_NONLOCAL")
        for k in range(n_proj):
            node = _required(nonlocal_node, f"PP_BETA.{k + 1}")
            r_beta = np.zeros(n)
            data = _floats(node)
            r_beta[: data.size] = data[:n]
            with np.errstate(divide="ignore", invalid="ignore"):
                beta = np.where(r > 0, r_beta / np.where(r > 0, r, 1.0), 0.0)
            projectors.append(Projector(int(node.attrib["angular_momentum"]), beta))
        d = _floats(_required(nonlocal_node, "PP_DIJ")).reshape(n_proj, n_proj) * RYDBERG

    return NormConservingPseudopotential(
        element=header.get("element", path.stem).strip(),
        z_valence=z_valence,
        r_grid=r,
        r_weights=radial_weights(rab),
        v_local=v_local,
        projectors=tuple(projectors),
        d_matrix=d,
    )


def write_upf(path, element: str, z_valence: float, r: np.ndarray, rab: np.ndarray, v_local: np.ndarray,
              projectors=(), d_matrix=None, pseudo_type: str = "NC") -> None:
    """Write a minimal UPF v2 file from Hartree-unit data (used to build test fixtures)."""

    def arr(values):
        return "\n".join(" ".join(f"{x: .16e}" for x in values[i : i + 4]) for i in range(0, len(values), 4))

    n = len(r)
    parts = [
        '<UPF version="2.0.1">',
        f'  <PP_HEADER element="{element}" pseudo_type="{pseudo_type}" z_valence="{z_valence:.12f}" '
        f'mesh_size="{n}" number_of_proj="{len(projectors)}" '
        f'l_max="{max([l for l, _ in projectors], default=-1)}" is_ultrasoft="F" is_paw="F"/>',
        "  <PP_MESH>",
        f'    <PP_R type="real" size="{n}">\n{arr(r)}\n    </PP_R>',
        f'    <PP_RAB type="real" size="{n}">\n{arr(rab)}\n    </PP_RAB>',
        "  </PP_MESH>",
        f'  <PP_LOCAL type="real" size="{n}">\n{arr(np.asarray(v_local) / RYDBERG)}\n  </PP_LOCAL>',
        "  <PP_NONLOCAL>",
    ]
    for k, (l, beta) in enumerate(projectors):
        parts.append(
            f'    <PP_BETA.{k + 1} type="real" size="{n}" angular_momentum="{l}">\n'
            f"{arr(np.asarray(r) * np.asarray(beta))}\n    </PP_BETA.{k + 1}>"
        )
    if projectors:
        d = np.asarray(d_matrix, dtype=float) / RYDBERG
        parts.append(f'    <PP_DIJ type="real" size="{d.size}">\n{arr(d.ravel())}\n    </PP_DIJ>')
    parts += ["  </PP_NONLOCAL>", "</UPF>", ""]
    Path(path).write_text("\n".join(parts))
