"""Command-line pipeline: bundle -> active-space Hamiltonian -> solver -> Bader charges.

Config files are ``key = value`` lines (``#`` starts a comment).  Energies
accept an ``eV`` or ``Ha`` suffix and default to Hartree.  Relative paths
are resolved against the config file's directory.  Recognised keys::

    bundle, pseudo_dir, out, solver (ed|vqe), active (comma list),
    active_max_orbitals, active_window, degeneracy_tol, fermi_level,
    grid (n1,n2,n3), seed, threads, repetitions, vqe_max_iterations,
    vqe_gtol, vqe_perturbation, vacuum_threshold, max_qubit_orbitals
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import shutil
import sys
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numba
import numpy as np
import scipy
from scipy.constants import physical_constants

from .activespace import ActiveSpaceSpec, assemble_hamiltonian, load_hamiltonian, write_hamiltonian
from .density_bader import assemble_density, bader_partition, charges_csv, write_cube
from .errors import ConfigError, DegeneracyError, InputError, NumericalError, PseudopotentialError
from .ewald import electron_self_energy, nuclear_repulsion, select_sigma
from .lattice import pair_grid_dims
from .matelems import frozen_core_terms, one_body_ks, two_body_ks
from .pwio import load_pseudopotential, load_wavefunction_bundle
from .solver import (
    MAX_ACTIVE_ORBITALS,
    UccsdAnsatz,
    VqeOptions,
    exact_ground_state,
    jordan_wigner,
    occupancies,
    solve_report,
    vqe_minimize,
)

log = logging.getLogger("pwmanybody")

HARTREE_EV = physical_constants["Hartree energy in eV"][0]

HAMILTONIAN_DIR = "hamiltonian"
REPORT_FILE = "solve_report.json"
CUBE_FILE = "density.cube"
CHARGES_FILE = "charges.csv"
PROVENANCE_FILE = "provenance.json"


@dataclass(frozen=True)
class PipelineConfig:
    bundle: Path
    pseudo_dir: Path
    out: Path = Path("out")
    solver: str = "ed"
    active: tuple[int, ...] | None = None
    active_max_orbitals: int = 11
    active_window: float = 5.0 / HARTREE_EV
    degeneracy_tol: float = 1e-4
    fermi_level: float | None = None
    grid: tuple[int, int, int] | None = None
    seed: int = 0
    threads: int = 1
    repetitions: int = 1
    vqe_max_iterations: int = 2000
    vqe_gtol: float = 1e-8
    vqe_perturbation: float = 0.0
    vacuum_threshold: float = 1e-6
    max_qubit_orbitals: int = MAX_ACTIVE_ORBITALS
    source_text: str = field(default="", repr=False)

    def __post_init__(self):
        if self.solver not in ("ed", "vqe"):
            raise ConfigError(f"solver must be 'ed' or 'vqe', got {self.solver!r}")
        if self.active_max_orbitals < 1:
            raise ConfigError("active_max_orbitals must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be positive")


def parse_energy(text: str) -> float:
    """'5 eV', '0.1 Ha' or a bare number in Hartree."""
    parts = text.replace("eV", " eV").replace("Ha", " Ha").split()
    try:
        value = float(parts[0])
    except (IndexError, ValueError):
        raise ConfigError(f"cannot parse energy {text!r}") from None
    unit = parts[1] if len(parts) > 1 else "Ha"
    if len(parts) > 2 or unit not in ("eV", "Ha"):
        raise ConfigError(f"unknown energy unit in {text!r} (use eV or Ha)")
    return value / HARTREE_EV if unit == "eV" else value


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"expected a list of integers, got {text!r}") from None


_CONVERTERS = {
    "bundle": str,
    "pseudo_dir": str,
    "out": str,
    "solver": str,
    "active": _int_list,
    "active_max_orbitals": int,
    "active_window": parse_energy,
    "degeneracy_tol": parse_energy,
    "fermi_level": parse_energy,
    "grid": _int_list,
    "seed": int,
    "threads": int,
    "repetitions": int,
    "vqe_max_iterations": int,
    "vqe_gtol": float,
    "vqe_perturbation": float,
    "vacuum_threshold": float,
    "max_qubit_orbitals": int,
}
_PATH_KEYS = ("bundle", "pseudo_dir", "out")


def parse_config(text: str, base: Path = Path(".")) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONVERTERS[key](value)
        except ValueError:
            raise ConfigError(f"config line {lineno}: bad value {value!r} for {key}") from None
    for key in _PATH_KEYS:
        if key in values:
            p = Path(values[key])
            values[key] = p if p.is_absolute() else base / p
    if "grid" in values and len(values["grid"]) != 3:
        raise ConfigError("grid needs three integers")
    return values


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = parse_config(text, path.parent)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    for key in ("bundle", "pseudo_dir"):
        if key not in values:
            raise ConfigError(f"config lacks required key {key!r}")
    return PipelineConfig(source_text=text, **values)


# ---------------------------------------------------------------------------
# active-space selection


def degenerate_shells(energies, tol: float) -> list[list[int]]:
    """Consecutive runs of orbitals whose neighboring energies differ by <= tol."""
    shells = [[0]] if len(energies) else []
    for t in range(1, len(energies)):
        if energies[t] - energies[t - 1] <= tol:
            shells[-1].append(t)
        else:
            shells.append([t])
    return shells


def fermi_level(energies, n_electrons: int) -> float:
    """Midpoint between highest occupied and lowest unoccupied orbital (closed shell)."""
    n_occ = n_electrons // 2
    if n_occ == 0:
        return float(energies[0])
    if n_occ >= len(energies):
        return float(energies[-1])
    return 0.5 * (energies[n_occ - 1] + energies[n_occ])


def select_active_space(
    energies,
    n_electrons: int,
    max_orbitals: int = 11,
    window: float = 5.0 / HARTREE_EV,
    degeneracy_tol: float = 1e-4,
    fermi: float | None = None,
    explicit=None,
) -> ActiveSpaceSpec:
    """Active orbitals around the Fermi level, grown by whole degenerate shells.

    Shells are added in order of their closest member's distance from the
    Fermi level while that distance is below ``window`` and the orbital cap
    is not exceeded.  Frozen orbitals are the occupied ones left out.
    """
    energies = np.asarray(energies, dtype=float)
    if n_electrons % 2:
        raise InputError(f"closed-shell treatment needs an even electron count, got {n_electrons}")
    n_occ = n_electrons // 2
    if n_occ > energies.size:
        raise InputError(f"{n_electrons} electrons exceed {energies.size} orbitals")
    if explicit is not None:
        active = tuple(int(t) for t in explicit)
        if any(t < 0 or t >= energies.size for t in active):
            raise InputError(f"active orbitals {list(active)} out of range for {energies.size} orbitals")
    else:
        if np.any(np.isnan(energies)):
            raise InputError("orbital energies missing from bundle; give an explicit active list")
        if np.any(np.diff(energies) < 0):
            raise InputError("orbital energies must be sorted ascending")
        e_f = fermi_level(energies, n_electrons) if fermi is None else float(fermi)
        shells = degenerate_shells(energies, degeneracy_tol)
        dist = [min(abs(energies[t] - e_f) for t in s) for s in shells]
        chosen: list[int] = []
        for k in sorted(range(len(shells)), key=lambda k: (dist[k], shells[k][0])):
            if dist[k] >= window:
                break
            if len(chosen) + len(shells[k]) > max_orbitals:
                if not chosen:
                    raise DegeneracyError(
                        f"degenerate shell {shells[k]} ({len(shells[k])} orbitals) exceeds the active cap "
                        f"{max_orbitals}"
                    )
                break
            chosen.extend(shells[k])
        if not chosen:
            raise InputError("no orbital lies inside the active energy window")
        active = tuple(sorted(chosen))
    frozen = tuple(t for t in range(n_occ) if t not in active)
    n_act_e = n_electrons - 2 * len(frozen)
    if n_act_e > 2 * len(active):
        raise InputError(f"{n_act_e} active electrons do not fit in {len(active)} active orbitals")
    return ActiveSpaceSpec(frozen, active, n_act_e)


# ---------------------------------------------------------------------------
# pipeline stages


class StageError(Exception):
    def __init__(self, stage: str, error: Exception):
        self.stage = stage
        self.error = error
        super().__init__(f"[{stage}] {error}")


class _Artifacts:
    """Tracks files written by a command so they can be removed on failure."""

    def __init__(self, out: Path):
        self.out = out
        self.created_dir = not out.exists()
        self.paths: list[Path] = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.paths.append(p)
        return p

    def discard(self) -> None:
        for p in self.paths:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        if self.created_dir and self.out.exists() and not any(self.out.iterdir()):
            self.out.rmdir()


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (InputError, NumericalError) as exc:
                raise StageError(name, exc) from exc
            except OSError as exc:
                raise StageError(name, InputError(str(exc))) from exc

        return run

    return wrap


@_stage("input")
def load_inputs(config: PipelineConfig):
    cell, orbitals = load_wavefunction_bundle(config.bundle)
    pps = {}
    for atom in cell.atoms:
        if atom.species in pps:
            continue
        name = atom.upf or f"{atom.species}.upf"
        path = config.pseudo_dir / name
        if not path.is_file():
            raise PseudopotentialError(f"missing pseudopotential for species {atom.species}: {path}")
        pps[atom.species] = load_pseudopotential(path)
    return cell, orbitals, pps


@_stage("active-space")
def choose_active(config: PipelineConfig, orbitals) -> ActiveSpaceSpec:
    spec = select_active_space(
        orbitals.orbital_energies,
        orbitals.n_electrons,
        config.active_max_orbitals,
        config.active_window,
        config.degeneracy_tol,
        config.fermi_level,
        config.active,
    )
    spec.check_electron_count(orbitals.n_electrons)
    return spec


@_stage("hamiltonian")
def build_hamiltonian(config: PipelineConfig, cell, orbitals, pps, spec: ActiveSpaceSpec):
    dims = config.grid or pair_grid_dims(cell, orbitals.basis.g_cut)
    h1 = one_body_ks(orbitals, cell, pps, dims)
    h4 = two_body_ks(orbitals, cell, spec.active, dims)
    terms = frozen_core_terms(orbitals, spec.frozen, spec.active, dims)
    charges = [pps[a.species].z_valence for a in cell.atoms]
    params = select_sigma(cell, charges, orbitals.basis.g_cut)
    e_nn = nuclear_repulsion(cell, charges, params)
    e_self = electron_self_energy(orbitals.n_electrons, cell, params)
    return assemble_hamiltonian(h1, h4, e_nn, e_self, spec, terms)


@_stage("solve")
def solve(config: PipelineConfig, ham) -> dict:
    qh = jordan_wigner(ham, config.max_qubit_orbitals)
    extra = {"solver": config.solver, "active": list(ham.active), "frozen": list(ham.frozen)}
    if config.solver == "ed":
        energy, state = exact_ground_state(qh, ham.n_electrons)
        return solve_report(energy, ham.e_const, occupancies(state), 0, 0.0, True, config.seed, **extra)
    ansatz = UccsdAnsatz(ham.n_active, ham.n_electrons, config.repetitions)
    options = VqeOptions(config.vqe_max_iterations, config.vqe_gtol, config.vqe_perturbation, config.seed)
    result = vqe_minimize(qh, ansatz, options)
    return solve_report(
        result.energy,
        ham.e_const,
        occupancies(result.state),
        result.n_iterations,
        result.grad_norm,
        result.converged,
        config.seed,
        repetitions=config.repetitions,
        **extra,
    )


@_stage("bader")
def bader(config: PipelineConfig, cell, orbitals, pps, report: dict):
    occ = {a: 2.0 for a in report["frozen"]}
    occ.update(zip(report["active"], report["occupancies"]))
    dims = config.grid or pair_grid_dims(cell, orbitals.basis.g_cut)
    density = assemble_density(orbitals, occ, dims)
    expected = sum(occ.values())
    if abs(density.total_charge - expected) > 1e-6:
        raise NumericalError(f"density integrates to {density.total_charge:.10f}, expected {expected:.10f}")
    partition = bader_partition(density, cell, config.vacuum_threshold)
    z = [pps[a.species].z_valence for a in cell.atoms]
    return density, partition, z


def provenance(config: PipelineConfig) -> dict:
    def version(pkg):
        try:
            return metadata.version(pkg)
        except metadata.PackageNotFoundError:
            return "unknown"

    return {
        "config_sha256": hashlib.sha256(config.source_text.encode()).hexdigest(),
        "effective_config": {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in sorted(vars(config).items())
            if k not in ("source_text", "out", "threads")
        },
        "seed": config.seed,
        "versions": {
            "artifact": version("artifact"),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
            "python": platform.python_version(),
        },
    }


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _write_provenance(config, artifacts: _Artifacts) -> None:
    _write_json(artifacts.path(PROVENANCE_FILE), provenance(config))


def _hamiltonian_stage(config, artifacts, inputs=None):
    cell, orbitals, pps = inputs or load_inputs(config)
    spec = choose_active(config, orbitals)
    log.info("active orbitals %s, frozen %s", list(spec.active), list(spec.frozen))
    ham = build_hamiltonian(config, cell, orbitals, pps, spec)
    target = artifacts.path(HAMILTONIAN_DIR)
    if target.exists():
        shutil.rmtree(target)
    write_hamiltonian(target, ham)
    return ham


def _load_hamiltonian(config):
    try:
        return load_hamiltonian(config.out / HAMILTONIAN_DIR)
    except InputError as exc:
        raise StageError("solve", exc) from exc


def _solve_stage(config, artifacts, ham=None):
    ham = ham or _load_hamiltonian(config)
    report = solve(config, ham)
    _write_json(artifacts.path(REPORT_FILE), report)
    return report


def _bader_stage(config, artifacts, inputs=None, report=None):
    cell, orbitals, pps = inputs or load_inputs(config)
    if report is None:
        try:
            report = json.loads((config.out / REPORT_FILE).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise StageError("bader", InputError(f"cannot read solve report: {exc}")) from exc
    density, partition, z = bader(config, cell, orbitals, pps, report)
    write_cube(artifacts.path(CUBE_FILE), density, cell, z)
    artifacts.path(CHARGES_FILE).write_text(charges_csv(cell, partition, z))
    return partition


def run_pipeline(config: PipelineConfig, command: str = "run") -> int:
    """Execute a command; returns the exit status (0, 1 numerical, 2 input)."""
    artifacts = _Artifacts(config.out)
    try:
        config.out.mkdir(parents=True, exist_ok=True)
        if command == "run":
            inputs = load_inputs(config)
            ham = _hamiltonian_stage(config, artifacts, inputs)
            report = _solve_stage(config, artifacts, ham)
            _bader_stage(config, artifacts, inputs, report)
        elif command == "hamiltonian":
            _hamiltonian_stage(config, artifacts)
        elif command == "solve":
            _solve_stage(config, artifacts)
        elif command == "bader":
            _bader_stage(config, artifacts)
        else:
            raise ValueError(f"unknown command {command}")
        _write_provenance(config, artifacts)
    except StageError as exc:
        artifacts.discard()
        print(f"error in stage {exc.stage}: {exc.error}", file=sys.stderr)
        return 1 if isinstance(exc.error, NumericalError) else 2
    except OSError as exc:
        artifacts.discard()
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# inspect


def inspect_paths(paths) -> str:
    lines = []
    for p in map(Path, paths):
        if p.is_dir():
            cell, orb = load_wavefunction_bundle(p)
            lines.append(f"bundle {p}")
            lines.append(f"  volume {cell.volume:.6f} Bohr^3, atoms {', '.join(cell.species)}")
            lines.append(f"  e_cut {orb.e_cut:.6f} Ha, {orb.n_gvecs} G-vectors, gamma_only {orb.gamma_only}")
            lines.append(f"  {orb.n_orbitals} orbitals, {orb.n_electrons} electrons")
            if not np.all(np.isnan(orb.orbital_energies)):
                e = " ".join(f"{x:.6f}" for x in orb.orbital_energies)
                lines.append(f"  orbital energies (Ha): {e}")
        else:
            pp = load_pseudopotential(p)
            lines.append(f"pseudopotential {p}")
            lines.append(f"  element {pp.element}, z_valence {pp.z_valence:g}, mesh {pp.r_grid.size} points")
            lines.append(f"  projectors l = {pp.angular_momenta}")
    return "\n".join(lines)


def _active_arg(text: str):
    try:
        return _int_list(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pwmanybody", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("run", "full pipeline"),
        ("hamiltonian", "build and dump the active-space Hamiltonian"),
        ("solve", "solve a dumped Hamiltonian"),
        ("bader", "density and Bader charges from a solve report"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--solver", choices=("ed", "vqe"))
        p.add_argument("--active", type=_active_arg, help="comma-separated orbital indices")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("inspect", help="summarize bundles and pseudopotentials")
    p.add_argument("paths", nargs="+")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        if args.command == "inspect":
            print(inspect_paths(args.paths))
            return 0
        overrides = {"solver": args.solver, "active": args.active, "seed": args.seed, "threads": args.threads,
                     "out": args.out}
        config = load_config(args.config, overrides)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    numba.set_num_threads(min(config.threads, numba.config.NUMBA_NUM_THREADS))
    return run_pipeline(config, args.command)


if __name__ == "__main__":
    sys.exit(main())
