"""Active-space many-body Hamiltonians from plane-wave Kohn-Sham orbitals.

Pipeline: plane-wave bundle and norm-conserving pseudopotentials ->
one- and two-electron matrix elements -> frozen-core active space ->
qubit Hamiltonian solved by exact diagonalization or UCCSD-VQE ->
valence density and Bader excess charges.
"""

from .activespace import ActiveSpaceHamiltonian, ActiveSpaceSpec, assemble_hamiltonian
from .errors import InputError, NumericalError
from .matelems import OneBodyMatrix, TwoBodyTensor, one_body_ks, two_body_ks
from .pwio import CrystalCell, PlaneWaveOrbitalSet, load_pseudopotential, load_wavefunction_bundle

__all__ = [
    "ActiveSpaceHamiltonian",
    "ActiveSpaceSpec",
    "CrystalCell",
    "InputError",
    "NumericalError",
    "OneBodyMatrix",
    "PlaneWaveOrbitalSet",
    "TwoBodyTensor",
    "assemble_hamiltonian",
    "load_pseudopotential",
    "load_wavefunction_bundle",
    "one_body_ks",
    "two_body_ks",
]
