"""Exception hierarchy shared by all stages.

``InputError`` subclasses map to CLI exit status 2, ``NumericalError`` to 1.
"""


class InputError(ValueError):
    """Malformed or inconsistent input data."""


class BundleError(InputError):
    pass


class PseudopotentialError(InputError):
    pass


class ConfigError(InputError):
    pass


class NumericalError(RuntimeError):
    """A numerical procedure failed or an internal consistency check tripped."""


class AliasingError(NumericalError):
    """Real-space grid too coarse for the requested band limit."""


class DegeneracyError(InputError):
    """Active-space rule would split a degenerate shell."""


class UnresolvedBasinError(NumericalError):
    def __init__(self, atoms):
        self.atoms = tuple(atoms)
        super().__init__(f"unresolved basin: atoms {self.atoms} share one Bader basin (grid too coarse)")
