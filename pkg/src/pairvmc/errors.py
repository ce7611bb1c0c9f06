"""Exception types shared across the package."""


class PairVmcError(Exception):
    """Base class for all package errors."""


class NodeEvaluation(PairVmcError):
    """A log-derivative was requested at a configuration where the wavefunction is zero."""


class NonFinite(PairVmcError):
    """A numeric quantity that must be finite came out inf or nan."""


class SingularConfiguration(PairVmcError):
    """Two charged particles closer than the distance clamp (1e-12 Bohr)."""


class SizeLimit(PairVmcError):
    """A brute-force oracle was asked for a system size it refuses (factorial cost)."""


class OnNode(PairVmcError):
    """A sorting-permutation query landed exactly on the node set."""


class ConfigError(PairVmcError):
    """A run configuration file failed to parse or validate."""
