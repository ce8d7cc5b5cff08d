"""Exception types shared across the package.

Everything numerical raises a subclass of :class:`SpheremixError` so the CLI
can map failures to a single exit code without string matching.
"""


class SpheremixError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(SpheremixError):
    """Malformed or inconsistent experiment configuration."""


# ---------------------------------------------------------------- core types

class NonHermitianInput(SpheremixError):
    """Matrix fails the conjugate-symmetry tolerance."""


class ZeroVector(SpheremixError):
    """Vector norm too small to renormalize."""


# --------------------------------------------------------------------- noise

class OutOfDomain(SpheremixError):
    """Noise segment evaluated outside its unit time interval."""


class PathExhausted(SpheremixError):
    """Noise path evaluated past its last stored segment."""


# ------------------------------------------------------------------ dynamics

class NormDriftExceeded(SpheremixError):
    """Integrator norm drift exceeded the configured tolerance."""


class TangencyViolated(SpheremixError):
    """Input vector is not tangent to the sphere at the required point."""


# ------------------------------------------------------------------- control

class DegenerateSpectrum(SpheremixError):
    """Repeated eigenvalue where distinct ones are required."""


class DegenerateCoupling(SpheremixError):
    """A required coupling matrix element is (numerically) zero."""


class IllConditioned(SpheremixError):
    """Linear system condition number above the accepted bound."""


class NoConvergence(SpheremixError):
    """Iterative solve failed to reach tolerance within its budget."""


class OutsideBasin(SpheremixError):
    """State outside the convergence basin of the local solver."""


class StallDetected(SpheremixError):
    """Feedback law has (numerically) zero gain at the initial state."""


class Timeout(SpheremixError):
    """Closed-loop run exceeded its time budget before reaching target."""


class AlignmentExhausted(SpheremixError):
    """No drift step count within the search horizon aligns the phase."""


class ApproachFailed(SpheremixError):
    """Approach stage failed after the allowed number of retries."""


class BridgeFailed(SpheremixError):
    """Bridging step of a global steering plan did not converge."""


# ---------------------------------------------------------------- ergodicity

class DegenerateSamples(SpheremixError):
    """Sample cloud too degenerate to build a partition from."""


class PartitionMismatch(SpheremixError):
    """Operation mixing empirical measures over different partitions."""


class InsufficientSignal(SpheremixError):
    """Too few usable points above the noise floor to fit a rate."""


class HeavyCensoring(SpheremixError):
    """Too many hitting-time samples censored at the horizon."""
