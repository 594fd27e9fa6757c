# errors.py
"""
Exception hierarchy for the simulation modules.

Everything a run can fail with derives from SimulationError so the
orchestrator can catch it at the command boundary and map it to an exit code.
"""


class SimulationError(Exception):
    """Base class for every failure raised by the simulation modules."""

    # Exit code used by the command line front end.
    exit_code = 1


class NonFinite(SimulationError):
    """A potential or vector field returned NaN/inf at a non-singular point."""


class QuadratureFailure(SimulationError):
    """A quadrature did not converge under refinement."""


class AlphaTooLarge(SimulationError):
    """Khasminskii's criterion is unusable: alpha_t* >= 1."""


class NotInE(SimulationError):
    """The proposed V = W + U split is not in the E class."""


class BornDivergence(SimulationError):
    """Neumann (Born) iteration hit the cap with a growing residual."""


class SingularQuadrature(SimulationError):
    """The diagonal cell correction of the scattering kernel failed."""


class SupportViolation(SimulationError):
    """A cutoff profile has mass at k = 0."""


class NegativeAction(SimulationError):
    """The discretized ||K_t||^2 quadratic form came out below -1e-6."""


class WeightOverflow(SimulationError):
    """exp(-int V) exceeded 1e300 on a sampled path."""


class FitUnstable(SimulationError):
    """No time window gave a linear log matrix element within tolerance."""


class Divergence(SimulationError):
    """Power iteration sup norm drifted monotonically: the energy shift is off."""


class GrowthViolation(SimulationError):
    """W does not dominate gamma |x|^(2n) on the test shell."""

    exit_code = 2


class ParameterInfeasible(SimulationError):
    """No (c, epsilon) pair satisfies the confining case 2 conditions."""

    exit_code = 2


class GapViolation(SimulationError):
    """Non-confining case needs Sigma > E and Sigma > W_inf."""

    exit_code = 2


class ConfigError(SimulationError):
    """Run config could not be parsed or validated."""

    def __init__(self, message, path=None, line=None, field=None):
        self.path = path
        self.line = line
        self.field = field
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        if field is not None:
            location += f"field '{field}': "
        super().__init__(location + message)
