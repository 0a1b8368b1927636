"""Exception and warning types shared across the package.

Hard failures are exceptions derived from :class:`CtrlBoundsError`.
Conditions that degrade trust in a bound without invalidating the run
(a spatial supremum attained on the search-box edge, state-grid clamping
in the pathwise solver) are *warning-grade*: they are surfaced through
the ``warnings`` machinery and recorded as metadata flags on the
returned estimates.
"""


class CtrlBoundsError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(CtrlBoundsError):
    """A user-supplied callable returned an output of the wrong shape."""


class NonFinite(CtrlBoundsError):
    """A NaN or infinity appeared where a finite value is required."""


class DerivativeMismatch(CtrlBoundsError):
    """Supplied derivatives of a test function disagree with finite
    differences, the Hessian is asymmetric, or the terminal-match flag
    is inconsistent with the terminal reward."""


class RiccatiBlowup(CtrlBoundsError):
    """The backward Riccati integration left its admissible region."""


class ParameterDomain(CtrlBoundsError):
    """Benchmark parameters violate a documented precondition."""


class AllCandidatesInvalid(CtrlBoundsError):
    """Every vertex of the initial search simplex was rejected."""


class MismatchedProblem(CtrlBoundsError):
    """Two estimates combined in a report refer to different problems
    or different evaluation points."""


class UnknownIdentifier(CtrlBoundsError):
    """A registry lookup used an id that is not registered."""


class ConfigError(CtrlBoundsError):
    """A run configuration failed validation.

    Carries a machine-readable ``code`` (e.g. ``UNKNOWN_PROBLEM``) that
    the CLI writes into ``report.json``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class BoundaryMaximum(UserWarning):
    """A spatial supremum was attained on the search-box boundary; the
    true supremum over the whole space may exceed the computed value."""


class StateBoxExit(UserWarning):
    """A noticeable fraction of pathwise-solver transitions had to be
    clamped to the state box."""
