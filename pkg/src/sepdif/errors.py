"""Exception types raised across the package.

Every error carries enough context (column names, row indices, counts) for
the caller to locate the offending input without re-running validation.
"""


class SepdifError(Exception):
    """Base class for all package errors."""


# ---- dataset validation -------------------------------------------------

class NonBinaryResponse(SepdifError):
    """A response column contains values other than 0/1."""


class SingleGroup(SepdifError):
    """Only one group level present; a contrast is undefined."""


class LengthMismatch(SepdifError):
    """Dataset columns disagree in length."""


class NonFiniteAbility(SepdifError):
    """Ability column contains NaN or infinite entries."""


class DegenerateDesign(SepdifError):
    """A regression design is singular or produced a non-finite fit."""


# ---- data generation -----------------------------------------------------

class InvalidConfig(SepdifError):
    """A configuration violates its invariants."""


class WrongScenario(SepdifError):
    """Operation called with a config for the other scenario."""


# ---- IRT ------------------------------------------------------------------

class DegenerateItem(SepdifError):
    """An anchor item is all-correct or all-incorrect."""


class CollinearRegressors(SepdifError):
    """Latent-regression design matrix is rank deficient."""


class ShapeMismatch(SepdifError):
    """Array dimensions do not match the fitted model."""


# ---- forests / BART -------------------------------------------------------

class TooFewSamples(SepdifError):
    """Not enough observations for the requested fit."""


class InvalidParams(SepdifError):
    """Ensemble parameters violate their invariants."""


class NotFitted(SepdifError):
    """Model object lacks the fitted state the operation needs."""


# ---- detection ------------------------------------------------------------

class ConstantAbility(SepdifError):
    """Ability column is constant; the projection design is singular."""


class DimensionMismatch(SepdifError):
    """Draw/weight matrices disagree in shape."""


class AllZeroWeights(SepdifError):
    """Every density weight underflowed to zero at a grid value."""


# ---- study harness --------------------------------------------------------

class StudyFailure(SepdifError):
    """More than the tolerated share of replications failed."""

    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or []
