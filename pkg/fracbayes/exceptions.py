"""
Error taxonomy shared by all fracbayes modules
"""


class FracBayesError(Exception):
    """Base class for every error raised by fracbayes"""


class ArgumentError(FracBayesError, ValueError):
    """An argument lies outside its admissible range (e.g. alpha not in (0,1))"""


class RangeError(FracBayesError, IndexError):
    """An index lies beyond a truncation or a formula's validity range"""


class DomainError(FracBayesError, ValueError):
    """A formula is evaluated outside its mathematical domain"""


class ScheduleError(DomainError):
    """A DRVS schedule is undefined for the requested sample size"""


class ConfigError(FracBayesError, ValueError):
    """An experiment or model configuration is invalid"""


class UnsupportedKernelError(FracBayesError):
    """A closed form is requested for a kernel family that has none"""


class InvalidDensityError(FracBayesError, ValueError):
    """A density evaluates to a negative or non-finite value"""


class QuadratureError(FracBayesError):
    """Adaptive quadrature did not reach its tolerance"""


class CholeskyError(FracBayesError):
    """A covariance matrix stayed non positive-definite after jitter escalation"""


class RetryBudgetError(FracBayesError):
    """A rejection sampler exhausted its retry budget"""


class EnumerationBudgetError(FracBayesError):
    """The model space is too large for exact enumeration"""


class BracketError(FracBayesError):
    """A root search found no sign change inside its bracket"""


class OracleError(FracBayesError):
    """A numerical oracle (eigensolver) failed"""
