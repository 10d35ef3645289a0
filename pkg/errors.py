"""
Exception hierarchy. Every numerical failure carries a stable `code`
so the CLI and the study harness can report it without string matching.
"""


class MeasurementErrorModelError(Exception):
    code = "MODEL_ERROR"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class ConfigError(ValueError):
    code = "CONFIG_ERROR"


class DegenerateLikelihoodError(MeasurementErrorModelError):
    code = "DEGENERATE_LIKELIHOOD"

    def __init__(self, message, index=None):
        super().__init__(message, index=index)
        self.index = index


class SingularKernelError(MeasurementErrorModelError):
    code = "SINGULAR_KERNEL"

    def __init__(self, message, condition=None):
        super().__init__(message, condition=condition)
        self.condition = condition


class NonConvergenceError(MeasurementErrorModelError):
    """Raised when an iteration hits max_iter; `best` holds the best iterate seen."""
    code = "NON_CONVERGENCE"

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SingularBreadError(MeasurementErrorModelError):
    code = "SINGULAR_BREAD"


class EmptyWindowError(MeasurementErrorModelError):
    code = "EMPTY_WINDOW"

    def __init__(self, message, z_target=None, bandwidth=None):
        super().__init__(message, z_target=z_target, bandwidth=bandwidth)
        self.z_target = z_target
        self.bandwidth = bandwidth


class SingularOmegaError(MeasurementErrorModelError):
    code = "SINGULAR_OMEGA"


class SingularInfoError(MeasurementErrorModelError):
    code = "SINGULAR_INFO"


class DFSaturatedError(MeasurementErrorModelError):
    code = "DF_SATURATED"


class AllFitsFailedError(MeasurementErrorModelError):
    code = "ALL_FITS_FAILED"


class StudyFailedError(MeasurementErrorModelError):
    code = "STUDY_FAILED"
