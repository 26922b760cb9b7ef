"""Error hierarchy shared by every module.

Library code raises these; only the command line maps them to exit codes.
"""


class FeatureMiningError(Exception):
    """Base class. Unclassified runtime failures exit with 3."""

    exit_code = 3


class ConfigurationError(FeatureMiningError):
    """Shapes, config fields or arguments that can never work."""

    exit_code = 2


class InputError(FeatureMiningError):
    """Bad values handed to an operation (labels, class ids, image shapes)."""

    exit_code = 2


class NumericError(FeatureMiningError):
    """NaN or Inf produced by a kernel."""

    exit_code = 3


class TrainingDivergedError(NumericError):
    """Raised by the trainer when a loss head turns non-finite."""

    def __init__(self, iteration, head, lr, detail=""):
        self.iteration = iteration
        self.head = head
        self.lr = lr
        msg = f"non-finite loss at iteration {iteration} (head {head}, lr {lr:g})"
        if detail:
            msg = f"{msg}: {detail}"
        super().__init__(msg)


class UsageError(FeatureMiningError):
    """API misuse, e.g. running backward twice over one graph."""

    exit_code = 3


class DataFormatError(FeatureMiningError):
    """Dataset files that do not follow the CIFAR binary layout."""

    exit_code = 4

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
