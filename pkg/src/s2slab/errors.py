"""Exception hierarchy shared by every subsystem.

Each exception carries a ``category`` used by the command line to pick an
exit code.
"""


class S2SError(Exception):
    category = "error"
    exit_code = 1


class ShapeMismatch(S2SError, ValueError):
    category = "shape"
    exit_code = 10


class NonFiniteValue(S2SError, FloatingPointError):
    category = "numeric"
    exit_code = 11


class NotScalarLoss(S2SError, ValueError):
    category = "shape"
    exit_code = 10


class EmptyTape(S2SError, RuntimeError):
    category = "autodiff"
    exit_code = 12


class EmptySequence(S2SError, ValueError):
    category = "data"
    exit_code = 13


class AllMasked(S2SError, ValueError):
    category = "data"
    exit_code = 13


class PositionOutOfRange(S2SError, IndexError):
    category = "data"
    exit_code = 13


class ZeroDirection(S2SError, ValueError):
    category = "numeric"
    exit_code = 11


class InvalidProbability(S2SError, ValueError):
    category = "config"
    exit_code = 2


class ConfigInvalid(S2SError, ValueError):
    category = "config"
    exit_code = 2


class MissingPretrainedEncoder(ConfigInvalid):
    pass


class ColumnDimMismatch(ConfigInvalid):
    pass


class UnknownSelector(ConfigInvalid, KeyError):
    pass


class UnknownToggle(ConfigInvalid):
    pass


class EmptyBatch(S2SError, ValueError):
    category = "data"
    exit_code = 13


class TargetOutOfRange(S2SError, IndexError):
    category = "data"
    exit_code = 13


class SentenceExceedsBudget(S2SError, ValueError):
    category = "data"
    exit_code = 13


class EmptySource(S2SError, ValueError):
    category = "data"
    exit_code = 13


class EmptyCorpus(S2SError, ValueError):
    category = "data"
    exit_code = 13


class SeriesTooShort(S2SError, ValueError):
    category = "data"
    exit_code = 13


class CheckpointIncompatible(S2SError):
    category = "checkpoint"
    exit_code = 3
