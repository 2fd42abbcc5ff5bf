"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
stable contract (2 config, 3 data/provenance, 4 runtime).
"""


class MintError(Exception):
    exit_code = 4


class ConfigError(MintError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    """A numeric argument is outside its allowed range."""


class DimensionError(MintError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class BatchSizeError(DimensionError):
    pass


class LabelError(MintError, ValueError):
    exit_code = 3


class UsageError(MintError, RuntimeError):
    """The API was driven in an order it does not support."""


class NumericalError(MintError, FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class DataError(MintError):
    exit_code = 3


class FormatError(DataError):
    def __init__(self, message, offset=None, index=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        if index is not None:
            message = f"{message} (record {index})"
        super().__init__(message)
        self.offset = offset
        self.index = index


class CapacityError(DataError):
    pass


class ProvenanceError(DataError):
    pass


class CoverageError(DataError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        shown = ", ".join(str(m) for m in self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"no AAD for {len(self.missing)} split ids: {shown}{more}")


class DisjointnessError(DataError):
    def __init__(self, pairs, what="D/E"):
        self.pairs = list(pairs)
        shown = ", ".join(f"{a}~{b}" for a, b in self.pairs[:10])
        super().__init__(f"{len(self.pairs)} {what} overlap(s): {shown}")
