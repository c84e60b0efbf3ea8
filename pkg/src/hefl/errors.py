"""Exception types raised across the simulator."""


class HeflError(Exception):
    """Base class for all simulator errors."""


# sharing / dealer
class DegenerateParties(HeflError):
    pass


class SessionMismatch(HeflError):
    pass


class LengthMismatch(HeflError):
    pass


class SingleUseViolation(HeflError):
    pass


class DealerExhausted(HeflError):
    pass


# secure ops / neural
class ShapeMismatch(HeflError):
    pass


class PrecisionMismatch(HeflError):
    pass


class EmptyBatch(HeflError):
    pass


class EmptyDataset(HeflError):
    pass


# federated
class SpecMismatch(HeflError):
    pass


class ZeroSamples(HeflError):
    pass


class KTooLarge(HeflError):
    pass


class LedgerRejection(HeflError):
    pass


# ensemble
class AllZeroWeights(HeflError):
    pass


class AlignmentMismatch(HeflError):
    pass


# ledger
class UnknownModelId(HeflError):
    pass


class QuorumFailure(HeflError):
    """Consensus did not reach a strict majority on the submitted digest."""

    def __init__(self, message, dissenters=()):
        super().__init__(message)
        self.dissenters = tuple(dissenters)


class ChainFormatError(HeflError):
    """Malformed chain bytes; ``height`` is the block being parsed, if known."""

    def __init__(self, message, height=None):
        super().__init__(message)
        self.height = height


# protocol
class SessionAbort(HeflError):
    pass


class EmptyEvalSet(HeflError):
    pass


class ConfigError(HeflError):
    pass


class PhaseError(HeflError):
    """Wraps a failure inside one scenario phase."""

    def __init__(self, phase, cause):
        super().__init__(f"phase '{phase}' failed: {cause}")
        self.phase = phase
        self.cause = cause
