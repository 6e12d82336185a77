"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`AnchorPolicyError`. Errors that refine a builtin (bad values, broken
files) also inherit from that builtin, so ``except ValueError`` keeps
working for callers that do not know about this module.

The ``exit_code`` attribute is what the command line returns when the error
escapes a subcommand.
"""

from __future__ import annotations

class AnchorPolicyError(Exception):
    exit_code: int = 1


class ConfigError(AnchorPolicyError, ValueError):
    exit_code = 2


class CorruptDataset(AnchorPolicyError, ValueError):
    exit_code = 3


class CorruptWeights(AnchorPolicyError, ValueError):
    exit_code = 3


class InvariantViolation(AnchorPolicyError, AssertionError):
    exit_code = 4


# geometry
class DegenerateRotation6D(AnchorPolicyError, ValueError):
    pass


class NonPositiveDepth(AnchorPolicyError, ValueError):
    pass


class BehindCamera(AnchorPolicyError, ValueError):
    pass


class GripperOutOfRange(AnchorPolicyError, ValueError):
    pass


# point clouds
class EmptyCloud(AnchorPolicyError, ValueError):
    pass


class KTooLarge(AnchorPolicyError, ValueError):
    pass


class DegenerateNeighborhood(AnchorPolicyError, ValueError):
    pass


class MissingProvenance(AnchorPolicyError, ValueError):
    pass


class ChannelMismatch(AnchorPolicyError, ValueError):
    pass


# simulator
class PlacementOverflow(AnchorPolicyError, RuntimeError):
    pass


class Unreachable(AnchorPolicyError, ValueError):
    pass


# segmentation / training
class ResolutionMismatch(AnchorPolicyError, ValueError):
    pass


class EmptyDataset(AnchorPolicyError, ValueError):
    pass


class EmptyBatch(AnchorPolicyError, ValueError):
    pass


# nn engine
class ShapeMismatch(AnchorPolicyError, ValueError):
    pass


class NonFiniteTensor(AnchorPolicyError, FloatingPointError):
    pass


# keyposes
class UntaggedLog(AnchorPolicyError, ValueError):
    pass


class TooShort(AnchorPolicyError, ValueError):
    pass


class PastEnd(AnchorPolicyError, IndexError):
    pass
