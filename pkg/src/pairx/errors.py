"""Exception types shared across the engine.

The CLI maps these onto its exit codes: input/container problems are
exit 2, numerical degeneracies exit 3, contract violations exit 4.
"""


class PairxError(Exception):
    """Base class for all engine errors."""


class InputError(PairxError):
    """A file is missing, unreadable, or not in the expected format."""


class ContainerError(InputError):
    """The weight container is malformed (magic, version, truncation, shapes)."""


class DegenerateError(PairxError):
    """A numerical degeneracy: zero-norm embedding, unusable geometry."""


class ContractError(PairxError):
    """An operation was called outside its contract (shapes, bounds, config)."""
