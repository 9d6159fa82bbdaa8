"""Exception types shared across the toolkit.

Everything raised for bad *input* (malformed files, contract violations on
loaded data, budget overruns) derives from DataError so the CLI can map it
to a single exit code. Programming errors stay plain ValueError/TypeError.
"""


class DataError(Exception):
    """Invalid external input: file contents, budgets, or checkpoint layout."""


class DataFormatError(DataError):
    """A data file violates its documented line format or invariants."""


class BudgetExceededError(DataError):
    """Query plus control tokens do not fit the encoder's input budget."""


class CheckpointError(DataError):
    """A checkpoint file is missing, inconsistent, or not reconstructible."""
