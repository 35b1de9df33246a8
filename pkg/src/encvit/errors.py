class RejectedInput(ValueError):
    """An operation's precondition was violated by its arguments."""


class FormatError(ValueError):
    """A serialized artifact (weights, keyset, dataset, manifest) failed to parse."""
