"""Exception hierarchy shared across the package.

Two broad failure classes exist: bad input (malformed files, inconsistent
shapes, out-of-range parameters) and violated internal invariants (data the
pipeline itself produced failing its own contracts). The CLI maps them to
exit codes 2 and 3 respectively.
"""


class InputError(ValueError):
    """Malformed or inconsistent input supplied by the caller."""


class InvariantError(RuntimeError):
    """An internal contract was violated; indicates a pipeline bug."""


class BackendUnavailable(RuntimeError):
    """The requested compute backend is not importable on this host."""


EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INVARIANT = 3
