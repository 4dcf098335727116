"""Exception types shared across the package.

Every error raised on a user-facing path derives from ModelMergeError so the
CLI can separate domain failures from genuine bugs.
"""


class ModelMergeError(Exception):
    """Base class for all errors raised by this package."""


class GraphFormatError(ModelMergeError):
    """A graph or blob file could not be parsed.

    ``offset`` is the byte offset of the first problem when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(ModelMergeError):
    """A graph failed validation; carries the diagnostics that explain why."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        lines = "; ".join(str(d) for d in self.diagnostics)
        super().__init__(f"graph failed validation: {lines}")


class ShapeError(ModelMergeError):
    """Operands passed to a kernel have incompatible shapes or dtypes."""


class UnsupportedOpError(ModelMergeError):
    """An op kind has no merge counterpart or no kernel."""


class ArchitectureMismatchError(ModelMergeError):
    """Weight stores disagree on names or specs, so the models cannot merge."""


class MergeConstraintError(ModelMergeError):
    """The merger could not satisfy a structural constraint.

    Raised for unsatisfiable packing-axis requirements, non-prefix-closed
    backbones, and similar problems that no choice of layout can fix.
    """


class ExecutionError(ModelMergeError):
    """An error occurred while executing a graph node.

    Wraps the underlying kernel error and names the offending node.
    """

    def __init__(self, node_id: str, cause: Exception):
        super().__init__(f"node '{node_id}': {cause}")
        self.node_id = node_id
        self.cause = cause
