"""Exception types shared across docuforge."""


class DocuforgeError(Exception):
    """Base class for all docuforge errors."""


class InvalidArgument(DocuforgeError, ValueError):
    pass


class NotFound(DocuforgeError, FileNotFoundError):
    pass


class DecodeError(DocuforgeError, ValueError):
    pass


class IoError(DocuforgeError, OSError):
    pass


class UnsupportedGraph(DocuforgeError, RuntimeError):
    """Raised when a loss cannot be differentiated w.r.t. network parameters."""


class DivergenceDetected(DocuforgeError, RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""

    def __init__(self, iteration, losses):
        self.iteration = iteration
        self.losses = dict(losses)
        super().__init__(f"non-finite loss at iteration {iteration}: {self.losses}")
