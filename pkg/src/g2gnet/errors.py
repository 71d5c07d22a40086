class ConfigurationError(ValueError):
    """Invalid sizes, probabilities, or option names."""


class ParseError(ValueError):
    """A dataset or mask file does not match its binary format."""


class RewireError(RuntimeError):
    """A prune/grow request contradicts the current mask."""


class TrainingDiverged(RuntimeError):
    def __init__(self, message, iteration=None, loss=None):
        super().__init__(message)
        self.iteration = iteration
        self.loss = loss


class CheckpointError(RuntimeError):
    pass
