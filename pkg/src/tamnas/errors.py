"""Exception hierarchy shared across the package."""


class TamNasError(Exception):
    """Base class for every error raised by tamnas."""


class ShapeError(TamNasError, ValueError):
    """Two tensor axes that must agree do not."""

    def __init__(self, op, axis_a, size_a, axis_b, size_b):
        self.op = op
        self.axes = (axis_a, axis_b)
        self.sizes = (size_a, size_b)
        super().__init__(
            f"{op}: dimension mismatch between {axis_a}={size_a} and {axis_b}={size_b}"
        )


class InvalidKernelError(TamNasError, ValueError):
    pass


class IllegalPlacementError(TamNasError, ValueError):
    """A block id was placed in a layer that cannot host it."""


class GenomeError(TamNasError, ValueError):
    pass


class GenomeFormatError(GenomeError):
    pass


class GenomeLengthError(GenomeError):
    pass


class GenomeLegalityError(GenomeError):
    def __init__(self, layer, block, stride):
        self.layer = layer
        self.block = block
        super().__init__(f"layer {layer} (stride {stride}) cannot host block {block}")


class InfeasibleWindowError(TamNasError, RuntimeError):
    def __init__(self, window, achievable, attempts):
        self.window = window
        self.achievable = achievable
        super().__init__(
            f"no genome in window [{window[0]}, {window[1]}] after {attempts} attempts; "
            f"achievable range is [{achievable[0]}, {achievable[1]}]"
        )


class NonFiniteError(TamNasError, FloatingPointError):
    def __init__(self, message, batch_index=None, checkpoint=None):
        self.batch_index = batch_index
        self.checkpoint = checkpoint
        super().__init__(message)


class CheckpointError(TamNasError, ValueError):
    pass


class DataError(TamNasError, ValueError):
    def __init__(self, message, offset=None):
        self.offset = offset
        self.detail = message
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ConfigError(TamNasError, ValueError):
    pass


class MissingArtifactError(TamNasError, FileNotFoundError):
    def __init__(self, path, hint=""):
        self.path = str(path)
        msg = f"missing upstream artifact: {path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)
