"""Exception types raised across the package."""


class Pix2PixError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(Pix2PixError, ValueError):
    pass


class ShapeError(Pix2PixError, ValueError):
    pass


class NumericError(Pix2PixError, ArithmeticError):
    pass


class MissingPairError(Pix2PixError, FileNotFoundError):
    def __init__(self, sample_id, missing=None):
        self.sample_id = sample_id
        self.missing = missing
        msg = f"sample {sample_id!r} has no counterpart"
        if missing:
            msg += f" in {missing}"
        super().__init__(msg)


class DuplicateIdError(Pix2PixError, ValueError):
    pass


class DecodeError(Pix2PixError, OSError):
    pass


class FoldConfigError(ConfigError):
    pass


class ChecksumError(Pix2PixError, OSError):
    pass
