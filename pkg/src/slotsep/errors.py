"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes or counts are incompatible."""


class UnsupportedFormatError(ValueError):
    """Audio file is not RIFF/WAVE, 16-bit PCM, mono, 16 kHz."""


class DatasetIntegrityError(RuntimeError):
    """Dataset directory has dangling or missing counterpart files."""
