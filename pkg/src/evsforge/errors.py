"""Exception types shared across the pipeline.

Exit-code mapping lives in the CLI: data-format faults (anything derived
from DataFormatError) map to exit code 3, runtime aborts to 4.
"""


class EvsForgeError(Exception):
    """Base class for all package errors."""


class DataFormatError(EvsForgeError):
    """A file or wire payload is malformed."""


class BadMagic(DataFormatError):
    def __init__(self, path, offset, found):
        super().__init__(f"{path}: bad magic {found!r} at byte {offset}")
        self.offset = offset


class TruncatedFile(DataFormatError):
    def __init__(self, path, offset, needed):
        super().__init__(f"{path}: truncated at byte {offset}, needed {needed} more bytes")
        self.offset = offset


class LabelOutOfRange(DataFormatError):
    def __init__(self, path, offset, label, palette_size):
        super().__init__(
            f"{path}: label {label} at byte {offset} exceeds palette size {palette_size}"
        )
        self.offset = offset
        self.label = label


class ShapeMismatch(EvsForgeError):
    """Array shapes disagree with the declared contract."""


class InvalidSpec(EvsForgeError):
    """An EVS trajectory spec is internally inconsistent."""


class MissingFramePose(EvsForgeError):
    """A dynamic instance has no pose for the requested frame."""


class TOutOfRange(EvsForgeError):
    """Diffusion time outside the schedule's continuous sampling bounds."""


class ProtocolError(DataFormatError):
    """Denoiser wire frame is malformed (bad magic, bad length, error frame)."""


class Timeout(EvsForgeError):
    """Remote denoiser did not answer within the configured timeout."""


class NaNDetected(EvsForgeError):
    def __init__(self, step, where):
        super().__init__(f"NaN in {where} at step {step}")
        self.step = step


class MissingStage1Checkpoint(EvsForgeError):
    """Stage 2 refuses to start from scratch; it needs a stage-1 checkpoint."""


class CountMismatch(EvsForgeError):
    """Two directories that must pair up file-for-file differ in count."""
