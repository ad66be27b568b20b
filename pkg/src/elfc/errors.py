"""Exception hierarchy and process exit codes.

Every failure mode that crosses a module boundary has a dedicated class so
callers (and the CLI) can map errors to exit codes without string matching.
"""


class ElfcError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ValidationError(ElfcError):
    """Invalid parameters, configuration, or out-of-range inputs."""

    exit_code = 2


class ParameterError(ValidationError):
    """Cryptographic or plant parameters violate an invariant."""


class RangeError(ValidationError):
    """A plaintext or quantized value falls outside the representable range."""


class QuantizationOverflowError(RangeError):
    """round(x / step) does not fit in the centered residue range."""

    def __init__(self, x, step, q):
        self.x = x
        self.step = step
        self.q = q
        super().__init__(
            f"quantizing {x!r} at step {step!r} overflows the centered range of q={q}"
        )


class ShapeError(ValidationError):
    """Nonconformable matrix dimensions."""


class IncompatibleError(ValidationError):
    """Operands belong to different keys, parameter sets, or scales."""


class ProfileLookupError(ValidationError):
    """Unknown quantization/encryption profile name."""


class ConfigError(ValidationError):
    """Config file cannot be parsed or fails validation."""


class ProtocolError(ElfcError):
    """A two-party protocol step failed or a message is malformed."""

    exit_code = 3


class ProtocolIncompleteError(ProtocolError):
    """A required party input never arrived."""


class SingularMatrixError(ProtocolError):
    """The (masked) matrix handed to the inversion protocol is singular."""


class ObservabilityError(ProtocolError):
    """The controller pair is not observable; pole placement impossible."""


class DecryptionError(ProtocolError):
    """Second-cryptosystem decryption failed (wrong key or corrupt blob)."""


class NoiseOverflowError(ElfcError):
    """Ciphertext noise budget at or above the decryption-failure threshold."""

    exit_code = 4

    def __init__(self, message, budget=None, threshold=None, entry=None, step_index=None):
        self.budget = budget
        self.threshold = threshold
        self.entry = entry
        self.step_index = step_index
        super().__init__(message)


class UnrecoverableNoiseError(NoiseOverflowError):
    """Noise already overflowed; masked re-encryption can no longer help."""


class ConvergenceError(ElfcError):
    """An iterative solver exhausted its budget without converging."""

    exit_code = 5

    def __init__(self, message, residual_history=None):
        self.residual_history = list(residual_history or [])
        super().__init__(message)
