"""Exception hierarchy shared by every kacnet module.

The CLI maps each family onto a process exit code, see ``EXIT_CODES``.
"""


class KacError(Exception):
    """Base class for all kacnet errors."""


class ConfigError(KacError):
    """Invalid hyperparameters, flags, or configuration files."""


class ContractError(KacError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes do not conform to a primitive's rules."""


class DomainError(ContractError):
    """An operation was asked to work outside its mathematical domain."""


class NumericError(KacError):
    """Non-finite values were produced or encountered."""


class FormatError(KacError):
    """A file or record could not be parsed or breaks a type invariant."""


class DanglingReferenceError(FormatError):
    """A record refers to an identifier that does not exist."""


class VocabularyError(KacError):
    """A token id falls outside the vocabulary."""


class CheckpointError(KacError):
    """A checkpoint is truncated or does not match the model config."""


EXIT_CODES = {
    ConfigError: 1,
    ContractError: 2,
    FormatError: 2,
    VocabularyError: 2,
    CheckpointError: 2,
    NumericError: 3,
}


def exit_code_for(exc: BaseException) -> int:
    for cls in type(exc).__mro__:
        if cls in EXIT_CODES:
            return EXIT_CODES[cls]
    return 1
