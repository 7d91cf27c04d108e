"""Exception types shared across the package.

Every error carries a stable ``code`` string so the CLI can report
``error[CODE]: message`` and scripts can match on it.
"""


class RagwardError(Exception):
    code = "E_INTERNAL"


class ConfigInvalid(RagwardError):
    code = "E_CONFIG_INVALID"


class EmptyCorpus(RagwardError):
    code = "E_EMPTY_CORPUS"


class EmptyInput(RagwardError):
    code = "E_EMPTY_INPUT"


class IdOutOfRange(RagwardError):
    code = "E_ID_OUT_OF_RANGE"


class PositionOutOfRange(RagwardError):
    code = "E_POSITION_OUT_OF_RANGE"


class DimensionMismatch(RagwardError):
    code = "E_DIMENSION_MISMATCH"


class DuplicateDocId(RagwardError):
    code = "E_DUPLICATE_DOC_ID"


class MalformedLine(RagwardError):
    """A line in an input file failed to parse; carries the line number."""

    code = "E_MALFORMED_LINE"

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MissingField(RagwardError):
    code = "E_MISSING_FIELD"

    def __init__(self, field: str):
        super().__init__(f"missing field: {field}")
        self.field = field


class FormatVersionMismatch(RagwardError):
    code = "E_FORMAT_VERSION"


class IoError(RagwardError):
    code = "E_IO"


class FingerprintMismatch(RagwardError):
    code = "E_FINGERPRINT_MISMATCH"


class EmptyCalibrationSet(RagwardError):
    code = "E_EMPTY_CALIBRATION"


class NoPoisonedDocuments(RagwardError):
    code = "E_NO_POISONED_DOCS"


class NoCleanDocuments(RagwardError):
    code = "E_NO_CLEAN_DOCS"


class EmptyClass(RagwardError):
    code = "E_EMPTY_CLASS"
