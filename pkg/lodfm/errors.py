# errors.py
# lodfm 统一的异常层次，库代码只负责抛出，由 CLI 统一捕获


class LodfmError(Exception):
    pass


class StructuralError(LodfmError):
    pass


class DimensionError(LodfmError):
    pass


class UnknownEntityError(LodfmError, KeyError):
    def __str__(self) -> str:
        # KeyError 默认会给消息加引号
        return str(self.args[0]) if self.args else ""


class DegenerateInputError(LodfmError):
    pass


class InvalidItemUriError(LodfmError):
    pass


class SparqlTransportError(LodfmError):
    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message}（共尝试 {attempts} 次）")
        self.attempts = attempts


class SparqlParseError(LodfmError):
    pass


class RatingsFormatError(LodfmError):
    def __init__(self, message: str, line_no: int):
        super().__init__(message)
        self.line_no = line_no


class FingerprintMismatchError(LodfmError):
    pass


class ConfigError(LodfmError):
    pass
