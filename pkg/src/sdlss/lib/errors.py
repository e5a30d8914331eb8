class SdlssError(Exception):
    pass


class ConfigError(SdlssError):
    pass


class DimensionError(SdlssError):
    pass


class ContractError(SdlssError):
    pass


class NonFiniteError(SdlssError):
    pass


class BudgetExceeded(SdlssError):
    pass


class FormatError(SdlssError):
    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
