from typing import Any, Dict, Optional


class UpliftError(Exception):
    """所有业务异常的基类，code 与 Result 的状态码对应"""
    code = 500

    def __init__(self, message: str = "", **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = context


class ShapeError(UpliftError):
    code = 400


class ContractError(UpliftError):
    code = 500


class ConfigError(UpliftError):
    code = 400


class ParseError(UpliftError):
    code = 400

    def __init__(self, message: str = "", row: Optional[int] = None, **context: Any):
        super().__init__(message, row=row, **context)
        self.row = row


class MetricError(UpliftError):
    code = 422

    def __init__(self, message: str = "", arm: Optional[int] = None, **context: Any):
        super().__init__(message, arm=arm, **context)
        self.arm = arm


class NumericalError(UpliftError):
    code = 500


class TrainingError(UpliftError):
    code = 500

    def __init__(self, message: str = "", epoch: Optional[int] = None,
                 batch: Optional[int] = None, components: Optional[Dict[str, float]] = None):
        super().__init__(message, epoch=epoch, batch=batch, components=components or {})
        self.epoch = epoch
        self.batch = batch
        self.components = components or {}
