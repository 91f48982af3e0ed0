import json
from typing import Any, Dict

from common.errors import UpliftError


class Result:
    def __init__(self, code: int = 200, message: str = "success", data: Any = None):
        self.code = code
        self.message = message
        self.data = data

    def to_dict(self) -> Dict[str, Any]:
        return {
            "code": self.code,
            "message": self.message,
            "data": self.data
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True, ensure_ascii=False)

    @property
    def ok(self) -> bool:
        return self.code == 200

    @property
    def exit_code(self) -> int:
        if self.code == 200:
            return 0
        if self.code == 400:
            return 2
        return 1

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'Result':
        return cls(code=payload.get("code", 500),
                   message=payload.get("message", ""),
                   data=payload.get("data"))

    @classmethod
    def success(cls, data: Any = None, message: str = "success") -> 'Result':
        return cls(code=200, message=message, data=data)

    @classmethod
    def error(cls, message: str = "error", code: int = 500, data: Any = None) -> 'Result':
        return cls(code=code, message=message, data=data)

    @classmethod
    def bad_request(cls, message: str = "请求参数错误") -> 'Result':
        return cls(code=400, message=message)

    @classmethod
    def from_exception(cls, exc: Exception) -> 'Result':
        if isinstance(exc, UpliftError):
            return cls(code=exc.code, message=exc.message or type(exc).__name__,
                       data={"error": type(exc).__name__,
                             **{k: v for k, v in exc.context.items() if v is not None}})
        if isinstance(exc, OSError):
            return cls.error(message=f"IO 错误: {exc}", data={"error": type(exc).__name__})
        return cls.error(message=str(exc), data={"error": type(exc).__name__})
