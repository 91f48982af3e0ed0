"""子命令注册：仿照 Blueprint 的写法，模块内声明 bp，再由 create_app 统一注册。"""
from typing import Any, Callable, List, Optional, Tuple

from common.result import Result

Handler = Callable[[Any, Any], Result]


class Command:
    def __init__(self, name: str, help: str = ""):
        self.name = name
        self.help = help
        self.arguments: List[Tuple[tuple, dict]] = []
        self.func: Optional[Handler] = None

    def argument(self, *flags, **kwargs) -> 'Command':
        self.arguments.append((flags, kwargs))
        return self

    def handler(self, func: Handler) -> Handler:
        self.func = func
        return func

    def register(self, subparsers) -> None:
        if self.func is None:
            raise RuntimeError(f"子命令 {self.name} 未绑定处理函数")
        parser = subparsers.add_parser(self.name, help=self.help)
        for flags, kwargs in self.arguments:
            parser.add_argument(*flags, **kwargs)
        parser.set_defaults(command=self)

    def __call__(self, args, config) -> Result:
        return self.func(args, config)
