import argparse
import logging
from typing import List, Optional

from config import Config
from common.result import Result

logger = logging.getLogger(__name__)


class App:
    """命令行应用：持有配置与已注册的子命令"""

    def __init__(self, config):
        self.config = config
        self.parser = argparse.ArgumentParser(
            prog='uplift', description='多处理 uplift 建模：数据生成、训练、评估与实验矩阵')
        self.subparsers = self.parser.add_subparsers(dest='command_name')
        self.commands = {}

    def register_command(self, command) -> None:
        command.register(self.subparsers)
        self.commands[command.name] = command

    def dispatch(self, argv: Optional[List[str]] = None) -> Result:
        args = self.parser.parse_args(argv)
        if getattr(args, 'command', None) is None:
            return Result.bad_request(message=f"请指定子命令: {', '.join(sorted(self.commands))}")
        try:
            return args.command(args, self.config)
        except Exception as e:
            logger.exception("子命令 %s 执行失败", args.command_name)
            return Result.from_exception(e)

    def run(self, argv: Optional[List[str]] = None) -> int:
        result = self.dispatch(argv)
        print(result.to_json())
        return result.exit_code


def create_app(config_class=Config) -> App:
    app = App(config_class)

    logging.basicConfig(
        level=getattr(logging, str(config_class.LOG_LEVEL).upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s'
    )

    # 注册子命令
    from app.gen import bp as gen_bp
    app.register_command(gen_bp)

    from app.train import bp as train_bp
    app.register_command(train_bp)

    from app.evaluate import bp as eval_bp
    app.register_command(eval_bp)

    from app.bench import bp as bench_bp
    app.register_command(bench_bp)

    return app
