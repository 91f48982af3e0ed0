import json
import logging
from pathlib import Path

from app.command import Command
from app.models import ExperimentConfig
from app.services.bench_service import PRESETS, SCALES, BenchService
from common.errors import ConfigError, UpliftError
from common.result import Result

logger = logging.getLogger(__name__)

bp = Command('bench', help='运行 (场景 x 模型 x 种子) 实验矩阵并汇总 mQini 表格')
bp.argument('--config', default=None, help='JSON 实验配置文件，命令行参数优先')
bp.argument('--preset', choices=sorted(PRESETS), default=None)
bp.argument('--scenarios', nargs='+', default=None)
bp.argument('--models', nargs='+', default=None, help='形如 drcfr+ofa+mmd')
bp.argument('--seeds', type=int, default=None, help='种子个数，使用 0..N-1')
bp.argument('--epochs', type=int, default=None)
bp.argument('--batch', type=int, default=None)
bp.argument('--lr', type=float, default=None)
bp.argument('--lambda2', type=float, nargs='+', default=None, help='λ2 网格')
bp.argument('--degree', type=int, default=None)
bp.argument('--n-train', type=int, default=None)
bp.argument('--n-test', type=int, default=None)
bp.argument('--scale', choices=SCALES, default='synthetic', help='real 时使用 REAL_PARAM_BUDGET')
bp.argument('--workers', type=int, default=None, help='默认 UPLIFT_BENCH_WORKERS')
bp.argument('--out', default=None, help='输出目录，默认 {OUTPUT_DIR}/bench')


def build_config(args, config) -> ExperimentConfig:
    """Config 默认值 < JSON 配置文件 < 命令行参数"""
    payload = {
        'seeds': list(range(config.BENCH_SEEDS)),
        'epochs': config.EPOCHS,
        'batch_size': config.BATCH_SIZE,
        'learning_rate': config.LEARNING_RATE,
        'lambda1': config.LAMBDA1,
        'lambda2_grid': [config.LAMBDA2],
        'patience': config.PATIENCE,
        'validation_fraction': config.VALIDATION_FRACTION,
        'param_budget': config.PARAM_BUDGET,
        'out_dir': str(Path(config.OUTPUT_DIR) / 'bench'),
        'workers': config.BENCH_WORKERS,
    }
    if args.preset:
        payload.update(PRESETS[args.preset])
    if args.config:
        try:
            payload.update(json.loads(Path(args.config).read_text(encoding='utf-8')))
        except json.JSONDecodeError as e:
            raise ConfigError(f"实验配置不是合法 JSON: {e}")

    if args.scale == 'real':
        payload['param_budget'] = config.REAL_PARAM_BUDGET
    flags = {
        'scenarios': args.scenarios,
        'models': args.models,
        'seeds': None if args.seeds is None else list(range(args.seeds)),
        'epochs': args.epochs,
        'batch_size': args.batch,
        'learning_rate': args.lr,
        'lambda2_grid': args.lambda2,
        'ofa_degree': args.degree,
        'n_train': args.n_train,
        'n_test': args.n_test,
        'workers': args.workers,
        'out_dir': args.out,
    }
    payload.update({k: v for k, v in flags.items() if v is not None})
    return ExperimentConfig.from_dict(payload)


@bp.handler
def bench(args, config):
    """运行实验矩阵，输出 table.md / table.csv / summary.json"""
    try:
        experiment = build_config(args, config)
        summary = BenchService(experiment).run()
        if summary['failed']:
            logger.warning("有 %d 个运行失败，表格中已标记", summary['failed'])
        return Result.success(data=summary)
    except UpliftError as e:
        return Result.from_exception(e)
    except OSError as e:
        logger.error("实验读写失败: %s", e)
        return Result.from_exception(e)
