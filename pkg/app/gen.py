import json
import logging
from pathlib import Path

from app.command import Command
from app.models import SCENARIO_KINDS, ScenarioSpec
from app.services.datagen import ScenarioGenerator, write_csv
from common.errors import UpliftError
from common.result import Result

logger = logging.getLogger(__name__)

bp = Command('gen', help='生成合成数据集 (train.csv / test.csv / scenario.json)')
bp.argument('--kind', choices=SCENARIO_KINDS, default='rct')
bp.argument('--with-iv', action='store_true', help='x{d-1} 作为工具变量，只影响处理分配')
bp.argument('--seed', type=int, default=0)
bp.argument('--n-train', type=int, default=10000)
bp.argument('--n-test', type=int, default=10000)
bp.argument('--d', type=int, default=8)
bp.argument('--m', type=int, default=5)
bp.argument('--noise-rate', type=float, default=0.1)
bp.argument('--out', default=None, help='输出目录，默认 {OUTPUT_DIR}/data/{kind}_seed{seed}')


@bp.handler
def generate(args, config):
    """生成数据集并写入 CSV 与场景描述"""
    try:
        spec = ScenarioSpec(kind=args.kind, with_iv=args.with_iv, n_train=args.n_train,
                            n_test=args.n_test, d=args.d, m=args.m,
                            noise_rate=args.noise_rate, seed=args.seed)
        out = Path(args.out or Path(config.OUTPUT_DIR) / 'data' / f'{args.kind}_seed{args.seed}')
        train, test = ScenarioGenerator(spec).generate()

        write_csv(train, out / 'train.csv')
        write_csv(test, out / 'test.csv')
        (out / 'scenario.json').write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True),
                                           encoding='utf-8')
        logger.info("数据集已写入 %s", out)

        return Result.success(data={
            'out': str(out),
            'train_rows': train.n,
            'test_rows': test.n,
            'scenario': spec.to_dict()
        })
    except UpliftError as e:
        return Result.from_exception(e)
    except OSError as e:
        logger.error("写入数据集失败: %s", e)
        return Result.from_exception(e)
