import json
import logging
import time
from pathlib import Path

from app.command import Command
from app.models import BACKBONES, ModelSpec
from app.services.datagen import read_csv
from app.services.heads import HEAD_KINDS
from app.services.losses import DISC_KINDS, PAIRINGS
from app.services.training_service import TrainingService
from app.services.uplift_model import build_model
from common.errors import UpliftError
from common.result import Result

logger = logging.getLogger(__name__)

bp = Command('train', help='在 CSV 数据集上训练一个 uplift 模型')
bp.argument('--data', required=True, help='train.csv 路径，或包含 train.csv 的目录')
bp.argument('--backbone', choices=BACKBONES, default='tarnet_cfrnet')
bp.argument('--head', choices=HEAD_KINDS, default='sa')
bp.argument('--disc', choices=DISC_KINDS, default='none')
bp.argument('--lambda2', type=float, default=None)
bp.argument('--degree', type=int, default=None, help='OFA 多项式阶数，默认 m-1')
bp.argument('--pairing', choices=PAIRINGS, default='all_pairs')
bp.argument('--epochs', type=int, default=None)
bp.argument('--batch', type=int, default=None)
bp.argument('--lr', type=float, default=None)
bp.argument('--budget', type=int, default=None, help='参数预算，默认 PARAM_BUDGET')
bp.argument('--m', type=int, default=None, help='处理数，默认读取 scenario.json 或从数据推断')
bp.argument('--seed', type=int, default=0)
bp.argument('--out', default=None, help='输出目录，默认 {OUTPUT_DIR}/models/{backbone}+{head}+{disc}_seed{seed}')


def _resolve_data(path: Path):
    """返回 (train.csv 路径, 场景描述 or None)"""
    if path.is_dir():
        path = path / 'train.csv'
    sidecar = path.parent / 'scenario.json'
    scenario = json.loads(sidecar.read_text(encoding='utf-8')) if sidecar.exists() else None
    return path, scenario


@bp.handler
def train_model(args, config):
    """训练模型，输出 model.json 与 history.json"""
    try:
        data_path, scenario = _resolve_data(Path(args.data))
        if not data_path.exists():
            return Result.bad_request(message=f"数据文件不存在: {data_path}")
        m = args.m or (scenario or {}).get('m')
        dataset = read_csv(data_path, m=m)

        spec = ModelSpec(backbone=args.backbone, head=args.head, disc=args.disc,
                         lambda1=config.LAMBDA1,
                         lambda2=config.LAMBDA2 if args.lambda2 is None else args.lambda2,
                         ofa_degree=args.degree, pairing=args.pairing,
                         learning_rate=args.lr or config.LEARNING_RATE,
                         param_budget=args.budget or config.PARAM_BUDGET,
                         seed=args.seed)
        model = build_model(spec, dataset.d, dataset.m)
        trainer = TrainingService(epochs=config.EPOCHS if args.epochs is None else args.epochs,
                                  batch_size=args.batch or config.BATCH_SIZE,
                                  patience=config.PATIENCE,
                                  validation_fraction=config.VALIDATION_FRACTION)

        started = time.perf_counter()
        model, history = trainer.fit(model, dataset, seed=args.seed)
        elapsed = time.perf_counter() - started

        out = Path(args.out or Path(config.OUTPUT_DIR) / 'models' / f'{spec.key}_seed{args.seed}')
        out.mkdir(parents=True, exist_ok=True)
        model.save(out / 'model.json')
        (out / 'history.json').write_text(json.dumps({
            **history.to_dict(),
            'wall_clock_seconds': round(elapsed, 3),
        }, indent=2, sort_keys=True), encoding='utf-8')
        logger.info("模型 %s 训练完成: %d 轮, 用时 %.1fs", spec.key, len(history.epochs), elapsed)

        return Result.success(data={
            'model': str(out / 'model.json'),
            'history': str(out / 'history.json'),
            'param_count': model.param_count,
            'epochs_run': len(history.epochs),
            'final_loss': history.final_loss,
            'wall_clock_seconds': round(elapsed, 3)
        })
    except UpliftError as e:
        return Result.from_exception(e)
    except OSError as e:
        logger.error("训练读写失败: %s", e)
        return Result.from_exception(e)
