import logging
from pathlib import Path

from app.command import Command
from app.services.datagen import read_csv
from app.services.qini import TIE_MODES, mqini, oracle_report, shuffled_report, write_report
from app.services.uplift_model import UpliftModel
from common.errors import ConfigError, UpliftError
from common.result import Result

logger = logging.getLogger(__name__)

bp = Command('eval', help='在测试集上计算 Qini 曲线与 mQini')
bp.argument('--model', default=None, help='model.json 路径或其所在目录')
bp.argument('--test', required=True, help='test.csv 路径，或包含 test.csv 的目录')
bp.argument('--use-truth', action='store_true', help='用真实响应概率打分 (oracle)')
bp.argument('--shuffle-scores', action='store_true', help='在样本间打乱预测 (零模型)')
bp.argument('--ties', choices=TIE_MODES, default='stable')
bp.argument('--seed', type=int, default=0, help='打乱预测 / 随机并列时的种子')
bp.argument('--out', default=None, help='输出目录，默认 {OUTPUT_DIR}/eval')


@bp.handler
def evaluate(args, config):
    """输出 report.json 与 curve_arm{k}.csv"""
    try:
        test_path = Path(args.test)
        if test_path.is_dir():
            test_path = test_path / 'test.csv'
        if not test_path.exists():
            return Result.bad_request(message=f"测试集不存在: {test_path}")

        if args.use_truth:
            test = read_csv(test_path)
            report = oracle_report(test)
            scorer = 'truth'
        else:
            if not args.model:
                return Result.bad_request(message="未指定 --model 时必须使用 --use-truth")
            model_path = Path(args.model)
            if model_path.is_dir():
                model_path = model_path / 'model.json'
            model = UpliftModel.load(model_path)
            test = read_csv(test_path, m=model.m)
            if test.d != model.d:
                raise ConfigError(f"测试集维度 d={test.d} 与模型 d={model.d} 不一致")
            if args.shuffle_scores:
                report = shuffled_report(model.predict_all(test.X), test, seed=args.seed)
                scorer = 'shuffled'
            else:
                report = mqini(model, test, ties=args.ties, seed=args.seed)
                scorer = 'model'

        out = Path(args.out or Path(config.OUTPUT_DIR) / 'eval')
        report_path = write_report(report, out)
        logger.info("mQini=%.4f (%s), 报告写入 %s", report.mqini, scorer, report_path)

        return Result.success(data={
            'scorer': scorer,
            'report': str(report_path),
            **report.to_dict()
        })
    except UpliftError as e:
        return Result.from_exception(e)
    except OSError as e:
        logger.error("评估读写失败: %s", e)
        return Result.from_exception(e)
