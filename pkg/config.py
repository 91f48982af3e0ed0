import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    # 输出与日志
    OUTPUT_DIR = os.getenv('UPLIFT_OUTPUT_DIR', 'output')
    LOG_LEVEL = os.getenv('UPLIFT_LOG_LEVEL', 'INFO')

    # bench 并行 worker 数
    BENCH_WORKERS = int(os.getenv('UPLIFT_BENCH_WORKERS', '1'))
    BENCH_SEEDS = int(os.getenv('BENCH_SEEDS', '5'))

    # 训练配置
    LEARNING_RATE = float(os.getenv('LEARNING_RATE', '1e-4'))
    BATCH_SIZE = int(os.getenv('BATCH_SIZE', '256'))
    EPOCHS = int(os.getenv('EPOCHS', '300'))
    PATIENCE = int(os.getenv('PATIENCE', '30'))
    VALIDATION_FRACTION = float(os.getenv('VALIDATION_FRACTION', '0.1'))

    # 损失权重
    LAMBDA1 = float(os.getenv('LAMBDA1', '1.0'))
    LAMBDA2 = float(os.getenv('LAMBDA2', '0.1'))

    # 参数预算
    PARAM_BUDGET = int(os.getenv('PARAM_BUDGET', '90000'))
    REAL_PARAM_BUDGET = int(os.getenv('REAL_PARAM_BUDGET', '150000'))
