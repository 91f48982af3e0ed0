"""小批量 Adam 训练：按 epoch 打乱、验证集早停、NaN 诊断。"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from app.models import Dataset
from app.services.losses import bce_loss
from app.services.uplift_model import UpliftModel, total_loss
from common.errors import ContractError, NumericalError, TrainingError

logger = logging.getLogger(__name__)


@dataclass
class TrainingHistory:
    epochs: List[Dict[str, float]] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early: bool = False

    def record(self, epoch: int, bce: float, disc: float, total: float,
               val_bce: Optional[float]) -> None:
        self.epochs.append({"epoch": epoch, "bce": bce, "disc": disc, "total": total,
                            "val_bce": val_bce})

    @property
    def final_loss(self) -> Optional[float]:
        return self.epochs[-1]["total"] if self.epochs else None

    def to_dict(self) -> Dict:
        return {"epochs": self.epochs, "best_epoch": self.best_epoch,
                "stopped_early": self.stopped_early}


class TrainingService:
    def __init__(self, epochs: int = 300, batch_size: int = 256, patience: Optional[int] = 30,
                 validation_fraction: float = 0.1):
        if epochs < 0:
            raise ContractError(f"epochs 不能为负: {epochs}")
        if batch_size <= 0:
            raise ContractError(f"batch_size 必须为正: {batch_size}")
        if not 0.0 <= validation_fraction < 1.0:
            raise ContractError(f"validation_fraction 必须在 [0, 1) 内: {validation_fraction}")
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction

    def _split(self, dataset: Dataset, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        n = dataset.n
        n_val = int(round(n * self.validation_fraction))
        # 至少留一批训练数据
        if n_val >= n:
            n_val = 0
        order = rng.permutation(n)
        return np.sort(order[n_val:]), np.sort(order[:n_val])

    @staticmethod
    def _validation_bce(model: UpliftModel, dataset: Dataset, rows: np.ndarray) -> Optional[float]:
        if rows.size == 0:
            return None
        logits = model.forward(dataset.X[rows], dataset.T[rows])
        return bce_loss(expit(logits), dataset.Y[rows])[0]

    def fit(self, model: UpliftModel, dataset: Dataset, seed: int = 0) -> Tuple[UpliftModel, TrainingHistory]:
        if dataset.n == 0:
            raise ContractError("训练集不能为空")
        if dataset.d != model.d:
            raise ContractError(f"训练集维度 {dataset.d} 与模型 d={model.d} 不一致")
        if dataset.T.min() < 0 or dataset.T.max() >= model.m:
            raise ContractError(f"处理编号必须在 [0, {model.m}) 内")

        history = TrainingHistory()
        if self.epochs == 0:
            return model, history

        rng = np.random.default_rng(seed)
        train_rows, val_rows = self._split(dataset, rng)
        use_early_stop = self.patience is not None and val_rows.size > 0
        best_val, best_state, stale = math.inf, None, 0

        for epoch in range(self.epochs):
            order = rng.permutation(train_rows)
            sums = {"bce": 0.0, "disc": 0.0, "total": 0.0}
            batches = 0
            for batch, start in enumerate(range(0, order.size, self.batch_size)):
                rows = order[start:start + self.batch_size]
                try:
                    loss, grads, parts = total_loss(model, dataset.X[rows], dataset.T[rows],
                                                    dataset.Y[rows], rng=rng)
                except NumericalError as e:
                    logger.error("前向计算出现 NaN/Inf: epoch=%d batch=%d", epoch, batch)
                    raise TrainingError(f"第 {epoch} 轮第 {batch} 批前向计算失败: {e}",
                                        epoch=epoch, batch=batch)
                if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                    components = {k: float(v) for k, v in parts.items()}
                    logger.error("训练出现非有限损失: epoch=%d batch=%d %s", epoch, batch, components)
                    raise TrainingError(f"第 {epoch} 轮第 {batch} 批出现 NaN/Inf",
                                        epoch=epoch, batch=batch, components=components)
                model.apply_gradients(grads)
                for key in sums:
                    sums[key] += parts[key]
                batches += 1

            means = {k: v / batches for k, v in sums.items()}
            val_bce = self._validation_bce(model, dataset, val_rows)
            history.record(epoch, means["bce"], means["disc"], means["total"], val_bce)
            logger.debug("epoch %d: bce=%.6f disc=%.6f total=%.6f val_bce=%s",
                         epoch, means["bce"], means["disc"], means["total"], val_bce)

            if not use_early_stop:
                continue
            if val_bce < best_val:
                best_val, best_state, stale = val_bce, model.get_state(), 0
                history.best_epoch = epoch
            else:
                stale += 1
                if stale >= self.patience:
                    history.stopped_early = True
                    logger.info("验证集 BCE 连续 %d 轮未下降，在第 %d 轮早停 (最佳轮次 %d)",
                                self.patience, epoch, history.best_epoch)
                    break

        if best_state is not None:
            model.set_state(best_state)
        return model, history


def train(model: UpliftModel, dataset: Dataset, epochs: int, batch_size: int, seed: int,
          patience: Optional[int] = 30,
          validation_fraction: float = 0.1) -> Tuple[UpliftModel, TrainingHistory]:
    service = TrainingService(epochs=epochs, batch_size=batch_size, patience=patience,
                              validation_fraction=validation_fraction)
    return service.fit(model, dataset, seed=seed)
