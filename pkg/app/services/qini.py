"""Qini 曲线、Qini 分数以及多处理的 mQini。

曲线：按预测 uplift 降序排序，前缀 k 上 v(k) = Y_T(k) − Y_C(k)·N_T(k)/N_C(k)，
N_C(k) = 0 时 v(k) = Y_T(k)。
分数：曲线与随机排序对角线之间的面积，
    score = N'/(N_T·N_C) · (1/N') Σ_k [v(k) − (k/N')·v(N')]
其中 N_T、N_C 为子总体里处理组和对照组的样本数，使分数与总体规模无关。
"""
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.models import ArmQini, Dataset, QiniReport
from common.errors import MetricError, ShapeError

logger = logging.getLogger(__name__)

TIE_MODES = ("stable", "random")


def qini_curve(uplift_scores, y, is_treated, ties: str = "stable",
               seed: Optional[int] = None) -> List[Tuple[float, float]]:
    """返回 [(k/N', v(k)) for k = 0..N']，首点为 (0, 0)"""
    scores = np.asarray(uplift_scores, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    treated = np.asarray(is_treated, dtype=bool).reshape(-1)
    if not (scores.shape == y.shape == treated.shape):
        raise ShapeError("uplift 分数、标签与处理标记长度不一致")
    n = scores.shape[0]
    if not treated.any() or treated.all():
        raise MetricError("子总体中必须同时包含处理组和对照组")
    if ties not in TIE_MODES:
        raise MetricError(f"未知的并列处理方式: {ties}")

    if ties == "random":
        perm = np.random.default_rng(seed).permutation(n)
        order = perm[np.argsort(-scores[perm], kind="stable")]
    else:
        order = np.argsort(-scores, kind="stable")

    y_sorted = y[order]
    t_sorted = treated[order]
    n_t = np.cumsum(t_sorted)
    n_c = np.cumsum(~t_sorted)
    y_t = np.cumsum(y_sorted * t_sorted)
    y_c = np.cumsum(y_sorted * ~t_sorted)
    with np.errstate(divide="ignore", invalid="ignore"):
        correction = np.where(n_c > 0, y_c * n_t / np.where(n_c > 0, n_c, 1), 0.0)
    values = y_t - correction

    fractions = np.arange(1, n + 1) / n
    return [(0.0, 0.0)] + list(zip(fractions.tolist(), values.tolist()))


def qini_score(curve: Sequence[Tuple[float, float]], n_treated: Optional[int] = None,
               n_control: Optional[int] = None) -> float:
    """曲线减去对角线后的面积；给出 N_T / N_C 时按 N'/(N_T·N_C) 归一化"""
    if not curve:
        raise MetricError("Qini 曲线为空")
    points = np.asarray(curve, dtype=np.float64)
    # 去掉 k = 0 的起点，它对求和没有贡献
    if points[0, 0] == 0.0:
        points = points[1:]
    if points.shape[0] == 0:
        raise MetricError("Qini 曲线为空")
    n = points.shape[0]
    values = points[:, 1]
    area = float(np.sum(values - points[:, 0] * values[-1]) / n)
    if n_treated is None or n_control is None:
        return area
    return area * n / (n_treated * n_control)


def arm_qini(uplift_scores, y, is_treated, ties: str = "stable",
             seed: Optional[int] = None) -> Tuple[List[Tuple[float, float]], float]:
    treated = np.asarray(is_treated, dtype=bool)
    curve = qini_curve(uplift_scores, y, treated, ties=ties, seed=seed)
    score = qini_score(curve, n_treated=int(treated.sum()), n_control=int((~treated).sum()))
    return curve, score


def mqini_from_probs(probs, test: Dataset, control: int = 0, ties: str = "stable",
                     seed: Optional[int] = None) -> QiniReport:
    """probs 为 N x m 的响应概率（模型预测或真实值），逐处理与对照比较"""
    probs = np.asarray(probs, dtype=np.float64)
    m = probs.shape[1]
    if probs.shape[0] != test.n:
        raise ShapeError(f"预测行数 {probs.shape[0]} 与测试集 {test.n} 不一致")
    present = set(np.unique(test.T).tolist())
    for arm in range(m):
        if arm not in present:
            raise MetricError(f"测试集缺少处理 {arm}", arm=arm)

    arms = []
    for arm in range(m):
        if arm == control:
            continue
        rows = np.flatnonzero((test.T == arm) | (test.T == control))
        uplift = probs[rows, arm] - probs[rows, control]
        curve, score = arm_qini(uplift, test.Y[rows], test.T[rows] == arm, ties=ties, seed=seed)
        arms.append(ArmQini(arm=arm, curve=curve, qini=score))
    mqini = float(np.mean([a.qini for a in arms]))
    return QiniReport(arms=arms, mqini=mqini, control=control)


def mqini(model, test: Dataset, control: int = 0, ties: str = "stable",
          seed: Optional[int] = None) -> QiniReport:
    if model.m != test.m or model.d != test.d:
        raise ShapeError(f"模型 (d={model.d}, m={model.m}) 与测试集 (d={test.d}, m={test.m}) 不匹配")
    return mqini_from_probs(model.predict_all(test.X), test, control=control, ties=ties, seed=seed)


def oracle_report(test: Dataset, control: int = 0) -> QiniReport:
    """用真实响应概率打分的上界"""
    if test.truth is None:
        raise MetricError("测试集没有真实概率列，无法计算 oracle")
    return mqini_from_probs(test.truth, test, control=control)


def shuffled_report(probs, test: Dataset, seed: int, control: int = 0) -> QiniReport:
    """在样本间打乱预测，作为零模型基线"""
    probs = np.asarray(probs, dtype=np.float64)
    perm = np.random.default_rng(seed).permutation(probs.shape[0])
    return mqini_from_probs(probs[perm], test, control=control)


def write_report(report: QiniReport, out_dir) -> Path:
    """输出 report.json 以及每个处理一份 curve_arm{k}.csv (fraction,value)"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for arm in report.arms:
        pd.DataFrame(arm.curve, columns=["fraction", "value"]).to_csv(
            out_dir / f"curve_arm{arm.arm}.csv", index=False, float_format="%.12g", lineterminator="\n")
    path = out_dir / "report.json"
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
    return path
