"""损失函数：BCE、RBF-MMD、一维 Wasserstein 以及多处理组间的分布差异。

每个函数都同时返回损失值和解析梯度。
"""
import itertools
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.distance import cdist, pdist

from common.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

PROB_CLIP = 1e-7
DISC_KINDS = ("none", "mmd", "wass")
PAIRINGS = ("all_pairs", "control_vs_each")


def bce_loss(probs, y) -> Tuple[float, np.ndarray]:
    """平均负对数似然，返回 (loss, 对 logit 的梯度 (p - y) / N)"""
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if probs.shape != y.shape:
        raise ShapeError(f"概率长度 {probs.shape[0]} 与标签长度 {y.shape[0]} 不一致")
    n = probs.shape[0]
    if n == 0:
        raise ContractError("BCE 需要非空批次")
    clipped = np.clip(probs, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = -np.mean(y * np.log(clipped) + (1.0 - y) * np.log1p(-clipped))
    return float(loss), (probs - y) / n


def _median_bandwidth(pooled: np.ndarray) -> Tuple[float, List[Tuple[int, int, float]]]:
    """合并样本两两距离的中位数，同时返回中位数所在的样本对及权重（用于求导）"""
    dists = pdist(pooled)
    order = np.argsort(dists, kind="stable")
    count = dists.shape[0]
    if count % 2 == 1:
        picks = [(order[count // 2], 1.0)]
    else:
        picks = [(order[count // 2 - 1], 0.5), (order[count // 2], 0.5)]
    bandwidth = float(sum(dists[i] * w for i, w in picks))
    if bandwidth <= 0.0:
        return 1.0, []
    n = pooled.shape[0]
    rows, cols = np.triu_indices(n, k=1)
    pairs = [(int(rows[i]), int(cols[i]), w) for i, w in picks if dists[i] > 0.0]
    return bandwidth, pairs


def mmd_rbf(A, B, unbiased: bool = True,
            bandwidth: Optional[float] = None) -> Tuple[float, np.ndarray, np.ndarray]:
    """RBF 核的平方 MMD，带宽默认取合并样本的中位数距离。

    梯度同时穿过核函数和中位数带宽（中位数对应的那一对样本）。
    返回 (mmd², dA, dB)。
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n, k = A.shape[0], B.shape[0]
    if n < 2 or k < 2:
        raise ContractError(f"MMD 每组至少需要 2 个样本, 实际 {n} 与 {k}")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"两组特征维度不一致: {A.shape[1]} vs {B.shape[1]}")

    if bandwidth is None:
        sigma, median_pairs = _median_bandwidth(np.vstack([A, B]))
    else:
        sigma, median_pairs = float(bandwidth), []
    s2 = sigma * sigma

    d_aa = cdist(A, A, "sqeuclidean")
    d_bb = cdist(B, B, "sqeuclidean")
    d_ab = cdist(A, B, "sqeuclidean")
    k_aa = np.exp(-d_aa / (2.0 * s2))
    k_bb = np.exp(-d_bb / (2.0 * s2))
    k_ab = np.exp(-d_ab / (2.0 * s2))

    if unbiased:
        np.fill_diagonal(k_aa, 0.0)
        np.fill_diagonal(k_bb, 0.0)
        c_aa = 1.0 / (n * (n - 1))
        c_bb = 1.0 / (k * (k - 1))
    else:
        c_aa = 1.0 / (n * n)
        c_bb = 1.0 / (k * k)
    c_ab = -2.0 / (n * k)

    value = c_aa * k_aa.sum() + c_bb * k_bb.sum() + c_ab * k_ab.sum()

    # d k(x, y) / d x = -k (x - y) / sigma²
    dA = -(2.0 * c_aa / s2) * (k_aa.sum(axis=1)[:, None] * A - k_aa @ A)
    dA -= (c_ab / s2) * (k_ab.sum(axis=1)[:, None] * A - k_ab @ B)
    dB = -(2.0 * c_bb / s2) * (k_bb.sum(axis=1)[:, None] * B - k_bb @ B)
    dB -= (c_ab / s2) * (k_ab.sum(axis=0)[:, None] * B - k_ab.T @ A)

    if median_pairs:
        # d k / d sigma = k * D² / sigma³
        dsigma = (c_aa * np.sum(k_aa * d_aa) + c_bb * np.sum(k_bb * d_bb)
                  + c_ab * np.sum(k_ab * d_ab)) / (s2 * sigma)
        pooled = np.vstack([A, B])
        dpooled = np.zeros_like(pooled)
        for i, j, w in median_pairs:
            diff = pooled[i] - pooled[j]
            direction = w * diff / np.linalg.norm(diff)
            dpooled[i] += dsigma * direction
            dpooled[j] -= dsigma * direction
        dA += dpooled[:n]
        dB += dpooled[n:]

    return float(value), dA, dB


def wasserstein_1d(A, B) -> Tuple[float, np.ndarray, np.ndarray]:
    """逐维一维 W1 距离的平均：mean |sort(A_d) - sort(B_d)|，梯度沿排序匹配回传"""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape[0] != B.shape[0]:
        raise ContractError(f"Wasserstein 要求两组样本数相同, 实际 {A.shape[0]} 与 {B.shape[0]}")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"两组特征维度不一致: {A.shape[1]} vs {B.shape[1]}")
    n, h = A.shape
    if n == 0:
        raise ContractError("Wasserstein 需要非空样本")
    order_a = np.argsort(A, axis=0, kind="stable")
    order_b = np.argsort(B, axis=0, kind="stable")
    diff = np.take_along_axis(A, order_a, axis=0) - np.take_along_axis(B, order_b, axis=0)
    value = float(np.abs(diff).sum() / (n * h))
    sign = np.sign(diff) / (n * h)
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    np.put_along_axis(dA, order_a, sign, axis=0)
    np.put_along_axis(dB, order_b, -sign, axis=0)
    return value, dA, dB


def _pair_disc(kind: str, A: np.ndarray, B: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    if kind == "mmd":
        return mmd_rbf(A, B)
    if kind == "wass":
        return wasserstein_1d(A, B)
    raise ContractError(f"未知的分布差异类型: {kind}")


def discrepancy_multi(phi, t, kind: str, pairing: str = "all_pairs", control: int = 0,
                      rng: Optional[np.random.Generator] = None) -> Tuple[float, np.ndarray, Dict]:
    """按观测处理分组后，组间差异在所有组对上的平均。

    样本数 < 2 的组被跳过；Wasserstein 需要等长样本，较大的组被重采样到较小组的大小
    (rng 为 None 时取前若干行)。返回 (值, dphi, 信息)。
    """
    phi = np.asarray(phi, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if phi.shape[0] != t.shape[0]:
        raise ShapeError(f"隐特征行数 {phi.shape[0]} 与处理向量长度 {t.shape[0]} 不一致")
    if pairing not in PAIRINGS:
        raise ContractError(f"未知的分组配对方式: {pairing}")
    dphi = np.zeros_like(phi)
    if kind == "none":
        return 0.0, dphi, {"pairs": 0}

    groups = {int(arm): np.flatnonzero(t == arm) for arm in np.unique(t)}
    usable = sorted(arm for arm, rows in groups.items() if rows.size >= 2)
    if len(usable) < 2:
        logger.warning("可用的处理组少于 2 个 (%s)，分布差异损失记为 0", usable)
        return 0.0, dphi, {"pairs": 0}

    if pairing == "all_pairs":
        pairs = list(itertools.combinations(usable, 2))
    else:
        if control not in usable:
            logger.warning("对照组 %d 在本批次中不可用，分布差异损失记为 0", control)
            return 0.0, dphi, {"pairs": 0}
        pairs = [(control, arm) for arm in usable if arm != control]

    total = 0.0
    for p, q in pairs:
        rows_p, rows_q = groups[p], groups[q]
        if kind == "wass" and rows_p.size != rows_q.size:
            size = min(rows_p.size, rows_q.size)
            if rng is not None:
                rows_p = np.sort(rng.choice(rows_p, size=size, replace=False))
                rows_q = np.sort(rng.choice(rows_q, size=size, replace=False))
            else:
                rows_p, rows_q = rows_p[:size], rows_q[:size]
        value, d_p, d_q = _pair_disc(kind, phi[rows_p], phi[rows_q])
        total += value
        dphi[rows_p] += d_p
        dphi[rows_q] += d_q

    scale = 1.0 / len(pairs)
    return total * scale, dphi * scale, {"pairs": len(pairs)}
