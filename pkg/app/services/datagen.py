"""合成数据生成 (RCT / RCT-Noise / RCT-NM / OBS ±IV / MIX ±IV) 与 CSV 读写。

协变量 X ~ N(0, I_d)；处理 T 按倾向分数抽样；Y ~ Bernoulli(μ(x, T))。
测试集始终是无噪声 RCT，并保存真实响应概率矩阵。
"""
import logging
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit, softmax

from app.models import Dataset, ScenarioSpec
from common.errors import ParseError

logger = logging.getLogger(__name__)

SOURCE_RCT = 0
SOURCE_OBS = 1


class ScenarioGenerator:
    """一个种子对应一组固定的结构权重 w0, w1, w2, wp ~ N(0,1)/sqrt(d)"""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec
        self._seeds = np.random.SeedSequence(spec.seed).spawn(3)
        rng = np.random.default_rng(self._seeds[0])
        d = spec.d
        w = rng.standard_normal((4, d)) / np.sqrt(d)
        self.w0, self.w1, self.w2, self.wp = w[0].copy(), w[1].copy(), w[2].copy(), w[3].copy()
        iv = d - 1
        if spec.with_iv:
            # 工具变量只进入倾向分数，不进入结果方程
            self.w0[iv] = self.w1[iv] = self.w2[iv] = 0.0
        else:
            self.wp[iv] = 0.0

    def scaled_arm(self, k) -> np.ndarray:
        return 2.0 * np.asarray(k, dtype=np.float64) / (self.spec.m - 1) - 1.0

    def response_prob(self, x, k) -> np.ndarray:
        """μ(x, t_k) ∈ (0, 1)，x 为单行或 N x d"""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = self.scaled_arm(k)
        spec = self.spec
        if spec.monotone:
            # 单调：每个样本的处理斜率恒为正
            slope = spec.effect_base + spec.effect_gain * expit(spec.effect_sharpness * (x @ self.w1))
            logit = x @ self.w0 + slope * (u + 1.0) - spec.base_offset
        else:
            logit = (x @ self.w0 + spec.nm_wave * (x @ self.w1) * np.sin(np.pi * u)
                     + spec.nm_curve * expit(x @ self.w2) * u * u - spec.nm_offset)
        return expit(logit)

    def truth(self, X) -> np.ndarray:
        return np.column_stack([self.response_prob(X, k) for k in range(self.spec.m)])

    def selection_score(self, X) -> np.ndarray:
        return np.atleast_2d(np.asarray(X, dtype=np.float64)) @ self.wp

    def propensity(self, X, observational: bool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """N x m 的处理分配概率"""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        m = self.spec.m
        if observational:
            score = self.selection_score(X)
            return softmax(self.spec.gamma * score[:, None] * self.spec.coefficients[None, :], axis=1)
        # RCT：在均匀分配附近做 Dirichlet 扰动
        rng = rng if rng is not None else np.random.default_rng(self._seeds[1])
        alpha = np.full(m, self.spec.dirichlet_concentration)
        return rng.dirichlet(alpha, size=X.shape[0])

    def _draw(self, n: int, observational: bool, rng: np.random.Generator) -> Tuple[np.ndarray, ...]:
        X = rng.standard_normal((n, self.spec.d))
        probs = self.propensity(X, observational, rng)
        # 逐行按分配概率抽样
        cum = np.cumsum(probs, axis=1)
        draws = rng.random(n)[:, None]
        T = np.minimum((draws > cum).sum(axis=1), self.spec.m - 1)
        truth = self.truth(X)
        Y = (rng.random(n) < truth[np.arange(n), T]).astype(np.int64)
        return X, T, Y, truth

    def sample_train(self, rng: np.random.Generator) -> Dataset:
        spec = self.spec
        n = spec.n_train
        if spec.kind == "mix":
            n_rct = (n + 1) // 2
            parts = [self._draw(n_rct, False, rng), self._draw(n - n_rct, True, rng)]
            X, T, Y, _ = (np.concatenate(cols) for cols in zip(*parts))
            source = np.concatenate([np.full(n_rct, SOURCE_RCT), np.full(n - n_rct, SOURCE_OBS)])
        else:
            observational = spec.kind == "obs"
            X, T, Y, _ = self._draw(n, observational, rng)
            source = np.full(n, SOURCE_OBS if observational else SOURCE_RCT)
        if spec.kind == "rct_noise" and spec.noise_rate > 0:
            flip = rng.random(n) < spec.noise_rate
            Y = np.where(flip, 1 - Y, Y)
        return Dataset(X=X, T=T, Y=Y, m=spec.m, source=source)

    def sample_test(self, rng: np.random.Generator, n: Optional[int] = None) -> Dataset:
        n = self.spec.n_test if n is None else n
        X, T, Y, truth = self._draw(n, False, rng)
        return Dataset(X=X, T=T, Y=Y, truth=truth, m=self.spec.m,
                       source=np.full(n, SOURCE_RCT))

    def generate(self) -> Tuple[Dataset, Dataset]:
        train_rng = np.random.default_rng(self._seeds[1])
        test_rng = np.random.default_rng(self._seeds[2])
        train = self.sample_train(train_rng)
        test = self.sample_test(test_rng)
        logger.debug("生成场景 %s (iv=%s, seed=%d): train=%d test=%d",
                     self.spec.kind, self.spec.with_iv, self.spec.seed, train.n, test.n)
        return train, test


def response_prob(x, k, spec: ScenarioSpec) -> np.ndarray:
    return ScenarioGenerator(spec).response_prob(x, k)


def propensity(x, spec: ScenarioSpec, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    return ScenarioGenerator(spec).propensity(x, spec.kind == "obs", rng)


def generate(spec: ScenarioSpec) -> Tuple[Dataset, Dataset]:
    return ScenarioGenerator(spec).generate()


def write_csv(dataset: Dataset, path) -> None:
    """列顺序 x0..x{d-1}, t, y[, mu0..mu{m-1}]"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(dataset.X, columns=[f"x{j}" for j in range(dataset.d)])
    frame["t"] = dataset.T
    frame["y"] = dataset.Y
    if dataset.truth is not None:
        for k in range(dataset.truth.shape[1]):
            frame[f"mu{k}"] = dataset.truth[:, k]
    frame.to_csv(path, index=False, float_format="%.17g", encoding="utf-8", lineterminator="\n")


def _first_bad_row(mask: np.ndarray) -> int:
    # 行号从 1 开始，表头为第 1 行，数据从第 2 行开始
    return int(np.flatnonzero(mask)[0]) + 2


def read_csv(path, m: Optional[int] = None) -> Dataset:
    path = Path(path)
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ParseError(f"{path} 为空文件", row=1)

    x_cols = sorted((c for c in frame.columns if c.startswith("x") and c[1:].isdigit()),
                    key=lambda c: int(c[1:]))
    if not x_cols or x_cols != [f"x{j}" for j in range(len(x_cols))]:
        raise ParseError(f"{path} 缺少连续的协变量列 x0..x{{d-1}}", row=1)
    for name in ("t", "y"):
        if name not in frame.columns:
            raise ParseError(f"{path} 缺少列 {name}", row=1)

    X = frame[x_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(X).all(axis=1)
    if bad.any():
        raise ParseError(f"{path} 协变量不是有效数值", row=_first_bad_row(bad))

    t_raw = pd.to_numeric(frame["t"], errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isfinite(t_raw) | (t_raw != np.round(t_raw)) | (t_raw < 0)
    if bad.any():
        raise ParseError(f"{path} 处理列 t 必须为非负整数", row=_first_bad_row(bad))
    T = t_raw.astype(np.int64)
    if m is not None:
        bad = T >= m
        if bad.any():
            raise ParseError(f"{path} 处理编号超出声明的 m={m}", row=_first_bad_row(bad))

    y_raw = pd.to_numeric(frame["y"], errors="coerce").to_numpy(dtype=np.float64)
    bad = ~np.isin(y_raw, (0.0, 1.0))
    if bad.any():
        raise ParseError(f"{path} 结果列 y 必须为 0 或 1", row=_first_bad_row(bad))
    Y = y_raw.astype(np.int64)

    mu_cols = sorted((c for c in frame.columns if c.startswith("mu") and c[2:].isdigit()),
                     key=lambda c: int(c[2:]))
    truth = None
    if mu_cols:
        if mu_cols != [f"mu{k}" for k in range(len(mu_cols))]:
            raise ParseError(f"{path} 真实概率列必须为连续的 mu0..mu{{m-1}}", row=1)
        truth = frame[mu_cols].to_numpy(dtype=np.float64)
        if m is not None and len(mu_cols) != m:
            raise ParseError(f"{path} 真实概率列数 {len(mu_cols)} 与 m={m} 不一致", row=1)
        m = len(mu_cols) if m is None else m
        if T.size and T.max() >= m:
            raise ParseError(f"{path} 处理编号超出真实概率列数", row=_first_bad_row(T >= m))

    if m is None:
        m = int(T.max()) + 1 if T.size else 0
    return Dataset(X=X, T=T, Y=Y, truth=truth, m=m)
