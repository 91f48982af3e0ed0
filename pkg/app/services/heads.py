"""多处理 (multi-treatment) 适配头：FA / SA / OFA，以及 Legendre 多项式求值。

三种头共享同一接口：
    forward(phi, t) -> (logits[N], cache)
    backward(cache, dlogits) -> (参数梯度, dphi)
    logits_all(phi) -> N x m
因此在 (N, d, m) 固定时可以互相替换。
"""
import abc
import logging
from typing import List, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.services.losses import PROB_CLIP
from app.services.numkit import DenseNet, as_seed_sequence, dense_param_count
from common.errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

HEAD_KINDS = ("fa", "sa", "ofa")


def treatment_to_scalar(index, m: int):
    """处理编号映射到 [-1, 1] 上的等距网格，0 -> -1，m-1 -> +1"""
    if m < 2:
        raise ContractError(f"处理数 m 至少为 2, 实际 {m}")
    idx = np.asarray(index)
    if np.any(idx < 0) or np.any(idx >= m):
        raise ContractError(f"处理编号超出范围 [0, {m - 1}]: {index}")
    scaled = 2.0 * idx.astype(np.float64) / (m - 1) - 1.0
    return float(scaled) if scaled.ndim == 0 else scaled


def legendre_eval(p: int, t):
    """返回 [P0(t), ..., Pp(t)]，标量 t 得到长度 p+1 的向量，数组 t 得到 (..., p+1)"""
    if p < 0:
        raise ContractError(f"多项式阶数必须非负: {p}")
    t = np.asarray(t, dtype=np.float64)
    out = np.empty(t.shape + (p + 1,), dtype=np.float64)
    out[..., 0] = 1.0
    if p >= 1:
        out[..., 1] = t
    # (k+1) P_{k+1} = (2k+1) t P_k - k P_{k-1}
    for k in range(1, p):
        out[..., k + 1] = ((2 * k + 1) * t * out[..., k] - k * out[..., k - 1]) / (k + 1)
    return out


def one_hot(t, m: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= m):
        raise ContractError(f"处理编号超出范围 [0, {m - 1}]")
    out = np.zeros((t.shape[0], m), dtype=np.float64)
    out[np.arange(t.shape[0]), t] = 1.0
    return out


def _check_rows(phi: np.ndarray, t: np.ndarray, width: int) -> Tuple[np.ndarray, np.ndarray]:
    phi = np.asarray(phi, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if phi.ndim != 2 or phi.shape[1] != width:
        raise ShapeError(f"隐特征形状 {phi.shape} 与头的输入宽度 {width} 不匹配")
    if phi.shape[0] != t.shape[0]:
        raise ShapeError(f"隐特征行数 {phi.shape[0]} 与处理向量长度 {t.shape[0]} 不一致")
    return phi, t


class TreatmentHead(abc.ABC):
    kind = ""

    def __init__(self, hidden_dim: int, m: int):
        if m < 2:
            raise ContractError(f"处理数 m 至少为 2, 实际 {m}")
        self.hidden_dim = hidden_dim
        self.m = m

    @property
    @abc.abstractmethod
    def nets(self) -> List[DenseNet]:
        ...

    def parameters(self) -> List[np.ndarray]:
        params = []
        for net in self.nets:
            params.extend(net.parameters())
        return params

    @property
    def param_count(self) -> int:
        return sum(net.param_count for net in self.nets)

    def mark_updated(self) -> None:
        for net in self.nets:
            net.mark_updated()

    @abc.abstractmethod
    def forward(self, phi, t) -> Tuple[np.ndarray, object]:
        ...

    @abc.abstractmethod
    def backward(self, cache, dlogits) -> Tuple[List[np.ndarray], np.ndarray]:
        ...

    @abc.abstractmethod
    def logits_all(self, phi) -> np.ndarray:
        ...

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hidden_dim": self.hidden_dim, "m": self.m,
                "nets": [net.to_dict() for net in self.nets]}


class FeatureAdaptationHead(TreatmentHead):
    """g(concat(phi, onehot(t)))"""
    kind = "fa"

    def __init__(self, hidden_dim: int, m: int, net: DenseNet):
        super().__init__(hidden_dim, m)
        if net.input_dim != hidden_dim + m or net.output_dim != 1:
            raise ShapeError(f"FA 网络尺寸应为 {hidden_dim + m} -> 1, 实际 {net.input_dim} -> {net.output_dim}")
        self.net = net

    @classmethod
    def build(cls, hidden_dim: int, m: int, widths: Sequence[int], seed=None,
              activation: str = "elu") -> 'FeatureAdaptationHead':
        net = DenseNet.build([hidden_dim + m, *widths, 1], seed=seed, hidden_activation=activation)
        return cls(hidden_dim, m, net)

    @staticmethod
    def count_params(hidden_dim: int, m: int, widths: Sequence[int]) -> int:
        return dense_param_count([hidden_dim + m, *widths, 1])

    @property
    def nets(self) -> List[DenseNet]:
        return [self.net]

    def forward(self, phi, t):
        phi, t = _check_rows(phi, t, self.hidden_dim)
        out, tape = self.net.forward(np.hstack([phi, one_hot(t, self.m)]))
        return out[:, 0], tape

    def backward(self, cache, dlogits):
        grads, dinput = self.net.backward(cache, np.asarray(dlogits, dtype=np.float64).reshape(-1, 1))
        return grads, dinput[:, :self.hidden_dim]

    def logits_all(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        n = phi.shape[0]
        cols = [self.forward(phi, np.full(n, k))[0] for k in range(self.m)]
        return np.column_stack(cols)


class StructureAdaptationHead(TreatmentHead):
    """每个处理一个分支 g_k(phi)，样本只走自己观测到的分支"""
    kind = "sa"

    def __init__(self, hidden_dim: int, m: int, branches: List[DenseNet]):
        super().__init__(hidden_dim, m)
        if len(branches) != m:
            raise ShapeError(f"SA 需要 {m} 个分支, 实际 {len(branches)}")
        for net in branches:
            if net.input_dim != hidden_dim or net.output_dim != 1:
                raise ShapeError(f"SA 分支尺寸应为 {hidden_dim} -> 1")
        self.branches = branches

    @classmethod
    def build(cls, hidden_dim: int, m: int, widths: Sequence[int], seed=None,
              activation: str = "elu") -> 'StructureAdaptationHead':
        seeds = as_seed_sequence(seed).spawn(m)
        branches = [DenseNet.build([hidden_dim, *widths, 1], seed=s, hidden_activation=activation)
                    for s in seeds]
        return cls(hidden_dim, m, branches)

    @staticmethod
    def count_params(hidden_dim: int, m: int, widths: Sequence[int]) -> int:
        return m * dense_param_count([hidden_dim, *widths, 1])

    @property
    def nets(self) -> List[DenseNet]:
        return self.branches

    def forward(self, phi, t):
        phi, t = _check_rows(phi, t, self.hidden_dim)
        logits = np.zeros(phi.shape[0], dtype=np.float64)
        cache = []
        for k, branch in enumerate(self.branches):
            rows = np.flatnonzero(t == k)
            if rows.size == 0:
                cache.append((rows, None))
                continue
            out, tape = branch.forward(phi[rows])
            logits[rows] = out[:, 0]
            cache.append((rows, tape))
        return logits, (phi.shape[0], cache)

    def backward(self, cache, dlogits):
        n, per_branch = cache
        dlogits = np.asarray(dlogits, dtype=np.float64).reshape(-1)
        dphi = np.zeros((n, self.hidden_dim), dtype=np.float64)
        grads: List[np.ndarray] = []
        for branch, (rows, tape) in zip(self.branches, per_branch):
            if tape is None:
                # 本批次没有该处理的样本，分支梯度为零
                grads.extend(np.zeros_like(p) for p in branch.parameters())
                continue
            g, dinput = branch.backward(tape, dlogits[rows].reshape(-1, 1))
            grads.extend(g)
            dphi[rows] = dinput
        return grads, dphi

    def logits_all(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        return np.column_stack([branch(phi)[:, 0] for branch in self.branches])


class OrthogonalFunctionHead(TreatmentHead):
    """logit = sum_j a_j(phi) * P_j(scaled(t))，系数网络每个样本只算一次"""
    kind = "ofa"

    def __init__(self, hidden_dim: int, m: int, degree: int, net: DenseNet):
        super().__init__(hidden_dim, m)
        if degree < 0:
            raise ContractError(f"OFA 阶数必须非负: {degree}")
        if net.input_dim != hidden_dim or net.output_dim != degree + 1:
            raise ShapeError(f"OFA 系数网络尺寸应为 {hidden_dim} -> {degree + 1}")
        self.degree = degree
        self.net = net
        self._basis = legendre_eval(degree, treatment_to_scalar(np.arange(m), m))  # m x (p+1)

    @classmethod
    def build(cls, hidden_dim: int, m: int, widths: Sequence[int], degree: int = None, seed=None,
              activation: str = "elu") -> 'OrthogonalFunctionHead':
        degree = m - 1 if degree is None else degree
        net = DenseNet.build([hidden_dim, *widths, degree + 1], seed=seed, hidden_activation=activation)
        # P_j(±1) = ±1 对所有 j 成立，p+1 个系数直接相加会让两端处理的初始 logit 方差放大 p+1 倍；
        # 输出层按 1/sqrt(p+1) 缩放后与单输出分支的初始方差一致
        net.layers[-1].weight /= np.sqrt(degree + 1)
        return cls(hidden_dim, m, degree, net)

    @staticmethod
    def count_params(hidden_dim: int, degree: int, widths: Sequence[int]) -> int:
        return dense_param_count([hidden_dim, *widths, degree + 1])

    @property
    def nets(self) -> List[DenseNet]:
        return [self.net]

    def forward(self, phi, t):
        phi, t = _check_rows(phi, t, self.hidden_dim)
        if np.any(t < 0) or np.any(t >= self.m):
            raise ContractError(f"处理编号超出范围 [0, {self.m - 1}]")
        coef, tape = self.net.forward(phi)
        basis = self._basis[t]
        return np.sum(coef * basis, axis=1), (tape, basis)

    def backward(self, cache, dlogits):
        tape, basis = cache
        dcoef = np.asarray(dlogits, dtype=np.float64).reshape(-1, 1) * basis
        return self.net.backward(tape, dcoef)

    def coefficients(self, phi) -> np.ndarray:
        return self.net(np.asarray(phi, dtype=np.float64))

    def logits_all(self, phi):
        return self.coefficients(phi) @ self._basis.T

    def logits_at(self, phi, u) -> np.ndarray:
        """在连续处理值 u ∈ [-1, 1] 上求值（网格点之间的插值查询）"""
        u = np.asarray(u, dtype=np.float64)
        if np.any(np.abs(u) > 1.0):
            raise ContractError("连续处理值必须在 [-1, 1] 内")
        coef = self.coefficients(phi)
        basis = legendre_eval(self.degree, np.broadcast_to(u, (coef.shape[0],)))
        return np.sum(coef * basis, axis=1)

    def to_dict(self) -> dict:
        payload = super().to_dict()
        payload["degree"] = self.degree
        return payload


def head_from_dict(payload: dict) -> TreatmentHead:
    nets = [DenseNet.from_dict(item) for item in payload["nets"]]
    kind = payload["kind"]
    if kind == "fa":
        return FeatureAdaptationHead(payload["hidden_dim"], payload["m"], nets[0])
    if kind == "sa":
        return StructureAdaptationHead(payload["hidden_dim"], payload["m"], nets)
    if kind == "ofa":
        return OrthogonalFunctionHead(payload["hidden_dim"], payload["m"], payload["degree"], nets[0])
    raise ContractError(f"未知头类型: {kind}")


def fa_forward(head: FeatureAdaptationHead, phi, t) -> np.ndarray:
    return head.forward(phi, t)[0]


def sa_forward(head: StructureAdaptationHead, phi, t) -> np.ndarray:
    return head.forward(phi, t)[0]


def ofa_forward(head: OrthogonalFunctionHead, phi, t) -> np.ndarray:
    return head.forward(phi, t)[0]


def predict_all(model, X) -> np.ndarray:
    """N x m 的反事实响应概率，(i, k) = sigmoid(样本 i 在处理 k 下的 logit)"""
    phi = model.hidden(X)
    # logit 超过约 37 时 expit 会得到 1.0，裁到开区间内
    return np.clip(expit(model.head.logits_all(phi)), PROB_CLIP, 1.0 - PROB_CLIP)
