"""稠密矩阵 / 前馈网络引擎：手写反向传播、Adam 优化器与有限差分梯度校验。

所有矩阵都是二维 float64 的 numpy 数组（行主序），网络层为 仿射 + 激活。
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from common.errors import ContractError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("identity", "relu", "elu", "sigmoid")

SeedLike = Union[int, np.random.SeedSequence, None]


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    if kind == "sigmoid":
        return expit(z)
    raise ContractError(f"未知激活函数: {kind}")


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "elu":
        return np.where(z > 0, 1.0, a + 1.0)
    if kind == "sigmoid":
        return a * (1.0 - a)
    raise ContractError(f"未知激活函数: {kind}")


def as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    """上层 spawn 出的子序列原样使用，整数或 None 包成新的 SeedSequence"""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def init_params(shape: Sequence[int], seed: SeedLike = None) -> np.ndarray:
    """初始化参数：二维权重 ~ N(0,1)/sqrt(fan_in)，一维偏置为 0"""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"参数形状必须为正: {shape}")
    if len(shape) == 1:
        return np.zeros(shape, dtype=np.float64)
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape) / np.sqrt(shape[0])


@dataclass
class Layer:
    weight: np.ndarray  # in x out
    bias: np.ndarray  # out
    activation: str = "elu"

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class Tape:
    """一次前向计算留下的中间量，backward 依赖它"""
    net_id: int
    version: int
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)


class DenseNet:
    def __init__(self, layers: List[Layer]):
        if not layers:
            raise ShapeError("网络至少需要一层")
        for k in range(len(layers) - 1):
            if layers[k].n_out != layers[k + 1].n_in:
                raise ShapeError(
                    f"第 {k} 层输出维度 {layers[k].n_out} 与第 {k + 1} 层输入维度 {layers[k + 1].n_in} 不匹配")
        for layer in layers:
            if layer.activation not in ACTIVATIONS:
                raise ContractError(f"未知激活函数: {layer.activation}")
        self.layers = layers
        # 参数每次被优化器更新都会递增，用来识别过期的 tape
        self.version = 0

    @classmethod
    def build(cls, sizes: Sequence[int], seed: SeedLike = None,
              hidden_activation: str = "elu", output_activation: str = "identity") -> 'DenseNet':
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2:
            raise ShapeError(f"网络尺寸至少包含输入和输出: {sizes}")
        seeds = as_seed_sequence(seed).spawn(len(sizes) - 1)
        layers = []
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = output_activation if k == len(sizes) - 2 else hidden_activation
            layers.append(Layer(init_params((n_in, n_out), seeds[k]), init_params((n_out,)), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_out

    @property
    def sizes(self) -> List[int]:
        return [self.input_dim] + [layer.n_out for layer in self.layers]

    @property
    def param_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def parameters(self) -> List[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def mark_updated(self) -> None:
        self.version += 1

    def forward(self, batch) -> Tuple[np.ndarray, Tape]:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"输入维度 {x.shape} 与网络输入 {self.input_dim} 不匹配")
        tape = Tape(net_id=id(self), version=self.version)
        for layer in self.layers:
            z = x @ layer.weight + layer.bias
            a = _activate(layer.activation, z)
            tape.inputs.append(x)
            tape.pre.append(z)
            tape.post.append(a)
            x = a
        if not np.all(np.isfinite(x)):
            raise NumericalError("前向输出含有 NaN/Inf")
        return x, tape

    def __call__(self, batch) -> np.ndarray:
        return self.forward(batch)[0]

    def backward(self, tape: Tape, output_grad) -> Tuple[List[np.ndarray], np.ndarray]:
        """返回 (按 parameters() 顺序排列的参数梯度, 输入梯度)"""
        if tape.net_id != id(self) or tape.version != self.version or len(tape.pre) != len(self.layers):
            raise ContractError("tape 与当前网络不匹配或已过期")
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape != tape.post[-1].shape:
            raise ShapeError(f"输出梯度形状 {g.shape} 与前向输出 {tape.post[-1].shape} 不一致")
        grads: List[np.ndarray] = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            dz = g * _activation_grad(layer.activation, tape.pre[k], tape.post[k])
            grads[2 * k] = tape.inputs[k].T @ dz
            grads[2 * k + 1] = dz.sum(axis=0)
            g = dz @ layer.weight.T
        return grads, g

    def to_dict(self) -> dict:
        return {
            "layers": [{
                "shape": list(layer.weight.shape),
                "activation": layer.activation,
                "weight": layer.weight.ravel().tolist(),
                "bias": layer.bias.tolist(),
            } for layer in self.layers]
        }

    @classmethod
    def from_dict(cls, payload: dict) -> 'DenseNet':
        layers = []
        for item in payload["layers"]:
            n_in, n_out = item["shape"]
            weight = np.asarray(item["weight"], dtype=np.float64).reshape(n_in, n_out)
            bias = np.asarray(item["bias"], dtype=np.float64).reshape(n_out)
            layers.append(Layer(weight, bias, item["activation"]))
        return cls(layers)


def forward(net: DenseNet, batch) -> Tuple[np.ndarray, Tape]:
    return net.forward(batch)


def backward(net: DenseNet, tape: Tape, output_grad) -> Tuple[List[np.ndarray], np.ndarray]:
    return net.backward(tape, output_grad)


def dense_param_count(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float = 1e-4,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> 'AdamState':
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params],
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> Tuple[Sequence[np.ndarray], AdamState]:
    """原地更新参数（带偏差修正的 Adam），返回 (params, state)"""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("参数、梯度与 Adam 状态数量不一致")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ContractError(f"形状不一致: param {p.shape}, grad {np.shape(g)}, moment {m.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def finite_diff_grad(lossfn: Callable[[], float], params: Sequence[np.ndarray],
                     step: float = 1e-5) -> List[np.ndarray]:
    """中心差分 (f(θ+h) − f(θ−h)) / 2h，逐元素原地扰动后恢复"""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = lossfn()
            flat[i] = orig - step
            down = lossfn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: Optional[float] = 1e-12) -> float:
    """按参数数组归一化的最大相对误差"""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst
