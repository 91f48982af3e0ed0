"""表示网络 (backbone) x 适配头 (head) 组装成可训练的 uplift 模型。"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.models import BACKBONES, ModelSpec
from app.services.heads import (HEAD_KINDS, FeatureAdaptationHead, OrthogonalFunctionHead,
                                StructureAdaptationHead, TreatmentHead, head_from_dict, predict_all)
from app.services.losses import DISC_KINDS, PAIRINGS, bce_loss, discrepancy_multi
from app.services.numkit import AdamState, DenseNet, adam_step, dense_param_count
from common.errors import ConfigError, ContractError, ShapeError

logger = logging.getLogger(__name__)

ARTIFACT_FORMAT = "uplift-model"
ARTIFACT_VERSION = 1

# backbone 允许的头类型
COMPATIBLE_HEADS = {
    "slearner": ("fa",),
    "bnn": ("fa",),
    "tarnet_cfrnet": ("sa", "ofa"),
    "drcfr": ("sa", "ofa"),
}

DEFAULT_REP_WIDTHS = {
    "bnn": (128, 128),
    "tarnet_cfrnet": (128, 128),
    # 三个等宽分块 Γ / Δ / Υ，各 64
    "drcfr": (128, 192),
}

BUDGET_TOLERANCE = 0.15
MAX_SOLVED_WIDTH = 2048


def validate_spec(spec: ModelSpec) -> None:
    if spec.backbone not in BACKBONES:
        raise ConfigError(f"未知 backbone: {spec.backbone}")
    if spec.head not in HEAD_KINDS:
        raise ConfigError(f"未知 head: {spec.head}")
    if spec.disc not in DISC_KINDS:
        raise ConfigError(f"未知分布差异类型: {spec.disc}")
    if spec.head not in COMPATIBLE_HEADS[spec.backbone]:
        raise ConfigError(f"{spec.backbone} 不支持 {spec.head} 头, 可选 {COMPATIBLE_HEADS[spec.backbone]}")
    if spec.backbone == "slearner" and spec.disc != "none":
        raise ConfigError("slearner 没有表示层，无法做分布平衡")
    if spec.lambda1 <= 0:
        raise ConfigError(f"lambda1 必须为正: {spec.lambda1}")
    if spec.lambda2 < 0:
        raise ConfigError(f"lambda2 不能为负: {spec.lambda2}")
    if spec.ofa_degree is not None and spec.ofa_degree < 0:
        raise ConfigError(f"OFA 阶数必须非负: {spec.ofa_degree}")
    if spec.pairing not in PAIRINGS:
        raise ConfigError(f"未知分组配对方式: {spec.pairing}")
    if spec.learning_rate <= 0:
        raise ConfigError(f"学习率必须为正: {spec.learning_rate}")


def rep_widths_for(spec: ModelSpec) -> Tuple[int, ...]:
    if spec.backbone == "slearner":
        return ()
    widths = tuple(spec.rep_widths) if spec.rep_widths else DEFAULT_REP_WIDTHS[spec.backbone]
    if spec.backbone == "drcfr" and widths[-1] % 3 != 0:
        raise ConfigError(f"drcfr 表示层输出宽度必须能被 3 整除: {widths[-1]}")
    return widths


def head_input_dim(spec: ModelSpec, d: int) -> int:
    if spec.backbone == "slearner":
        return d
    out = rep_widths_for(spec)[-1]
    if spec.backbone == "drcfr":
        return 2 * (out // 3)
    return out


def default_head_depth(spec: ModelSpec) -> int:
    if spec.head_depth is not None:
        return spec.head_depth
    return 3 if spec.backbone == "slearner" else 2


def count_params(spec: ModelSpec, d: int, m: int, head_widths: Sequence[int]) -> int:
    """不构建网络，直接按尺寸计算参数量"""
    rep = rep_widths_for(spec)
    total = dense_param_count([d, *rep]) if rep else 0
    hidden = head_input_dim(spec, d)
    if spec.head == "fa":
        total += FeatureAdaptationHead.count_params(hidden, m, head_widths)
    elif spec.head == "sa":
        total += StructureAdaptationHead.count_params(hidden, m, head_widths)
    else:
        degree = m - 1 if spec.ofa_degree is None else spec.ofa_degree
        total += OrthogonalFunctionHead.count_params(hidden, degree, head_widths)
    return total


def solve_head_widths(spec: ModelSpec, d: int, m: int, budget: int) -> Tuple[int, ...]:
    """求头部隐藏层的统一宽度，使总参数量最接近预算"""
    depth = default_head_depth(spec)
    best_width, best_gap = 1, None
    for width in range(1, MAX_SOLVED_WIDTH + 1):
        gap = abs(count_params(spec, d, m, (width,) * depth) - budget)
        if best_gap is None or gap < best_gap:
            best_width, best_gap = width, gap
    return (best_width,) * depth


def head_widths_for(spec: ModelSpec, d: int, m: int) -> Tuple[int, ...]:
    if spec.head_widths is not None:
        return tuple(spec.head_widths)
    if spec.param_budget is None:
        raise ConfigError("未给出 head_widths 时必须设置 param_budget")
    return solve_head_widths(spec, d, m, spec.param_budget)


class UpliftModel:
    def __init__(self, spec: ModelSpec, d: int, m: int,
                 representation: Optional[DenseNet], head: TreatmentHead):
        self.spec = spec
        self.d = d
        self.m = m
        self.representation = representation
        self.head = head
        self.optimizer = AdamState.for_params(self.parameters(), lr=spec.learning_rate)

    @property
    def block(self) -> int:
        """drcfr 每个表示分块的宽度"""
        if self.spec.backbone != "drcfr":
            return 0
        return self.representation.output_dim // 3

    @property
    def param_count(self) -> int:
        rep = self.representation.param_count if self.representation is not None else 0
        return rep + self.head.param_count

    def nets(self) -> List[DenseNet]:
        nets = [self.representation] if self.representation is not None else []
        return nets + self.head.nets

    def parameters(self) -> List[np.ndarray]:
        params = self.representation.parameters() if self.representation is not None else []
        return params + self.head.parameters()

    def represent(self, X) -> Tuple[np.ndarray, np.ndarray, object]:
        """返回 (送入头部的隐特征, 做分布平衡的隐特征, tape)"""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ShapeError(f"输入维度 {X.shape} 与模型 d={self.d} 不匹配")
        if self.representation is None:
            return X, X, None
        R, tape = self.representation.forward(X)
        if self.spec.backbone == "drcfr":
            b = self.block
            return R[:, b:], R[:, b:2 * b], tape
        return R, R, tape

    def hidden(self, X) -> np.ndarray:
        return self.represent(X)[0]

    def forward(self, X, t) -> np.ndarray:
        phi, _, _ = self.represent(X)
        return self.head.forward(phi, t)[0]

    def predict_all(self, X) -> np.ndarray:
        return predict_all(self, X)

    def apply_gradients(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.parameters(), grads, self.optimizer)
        for net in self.nets():
            net.mark_updated()

    def get_state(self) -> List[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def set_state(self, state: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(params) != len(state):
            raise ContractError("参数快照与模型不匹配")
        for p, saved in zip(params, state):
            p[...] = saved
        for net in self.nets():
            net.mark_updated()

    def to_dict(self) -> Dict:
        return {
            "format": ARTIFACT_FORMAT,
            "version": ARTIFACT_VERSION,
            "spec": self.spec.to_dict(),
            "d": self.d,
            "m": self.m,
            "param_count": self.param_count,
            "representation": None if self.representation is None else self.representation.to_dict(),
            "head": self.head.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> 'UpliftModel':
        if payload.get("format") != ARTIFACT_FORMAT:
            raise ConfigError("不是 uplift 模型文件")
        if payload.get("version") != ARTIFACT_VERSION:
            raise ConfigError(f"不支持的模型文件版本: {payload.get('version')}")
        spec = ModelSpec.from_dict(payload["spec"])
        rep = payload.get("representation")
        return cls(spec, int(payload["d"]), int(payload["m"]),
                   None if rep is None else DenseNet.from_dict(rep),
                   head_from_dict(payload["head"]))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> 'UpliftModel':
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_model(spec: ModelSpec, d: int, m: int) -> UpliftModel:
    validate_spec(spec)
    if m < 2:
        raise ConfigError(f"处理数 m 至少为 2: {m}")
    rep_widths = rep_widths_for(spec)
    head_widths = head_widths_for(spec, d, m)
    rep_seed, head_seed = np.random.SeedSequence(spec.seed).spawn(2)

    representation = None
    if rep_widths:
        # 表示层最后一层同样带激活
        representation = DenseNet.build([d, *rep_widths], seed=rep_seed,
                                        hidden_activation=spec.activation,
                                        output_activation=spec.activation)
    hidden = head_input_dim(spec, d)
    if spec.head == "fa":
        head = FeatureAdaptationHead.build(hidden, m, head_widths, seed=head_seed, activation=spec.activation)
    elif spec.head == "sa":
        head = StructureAdaptationHead.build(hidden, m, head_widths, seed=head_seed, activation=spec.activation)
    else:
        head = OrthogonalFunctionHead.build(hidden, m, head_widths, degree=spec.ofa_degree,
                                            seed=head_seed, activation=spec.activation)

    model = UpliftModel(spec, d, m, representation, head)
    if spec.param_budget is not None:
        low = spec.param_budget * (1 - BUDGET_TOLERANCE)
        high = spec.param_budget * (1 + BUDGET_TOLERANCE)
        if not low <= model.param_count <= high:
            raise ConfigError(f"参数量 {model.param_count} 超出预算 {spec.param_budget} ±15%")
    logger.debug("构建模型 %s: d=%d m=%d 参数量=%d head_widths=%s",
                 spec.key, d, m, model.param_count, head_widths)
    return model


def total_loss(model: UpliftModel, X, t, y, rng: Optional[np.random.Generator] = None,
               lambda1: Optional[float] = None,
               lambda2: Optional[float] = None) -> Tuple[float, List[np.ndarray], Dict[str, float]]:
    """L = λ1·L_BCE + λ2·L_disc，返回 (loss, 按 parameters() 顺序的梯度, 各分量)"""
    spec = model.spec
    lam1 = spec.lambda1 if lambda1 is None else lambda1
    lam2 = spec.lambda2 if lambda2 is None else lambda2
    t = np.asarray(t, dtype=np.int64).reshape(-1)
    if t.shape[0] == 0:
        raise ContractError("批次不能为空")

    phi_head, phi_disc, rep_tape = model.represent(X)
    logits, head_cache = model.head.forward(phi_head, t)
    bce, dlogits = bce_loss(expit(logits), y)

    disc_value, ddisc = 0.0, None
    if spec.disc != "none":
        disc_value, ddisc, _ = discrepancy_multi(phi_disc, t, spec.disc, pairing=spec.pairing, rng=rng)
    else:
        lam2 = 0.0

    loss = lam1 * bce + lam2 * disc_value
    head_grads, dphi_head = model.head.backward(head_cache, lam1 * dlogits)

    rep_grads: List[np.ndarray] = []
    if model.representation is not None:
        if spec.backbone == "drcfr":
            b = model.block
            dR = np.zeros((dphi_head.shape[0], 3 * b), dtype=np.float64)
            dR[:, b:] = dphi_head
            if ddisc is not None:
                dR[:, b:2 * b] += lam2 * ddisc
        else:
            dR = dphi_head if ddisc is None else dphi_head + lam2 * ddisc
        rep_grads, _ = model.representation.backward(rep_tape, dR)

    return float(loss), rep_grads + head_grads, {"bce": bce, "disc": disc_value, "total": float(loss)}
