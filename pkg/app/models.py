"""记录类型：数据集、场景、模型配置、Qini 报告、实验矩阵配置"""
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from common.errors import ConfigError, ShapeError

BACKBONES = ("slearner", "bnn", "tarnet_cfrnet", "drcfr")
SCENARIO_KINDS = ("rct", "rct_noise", "rct_nm", "obs", "mix")
MONOTONE_KINDS = ("rct", "rct_noise", "obs", "mix")

# 与各表格列名对应的场景名
SCENARIOS: Dict[str, Tuple[str, bool]] = {
    "rct": ("rct", False),
    "rct_noise": ("rct_noise", False),
    "rct_nm": ("rct_nm", False),
    "obs": ("obs", False),
    "obs_iv": ("obs", True),
    "mix": ("mix", False),
    "mix_iv": ("mix", True),
}


@dataclass
class Dataset:
    X: np.ndarray  # N x d
    T: np.ndarray  # N, 取值 0..m-1
    Y: np.ndarray  # N, 取值 {0, 1}
    truth: Optional[np.ndarray] = None  # N x m 的真实响应概率
    m: Optional[int] = None
    # 混合数据中每行的来源 (0 = RCT, 1 = OBS)，不写入 CSV
    source: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.int64).reshape(-1)
        self.Y = np.asarray(self.Y, dtype=np.int64).reshape(-1)
        n = self.X.shape[0]
        if self.X.ndim != 2 or self.T.shape[0] != n or self.Y.shape[0] != n:
            raise ShapeError(f"数据集字段行数不一致: X {self.X.shape}, T {self.T.shape}, Y {self.Y.shape}")
        if self.m is None:
            self.m = int(self.T.max()) + 1 if n else 0
        if self.truth is not None:
            self.truth = np.asarray(self.truth, dtype=np.float64)
            if self.truth.shape != (n, self.m):
                raise ShapeError(f"truth 形状应为 {(n, self.m)}, 实际 {self.truth.shape}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "rct"
    with_iv: bool = False
    n_train: int = 10000
    n_test: int = 10000
    d: int = 8
    m: int = 5
    noise_rate: float = 0.1
    seed: int = 0
    # 数据生成常数，全部可配置
    gamma: float = 1.5
    dirichlet_concentration: float = 100.0
    arm_coefficients: Optional[Tuple[float, ...]] = None
    # 单调场景：logit = w0·x + (effect_base + effect_gain·σ(effect_sharpness·w1·x))·(u+1) − base_offset
    effect_base: float = 0.1
    effect_gain: float = 3.0
    effect_sharpness: float = 2.0
    base_offset: float = 1.5
    # 非单调场景：logit = w0·x + nm_wave·(w1·x)·sin(πu) + nm_curve·σ(w2·x)·u² − nm_offset
    nm_wave: float = 2.5
    nm_curve: float = 2.0
    nm_offset: float = 0.5

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"未知场景类型: {self.kind}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError(f"noise_rate 必须在 [0, 1) 内: {self.noise_rate}")
        if self.m < 2 or self.d < 1:
            raise ConfigError(f"d 与 m 不合法: d={self.d}, m={self.m}")
        if self.arm_coefficients is not None and len(self.arm_coefficients) != self.m:
            raise ConfigError(f"arm_coefficients 长度应为 {self.m}")
        if self.effect_base <= 0 or self.effect_gain < 0:
            raise ConfigError("单调场景的处理斜率必须恒为正: effect_base > 0, effect_gain >= 0")

    @property
    def coefficients(self) -> np.ndarray:
        if self.arm_coefficients is not None:
            return np.asarray(self.arm_coefficients, dtype=np.float64)
        return np.linspace(-1.0, 1.0, self.m)

    @property
    def monotone(self) -> bool:
        return self.kind in MONOTONE_KINDS

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        if payload["arm_coefficients"] is not None:
            payload["arm_coefficients"] = list(payload["arm_coefficients"])
        return payload

    @classmethod
    def from_name(cls, name: str, **overrides) -> 'ScenarioSpec':
        if name not in SCENARIOS:
            raise ConfigError(f"未知场景: {name}, 可选 {sorted(SCENARIOS)}")
        kind, with_iv = SCENARIOS[name]
        return cls(kind=kind, with_iv=with_iv, **overrides)


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "tarnet_cfrnet"
    head: str = "sa"
    disc: str = "none"
    lambda1: float = 1.0
    lambda2: float = 0.1
    rep_widths: Optional[Tuple[int, ...]] = None
    head_widths: Optional[Tuple[int, ...]] = None
    head_depth: Optional[int] = None
    ofa_degree: Optional[int] = None
    activation: str = "elu"
    pairing: str = "all_pairs"
    learning_rate: float = 1e-4
    param_budget: Optional[int] = 90000
    seed: int = 0

    @property
    def key(self) -> str:
        return f"{self.backbone}+{self.head}+{self.disc}"

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        for name in ("rep_widths", "head_widths"):
            if payload[name] is not None:
                payload[name] = list(payload[name])
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'ModelSpec':
        payload = dict(payload)
        for name in ("rep_widths", "head_widths"):
            if payload.get(name) is not None:
                payload[name] = tuple(int(w) for w in payload[name])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"ModelSpec 存在未知字段: {sorted(unknown)}")
        return cls(**payload)

    @classmethod
    def from_key(cls, key: str, **overrides) -> 'ModelSpec':
        """解析 `backbone+head[+disc]` 形式的模型名，例如 `drcfr+ofa+mmd`"""
        parts = key.lower().split("+")
        if len(parts) not in (2, 3):
            raise ConfigError(f"模型名格式应为 backbone+head[+disc]: {key}")
        disc = parts[2] if len(parts) == 3 else "none"
        return cls(backbone=parts[0], head=parts[1], disc=disc, **overrides)


@dataclass
class ArmQini:
    arm: int
    curve: List[Tuple[float, float]]
    qini: float


@dataclass
class QiniReport:
    arms: List[ArmQini]
    mqini: float
    control: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {"arms": [{"arm": a.arm, "qini": a.qini} for a in self.arms],
                "mqini": self.mqini}


@dataclass
class ExperimentConfig:
    scenarios: List[str] = field(default_factory=lambda: ["rct", "rct_noise", "rct_nm"])
    models: List[str] = field(default_factory=lambda: [
        "slearner+fa", "bnn+fa", "tarnet_cfrnet+sa", "drcfr+sa", "tarnet_cfrnet+ofa", "drcfr+ofa"])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 1e-4
    lambda1: float = 1.0
    lambda2_grid: List[float] = field(default_factory=lambda: [0.1])
    patience: int = 30
    validation_fraction: float = 0.1
    n_train: int = 10000
    n_test: int = 10000
    param_budget: int = 90000
    ofa_degree: Optional[int] = None
    out_dir: str = "output/bench"
    workers: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"学习率必须为正: {self.learning_rate}")
        if not self.scenarios or not self.models or not self.seeds:
            raise ConfigError("scenarios / models / seeds 都不能为空")
        for name in self.scenarios:
            if name not in SCENARIOS:
                raise ConfigError(f"未知场景: {name}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> 'ExperimentConfig':
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"实验配置存在未知字段: {sorted(unknown)}")
        return cls(**payload)
