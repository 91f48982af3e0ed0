"""实验矩阵：(场景, 模型, 种子) 三元组独立运行、可断点续跑，汇总为 markdown / CSV 表格。"""
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.models import ExperimentConfig, ModelSpec, ScenarioSpec
from app.services.qini import mqini
from app.services.datagen import ScenarioGenerator
from app.services.training_service import TrainingService
from app.services.uplift_model import build_model, validate_spec
from common.errors import ConfigError
from common.result import Result

logger = logging.getLogger(__name__)

TABLE1_MODELS = ["slearner+fa", "bnn+fa", "tarnet_cfrnet+sa", "drcfr+sa",
                 "tarnet_cfrnet+ofa", "drcfr+ofa"]
BALANCED_MODELS = ["bnn+fa+wass", "bnn+fa+mmd",
                   "tarnet_cfrnet+sa+wass", "tarnet_cfrnet+sa+mmd",
                   "drcfr+sa+wass", "drcfr+sa+mmd",
                   "tarnet_cfrnet+ofa", "tarnet_cfrnet+ofa+wass", "tarnet_cfrnet+ofa+mmd",
                   "drcfr+ofa+wass", "drcfr+ofa+mmd"]

PRESETS: Dict[str, Dict[str, List[str]]] = {
    "table1": {"scenarios": ["rct", "rct_noise", "rct_nm"], "models": TABLE1_MODELS},
    "table2": {"scenarios": ["obs_iv", "obs"], "models": BALANCED_MODELS},
    "table3": {"scenarios": ["mix_iv", "mix"], "models": BALANCED_MODELS},
}
SCALES = ("synthetic", "real")

SCENARIO_TITLES = {
    "rct": "RCT", "rct_noise": "RCT-Noise", "rct_nm": "RCT-NM",
    "obs": "OBS", "obs_iv": "OBS+IV", "mix": "MIX", "mix_iv": "MIX+IV",
}
_BACKBONE_TITLES = {"slearner": "S-Learner", "bnn": "BNN", "drcfr": "DR-CFR"}


def display_name(key: str) -> str:
    """tarnet_cfrnet 在没有分布平衡时显示为 TARNet，有则为 CFRNet"""
    spec = ModelSpec.from_key(key.split("@")[0])
    if spec.backbone == "tarnet_cfrnet":
        backbone = "TARNet" if spec.disc == "none" else "CFRNet"
    else:
        backbone = _BACKBONE_TITLES[spec.backbone]
    parts = [backbone, spec.head.upper()]
    if spec.disc != "none":
        parts.append(spec.disc.upper())
    name = "+".join(parts)
    if "@" in key:
        name += f" (λ2={key.split('@')[1]})"
    return name


def config_from_preset(preset: str, **overrides) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"未知预设: {preset}, 可选 {sorted(PRESETS)}")
    payload = {"scenarios": list(PRESETS[preset]["scenarios"]),
               "models": list(PRESETS[preset]["models"])}
    payload.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(payload)


def expand_variants(config: ExperimentConfig) -> List[Tuple[str, str, float]]:
    """返回 (变体名, 模型名, λ2)；带分布平衡的模型按 λ2 网格展开"""
    if not config.lambda2_grid:
        raise ConfigError("lambda2_grid 不能为空")
    variants = []
    for key in config.models:
        spec = ModelSpec.from_key(key)
        if spec.disc == "none" or len(config.lambda2_grid) == 1:
            variants.append((key, key, float(config.lambda2_grid[0])))
            continue
        for lam in config.lambda2_grid:
            variants.append((f"{key}@{lam:g}", key, float(lam)))
    return variants


@dataclass(frozen=True)
class RunCell:
    scenario: str
    variant: str
    model: str
    lambda2: float
    seed: int

    def path(self, out_dir) -> Path:
        return Path(out_dir) / "runs" / self.scenario / self.variant / f"seed{self.seed}.json"


def plan_cells(config: ExperimentConfig) -> List[RunCell]:
    return [RunCell(scenario, variant, model, lam, seed)
            for scenario in config.scenarios
            for variant, model, lam in expand_variants(config)
            for seed in config.seeds]


def model_spec_for(cell: RunCell, config: ExperimentConfig) -> ModelSpec:
    return ModelSpec.from_key(cell.model, lambda1=config.lambda1, lambda2=cell.lambda2,
                              learning_rate=config.learning_rate,
                              param_budget=config.param_budget,
                              ofa_degree=config.ofa_degree, seed=cell.seed)


def run_cell(cell: RunCell, config: ExperimentConfig) -> Dict:
    """在 worker 内生成数据、训练、评估，并写入结果文件"""
    meta = {"scenario": cell.scenario, "model": cell.variant, "seed": cell.seed}
    try:
        scenario = ScenarioSpec.from_name(cell.scenario, n_train=config.n_train,
                                          n_test=config.n_test, seed=cell.seed)
        train_set, test_set = ScenarioGenerator(scenario).generate()
        model = build_model(model_spec_for(cell, config), train_set.d, scenario.m)
        trainer = TrainingService(epochs=config.epochs, batch_size=config.batch_size,
                                  patience=config.patience,
                                  validation_fraction=config.validation_fraction)
        model, history = trainer.fit(model, train_set, seed=cell.seed)
        report = mqini(model, test_set)
        result = Result.success(data={
            **meta,
            "lambda2": cell.lambda2,
            "param_count": model.param_count,
            "epochs_run": len(history.epochs),
            "best_epoch": history.best_epoch,
            **report.to_dict(),
        })
    except Exception as e:
        logger.error("运行失败 %s/%s/seed%d: %s", cell.scenario, cell.variant, cell.seed, e)
        result = Result.from_exception(e)
        result.data = {**meta, **(result.data or {})}

    path = cell.path(config.out_dir)
    path.parent.mkdir(parents=True, exist_ok=True)
    # 先写临时文件再替换，中断时不会留下半个结果文件
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(result.to_json(), encoding="utf-8")
    os.replace(tmp, path)
    return result.to_dict()


def load_cell(cell: RunCell, out_dir) -> Optional[Result]:
    path = cell.path(out_dir)
    if not path.exists():
        return None
    return Result.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _format_cell(values: List[float], failed: int, missing: int) -> str:
    if not values:
        return "FAILED" if failed else "n/a"
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    text = f"{mean:.4f} ± {std:.4f}"
    gaps = []
    if failed:
        gaps.append(f"failed {failed}")
    if missing:
        gaps.append(f"missing {missing}")
    if gaps:
        text += f" ({', '.join(gaps)})"
    return text


def assemble_table(config: ExperimentConfig) -> pd.DataFrame:
    """只读取已完成的结果文件，每行一个 (场景, 变体)"""
    rows = []
    for scenario in config.scenarios:
        for variant, model, lam in expand_variants(config):
            values, failed, missing = [], 0, 0
            for seed in config.seeds:
                result = load_cell(RunCell(scenario, variant, model, lam, seed), config.out_dir)
                if result is None:
                    missing += 1
                elif result.ok:
                    values.append(float(result.data["mqini"]))
                else:
                    failed += 1
            rows.append({
                "scenario": scenario,
                "model": variant,
                "display": display_name(variant),
                "head": ModelSpec.from_key(model).head,
                "mean": float(np.mean(values)) if values else np.nan,
                "std": (float(np.std(values, ddof=1)) if len(values) > 1 else 0.0) if values else np.nan,
                "n_ok": len(values),
                "n_failed": failed,
                "n_missing": missing,
                "cell": _format_cell(values, failed, missing),
            })
    return pd.DataFrame(rows)


def improvement_summary(table: pd.DataFrame) -> Dict[str, Dict]:
    """每个场景下最佳 OFA 变体相对最佳非 OFA 变体的提升"""
    summary = {}
    for scenario, group in table.groupby("scenario", sort=False):
        done = group.dropna(subset=["mean"])
        ofa = done[done["head"] == "ofa"]
        other = done[done["head"] != "ofa"]
        if ofa.empty or other.empty:
            continue
        best_ofa = ofa.loc[ofa["mean"].idxmax()]
        best_other = other.loc[other["mean"].idxmax()]
        base = float(best_other["mean"])
        gain = (float(best_ofa["mean"]) - base) / abs(base) * 100.0 if base != 0 else None
        summary[scenario] = {
            "best_ofa": best_ofa["model"],
            "best_ofa_mqini": round(float(best_ofa["mean"]), 6),
            "best_other": best_other["model"],
            "best_other_mqini": round(float(best_other["mean"]), 6),
            "gain_percent": None if gain is None else round(gain, 2),
        }
    return summary


def render_markdown(table: pd.DataFrame, config: ExperimentConfig, summary: Dict[str, Dict]) -> str:
    scenarios = list(config.scenarios)
    header = "| Model | " + " | ".join(SCENARIO_TITLES[s] for s in scenarios) + " |"
    lines = [header, "|" + "---|" * (len(scenarios) + 1)]
    for variant, _, _ in expand_variants(config):
        cells = []
        for scenario in scenarios:
            match = table[(table["scenario"] == scenario) & (table["model"] == variant)]
            cells.append(match["cell"].iloc[0])
        lines.append(f"| {display_name(variant)} | " + " | ".join(cells) + " |")
    if summary:
        lines += ["", "| Scenario | Best OFA | Best other | Gain |", "|---|---|---|---|"]
        for scenario, item in summary.items():
            gain = "n/a" if item["gain_percent"] is None else f"{item['gain_percent']:.1f}%"
            lines.append(f"| {SCENARIO_TITLES[scenario]} | {display_name(item['best_ofa'])} "
                         f"{item['best_ofa_mqini']:.4f} | {display_name(item['best_other'])} "
                         f"{item['best_other_mqini']:.4f} | {gain} |")
    return "\n".join(lines) + "\n"


class BenchService:
    def __init__(self, config: ExperimentConfig):
        for key in config.models:
            validate_spec(ModelSpec.from_key(key))
        self.config = config

    def pending(self) -> List[RunCell]:
        """没有结果文件或上次运行失败 (code != 200) 的格子"""
        todo = []
        for cell in plan_cells(self.config):
            result = load_cell(cell, self.config.out_dir)
            if result is None or not result.ok:
                todo.append(cell)
        return todo

    def run(self, workers: Optional[int] = None) -> Dict:
        config = self.config
        workers = config.workers if workers is None else workers
        cells = plan_cells(config)
        todo = self.pending()
        logger.info("实验矩阵共 %d 个运行, 待运行 %d 个, worker=%d", len(cells), len(todo), workers)
        if todo:
            Parallel(n_jobs=workers)(delayed(run_cell)(cell, config) for cell in todo)

        table = assemble_table(config)
        summary = improvement_summary(table)
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.md").write_text(render_markdown(table, config, summary), encoding="utf-8")
        table.drop(columns=["cell"]).to_csv(out / "table.csv", index=False, float_format="%.6f",
                                            lineterminator="\n")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")

        return {
            "runs": len(cells),
            "executed": len(todo),
            "failed": int(table["n_failed"].sum()),
            "table": str(out / "table.md"),
            "csv": str(out / "table.csv"),
            "improvement": summary,
        }
