import json

import pandas as pd
import pytest

import app.services.bench_service as bench_service
from app.bench import build_config
from app.models import ExperimentConfig
from app.services.bench_service import (BALANCED_MODELS, BenchService, RunCell, _format_cell,
                                        config_from_preset, display_name, expand_variants,
                                        improvement_summary, plan_cells)
from common.errors import ConfigError, ContractError
from config import Config


def _tiny_config(out_dir, **overrides):
    payload = dict(scenarios=['rct'], models=['tarnet_cfrnet+sa', 'tarnet_cfrnet+ofa'], seeds=[0],
                   epochs=1, batch_size=128, n_train=300, n_test=300, out_dir=str(out_dir))
    payload.update(overrides)
    return ExperimentConfig.from_dict(payload)


def test_rerun_produces_identical_tables(tmp_path):
    for name in ('a', 'b'):
        BenchService(_tiny_config(tmp_path / name)).run(workers=1)
    for fname in ('table.md', 'table.csv', 'summary.json'):
        assert (tmp_path / 'a' / fname).read_bytes() == (tmp_path / 'b' / fname).read_bytes()


def test_resume_only_runs_missing_cells(tmp_path):
    config = _tiny_config(tmp_path)
    service = BenchService(config)
    first = service.run(workers=1)
    assert first['runs'] == 2 and first['executed'] == 2

    kept = RunCell('rct', 'tarnet_cfrnet+sa', 'tarnet_cfrnet+sa', 0.1, 0).path(tmp_path)
    dropped = RunCell('rct', 'tarnet_cfrnet+ofa', 'tarnet_cfrnet+ofa', 0.1, 0).path(tmp_path)
    kept_bytes = kept.read_bytes()
    dropped.unlink()
    assert service.pending() == [RunCell('rct', 'tarnet_cfrnet+ofa', 'tarnet_cfrnet+ofa', 0.1, 0)]

    second = service.run(workers=1)
    assert second['executed'] == 1
    assert dropped.exists()
    assert kept.read_bytes() == kept_bytes


def test_single_cell_table(tmp_path):
    config = _tiny_config(tmp_path, models=['tarnet_cfrnet+ofa'])
    summary = BenchService(config).run(workers=1)
    table = pd.read_csv(summary['csv'])
    assert len(table) == 1
    assert table.loc[0, 'n_ok'] == 1
    assert table.loc[0, 'std'] == 0.0
    markdown = (tmp_path / 'table.md').read_text(encoding='utf-8')
    assert '| TARNet+OFA |' in markdown
    assert summary['improvement'] == {}


def test_result_file_records_metadata(tmp_path):
    config = _tiny_config(tmp_path, models=['drcfr+ofa+wass'])
    BenchService(config).run(workers=1)
    payload = json.loads(RunCell('rct', 'drcfr+ofa+wass', 'drcfr+ofa+wass', 0.1, 0)
                         .path(tmp_path).read_text(encoding='utf-8'))
    assert payload['code'] == 200
    data = payload['data']
    assert (data['scenario'], data['model'], data['seed']) == ('rct', 'drcfr+ofa+wass', 0)
    assert [a['arm'] for a in data['arms']] == [1, 2, 3, 4]
    assert 80_000 <= data['param_count'] <= 100_000


def test_failed_run_is_marked_in_table(tmp_path, monkeypatch):
    def broken(spec, d, m):
        raise ContractError("boom")

    monkeypatch.setattr(bench_service, 'build_model', broken)
    config = _tiny_config(tmp_path, models=['tarnet_cfrnet+sa'], seeds=[0, 1])
    summary = BenchService(config).run(workers=1)
    assert summary['failed'] == 2
    payload = json.loads(RunCell('rct', 'tarnet_cfrnet+sa', 'tarnet_cfrnet+sa', 0.1, 1)
                         .path(tmp_path).read_text(encoding='utf-8'))
    assert payload['code'] == 500
    assert payload['data']['error'] == 'ContractError'
    assert payload['data']['seed'] == 1
    assert '| TARNet+SA | FAILED |' in (tmp_path / 'table.md').read_text(encoding='utf-8')


def test_failed_runs_are_retried_on_resume(tmp_path, monkeypatch):
    def broken(spec, d, m):
        raise ContractError("boom")

    config = _tiny_config(tmp_path)
    service = BenchService(config)
    monkeypatch.setattr(bench_service, 'build_model', broken)
    first = service.run(workers=1)
    assert first['failed'] == 2

    monkeypatch.undo()
    assert len(service.pending()) == 2
    second = service.run(workers=1)
    assert second['executed'] == 2
    assert second['failed'] == 0
    assert service.pending() == []
    payload = json.loads(RunCell('rct', 'tarnet_cfrnet+ofa', 'tarnet_cfrnet+ofa', 0.1, 0)
                         .path(tmp_path).read_text(encoding='utf-8'))
    assert payload['code'] == 200


def test_format_cell():
    assert _format_cell([0.1, 0.3], failed=1, missing=0) == '0.2000 ± 0.1414 (failed 1)'
    assert _format_cell([0.25], failed=0, missing=2) == '0.2500 ± 0.0000 (missing 2)'
    assert _format_cell([], failed=0, missing=3) == 'n/a'
    assert _format_cell([], failed=1, missing=0) == 'FAILED'


def test_display_names():
    assert display_name('slearner+fa') == 'S-Learner+FA'
    assert display_name('tarnet_cfrnet+sa') == 'TARNet+SA'
    assert display_name('tarnet_cfrnet+sa+wass') == 'CFRNet+SA+WASS'
    assert display_name('drcfr+ofa+mmd@0.5') == 'DR-CFR+OFA+MMD (λ2=0.5)'


def test_preset_matrix_sizes(tmp_path):
    table1 = config_from_preset('table1', seeds=[0], out_dir=str(tmp_path))
    assert len(plan_cells(table1)) == 18
    table2 = config_from_preset('table2', seeds=[0, 1, 2])
    assert table2.scenarios == ['obs_iv', 'obs']
    assert len(plan_cells(table2)) == 2 * len(BALANCED_MODELS) * 3
    with pytest.raises(ConfigError):
        config_from_preset('table9')


def test_lambda2_grid_expands_balanced_models_only(tmp_path):
    config = _tiny_config(tmp_path, models=['tarnet_cfrnet+sa', 'tarnet_cfrnet+sa+wass'],
                          lambda2_grid=[0.1, 1.0])
    assert expand_variants(config) == [
        ('tarnet_cfrnet+sa', 'tarnet_cfrnet+sa', 0.1),
        ('tarnet_cfrnet+sa+wass@0.1', 'tarnet_cfrnet+sa+wass', 0.1),
        ('tarnet_cfrnet+sa+wass@1', 'tarnet_cfrnet+sa+wass', 1.0),
    ]
    with pytest.raises(ConfigError):
        expand_variants(_tiny_config(tmp_path, lambda2_grid=[]))


def test_unknown_model_rejected_before_running(tmp_path):
    with pytest.raises(ConfigError):
        BenchService(_tiny_config(tmp_path, models=['slearner+ofa']))
    assert not (tmp_path / 'runs').exists()


def test_improvement_summary():
    table = pd.DataFrame([
        {'scenario': 'rct', 'model': 'tarnet_cfrnet+sa', 'head': 'sa', 'mean': 0.2},
        {'scenario': 'rct', 'model': 'drcfr+sa', 'head': 'sa', 'mean': 0.25},
        {'scenario': 'rct', 'model': 'drcfr+ofa', 'head': 'ofa', 'mean': 0.3},
        {'scenario': 'rct_nm', 'model': 'drcfr+ofa', 'head': 'ofa', 'mean': float('nan')},
    ])
    summary = improvement_summary(table)
    assert list(summary) == ['rct']
    assert summary['rct']['best_ofa'] == 'drcfr+ofa'
    assert summary['rct']['best_other'] == 'drcfr+sa'
    assert summary['rct']['gain_percent'] == pytest.approx(20.0)


def _parse(app, *argv):
    return app.parser.parse_args(['bench', *argv])


def test_build_config_precedence(app, app_config, tmp_path):
    path = tmp_path / 'experiment.json'
    path.write_text(json.dumps({'scenarios': ['obs'], 'epochs': 7}), encoding='utf-8')

    config = build_config(_parse(app, '--preset', 'table2', '--config', str(path), '--n-train', '500'),
                          app_config)
    assert config.scenarios == ['obs']
    assert config.models == BALANCED_MODELS
    assert config.epochs == 7
    assert config.n_train == 500
    assert config.seeds == [0, 1]
    assert config.param_budget == app_config.PARAM_BUDGET

    config = build_config(_parse(app, '--config', str(path), '--epochs', '3', '--seeds', '4',
                                 '--scale', 'real'), app_config)
    assert config.epochs == 3
    assert config.seeds == [0, 1, 2, 3]
    assert config.param_budget == app_config.REAL_PARAM_BUDGET


def test_build_config_rejects_bad_json(app, app_config, tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"epochs": ', encoding='utf-8')
    with pytest.raises(ConfigError):
        build_config(_parse(app, '--config', str(path)), app_config)

    path.write_text('{"epoch": 3}', encoding='utf-8')
    with pytest.raises(ConfigError):
        build_config(_parse(app, '--config', str(path)), app_config)


def test_bench_command(app, tmp_path, capsys):
    out = tmp_path / 'bench'
    code = app.run(['bench', '--scenarios', 'rct', '--models', 'bnn+fa', '--seeds', '1', '--epochs', '1',
                    '--n-train', '300', '--n-test', '300', '--out', str(out)])
    payload = json.loads(capsys.readouterr().out)
    assert code == 0
    assert payload['data']['runs'] == 1
    assert (out / 'table.md').exists() and (out / 'table.csv').exists()


def _slow_run(tmp_path, preset, scenarios, models=None):
    config = config_from_preset(preset, scenarios=scenarios, models=models, out_dir=str(tmp_path))
    # 默认配置：5 个种子、lr 1e-4、10k 训练样本
    assert config.seeds == [0, 1, 2, 3, 4]
    assert config.learning_rate == 1e-4
    assert config.n_train == 10_000
    summary = BenchService(config).run(workers=Config.BENCH_WORKERS)
    assert summary['failed'] == 0
    return pd.read_csv(summary['csv'])


def _cell_mean(table, scenario, model):
    row = table[(table['scenario'] == scenario) & (table['model'] == model)]
    return float(row['mean'].iloc[0])


@pytest.mark.slow
@pytest.mark.parametrize('scenario', ['rct_noise', 'rct_nm'])
def test_ofa_beats_sa_per_backbone_on_rct(tmp_path, scenario):
    table = _slow_run(tmp_path, 'table1', [scenario],
                      ['tarnet_cfrnet+sa', 'tarnet_cfrnet+ofa', 'drcfr+sa', 'drcfr+ofa'])
    for backbone in ('tarnet_cfrnet', 'drcfr'):
        ofa = _cell_mean(table, scenario, f'{backbone}+ofa')
        sa = _cell_mean(table, scenario, f'{backbone}+sa')
        assert ofa - sa >= 0.01, f'{scenario} {backbone}: OFA {ofa:.4f} vs SA {sa:.4f}'


@pytest.mark.slow
@pytest.mark.parametrize('preset, scenario', [('table2', 'obs_iv'), ('table2', 'obs'),
                                              ('table3', 'mix_iv'), ('table3', 'mix')])
def test_best_ofa_beats_best_sa_and_fa_on_obs_and_mix(tmp_path, preset, scenario):
    table = _slow_run(tmp_path, preset, [scenario])
    best = table.groupby('head')['mean'].max()
    assert set(best.index) == {'fa', 'sa', 'ofa'}
    assert best['ofa'] - best['sa'] >= 0.01, f'{scenario}: {best.to_dict()}'
    assert best['ofa'] - best['fa'] >= 0.01, f'{scenario}: {best.to_dict()}'
