import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add project root to path
sys.path.append(str(Path(__file__).parent.parent))

from app import main
from utils.config import SEED_STREAMS, ExperimentConfig, ReliabilityConfig, derive_seed, load_config
from utils.dynamics import generate_dataset
from utils.errors import ArtifactExistsError, ConfigurationError
from utils.excitation import sample_excitation
from utils.persistence import read_json
from utils.pipeline import (
    MANIFEST_NAME,
    RunContext,
    cmd_calibrate,
    cmd_evaluate,
    cmd_simulate,
    run,
)
from utils.reliability import PerformanceSpec, monte_carlo_reliability


TINY = {
    'name': 'tiny',
    'seed': 7,
    'system': {'kind': 'boucwen_sdof', 'params': {}},
    'excitation': {'kind': 'grf', 'params': {'sigma': 50.0, 'length_scale': 0.1}},
    'grid': {'duration': 0.4, 'frequency': 10.0, 'dt': 0.001},
    'samples': {'train': 8, 'cal': 20, 'test': 6, 'reliability': 12},
    'response_dofs': [0],
    'architecture': {'branch_widths': [4, 4], 'trunk_widths': [4, 4], 'latent': 2, 'activated_layers': 2},
    'training': {'iterations': 10, 'learning_rate': 0.01, 'log_every': 5},
    'conformal': {'alpha': 0.1, 'n1': 3, 'n2': 2},
    'reliability': {'thresholds': [0.0049, 0.0051], 'direction': 'upper', 'density_bins': 4},
    'energy': {'n_in': 10, 'n_out': 10, 'activity_points': 11},
}


def write_config(tmp_path, payload=None, name='config.json'):
    path = tmp_path / name
    path.write_text(json.dumps(payload or TINY))
    return path


@pytest.fixture(scope='module')
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp('pipeline')
    config = load_config(write_config(root))
    ctx = RunContext(config, root / 'run')
    run(ctx)
    return config, ctx


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def test_config_defaults_are_materialized():
    config = ExperimentConfig.from_dict({'name': 'defaults'})
    assert config.samples.train == 200 and config.conformal.alpha == 0.05
    assert config.to_dict()['grid']['frequency'] == 50.0


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigurationError, match='colour'):
        ExperimentConfig.from_dict({'colour': 'red'})
    with pytest.raises(ConfigurationError, match='samples'):
        ExperimentConfig.from_dict({'samples': {'validation': 3}})


def test_config_rejects_empty_split_and_bad_dof():
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({'samples': {'cal': 0}})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({'response_dofs': [1]})


def test_load_config_reports_bad_files(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / 'missing.json')
    broken = tmp_path / 'broken.json'
    broken.write_text('{"name": ')
    with pytest.raises(ConfigurationError):
        load_config(broken)


def test_seed_override_changes_hash(tmp_path):
    path = write_config(tmp_path)
    base = load_config(path)
    overridden = load_config(path, seed=8)
    assert overridden.seed == 8
    assert base.sha256() != overridden.sha256()


def test_derived_seeds_are_stable_and_distinct():
    seeds = [derive_seed(7, stream) for stream in SEED_STREAMS]
    assert len(set(seeds)) == len(seeds)
    assert derive_seed(7, 'train') == derive_seed(7, 'train')
    with pytest.raises(ConfigurationError):
        derive_seed(7, 'validation')


def test_bundled_configs_load():
    configs = Path(__file__).parent.parent / 'configs'
    for path in sorted(configs.glob('*.json')):
        config = load_config(path)
        assert config.response_dofs


def test_reliability_defaults_agree_with_performance_spec():
    defaults = ReliabilityConfig()
    assert defaults.direction == PerformanceSpec(1.0).direction
    assert defaults.target_pf == [0.5]
    assert ReliabilityConfig(thresholds=[0.1]).target_pf == []
    with pytest.raises(ConfigurationError, match='target_pf'):
        ExperimentConfig.from_dict({'reliability': {'target_pf': [1.0]}})
    with pytest.raises(ConfigurationError, match='direction'):
        ExperimentConfig.from_dict({'reliability': {'direction': 'sideways'}})


def test_example_one_thresholds_leave_failure_uncertain():
    config = load_config(Path(__file__).parent.parent / 'configs' / 'example_one.json')
    grid = config.grid.build()
    inputs = sample_excitation(config.excitation.build(config.seed_for('reliability')), grid, 100)
    truth = generate_dataset(config.system.build(), inputs, 0, config.grid.dt, role='test')
    specs = config.reliability.specs(grid, dof=0, responses=truth.responses)
    assert set(specs) == {'lower_pf0.2', 'lower_pf0.5', 'lower_pf0.8'}
    for spec in specs.values():
        assert float(spec.u_crit) < 0.0
        pf = monte_carlo_reliability(truth.responses, truth.grid.times, spec)
        assert 0.05 < pf[-1] < 0.95

# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def test_run_writes_every_stage(finished_run):
    _, ctx = finished_run
    manifest = read_json(ctx.path(MANIFEST_NAME))
    assert set(manifest['artifacts']) == {'simulate', 'train', 'calibrate', 'evaluate',
                                          'reliability', 'energy-report'}
    for name in ('data/train_dof0_responses.csv', 'models/dof0/manifest.json',
                 'calibration/dof0_schedule.csv', 'evaluation/summary.json',
                 'reliability/dof0_upper_0.0049.csv', 'energy/ratio_ts1.csv', 'energy/dof0_network.csv'):
        assert ctx.path(name).exists(), name
    schedule = pd.read_csv(ctx.path('calibration', 'dof0_schedule.csv'))
    assert list(schedule.columns) == ['t', 'q', 'n_cal', 'flagged_infinite']
    assert (schedule['n_cal'] == 20).all()


def test_reliability_curves_are_valid(finished_run):
    _, ctx = finished_run
    curve = pd.read_csv(ctx.path('reliability', 'dof0_upper_0.0051.csv'))
    for column in ('pf_mean', 'pf_lower', 'pf_upper', 'pf_true'):
        values = curve[column].to_numpy()
        assert np.all(np.diff(values) >= 0) and values.min() >= 0 and values.max() <= 1
    assert np.all(curve['pf_lower'] <= curve['pf_upper'])


def test_evaluation_summary_fields(finished_run):
    _, ctx = finished_run
    summary = read_json(ctx.path('evaluation', 'summary.json'))
    dof = summary['dofs']['0']
    assert summary['mode'] == 'model'
    assert np.isfinite(dof['nmse'])
    assert list(dof['spiking_activity_pct']) == ['branch.0', 'branch.1']
    assert dof['coverage_calibrated']['n_below_target'] + dof['coverage_calibrated']['n_at_or_above_target'] == 5


def test_identity_evaluation_is_perfect(finished_run):
    config, ctx = finished_run
    cmd_evaluate(RunContext(config, ctx.out_dir, force=True), identity=True)
    summary = read_json(ctx.path('evaluation', 'summary.json'))
    assert summary['mode'] == 'identity'
    assert summary['dofs']['0']['nmse'] == 0.0
    assert summary['dofs']['0']['coverage_calibrated']['minimum'] == 100.0


def test_existing_artifacts_need_force(finished_run):
    config, ctx = finished_run
    with pytest.raises(ArtifactExistsError):
        cmd_simulate(RunContext(config, ctx.out_dir))


def test_simulation_is_deterministic(tmp_path):
    config = load_config(write_config(tmp_path))
    cmd_simulate(RunContext(config, tmp_path / 'a'))
    cmd_simulate(RunContext(config, tmp_path / 'b', threads=2))
    for name in ('train_inputs.csv', 'cal_dof0_responses.csv', 'reliability_dof0_responses.csv'):
        assert (tmp_path / 'a' / 'data' / name).read_bytes() == (tmp_path / 'b' / 'data' / name).read_bytes()


def test_every_stage_is_deterministic(tmp_path):
    config = load_config(write_config(tmp_path))
    first, second = tmp_path / 'first', tmp_path / 'second'
    run(RunContext(config, first))
    run(RunContext(config, second, threads=2))
    produced = sorted(p.relative_to(first) for p in first.rglob('*.csv'))
    assert len(produced) > 10
    for relative in produced:
        assert (second / relative).read_bytes() == (first / relative).read_bytes(), relative


def test_calibration_refuses_training_role(finished_run, tmp_path):
    config, ctx = finished_run
    manifest_path = ctx.path('data', 'cal_dof0.json')
    original = manifest_path.read_text()
    payload = json.loads(original)
    payload['role'] = 'train'
    manifest_path.write_text(json.dumps(payload))
    try:
        with pytest.raises(ConfigurationError, match='training'):
            cmd_calibrate(RunContext(config, ctx.out_dir, force=True))
    finally:
        manifest_path.write_text(original)


def test_grid_mismatch_names_both_manifests(tmp_path):
    config = load_config(write_config(tmp_path))
    out = tmp_path / 'run'
    run(RunContext(config, out))
    changed = dict(TINY, grid={'duration': 0.4, 'frequency': 20.0, 'dt': 0.001})
    changed_config = load_config(write_config(tmp_path, changed, 'changed.json'))
    cmd_simulate(RunContext(changed_config, out, force=True))
    with pytest.raises(ConfigurationError, match='model manifest'):
        cmd_calibrate(RunContext(changed_config, out, force=True))


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def test_cli_exit_codes(tmp_path):
    config_path = write_config(tmp_path)
    out = tmp_path / 'cli'
    args = ['energy-report', '--config', str(config_path), '--out', str(out)]
    assert main(args) == 0
    assert (out / 'energy' / 'summary.json').exists()
    assert main(args) == 3
    assert main(args + ['--force']) == 0
    assert main(['energy-report', '--config', str(config_path), '--threads', '0']) == 2

    bad = write_config(tmp_path, dict(TINY, colour='red'), 'bad.json')
    assert main(['simulate', '--config', str(bad), '--out', str(out)]) == 1
    assert main(['calibrate', '--config', str(config_path), '--out', str(tmp_path / 'empty')]) == 1
