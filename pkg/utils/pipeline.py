"""Pipeline Stages

simulate -> train -> calibrate -> evaluate -> reliability -> energy-report,
each reading its upstream artifacts from the output directory and
recording what it wrote in `run_manifest.json`.

Output layout:
    data/         input sample sets and per-DOF operator datasets
    models/dofN/  checkpoint + training log
    calibration/  conformal schedules
    evaluation/   NMSE, coverage tables, prediction bands, figures
    reliability/  P_f curves with bounds and Monte Carlo truth, FTTF densities
    energy/       energy-ratio curves and per-layer network energy
"""

import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import plotly
import scipy

from utils import visualizations
from utils.conformal import (
    ConformalSchedule,
    calibrate_schedule,
    calibrated_interval,
    interval_from_schedule,
    normal_quantile,
    raw_interval,
)
from utils.config import ExperimentConfig
from utils.dynamics import OperatorDataset, dataset_from_responses, simulate_responses
from utils.energy import LayerShape, energy_ratio_curve, network_energy, spiking_activity
from utils.errors import ConfigurationError
from utils.excitation import sample_excitation
from utils.operator_network import (
    PredictiveBand,
    VariationalModel,
    branch_records,
    load_model,
    predict_bands,
    save_model,
    train,
)
from utils.persistence import ensure_writable, read_json, relative_to, write_frame, write_json
from utils.reliability import (
    coverage_report,
    evaluation_frame,
    first_time_to_failure,
    fttf_density,
    monte_carlo_reliability,
    nmse,
    reliability_from_band,
)


logger = logging.getLogger(__name__)

MANIFEST_NAME = 'run_manifest.json'

# Dataset role per simulated split
SPLIT_ROLES = {'train': 'train', 'cal': 'cal', 'test': 'test', 'reliability': 'test'}


def package_versions() -> Dict[str, str]:
    return {
        'python': platform.python_version(),
        'numpy': np.__version__,
        'pandas': pd.__version__,
        'scipy': scipy.__version__,
        'plotly': plotly.__version__,
    }


@dataclass
class RunManifest:
    """Config hash, artifacts and timings of every stage run in one output directory"""

    config_sha256: str
    config: Dict
    artifacts: Dict[str, List[str]] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=package_versions)
    updated: str = ''

    @classmethod
    def load_or_create(cls, out_dir: Path, config: ExperimentConfig) -> 'RunManifest':
        path = out_dir / MANIFEST_NAME
        digest = config.sha256()
        if path.exists():
            payload = read_json(path)
            if payload.get('config_sha256') == digest:
                return cls(**payload)
            logger.warning("Config changed since the last run; starting a fresh run manifest")
        return cls(digest, config.to_dict())

    def record(self, stage: str, paths: List[Path], seconds: float, root: Path) -> None:
        self.artifacts[stage] = sorted(relative_to(p, root) for p in paths)
        self.timings[stage] = round(seconds, 3)
        self.versions = package_versions()
        self.updated = datetime.now().isoformat(timespec='seconds')

    def save(self, out_dir: Path) -> Path:
        return write_json(out_dir / MANIFEST_NAME, asdict(self))


@dataclass
class RunContext:
    config: ExperimentConfig
    out_dir: Path
    force: bool = False
    threads: int = 1

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)

    def path(self, *parts: str) -> Path:
        return self.out_dir.joinpath(*parts)

    @property
    def config_dir(self) -> Optional[Path]:
        return Path(self.config.source).parent if self.config.source else None


def _finish(ctx: RunContext, stage: str, paths: List[Path], started: float) -> List[Path]:
    elapsed = time.perf_counter() - started
    manifest = RunManifest.load_or_create(ctx.out_dir, ctx.config)
    manifest.record(stage, paths, elapsed, ctx.out_dir)
    manifest.save(ctx.out_dir)
    logger.info(f"Stage '{stage}' finished in {elapsed:.1f} s ({len(paths)} artifacts)")
    return paths


def _dataset_stem(ctx: RunContext, split: str, dof: int) -> Path:
    return ctx.path('data', f"{split}_dof{dof}")


def _load_dataset(ctx: RunContext, split: str, dof: int) -> Tuple[OperatorDataset, Dict]:
    stem = _dataset_stem(ctx, split, dof)
    manifest_path = stem.parent / f"{stem.name}.json"
    if not manifest_path.exists():
        raise ConfigurationError(f"Missing dataset {manifest_path}; run 'simulate' first")
    return OperatorDataset.load(stem), read_json(manifest_path)


def _load_model(ctx: RunContext, dof: int) -> Tuple[VariationalModel, Dict]:
    directory = ctx.path('models', f"dof{dof}")
    if not (directory / 'manifest.json').exists():
        raise ConfigurationError(f"Missing checkpoint in {directory}; run 'train' first")
    return load_model(directory)


def _load_schedule(ctx: RunContext, dof: int) -> ConformalSchedule:
    stem = ctx.path('calibration', f"dof{dof}_schedule")
    if not stem.with_suffix('.csv').exists():
        raise ConfigurationError(f"Missing conformal schedule {stem}.csv; run 'calibrate' first")
    return ConformalSchedule.load(stem)


def _check_compatible(model: VariationalModel, model_manifest: Dict, dataset: OperatorDataset,
                      dataset_manifest: Dict) -> None:
    """Grid and architecture of a checkpoint must match the dataset it is applied to"""
    same_sensors = model.architecture.n_sensors == dataset.grid.count
    same_horizon = np.allclose(model.horizon, dataset.grid.horizon)
    if not (same_sensors and same_horizon):
        trimmed = {k: v for k, v in model_manifest.items() if k != 'tensors'}
        raise ConfigurationError(
            "Grid/architecture mismatch between checkpoint and dataset\n"
            f"model manifest: {json.dumps(trimmed, sort_keys=True, default=str)}\n"
            f"dataset manifest: {json.dumps(dataset_manifest, sort_keys=True, default=str)}"
        )


def _write_figure(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs='cdn')
    return path


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_simulate(ctx: RunContext) -> List[Path]:
    """Sample inputs for every split, simulate, and write per-DOF datasets"""
    started = time.perf_counter()
    cfg = ctx.config
    system = cfg.system.build()
    grid = cfg.grid.build()
    splits = asdict(cfg.samples)
    targets = []
    for split in splits:
        targets += [ctx.path('data', f"{split}_inputs.csv"), ctx.path('data', f"{split}_inputs.json")]
        for dof in cfg.response_dofs:
            stem = _dataset_stem(ctx, split, dof)
            targets += [stem.parent / f"{stem.name}{s}" for s in ('.json', '_inputs.csv', '_responses.csv')]
    ensure_writable(targets, ctx.force)

    logger.info(f"Simulating {system.kind} ({system.n_dof} DOF) on {grid.count} points, "
                f"{ctx.threads} thread(s)")
    written = []
    for split, n_samples in splits.items():
        spec = cfg.excitation.build(cfg.seed_for(split))
        inputs = sample_excitation(spec, grid, n_samples)
        written += inputs.save(ctx.path('data', f"{split}_inputs")).values()
        states = simulate_responses(system, inputs, cfg.grid.dt, ctx.threads)
        for dof in cfg.response_dofs:
            dataset = dataset_from_responses(system, inputs, states, dof, SPLIT_ROLES[split], cfg.grid.dt)
            written += dataset.save(_dataset_stem(ctx, split, dof)).values()
        logger.info(f"Split '{split}': {n_samples} samples, {n_samples * grid.count} triplets per DOF")
    return _finish(ctx, 'simulate', written, started)


def cmd_train(ctx: RunContext) -> List[Path]:
    """Train one model per response DOF"""
    started = time.perf_counter()
    cfg = ctx.config
    written = []
    for dof in cfg.response_dofs:
        directory = ctx.path('models', f"dof{dof}")
        ensure_writable([directory / 'manifest.json', directory / 'training_log.csv'], ctx.force)
        dataset, _ = _load_dataset(ctx, 'train', dof)
        arch = cfg.architecture.build(dataset.grid.count)
        train_cfg = cfg.training.build(cfg.seed_for('model'))
        model = train(dataset, arch, train_cfg)
        written.append(save_model(model, directory, extra={
            'dof': dof,
            'training': asdict(train_cfg),
            'grid': {'start': dataset.grid.times[0], 'count': dataset.grid.count,
                     'spacing': dataset.grid.spacing},
        }))
        written += [directory / f"{name}.bin" for name in model.state_arrays()]
        written.append(write_frame(directory / 'training_log.csv', model.training_log))
        written.append(_write_figure(visualizations.create_training_chart(model.training_log),
                                     directory / 'training_log.html'))
        logger.info(f"DOF {dof}: best loss {model.training_log['best'].iloc[-1]:.4f}")
    return _finish(ctx, 'train', written, started)


def cmd_calibrate(ctx: RunContext) -> List[Path]:
    """Per-timestep conformal schedules on the calibration split"""
    started = time.perf_counter()
    cfg = ctx.config
    conformal = cfg.conformal
    written = []
    for dof in cfg.response_dofs:
        stem = ctx.path('calibration', f"dof{dof}_schedule")
        ensure_writable([stem.with_suffix('.csv'), stem.with_suffix('.json')], ctx.force)
        model, model_manifest = _load_model(ctx, dof)
        dataset, dataset_manifest = _load_dataset(ctx, 'cal', dof)
        if dataset.role == 'train':
            raise ConfigurationError(f"{_dataset_stem(ctx, 'cal', dof)} is marked as training data")
        _check_compatible(model, model_manifest, dataset, dataset_manifest)
        schedule = calibrate_schedule(model, dataset, conformal.alpha, conformal.n1, conformal.n2,
                                      cfg.seed_for('calibration_draws'), conformal.use_z)
        written += schedule.save(stem).values()
        logger.info(f"DOF {dof}: median q = {np.median(schedule.q):.3f}, z = {schedule.z:.4f}")
    return _finish(ctx, 'calibrate', written, started)


def cmd_evaluate(ctx: RunContext, identity: bool = False) -> List[Path]:
    """NMSE, raw and calibrated coverage, and spiking activity on the test split

    With identity=True the truths are fed back as zero-width predictions,
    which must give NMSE 0 and full coverage.
    """
    started = time.perf_counter()
    cfg = ctx.config
    alpha = cfg.conformal.alpha
    written = []
    ensure_writable([ctx.path('evaluation', 'summary.json')], ctx.force)
    summary = {'mode': 'identity' if identity else 'model', 'alpha': alpha, 'dofs': {}}
    for dof in cfg.response_dofs:
        dataset, dataset_manifest = _load_dataset(ctx, 'test', dof)
        times = dataset.grid.times
        activity = {}
        if identity:
            band = PredictiveBand(times, dataset.responses.copy(), np.zeros_like(dataset.responses), 0, 0)
            calibrated = calibrated_interval(band.mu_hat, band.sigma_hat, 1.0, normal_quantile(alpha))
            raw = calibrated
        else:
            model, model_manifest = _load_model(ctx, dof)
            _check_compatible(model, model_manifest, dataset, dataset_manifest)
            schedule = _load_schedule(ctx, dof)
            band = predict_bands(model, dataset.inputs, times, cfg.conformal.n1, cfg.conformal.n2,
                                 cfg.seed_for('evaluation_draws'))
            calibrated = interval_from_schedule(band, schedule)
            raw = raw_interval(band, alpha)
            activity = {name: spiking_activity(record)
                        for name, record in branch_records(model, dataset.inputs).items()}

        error = nmse(band.mu_hat, dataset.responses)
        cal_report = coverage_report(calibrated, dataset.responses, times)
        raw_report = coverage_report(raw, dataset.responses, times)
        coverage = pd.DataFrame({
            't': times,
            'coverage_calibrated_pct': cal_report.coverage,
            'coverage_raw_pct': raw_report.coverage,
        })
        stem = f"dof{dof}"
        written.append(write_frame(ctx.path('evaluation', f"{stem}_coverage.csv"), coverage))
        prediction = evaluation_frame(band, dataset.responses, 0, calibrated)
        written.append(write_frame(ctx.path('evaluation', f"{stem}_prediction.csv"), prediction))
        written.append(_write_figure(visualizations.create_band_chart(prediction, f"DOF {dof} test input 0"),
                                     ctx.path('evaluation', f"{stem}_prediction.html")))
        written.append(_write_figure(visualizations.create_coverage_chart(coverage, 100.0 * (1 - alpha)),
                                     ctx.path('evaluation', f"{stem}_coverage.html")))
        summary['dofs'][str(dof)] = {
            'nmse': error,
            'coverage_calibrated': cal_report.summary(),
            'coverage_raw': raw_report.summary(),
            'spiking_activity_pct': activity,
        }
        logger.info(f"DOF {dof}: NMSE {error:.3e}, calibrated coverage avg {cal_report.average:.2f}% "
                    f"({cal_report.n_below} timesteps below {cal_report.target:g}%)")
    written.append(write_json(ctx.path('evaluation', 'summary.json'), summary))
    return _finish(ctx, 'evaluate', written, started)


def cmd_reliability(ctx: RunContext) -> List[Path]:
    """Surrogate P_f(t) with calibrated bounds against direct Monte Carlo"""
    started = time.perf_counter()
    cfg = ctx.config
    conformal = cfg.conformal
    grid = cfg.grid.build()
    truths = {dof: _load_dataset(ctx, 'reliability', dof) for dof in cfg.response_dofs}
    specs = {dof: cfg.reliability.specs(grid, ctx.config_dir, dof, truths[dof][0].responses)
             for dof in cfg.response_dofs}
    ensure_writable([ctx.path('reliability', f"dof{dof}_{label}.csv")
                    for dof in cfg.response_dofs for label in specs[dof]], ctx.force)
    written = []
    for dof in cfg.response_dofs:
        model, model_manifest = _load_model(ctx, dof)
        truth, truth_manifest = truths[dof]
        _check_compatible(model, model_manifest, truth, truth_manifest)
        schedule = _load_schedule(ctx, dof)
        band = predict_bands(model, truth.inputs, truth.grid.times, conformal.n1, conformal.n2,
                             cfg.seed_for('reliability_draws'))
        interval = interval_from_schedule(band, schedule)
        for label, spec in specs[dof].items():
            stem = ctx.path('reliability', f"dof{dof}_{label}")
            curve = reliability_from_band(band, interval, spec)
            curve.pf_true = monte_carlo_reliability(truth.responses, truth.grid.times, spec)
            curve.metadata.update({'dof': dof, 'alpha': schedule.alpha})
            written += curve.save(stem).values()
            density = fttf_density(first_time_to_failure(truth.responses, truth.grid.times, spec),
                                   truth.grid.times, cfg.reliability.density_bins)
            written.append(write_frame(stem.parent / f"{stem.name}_fttf_density.csv", density))
            written.append(_write_figure(visualizations.create_pof_chart(curve.to_frame(), f"DOF {dof}, {label}"),
                                         stem.parent / f"{stem.name}.html"))
            logger.info(f"DOF {dof} {label}: true P_f(T) {curve.pf_true[-1]:.4f}, surrogate "
                        f"{curve.pf_mean[-1]:.4f} [{curve.pf_lower[-1]:.4f}, {curve.pf_upper[-1]:.4f}]")
    return _finish(ctx, 'reliability', written, started)


def cmd_energy_report(ctx: RunContext) -> List[Path]:
    """Energy-ratio curves and, when trained VSN models exist, per-layer network energy"""
    started = time.perf_counter()
    ecfg = ctx.config.energy
    params = ecfg.params()
    alphas = np.linspace(0.0, 1.0, ecfg.activity_points)
    ensure_writable([ctx.path('energy', 'summary.json')], ctx.force)
    written, curves = [], {}
    summary = {'params': asdict(params), 'n_in': ecfg.n_in, 'n_out': ecfg.n_out, 'crossover': {}}
    for t_s in ecfg.spike_steps:
        frame, crossover = energy_ratio_curve(ecfg.n_in, ecfg.n_out, t_s, params, alphas)
        curves[f"T_s={t_s}"] = frame
        summary['crossover'][str(t_s)] = crossover
        written.append(write_frame(ctx.path('energy', f"ratio_ts{t_s}.csv"), frame))
        logger.info(f"T_s={t_s}: parity crossover alpha* = {crossover}")
    written.append(_write_figure(visualizations.create_energy_ratio_chart(curves),
                                 ctx.path('energy', 'ratio.html')))

    summary['network'] = {}
    for dof in ctx.config.response_dofs:
        if not ctx.path('models', f"dof{dof}", 'manifest.json').exists():
            continue
        model, _ = _load_model(ctx, dof)
        if not model.vsn:
            continue
        dataset, _ = _load_dataset(ctx, 'test', dof)
        frame = branch_network_energy(model, dataset.inputs, params)
        written.append(write_frame(ctx.path('energy', f"dof{dof}_network.csv"), frame))
        summary['network'][str(dof)] = float(frame['ratio'].iloc[-1])
    written.append(write_json(ctx.path('energy', 'summary.json'), summary))
    return _finish(ctx, 'energy-report', written, started)


def branch_network_energy(model: VariationalModel, inputs: np.ndarray, params) -> pd.DataFrame:
    """ANN vs VSN energy of the branch layers fed by VSN spikes, at measured activity"""
    arch = model.architecture
    sizes = arch.layer_sizes('branch')
    activities = [spiking_activity(record) / 100.0 for record in branch_records(model, inputs).values()]
    shapes = [
        LayerShape(sizes[i + 1], sizes[i + 2], arch.spike_steps, activities[i])
        for i in range(len(activities))
    ]
    return network_energy(shapes, params)


def run(ctx: RunContext, identity: bool = False) -> List[Path]:
    """All stages in order"""
    written = []
    written += cmd_simulate(ctx)
    written += cmd_train(ctx)
    written += cmd_calibrate(ctx)
    written += cmd_evaluate(ctx, identity)
    written += cmd_reliability(ctx)
    written += cmd_energy_report(ctx)
    return written
