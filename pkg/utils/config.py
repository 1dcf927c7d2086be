"""Experiment Configuration

One JSON file per experiment, parsed into dataclasses. Unknown keys are
rejected and every default is materialized so it can be echoed into the
run manifest.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from utils.dynamics import SystemParams, system_from_dict
from utils.energy import EnergyParams, sram_access_energy
from utils.errors import ConfigurationError, InvalidInputError
from utils.excitation import ExcitationSpec, SensorGrid, excitation_from_dict
from utils.operator_network import OperatorArchitecture, TrainConfig
from utils.reliability import DIRECTIONS, PerformanceSpec, threshold_for_probability


# Named random streams derived from the global seed
SEED_STREAMS = {
    'train': 0,
    'cal': 1,
    'test': 2,
    'reliability': 3,
    'model': 4,
    'calibration_draws': 5,
    'evaluation_draws': 6,
    'reliability_draws': 7,
}


def derive_seed(global_seed: int, stream: str) -> int:
    """Deterministic 32-bit seed of a named stream"""
    if stream not in SEED_STREAMS:
        raise ConfigurationError(f"Unknown seed stream '{stream}'")
    sequence = np.random.SeedSequence([int(global_seed), SEED_STREAMS[stream]])
    return int(sequence.generate_state(1)[0])


def _build(cls, payload: Optional[Dict], section: str):
    payload = dict(payload or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigurationError(f"Unknown key(s) in '{section}': {unknown}")
    try:
        return cls(**payload)
    except (TypeError, InvalidInputError) as e:
        raise ConfigurationError(f"Invalid '{section}' section: {e}") from e


@dataclass
class SystemConfig:
    kind: str = 'boucwen_sdof'
    params: Dict = field(default_factory=dict)

    def build(self) -> SystemParams:
        try:
            return system_from_dict({'kind': self.kind, **self.params})
        except (TypeError, InvalidInputError) as e:
            raise ConfigurationError(f"Invalid system: {e}") from e


@dataclass
class ExcitationConfig:
    kind: str = 'grf'
    params: Dict = field(default_factory=dict)

    def build(self, seed: int) -> ExcitationSpec:
        try:
            return excitation_from_dict({'kind': self.kind, **self.params}, seed=seed)
        except (TypeError, InvalidInputError) as e:
            raise ConfigurationError(f"Invalid excitation: {e}") from e


@dataclass
class GridConfig:
    duration: float = 2.0
    frequency: float = 50.0
    dt: float = 1e-3

    def build(self) -> SensorGrid:
        return SensorGrid.uniform(self.duration, self.frequency)


@dataclass
class SamplesConfig:
    train: int = 200
    cal: int = 100
    test: int = 1000
    reliability: int = 2000

    def __post_init__(self):
        for name in ('train', 'cal', 'test', 'reliability'):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"samples.{name} must be at least 1")


@dataclass
class ArchitectureConfig:
    branch_widths: Tuple[int, ...] = (50, 50, 50)
    trunk_widths: Tuple[int, ...] = (50, 50, 50)
    latent: int = 25
    activated_layers: int = 2
    branch_activation: str = 'vsn'
    spike_steps: int = 2
    surrogate_slope: float = 25.0
    learn_thresholds: bool = True
    learn_leak: bool = True
    phi: str = 'relu'
    threshold_init: float = 0.1
    leak_init: float = 0.9
    init_std: Optional[float] = None
    sigma_init: float = 1e-3

    def build(self, n_sensors: int) -> OperatorArchitecture:
        try:
            return OperatorArchitecture(n_sensors=n_sensors, **asdict(self))
        except InvalidInputError as e:
            raise ConfigurationError(f"Invalid architecture: {e}") from e


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    iterations: int = 5000
    kl_weight: Optional[float] = None
    n_elbo_samples: int = 1
    retain_best: bool = True
    select_on: str = 'posterior_mean'
    log_every: int = 500

    def build(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig(seed=seed, **asdict(self))
        except InvalidInputError as e:
            raise ConfigurationError(f"Invalid training settings: {e}") from e


@dataclass
class ConformalConfig:
    alpha: float = 0.05
    use_z: bool = True
    n1: int = 50
    n2: int = 10

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise InvalidInputError("alpha must lie in (0, 1)")
        if self.n1 < 1 or self.n2 < 1:
            raise InvalidInputError("n1 and n2 must be at least 1")


@dataclass
class ReliabilityConfig:
    """Failure thresholds

    `per_dof` maps a DOF index to its own threshold list; `threshold_schedule`
    names a CSV with columns t, u_crit. `target_pf` lists final failure
    probabilities whose thresholds are read off the direct-simulation
    responses; with nothing else given a single level of 0.5 is used.
    """

    thresholds: List[float] = field(default_factory=list)
    per_dof: Dict[str, List[float]] = field(default_factory=dict)
    target_pf: List[float] = field(default_factory=list)
    direction: str = 'upper'
    threshold_schedule: Optional[str] = None
    density_bins: int = 20

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise InvalidInputError(f"Unknown failure direction '{self.direction}'")
        if any(not 0.0 < level < 1.0 for level in self.target_pf):
            raise InvalidInputError("target_pf levels must lie in (0, 1)")
        if not (self.thresholds or self.per_dof or self.target_pf or self.threshold_schedule):
            self.target_pf = [0.5]

    def specs(self, grid: SensorGrid, base_dir: Optional[Path] = None, dof: Optional[int] = None,
              responses: Optional[np.ndarray] = None) -> Dict[str, PerformanceSpec]:
        """Performance specs keyed by label

        `responses` are the direct-simulation trajectories of `dof`; they
        are required only when target_pf is set.
        """
        specs = {}
        thresholds = self.per_dof.get(str(dof), self.thresholds)
        for u_crit in thresholds:
            spec = PerformanceSpec(float(u_crit), self.direction)
            specs[spec.label()] = spec
        if self.target_pf and responses is None:
            raise ConfigurationError("target_pf thresholds need the direct-simulation responses")
        for level in self.target_pf:
            u_crit = threshold_for_probability(responses, level, self.direction)
            specs[f"{self.direction}_pf{level:g}"] = PerformanceSpec(u_crit, self.direction)
        if self.threshold_schedule:
            path = Path(self.threshold_schedule)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            specs['schedule'] = PerformanceSpec(load_threshold_schedule(path, grid), self.direction)
        if not specs:
            raise ConfigurationError("reliability needs at least one threshold")
        return specs


@dataclass
class EnergyConfig:
    n_in: int = 100
    n_out: int = 100
    spike_steps: Tuple[int, ...] = (1, 2)
    e_mac: float = 3.1
    e_acc: float = 0.1
    e_rd: float = 5.0
    e_wr: float = 5.0
    activity_points: int = 101
    sram_capacity_kb: Optional[float] = None
    sram_table: Optional[Dict[str, float]] = None

    def params(self) -> EnergyParams:
        e_rd, e_wr = self.e_rd, self.e_wr
        if self.sram_table and self.sram_capacity_kb is not None:
            e_rd = e_wr = sram_access_energy(self.sram_capacity_kb, self.sram_table)
        return EnergyParams(self.e_mac, self.e_acc, e_rd, e_wr)


@dataclass
class ExperimentConfig:
    """Everything one pipeline run needs"""

    name: str = 'experiment'
    seed: int = 0
    system: SystemConfig = field(default_factory=SystemConfig)
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    samples: SamplesConfig = field(default_factory=SamplesConfig)
    response_dofs: List[int] = field(default_factory=lambda: [0])
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    reliability: ReliabilityConfig = field(default_factory=ReliabilityConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    source: Optional[str] = None

    SECTIONS = {
        'system': SystemConfig,
        'excitation': ExcitationConfig,
        'grid': GridConfig,
        'samples': SamplesConfig,
        'architecture': ArchitectureConfig,
        'training': TrainingConfig,
        'conformal': ConformalConfig,
        'reliability': ReliabilityConfig,
        'energy': EnergyConfig,
    }

    @classmethod
    def from_dict(cls, payload: Dict, source: Optional[str] = None) -> 'ExperimentConfig':
        payload = dict(payload)
        known = {f.name for f in fields(cls)} - {'source'}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ConfigurationError(f"Unknown top-level key(s): {unknown}")
        kwargs = {name: _build(section, payload.pop(name, None), name)
                  for name, section in cls.SECTIONS.items()}
        config = cls(**payload, **kwargs, source=source)
        config.validate()
        return config

    def validate(self) -> None:
        system = self.system.build()
        if not self.response_dofs:
            raise ConfigurationError("response_dofs must list at least one DOF")
        for dof in self.response_dofs:
            if not 0 <= int(dof) < system.n_dof:
                raise ConfigurationError(f"response DOF {dof} outside 0..{system.n_dof - 1}")
        self.excitation.build(self.seed)
        self.grid.build()

    def to_dict(self) -> Dict:
        payload = asdict(self)
        payload.pop('source')
        return payload

    def sha256(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(text.encode('utf-8')).hexdigest()

    def seed_for(self, stream: str) -> int:
        return derive_seed(self.seed, stream)


def load_config(path: Union[str, Path], seed: Optional[int] = None) -> ExperimentConfig:
    """Read a JSON experiment config, optionally overriding the global seed"""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config {path} is not valid JSON: {e}") from e
    if seed is not None:
        payload['seed'] = int(seed)
    return ExperimentConfig.from_dict(payload, source=str(path))


def load_threshold_schedule(path: Path, grid: SensorGrid) -> np.ndarray:
    """Per-timestep u_crit from a CSV with columns t, u_crit, interpolated onto the grid"""
    if not path.exists():
        raise ConfigurationError(f"Threshold schedule not found: {path}")
    frame = pd.read_csv(path)
    if not {'t', 'u_crit'} <= set(frame.columns):
        raise ConfigurationError(f"Threshold schedule {path} needs columns t and u_crit")
    frame = frame.sort_values('t')
    return np.interp(grid.times, frame['t'].to_numpy(dtype=float), frame['u_crit'].to_numpy(dtype=float))
