"""Time-Dependent Reliability

Performance margins, first time-to-failure, Monte Carlo probability of
failure curves (direct simulation and surrogate with calibrated bounds),
NMSE and per-timestep coverage reports.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd

from utils.conformal import CalibratedInterval, ConformalSchedule, interval_from_schedule
from utils.errors import ConfigurationError, InvalidInputError, NumericalError
from utils.excitation import FunctionSampleSet
from utils.operator_network import PredictiveBand, VariationalModel, predict_bands
from utils.persistence import stem_paths, write_frame, write_json


logger = logging.getLogger(__name__)

DIRECTIONS = ('upper', 'lower', 'absolute')


@dataclass(eq=False)
class PerformanceSpec:
    """Failure threshold and exceedance sense

    direction 'upper': m = u_crit - u; 'lower': m = u - u_crit;
    'absolute': m = u_crit - |u|. u_crit may be a per-timestep array.
    """

    u_crit: Union[float, np.ndarray]
    direction: str = 'upper'

    def __post_init__(self):
        self.u_crit = np.asarray(self.u_crit, dtype=float)
        if not np.all(np.isfinite(self.u_crit)):
            raise InvalidInputError("u_crit must be finite")
        if self.direction not in DIRECTIONS:
            raise InvalidInputError(f"Unknown failure direction '{self.direction}'")

    def label(self) -> str:
        if self.u_crit.ndim == 0:
            return f"{self.direction}_{float(self.u_crit):g}"
        return f"{self.direction}_schedule"


@dataclass(eq=False)
class FttfResult:
    """First time-to-failure per trajectory; tau = T where not failed"""

    tau: np.ndarray
    failed: np.ndarray


@dataclass(eq=False)
class ReliabilityCurve:
    """Probability of failure over the grid, with bound curves"""

    times: np.ndarray
    pf_mean: np.ndarray
    pf_lower: np.ndarray
    pf_upper: np.ndarray
    n_samples: int
    unusable: np.ndarray = None
    pf_true: Optional[np.ndarray] = None
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.unusable is None:
            self.unusable = np.zeros(self.times.size, dtype=bool)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            't': self.times,
            'pf_mean': self.pf_mean,
            'pf_lower': self.pf_lower,
            'pf_upper': self.pf_upper,
            'unusable': self.unusable,
        })
        if self.pf_true is not None:
            frame['pf_true'] = self.pf_true
        return frame

    def save(self, stem: Union[str, Path]) -> Dict[str, Path]:
        paths = stem_paths(stem, ('.csv', '.json'))
        write_frame(paths['.csv'], self.to_frame())
        summary = {
            'n_samples': self.n_samples,
            'final_pf_mean': float(self.pf_mean[-1]),
            'final_pf_lower': float(self.pf_lower[-1]),
            'final_pf_upper': float(self.pf_upper[-1]),
            'n_unusable': int(self.unusable.sum()),
            **self.metadata,
        }
        if self.pf_true is not None:
            summary['final_pf_true'] = float(self.pf_true[-1])
            summary['sup_error_mean_vs_true'] = float(np.max(np.abs(self.pf_mean - self.pf_true)))
        write_json(paths['.json'], summary)
        return paths


@dataclass(eq=False)
class CoverageReport:
    """Per-timestep empirical coverage (%) and its summary"""

    times: np.ndarray
    coverage: np.ndarray
    target: float = 95.0

    @property
    def average(self) -> float:
        return float(np.mean(self.coverage))

    @property
    def minimum(self) -> float:
        return float(np.min(self.coverage))

    @property
    def maximum(self) -> float:
        return float(np.max(self.coverage))

    @property
    def n_below(self) -> int:
        return int(np.sum(self.coverage < self.target))

    @property
    def n_at_or_above(self) -> int:
        return int(np.sum(self.coverage >= self.target))

    def summary(self) -> Dict:
        return {
            'average': self.average, 'minimum': self.minimum, 'maximum': self.maximum,
            'n_below_target': self.n_below, 'n_at_or_above_target': self.n_at_or_above,
            'target': self.target,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'t': self.times, 'coverage_pct': self.coverage})


def performance_margin(u: np.ndarray, spec: PerformanceSpec) -> np.ndarray:
    """Margin m(u, t); m > 0 is safe"""
    u = np.asarray(u, dtype=float)
    if spec.direction == 'upper':
        return spec.u_crit - u
    if spec.direction == 'lower':
        return u - spec.u_crit
    return spec.u_crit - np.abs(u)


def first_time_to_failure(trajectories: np.ndarray, times: np.ndarray, spec: PerformanceSpec) -> FttfResult:
    """Earliest grid time with margin <= 0, without sub-grid interpolation

    Args:
        trajectories: (N_t,) or (N, N_t) responses on the grid
        times: Grid times
        spec: Performance specification

    Returns:
        FttfResult; tau = times[-1] and failed = False where the margin stays positive
    """
    times = np.asarray(times, dtype=float)
    values = np.atleast_2d(np.asarray(trajectories, dtype=float))
    if values.size == 0 or times.size == 0:
        raise InvalidInputError("Cannot extract a failure time from an empty trajectory")
    if values.shape[1] != times.size:
        raise InvalidInputError(f"Trajectory length {values.shape[1]} does not match grid of {times.size}")
    unsafe = performance_margin(values, spec) <= 0
    failed = unsafe.any(axis=1)
    first = np.argmax(unsafe, axis=1)
    tau = np.where(failed, times[first], times[-1])
    return FttfResult(tau, failed)


def pof_curve(fttf: FttfResult, times: np.ndarray) -> np.ndarray:
    """P_f(t) = (1/N) sum 1{failed and tau <= t} on the grid"""
    times = np.asarray(times, dtype=float)
    n = fttf.tau.size
    if n < 1:
        raise InvalidInputError("pof_curve needs at least one trajectory")
    failure_times = np.sort(fttf.tau[fttf.failed])
    return np.searchsorted(failure_times, times, side='right') / n


def threshold_for_probability(responses: np.ndarray, level: float, direction: str = 'upper') -> float:
    """u_crit whose direct-simulation P_f(T) over `responses` is about `level`

    Taken as a quantile of each trajectory's extreme value (max, min or
    max |u| for the three directions).
    """
    if not 0.0 < level < 1.0:
        raise InvalidInputError(f"Failure probability level must lie in (0, 1), got {level}")
    if direction not in DIRECTIONS:
        raise InvalidInputError(f"Unknown failure direction '{direction}'")
    values = np.atleast_2d(np.asarray(responses, dtype=float))
    if direction == 'lower':
        return float(np.quantile(np.nanmin(values, axis=1), level))
    if direction == 'absolute':
        values = np.abs(values)
    return float(np.quantile(np.nanmax(values, axis=1), 1.0 - level))


def monte_carlo_reliability(responses: np.ndarray, times: np.ndarray, spec: PerformanceSpec) -> np.ndarray:
    """Direct-simulation P_f(t) from simulated trajectories"""
    curve = pof_curve(first_time_to_failure(responses, times, spec), times)
    logger.info(f"Monte Carlo P_f(T) = {curve[-1]:.4f} over {np.atleast_2d(responses).shape[0]} "
                f"trajectories ({spec.label()})")
    return curve


def fttf_density(fttf: FttfResult, times: np.ndarray, bins: int = 20) -> pd.DataFrame:
    """Histogram density of failure times, normalized by all N trajectories

    The density integrates to P_f(T).
    """
    times = np.asarray(times, dtype=float)
    counts, edges = np.histogram(fttf.tau[fttf.failed], bins=bins, range=(times[0], times[-1]))
    width = np.diff(edges)
    return pd.DataFrame({
        'bin_left': edges[:-1],
        'bin_right': edges[1:],
        'density': counts / (fttf.tau.size * width),
    })


def reliability_from_band(band: PredictiveBand, interval: CalibratedInterval,
                          spec: PerformanceSpec) -> ReliabilityCurve:
    """Mean and bound P_f curves from a precomputed band and its intervals"""
    times = band.times
    pf_mean = pof_curve(first_time_to_failure(band.mu_hat, times, spec), times)
    lower_curve = pof_curve(first_time_to_failure(interval.lower, times, spec), times)
    upper_curve = pof_curve(first_time_to_failure(interval.upper, times, spec), times)
    unusable = np.atleast_2d(interval.flagged).any(axis=0)
    return ReliabilityCurve(times, pf_mean, np.minimum(lower_curve, upper_curve),
                            np.maximum(lower_curve, upper_curve), band.n_inputs, unusable,
                            metadata={'direction': spec.direction,
                                      'u_crit': spec.u_crit.tolist()})


def surrogate_reliability(model: VariationalModel, schedule: ConformalSchedule,
                          inputs: FunctionSampleSet, spec: PerformanceSpec, n1: int, n2: int,
                          seed: int = 0) -> ReliabilityCurve:
    """P_f(t) with calibrated bounds from the surrogate alone

    Raises:
        ConfigurationError: if the schedule or model does not match the input grid
    """
    grid = inputs.grid
    if schedule.times.size != grid.count or not np.allclose(schedule.times, grid.times):
        raise ConfigurationError("Conformal schedule grid differs from the input grid")
    if model.architecture.n_sensors != grid.count:
        raise ConfigurationError(
            f"Model expects {model.architecture.n_sensors} sensors, inputs have {grid.count}"
        )
    band = predict_bands(model, inputs.values, grid.times, n1, n2, seed)
    curve = reliability_from_band(band, interval_from_schedule(band, schedule), spec)
    if curve.unusable.any():
        logger.warning(f"P_f bounds unusable at {int(curve.unusable.sum())} timestep(s) (infinite q)")
    logger.info(f"Surrogate P_f(T) = {curve.pf_mean[-1]:.4f} "
                f"[{curve.pf_lower[-1]:.4f}, {curve.pf_upper[-1]:.4f}] ({spec.label()})")
    return curve


def nmse(predictions: np.ndarray, truths: np.ndarray) -> float:
    """Mean squared error normalized by the truth ensemble's variance

    Raises:
        NumericalError: if the truths have zero variance
    """
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.shape != truths.shape:
        raise InvalidInputError(f"Shape mismatch: {predictions.shape} vs {truths.shape}")
    observed = np.isfinite(truths)
    t = truths[observed]
    variance = np.mean((t - t.mean()) ** 2) if t.size else 0.0
    if not variance > 0:
        raise NumericalError("NMSE undefined: truth ensemble has zero variance")
    return float(np.mean((predictions[observed] - t) ** 2) / variance)


def coverage_report(interval: CalibratedInterval, truths: np.ndarray, times: np.ndarray,
                    target: float = 95.0) -> CoverageReport:
    """Per-timestep share of truths inside the interval (NaN truths skipped)"""
    truths = np.asarray(truths, dtype=float)
    if truths.shape != np.shape(interval.lower):
        raise InvalidInputError("Interval and truth shapes differ")
    observed = np.isfinite(truths)
    inside = observed & (truths >= interval.lower) & (truths <= interval.upper)
    counts = np.maximum(observed.sum(axis=0), 1)
    return CoverageReport(np.asarray(times, dtype=float), 100.0 * inside.sum(axis=0) / counts, target)


def evaluation_frame(band: PredictiveBand, truths: np.ndarray, index: int = 0,
                     interval: Optional[CalibratedInterval] = None) -> pd.DataFrame:
    """One input's truth, mean and bounds over time, for plotting"""
    frame = pd.DataFrame({
        't': band.times,
        'truth': np.asarray(truths)[index],
        'mu_hat': band.mu_hat[index],
        'sigma_hat': band.sigma_hat[index],
    })
    if interval is not None:
        frame['lower'] = interval.lower[index]
        frame['upper'] = interval.upper[index]
    return frame

