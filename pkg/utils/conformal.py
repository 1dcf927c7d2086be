"""Split Conformal Calibration

Per-timestep conformal parameters q(t_k) computed from normalized
nonconformity scores on a held-out calibration set, and the calibrated
interval mu_hat +/- z q sigma_hat.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from utils.dynamics import OperatorDataset
from utils.errors import ConfigurationError, InvalidInputError, NumericalError
from utils.operator_network import PredictiveBand, VariationalModel, predict_bands
from utils.persistence import read_frame, read_json, stem_paths, write_frame, write_json


logger = logging.getLogger(__name__)

# Slack on (n + 1)(1 - alpha) before taking the ceiling
RANK_TOLERANCE = 1e-9


@dataclass(eq=False)
class ConformalSchedule:
    """Per-timestep conformal parameters

    Attributes:
        times: Grid times t_k
        q: Conformal parameter per timestep (inf when flagged)
        n_cal: Calibration samples per timestep
        alpha: Miscoverage level
        z: Normal quantile multiplier (1.0 when use_z is off)
        metadata: Seeds and sample counts of the calibration run
    """

    times: np.ndarray
    q: np.ndarray
    n_cal: np.ndarray
    alpha: float
    z: float
    metadata: Dict = field(default_factory=dict)

    @property
    def flagged_infinite(self) -> np.ndarray:
        return ~np.isfinite(self.q)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            't': self.times,
            'q': self.q,
            'n_cal': self.n_cal.astype(int),
            'flagged_infinite': self.flagged_infinite,
        })

    def save(self, stem: Union[str, Path]) -> Dict[str, Path]:
        """Persist as `<stem>.csv` (t, q, n_cal, flagged_infinite) + `<stem>.json` header"""
        paths = stem_paths(stem, ('.csv', '.json'))
        write_frame(paths['.csv'], self.to_frame())
        write_json(paths['.json'], {'alpha': self.alpha, 'z': self.z, **self.metadata})
        return paths

    @classmethod
    def load(cls, stem: Union[str, Path]) -> 'ConformalSchedule':
        paths = stem_paths(stem, ('.csv', '.json'))
        frame = read_frame(paths['.csv'])
        header = read_json(paths['.json'])
        alpha, z = header.pop('alpha'), header.pop('z')
        return cls(frame['t'].to_numpy(dtype=float), frame['q'].to_numpy(dtype=float),
                   frame['n_cal'].to_numpy(dtype=int), float(alpha), float(z), header)


@dataclass(eq=False)
class CalibratedInterval:
    """Interval bounds per (input, time); flagged where q is infinite"""

    lower: np.ndarray
    upper: np.ndarray
    flagged: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower


def normal_quantile(alpha: float) -> float:
    """z = Phi^-1(1 - alpha / 2)"""
    _check_alpha(alpha)
    return float(norm.ppf(1.0 - alpha / 2.0))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError(f"alpha must lie in (0, 1), got {alpha}")


def nonconformity_scores(truths: np.ndarray, mu_hat: np.ndarray, sigma_hat: np.ndarray) -> np.ndarray:
    """e_i = |u_i - mu_hat_i| / sigma_hat_i

    Missing (NaN) truths give NaN scores.

    Raises:
        NumericalError: if sigma_hat is not positive where a truth is observed
    """
    truths = np.asarray(truths, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    sigma_hat = np.asarray(sigma_hat, dtype=float)
    observed = np.isfinite(truths)
    if np.any(observed & ~(sigma_hat > 0)):
        raise NumericalError("Predictive std is zero for an observed calibration sample")
    safe_sigma = np.where(observed, sigma_hat, 1.0)
    return np.where(observed, np.abs(truths - mu_hat) / safe_sigma, np.nan)


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank ceil((n + 1)(1 - alpha)) of the conformal order statistic"""
    _check_alpha(alpha)
    return max(1, math.ceil((n + 1) * (1.0 - alpha) - RANK_TOLERANCE))


def conformal_quantile(scores: np.ndarray, alpha: float) -> float:
    """Order-statistic quantile of the scores; +inf when the rank exceeds n"""
    scores = np.asarray(scores, dtype=float)
    scores = scores[np.isfinite(scores)]
    if scores.size == 0:
        raise InvalidInputError("conformal_quantile needs at least one score")
    rank = conformal_rank(scores.size, alpha)
    if rank > scores.size:
        return math.inf
    return float(np.sort(scores, kind='stable')[rank - 1])


def schedule_from_bands(truths: np.ndarray, mu_hat: np.ndarray, sigma_hat: np.ndarray,
                        times: np.ndarray, alpha: float, use_z: bool = True,
                        metadata: Optional[Dict] = None) -> ConformalSchedule:
    """Per-timestep quantiles from calibration truths and predictive bands

    Args:
        truths: (N_cal, N_t) calibration responses, NaN where unobserved
        mu_hat, sigma_hat: Predictive band on the same inputs
        times: Grid times
        alpha: Miscoverage level
        use_z: Multiply intervals by the normal quantile z

    Returns:
        ConformalSchedule over the grid
    """
    times = np.asarray(times, dtype=float)
    scores = nonconformity_scores(truths, mu_hat, sigma_hat)
    n_cal = np.sum(np.isfinite(scores), axis=0)
    q = np.empty(times.size)
    for k, t_k in enumerate(times):
        if n_cal[k] == 0:
            raise InvalidInputError(f"No calibration samples at t={t_k:.6g} s")
        q[k] = conformal_quantile(scores[:, k], alpha)
    z = normal_quantile(alpha) if use_z else 1.0
    schedule = ConformalSchedule(times, q, n_cal.astype(int), float(alpha), z, dict(metadata or {}))
    flagged = int(schedule.flagged_infinite.sum())
    if flagged:
        logger.warning(f"{flagged} timestep(s) have too few calibration samples; q is infinite there")
    return schedule


def calibrate_schedule(model: VariationalModel, cal_dataset: OperatorDataset, alpha: float,
                       n1: int, n2: int, seed: int = 0, use_z: bool = True) -> ConformalSchedule:
    """Calibrate q(t_k) on a held-out dataset

    Raises:
        ConfigurationError: if the dataset is marked as training data
    """
    if cal_dataset.role == 'train':
        raise ConfigurationError("Refusing to calibrate on a dataset whose role is 'train'")
    band = predict_bands(model, cal_dataset.inputs, cal_dataset.grid.times, n1, n2, seed)
    return schedule_from_bands(cal_dataset.responses, band.mu_hat, band.sigma_hat,
                               cal_dataset.grid.times, alpha, use_z,
                               {'n1': n1, 'n2': n2, 'seed': seed, 'use_z': use_z,
                                'n_inputs': cal_dataset.n_samples})


def calibrated_interval(mu_hat: np.ndarray, sigma_hat: np.ndarray, q: Union[float, np.ndarray],
                        z: float) -> CalibratedInterval:
    """[mu_hat - z q sigma_hat, mu_hat + z q sigma_hat]; infinite q gives (-inf, inf)"""
    if not z > 0:
        raise InvalidInputError("z must be positive")
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise InvalidInputError("Conformal parameters must be non-negative")
    mu_hat = np.asarray(mu_hat, dtype=float)
    flagged = np.broadcast_to(~np.isfinite(q), mu_hat.shape)
    half = np.where(flagged, np.inf, z * np.where(np.isfinite(q), q, 0.0) * np.asarray(sigma_hat))
    return CalibratedInterval(mu_hat - half, mu_hat + half, flagged.copy())


def interval_from_schedule(band: PredictiveBand, schedule: ConformalSchedule) -> CalibratedInterval:
    """Apply a schedule to a band on the same grid"""
    if band.times.size != schedule.times.size or not np.allclose(band.times, schedule.times):
        raise ConfigurationError("Band and conformal schedule are on different grids")
    return calibrated_interval(band.mu_hat, band.sigma_hat, schedule.q, schedule.z)


def raw_interval(band: PredictiveBand, alpha: float) -> CalibratedInterval:
    """Uncalibrated mu_hat +/- z sigma_hat"""
    return calibrated_interval(band.mu_hat, band.sigma_hat, 1.0, normal_quantile(alpha))
