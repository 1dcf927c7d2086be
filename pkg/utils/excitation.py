"""Stochastic Excitation Generators

Sensor grids plus the two input-function ensembles used by the benchmark
systems: a zero-mean Gaussian random field with a squared-exponential
kernel, and random Fourier-series forces with uniformly drawn amplitudes
and frequencies.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from utils.errors import InvalidInputError, NumericalError
from utils.persistence import read_json, read_matrix, stem_paths, write_json, write_matrix


logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SensorGrid:
    """Uniform, strictly increasing time grid (s)"""

    times: np.ndarray

    # Relative tolerance on uniform spacing
    SPACING_RTOL = 1e-12

    def __post_init__(self):
        times = np.array(self.times, dtype=float).ravel()
        if times.size == 0:
            raise InvalidInputError("Sensor grid is empty")
        if not np.all(np.isfinite(times)):
            raise InvalidInputError("Sensor grid contains non-finite times")
        if times.size > 1:
            diffs = np.diff(times)
            if np.any(diffs <= 0):
                raise InvalidInputError("Sensor grid must be strictly increasing")
            step = (times[-1] - times[0]) / (times.size - 1)
            tol = self.SPACING_RTOL * max(step, np.abs(times).max())
            if np.abs(diffs - step).max() > tol:
                raise InvalidInputError("Sensor grid spacing is not uniform")
        times.setflags(write=False)
        object.__setattr__(self, 'times', times)

    @classmethod
    def uniform(cls, duration: float, frequency: float, start: float = 0.0) -> 'SensorGrid':
        """Grid recorded at a fixed sampling frequency, endpoints included

        Args:
            duration: Horizon length T in seconds
            frequency: Sampling frequency in Hz

        Returns:
            SensorGrid with round(duration * frequency) + 1 points
        """
        if duration <= 0 or frequency <= 0:
            raise InvalidInputError("Duration and frequency must be positive")
        count = int(round(duration * frequency)) + 1
        return cls(start + np.arange(count) / frequency)

    @property
    def count(self) -> int:
        return int(self.times.size)

    @property
    def spacing(self) -> float:
        """Uniform spacing, 0 for a single-point grid"""
        if self.count < 2:
            return 0.0
        return float((self.times[-1] - self.times[0]) / (self.count - 1))

    @property
    def horizon(self) -> Tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def matches(self, other: 'SensorGrid') -> bool:
        return self.count == other.count and np.array_equal(self.times, other.times)


@dataclass(frozen=True)
class GrfSpec:
    """Zero-mean Gaussian random field with squared-exponential kernel"""

    sigma: float = 50.0
    length_scale: float = 0.10
    jitter: float = 0.0
    seed: int = 0

    # Jitter escalation window, in units of sigma^2
    JITTER_START = 1e-8
    JITTER_LIMIT = 1e-2

    def __post_init__(self):
        if not self.sigma > 0 or not self.length_scale > 0:
            raise InvalidInputError("GRF sigma and length_scale must be positive")
        if self.jitter < 0:
            raise InvalidInputError("GRF jitter must be non-negative")


@dataclass(frozen=True)
class FourierForceSpec:
    """Random Fourier-series force: sum of n_s sines and n_c cosines"""

    n_s: int = 10
    n_c: int = 10
    amp_range: Tuple[float, float] = (0.0, 1.0)
    freq_range: Tuple[float, float] = (0.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_s < 0 or self.n_c < 0:
            raise InvalidInputError("Fourier term counts must be non-negative")
        for name, (lo, hi) in (('amp_range', self.amp_range), ('freq_range', self.freq_range)):
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise InvalidInputError(f"Invalid {name}: [{lo}, {hi}]")
        object.__setattr__(self, 'amp_range', tuple(float(v) for v in self.amp_range))
        object.__setattr__(self, 'freq_range', tuple(float(v) for v in self.freq_range))


ExcitationSpec = Union[GrfSpec, FourierForceSpec]


@dataclass(eq=False)
class FunctionSampleSet:
    """Ensemble of discretized input functions on a shared sensor grid

    Attributes:
        grid: Sensor grid
        values: N_s x N_t matrix, one realization per row
        provenance: Generator spec and seed as a JSON-ready dict
    """

    grid: SensorGrid
    values: np.ndarray
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != self.grid.count:
            raise InvalidInputError(
                f"Sample matrix shape {values.shape} does not match grid of {self.grid.count} points"
            )
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("Sample matrix contains non-finite values")
        values.setflags(write=False)
        self.values = values

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])

    def row(self, index: int) -> np.ndarray:
        return self.values[index]

    def save(self, stem: Union[str, Path]) -> Dict[str, Path]:
        """Persist as `<stem>.csv` (header = grid times) plus `<stem>.json`"""
        paths = stem_paths(stem, ('.csv', '.json'))
        write_matrix(paths['.csv'], self.values, self.grid.times)
        write_json(paths['.json'], {
            'n_samples': self.n_samples,
            'n_times': self.grid.count,
            'provenance': self.provenance,
        })
        return paths

    @classmethod
    def load(cls, stem: Union[str, Path]) -> 'FunctionSampleSet':
        paths = stem_paths(stem, ('.csv', '.json'))
        values, times = read_matrix(paths['.csv'])
        sidecar = read_json(paths['.json'])
        return cls(SensorGrid(times), values, sidecar.get('provenance', {}))


def spec_provenance(spec: ExcitationSpec) -> Dict:
    """JSON-ready description of a generator spec"""
    kind = 'grf' if isinstance(spec, GrfSpec) else 'fourier'
    payload = asdict(spec)
    payload['kind'] = kind
    return payload


def se_kernel_matrix(grid: Union[SensorGrid, np.ndarray], sigma: float, length_scale: float) -> np.ndarray:
    """Squared-exponential covariance on a time grid

    K[i, j] = sigma^2 * exp(-(t_i - t_j)^2 / (2 l^2))

    Args:
        grid: SensorGrid or 1-D array of times
        sigma: Kernel amplitude
        length_scale: Kernel length scale (s)

    Returns:
        Exactly symmetric N_t x N_t matrix with diagonal sigma^2
    """
    times = grid.times if isinstance(grid, SensorGrid) else np.asarray(grid, dtype=float).ravel()
    if not np.all(np.isfinite(times)):
        raise InvalidInputError("Kernel grid contains non-finite times")
    if not sigma > 0 or not length_scale > 0:
        raise InvalidInputError("Kernel sigma and length_scale must be positive")
    diff = times[:, None] - times[None, :]
    K = sigma ** 2 * np.exp(-(diff ** 2) / (2.0 * length_scale ** 2))
    return 0.5 * (K + K.T)


def _jittered_cholesky(K: np.ndarray, start: float, limit: float) -> Tuple[np.ndarray, float]:
    """Cholesky factor of K + jitter * I, escalating jitter x10 on failure"""
    jitter = start
    eye = np.eye(K.shape[0])
    while True:
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            if jitter >= limit:
                raise NumericalError(
                    f"Cholesky factorization failed with jitter up to {jitter:.3e}"
                )
            jitter = min(jitter * 10.0, limit)


def sample_grf(spec: GrfSpec, grid: SensorGrid, n_samples: int) -> FunctionSampleSet:
    """Draw independent realizations of the zero-mean Gaussian random field

    Args:
        spec: Kernel parameters and seed
        grid: Sensor grid
        n_samples: Number of rows to draw

    Returns:
        FunctionSampleSet whose rows are draws from N(0, K + jitter I)
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    K = se_kernel_matrix(grid, spec.sigma, spec.length_scale)
    scale = spec.sigma ** 2
    start = max(spec.jitter, GrfSpec.JITTER_START * scale)
    L, jitter = _jittered_cholesky(K, start, max(start, GrfSpec.JITTER_LIMIT * scale))
    rng = np.random.default_rng(spec.seed)
    values = rng.standard_normal((n_samples, grid.count)) @ L.T
    provenance = spec_provenance(spec)
    provenance['applied_jitter'] = jitter
    return FunctionSampleSet(grid, values, provenance)


def fourier_coefficients(spec: FourierForceSpec, index: int) -> Dict[str, np.ndarray]:
    """Coefficients of row `index`, reproducible from (seed, index) alone"""
    rng = np.random.default_rng([spec.seed, index])
    a_lo, a_hi = spec.amp_range
    f_lo, f_hi = spec.freq_range
    return {
        'a_s': rng.uniform(a_lo, a_hi, spec.n_s),
        'f_s': rng.uniform(f_lo, f_hi, spec.n_s),
        'a_c': rng.uniform(a_lo, a_hi, spec.n_c),
        'f_c': rng.uniform(f_lo, f_hi, spec.n_c),
    }


def fourier_force(coefficients: Dict[str, np.ndarray], times: np.ndarray) -> np.ndarray:
    """Evaluate sum a_s sin(f_s t) + sum a_c cos(f_c t) on `times`"""
    t = np.asarray(times, dtype=float)
    value = np.zeros_like(t)
    if coefficients['a_s'].size:
        value = value + coefficients['a_s'] @ np.sin(np.outer(coefficients['f_s'], t))
    if coefficients['a_c'].size:
        value = value + coefficients['a_c'] @ np.cos(np.outer(coefficients['f_c'], t))
    return value


def sample_fourier_force(spec: FourierForceSpec, grid: SensorGrid, n_samples: int) -> FunctionSampleSet:
    """Draw random Fourier-series forces on the sensor grid

    Args:
        spec: Term counts, uniform ranges and seed
        grid: Sensor grid
        n_samples: Number of rows to draw

    Returns:
        FunctionSampleSet, row i generated from (spec.seed, i)
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be at least 1")
    values = np.vstack([
        fourier_force(fourier_coefficients(spec, i), grid.times) for i in range(n_samples)
    ])
    return FunctionSampleSet(grid, values, spec_provenance(spec))


def sample_excitation(spec: ExcitationSpec, grid: SensorGrid, n_samples: int) -> FunctionSampleSet:
    """Dispatch to the generator matching the spec type"""
    if isinstance(spec, GrfSpec):
        sample_set = sample_grf(spec, grid, n_samples)
    elif isinstance(spec, FourierForceSpec):
        sample_set = sample_fourier_force(spec, grid, n_samples)
    else:
        raise InvalidInputError(f"Unknown excitation spec: {type(spec).__name__}")
    logger.debug(f"Sampled {n_samples} {sample_set.provenance['kind']} inputs (seed {spec.seed})")
    return sample_set


def excitation_from_dict(payload: Dict, seed: Optional[int] = None) -> ExcitationSpec:
    """Build a spec from its JSON form, optionally overriding the seed"""
    payload = dict(payload)
    kind = payload.pop('kind', 'grf')
    payload.pop('applied_jitter', None)
    if seed is not None:
        payload['seed'] = int(seed)
    if kind == 'grf':
        return GrfSpec(**payload)
    if kind == 'fourier':
        for key in ('amp_range', 'freq_range'):
            if key in payload:
                payload[key] = tuple(payload[key])
        return FourierForceSpec(**payload)
    raise InvalidInputError(f"Unknown excitation kind '{kind}'")
