"""Ground-Truth Dynamical Systems

Fixed-step RK4 simulators for the benchmark systems (Bouc-Wen SDOF,
five-DOF chain with a Duffing spring at DOF 1, N-DOF shear chain with a
Bouc-Wen element at DOF 1) and the generator of operator-learning datasets.

All right-hand sides act on the last axis of `state`, so a whole batch of
samples can be marched at once.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from utils.errors import DivergenceError, InvalidInputError
from utils.excitation import FunctionSampleSet, SensorGrid
from utils.persistence import read_json, read_matrix, write_json, write_matrix


logger = logging.getLogger(__name__)

GRAVITY = 9.81

RhsFunction = Callable[[np.ndarray, float, np.ndarray], np.ndarray]


@dataclass
class BoucWenSdofParams:
    """Single-DOF oscillator on a Bouc-Wen hysteretic isolator"""

    m: float = 6800.0
    c: float = 3750.0
    k: float = 2.32e5
    Q_y: float = 0.05 * 6800.0 * GRAVITY
    k_r: float = 1.0 / 6.0
    alpha: float = 1.0
    beta_bw: float = 0.5
    gamma: float = 0.5
    eta: float = 2.0
    D_y: float = 0.0013
    x0: float = 0.005
    v0: float = 0.001
    z0: float = 0.001
    base_excitation: bool = False

    kind = 'boucwen_sdof'

    def __post_init__(self):
        if min(self.m, self.c, self.k, self.D_y) <= 0:
            raise InvalidInputError("Bouc-Wen m, c, k and D_y must be positive")
        if self.eta < 1:
            raise InvalidInputError("Bouc-Wen eta must be >= 1")

    @property
    def n_dof(self) -> int:
        return 1

    @property
    def state_size(self) -> int:
        return 3

    def initial_state(self) -> np.ndarray:
        return np.array([self.x0, self.v0, self.z0], dtype=float)

    def rhs(self, state: np.ndarray, t: float, f: np.ndarray) -> np.ndarray:
        return boucwen_sdof_rhs(state, t, f, self)


@dataclass
class Duffing5DofParams:
    """Five-DOF chain with a cubic (Duffing) spring at DOF 1"""

    m: Tuple[float, ...] = (10.0, 10.0, 9.0, 9.0, 7.5)
    k: Tuple[float, ...] = (10000.0, 10000.0, 9000.0, 9000.0, 7500.0)
    c: Tuple[float, ...] = (100.0, 100.0, 90.0, 90.0, 75.0)
    alpha_do: float = 100.0
    x0: float = 0.01
    v0: float = 0.05
    base_excitation: bool = True

    kind = 'duffing_5dof'

    def __post_init__(self):
        self.m, self.k, self.c = (tuple(float(v) for v in arr) for arr in (self.m, self.k, self.c))
        if not (len(self.m) == len(self.k) == len(self.c) == 5):
            raise InvalidInputError("Duffing chain needs exactly five m, k, c values")
        if min(self.m + self.k + self.c) <= 0:
            raise InvalidInputError("Duffing masses, stiffnesses and dampings must be positive")

    @property
    def n_dof(self) -> int:
        return 5

    @property
    def state_size(self) -> int:
        return 10

    def initial_state(self) -> np.ndarray:
        return np.concatenate([np.full(5, self.x0), np.full(5, self.v0)])

    def rhs(self, state: np.ndarray, t: float, f: np.ndarray) -> np.ndarray:
        return duffing_5dof_rhs(state, t, f, self)


@dataclass
class ShearChainParams:
    """Uniform N-story shear chain with a Bouc-Wen element at DOF 1

    Per-story m, k, c may be scalars (uniform) or length-n sequences.
    """

    n_dof: int = 76
    m: Union[float, Tuple[float, ...]] = 1.0e4
    k: Union[float, Tuple[float, ...]] = 4.0e7
    c: Union[float, Tuple[float, ...]] = 5.0e4
    Q_y: float = 0.05 * 1.0e4 * GRAVITY
    k_r: float = 1.0 / 6.0
    alpha: float = 1.0
    beta_bw: float = 0.5
    gamma: float = 0.5
    eta: float = 2.0
    D_y: float = 0.0013
    x0: float = 0.0
    v0: float = 0.0
    z0: float = 0.0
    base_excitation: bool = True

    kind = 'shear_chain'

    def __post_init__(self):
        if self.n_dof < 1:
            raise InvalidInputError("Shear chain needs at least one DOF")
        for name in ('m', 'k', 'c'):
            values = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.n_dof,))
            if np.any(values <= 0):
                raise InvalidInputError(f"Shear chain {name} must be positive")
        if self.D_y <= 0 or self.eta < 1:
            raise InvalidInputError("Bouc-Wen D_y must be positive and eta >= 1")

    def story(self, name: str) -> np.ndarray:
        """Per-story array of 'm', 'k' or 'c'"""
        return np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (self.n_dof,))

    @property
    def state_size(self) -> int:
        return 2 * self.n_dof + 1

    def initial_state(self) -> np.ndarray:
        n = self.n_dof
        return np.concatenate([np.full(n, self.x0), np.full(n, self.v0), [self.z0]])

    def rhs(self, state: np.ndarray, t: float, f: np.ndarray) -> np.ndarray:
        return shear_chain_boucwen_rhs(state, t, f, self)


SystemParams = Union[BoucWenSdofParams, Duffing5DofParams, ShearChainParams]

SYSTEM_TYPES = {
    'boucwen_sdof': BoucWenSdofParams,
    'duffing_5dof': Duffing5DofParams,
    'shear_chain': ShearChainParams,
}


def system_to_dict(params: SystemParams) -> Dict:
    payload = asdict(params)
    payload['kind'] = params.kind
    return payload


def system_from_dict(payload: Dict) -> SystemParams:
    payload = dict(payload)
    kind = payload.pop('kind', 'boucwen_sdof')
    if kind not in SYSTEM_TYPES:
        raise InvalidInputError(f"Unknown system kind '{kind}'")
    for key in ('m', 'k', 'c'):
        if isinstance(payload.get(key), list):
            payload[key] = tuple(payload[key])
    return SYSTEM_TYPES[kind](**payload)


@dataclass(eq=False)
class Trajectory:
    """Recorded response of one simulation

    Attributes:
        grid: Record grid
        states: N_t x d state history (displacements first)
        n_dof: Number of displacement coordinates
    """

    grid: SensorGrid
    states: np.ndarray
    n_dof: int = 1

    @property
    def dof_displacements(self) -> np.ndarray:
        return self.states[..., :self.n_dof]


def _abs_pow(z: np.ndarray, power: float) -> np.ndarray:
    """|z|**power with 0**p := 0 for p <= 0"""
    az = np.abs(z)
    if power > 0:
        return az ** power
    with np.errstate(divide='ignore'):
        return np.where(az > 0, az ** power, 0.0)


def _boucwen_zdot(v: np.ndarray, z: np.ndarray, alpha: float, beta_bw: float,
                  gamma: float, eta: float, D_y: float) -> np.ndarray:
    """dz/dt = (alpha v - gamma z |v| |z|^(eta-1) - beta v |z|^eta) / D_y"""
    return (alpha * v - gamma * z * np.abs(v) * _abs_pow(z, eta - 1.0)
            - beta_bw * v * _abs_pow(z, eta)) / D_y


def boucwen_sdof_rhs(state: np.ndarray, t: float, f: np.ndarray, p: BoucWenSdofParams) -> np.ndarray:
    """State derivative of the Bouc-Wen SDOF oscillator, state = (x, v, z)

    m x'' + c x' + k x + (1 - k_r) Q_y z = f   (or -m f for base excitation)
    """
    x, v, z = state[..., 0], state[..., 1], state[..., 2]
    load = -p.m * f if p.base_excitation else f
    vdot = (load - p.c * v - p.k * x - (1.0 - p.k_r) * p.Q_y * z) / p.m
    zdot = _boucwen_zdot(v, z, p.alpha, p.beta_bw, p.gamma, p.eta, p.D_y)
    return np.stack([v, vdot, zdot], axis=-1)


def _chain_restoring_force(x: np.ndarray, v: np.ndarray, k: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Linear restoring force of a ground-anchored chain (last axis = DOF)

    Story i links DOF i-1 (ground for i = 0) to DOF i.
    """
    pad = [(0, 0)] * (x.ndim - 1) + [(1, 0)]
    drift = np.diff(np.pad(x, pad), axis=-1)
    drift_rate = np.diff(np.pad(v, pad), axis=-1)
    story = k * drift + c * drift_rate
    above = np.zeros_like(story)
    above[..., :-1] = story[..., 1:]
    return story - above


def duffing_5dof_rhs(state: np.ndarray, t: float, f: np.ndarray, p: Duffing5DofParams) -> np.ndarray:
    """State derivative of the five-DOF Duffing chain, state = (x[5], v[5])"""
    m, k, c = (np.asarray(a) for a in (p.m, p.k, p.c))
    x, v = state[..., :5], state[..., 5:]
    force = -_chain_restoring_force(x, v, k, c)
    force[..., 0] -= p.alpha_do * x[..., 0] ** 3
    f = np.asarray(f)[..., None]
    force = force + (-m * f if p.base_excitation else np.broadcast_to(f, force.shape))
    return np.concatenate([v, force / m], axis=-1)


def shear_chain_boucwen_rhs(state: np.ndarray, t: float, f: np.ndarray, p: ShearChainParams) -> np.ndarray:
    """State derivative of the shear chain, state = (x[n], v[n], z)

    The Bouc-Wen force (1 - k_r) Q_y z acts on DOF 1 and z is driven by its
    velocity, as in the SDOF model.
    """
    n = p.n_dof
    m, k, c = p.story('m'), p.story('k'), p.story('c')
    x, v, z = state[..., :n], state[..., n:2 * n], state[..., 2 * n]
    force = -_chain_restoring_force(x, v, k, c)
    force[..., 0] -= (1.0 - p.k_r) * p.Q_y * z
    f = np.asarray(f)[..., None]
    force = force + (-m * f if p.base_excitation else np.broadcast_to(f, force.shape))
    zdot = _boucwen_zdot(v[..., 0], z, p.alpha, p.beta_bw, p.gamma, p.eta, p.D_y)
    return np.concatenate([v, force / m, zdot[..., None]], axis=-1)


def chain_mechanical_energy(p: Union[Duffing5DofParams, ShearChainParams], states: np.ndarray) -> np.ndarray:
    """Kinetic plus linear inter-story strain energy (J) per recorded state"""
    if isinstance(p, ShearChainParams):
        n, m, k = p.n_dof, p.story('m'), p.story('k')
    else:
        n, m, k = 5, np.asarray(p.m), np.asarray(p.k)
    x, v = states[..., :n], states[..., n:2 * n]
    pad = [(0, 0)] * (x.ndim - 1) + [(1, 0)]
    drift = np.diff(np.pad(x, pad), axis=-1)
    return 0.5 * np.sum(m * v ** 2, axis=-1) + 0.5 * np.sum(k * drift ** 2, axis=-1)


def _substeps(record_grid: SensorGrid, dt: float) -> int:
    if dt <= 0:
        raise InvalidInputError("Integration step dt must be positive")
    if record_grid.count < 2:
        return 0
    ratio = record_grid.spacing / dt
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > 1e-9 * max(1.0, ratio):
        raise InvalidInputError(
            f"dt={dt} does not divide the record spacing {record_grid.spacing}"
        )
    return steps


def _march(rhs: RhsFunction, y0: np.ndarray, forcing: np.ndarray, record_grid: SensorGrid,
           dt: float) -> np.ndarray:
    """Classical RK4 over a batch; forcing is linearly interpolated

    Args:
        y0: (B, d) initial states
        forcing: (B, N_t) forcing on the record grid

    Returns:
        (B, N_t, d) states at record times
    """
    substeps = _substeps(record_grid, dt)
    times = record_grid.times
    n_rec = record_grid.count
    batch, dim = y0.shape
    out = np.empty((batch, n_rec, dim))
    out[:, 0] = y0
    if n_rec == 1:
        return out
    h = record_grid.spacing / substeps
    y = y0.copy()
    for j in range(n_rec - 1):
        f_left, f_right = forcing[:, j], forcing[:, j + 1]
        for s in range(substeps):
            w0, wh, w1 = s / substeps, (s + 0.5) / substeps, (s + 1.0) / substeps
            t = times[j] + s * h
            fa = f_left + w0 * (f_right - f_left)
            fm = f_left + wh * (f_right - f_left)
            fb = f_left + w1 * (f_right - f_left)
            k1 = rhs(y, t, fa)
            k2 = rhs(y + 0.5 * h * k1, t + 0.5 * h, fm)
            k3 = rhs(y + 0.5 * h * k2, t + 0.5 * h, fm)
            k4 = rhs(y + h * k3, t + h, fb)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(y)):
                bad = int(np.flatnonzero(~np.all(np.isfinite(y), axis=1))[0])
                t_fail = t + h
                raise DivergenceError(
                    f"Integration diverged at t={t_fail:.6g} s (batch row {bad})",
                    time=t_fail, sample_index=bad,
                )
        out[:, j + 1] = y
    return out


def rk4_integrate(rhs: RhsFunction, initial_state: np.ndarray, forcing: np.ndarray, dt: float,
                  record_grid: SensorGrid, n_dof: int = 1) -> Trajectory:
    """Integrate one forcing history with fixed-step RK4

    Args:
        rhs: State derivative f(state, t, force), vectorized over leading axes
        initial_state: State vector at record_grid.times[0]
        forcing: Forcing values at the record-grid points
        dt: Integration step; must divide the record spacing
        record_grid: Times at which states are recorded
        n_dof: Number of leading displacement coordinates

    Returns:
        Trajectory recorded exactly at the record-grid times
    """
    forcing = np.asarray(forcing, dtype=float).ravel()
    if forcing.size != record_grid.count:
        raise InvalidInputError("Forcing must cover every record-grid point")
    y0 = np.asarray(initial_state, dtype=float).ravel()[None, :]
    states = _march(rhs, y0, forcing[None, :], record_grid, dt)[0]
    return Trajectory(record_grid, states, n_dof)


def simulate_responses(system: SystemParams, excitation: FunctionSampleSet, dt: float = 1e-3,
                       n_workers: int = 1, chunk_size: int = 256) -> np.ndarray:
    """Simulate every excitation row and return the full state histories

    Samples are integrated in vectorized chunks; chunks may run on a thread
    pool and are merged back in sample order.

    Args:
        system: System parameters
        excitation: Forcing ensemble on the record grid
        dt: Integration step (s)
        n_workers: Maximum worker threads
        chunk_size: Samples per vectorized chunk

    Returns:
        (N_s, N_t, d) state array
    """
    grid = excitation.grid
    n = excitation.n_samples
    y0 = np.tile(system.initial_state(), (n, 1))
    starts = list(range(0, n, chunk_size))

    def run_chunk(start: int) -> np.ndarray:
        stop = min(start + chunk_size, n)
        try:
            return _march(system.rhs, y0[start:stop], excitation.values[start:stop], grid, dt)
        except DivergenceError as e:
            index = start + (e.sample_index or 0)
            raise DivergenceError(
                f"Sample {index} diverged at t={e.time:.6g} s", time=e.time, sample_index=index
            ) from e

    if n_workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            chunks = list(pool.map(run_chunk, starts))
    else:
        chunks = [run_chunk(s) for s in starts]
    logger.debug(f"Simulated {n} samples of {system.kind} ({len(starts)} chunks)")
    return np.concatenate(chunks, axis=0)


@dataclass(eq=False)
class OperatorDataset:
    """Operator-learning triplets (f_n, t_n, u_n) stored in grid form

    Triplet n = i * N_t + k pairs input row i with time t_k and response
    responses[i, k]. Responses may hold NaN where a timestep has no
    observation (calibration data grouped per timestep).

    Attributes:
        grid: Sensor/record grid
        inputs: N_s x N_t discretized input functions
        responses: N_s x N_t displacement at `dof`
        dof: Response DOF index (0-based)
        role: 'train', 'cal' or 'test'
        metadata: System spec, excitation provenance, dt
    """

    grid: SensorGrid
    inputs: np.ndarray
    responses: np.ndarray
    dof: int = 0
    role: str = 'train'
    metadata: Dict = field(default_factory=dict)

    ROLES = ('train', 'cal', 'test')

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.responses = np.asarray(self.responses, dtype=float)
        if self.inputs.shape != self.responses.shape or self.inputs.shape[1] != self.grid.count:
            raise InvalidInputError(
                f"Inputs {self.inputs.shape} / responses {self.responses.shape} do not match "
                f"grid of {self.grid.count} points"
            )
        if self.role not in self.ROLES:
            raise InvalidInputError(f"Unknown dataset role '{self.role}'")

    @property
    def n_samples(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def n_triplets(self) -> int:
        return int(self.inputs.shape[0] * self.grid.count)

    def triplets(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (f_n, t_n, u_n) in row-major (sample, time) order"""
        n_t = self.grid.count
        f = np.repeat(self.inputs, n_t, axis=0)
        t = np.tile(self.grid.times, self.n_samples)
        return f, t, self.responses.ravel()

    def observed_counts(self) -> np.ndarray:
        """Number of non-missing responses per timestep"""
        return np.sum(np.isfinite(self.responses), axis=0)

    def save(self, stem: Union[str, Path]) -> Dict[str, Path]:
        """Persist as `<stem>.json` manifest + `_inputs.csv` + `_responses.csv`"""
        stem = Path(stem)
        paths = {
            'manifest': stem.parent / f"{stem.name}.json",
            'inputs': stem.parent / f"{stem.name}_inputs.csv",
            'responses': stem.parent / f"{stem.name}_responses.csv",
        }
        write_matrix(paths['inputs'], self.inputs, self.grid.times)
        write_matrix(paths['responses'], self.responses, self.grid.times)
        write_json(paths['manifest'], {
            'dof': self.dof,
            'role': self.role,
            'n_samples': self.n_samples,
            'grid': {'start': self.grid.times[0], 'count': self.grid.count,
                     'spacing': self.grid.spacing},
            'inputs_file': paths['inputs'].name,
            'responses_file': paths['responses'].name,
            'metadata': self.metadata,
        })
        return paths

    @classmethod
    def load(cls, stem: Union[str, Path]) -> 'OperatorDataset':
        stem = Path(stem)
        manifest = read_json(stem.parent / f"{stem.name}.json")
        inputs, times = read_matrix(stem.parent / manifest['inputs_file'])
        responses, _ = read_matrix(stem.parent / manifest['responses_file'])
        return cls(SensorGrid(times), inputs, responses, manifest['dof'], manifest['role'],
                   manifest.get('metadata', {}))


def dataset_from_responses(system: SystemParams, excitation: FunctionSampleSet, states: np.ndarray,
                           response_dof: int, role: str = 'train', dt: Optional[float] = None) -> OperatorDataset:
    """Slice one DOF out of simulated state histories"""
    if not 0 <= response_dof < system.n_dof:
        raise InvalidInputError(f"response_dof {response_dof} outside 0..{system.n_dof - 1}")
    metadata = {'system': system_to_dict(system), 'excitation': excitation.provenance}
    if dt is not None:
        metadata['dt'] = dt
    return OperatorDataset(excitation.grid, excitation.values, states[:, :, response_dof],
                           response_dof, role, metadata)


def generate_dataset(system: SystemParams, excitation: FunctionSampleSet, response_dof: int = 0,
                     dt: float = 1e-3, role: str = 'train', n_workers: int = 1) -> OperatorDataset:
    """Simulate the system for every input and collect (f, t, u) triplets

    Args:
        system: System parameters
        excitation: Inputs on the record grid
        response_dof: Displacement coordinate to learn (0-based)
        dt: Integration step (s)
        role: Dataset role tag
        n_workers: Worker threads for the simulation

    Returns:
        OperatorDataset with N_s * N_t triplets
    """
    states = simulate_responses(system, excitation, dt, n_workers)
    return dataset_from_responses(system, excitation, states, response_dof, role, dt)
