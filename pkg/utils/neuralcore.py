"""Differentiable Network Substrate

Dense layers, ReLU, Variable Spiking Neuron (VSN) layers with surrogate
gradients, Gaussian variational tensors with the reparameterization trick,
the closed-form KL to a standard-normal prior, and Adam.

Arrays are batch-first; dense weights are stored (n_out, n_in).
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from utils.errors import InvalidInputError, NumericalError
from utils.persistence import read_json, read_tensor, write_json, write_tensor


logger = logging.getLogger(__name__)

# Default surrogate slope k
SURROGATE_SLOPE = 25.0


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)), overflow-safe"""
    return np.logaddexp(0.0, x)


def inverse_softplus(y: Union[float, np.ndarray]) -> np.ndarray:
    """Inverse of softplus for y > 0"""
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    return (x > 0).astype(float)


def _linear(x: np.ndarray) -> np.ndarray:
    return x


def _linear_grad(x: np.ndarray) -> np.ndarray:
    return np.ones_like(x)


# Graded-spike output functions phi and their derivatives
PHI_FUNCTIONS: Dict[str, Tuple[Callable, Callable]] = {
    'relu': (relu, relu_grad),
    'linear': (_linear, _linear_grad),
}


def _phi(name: str) -> Tuple[Callable, Callable]:
    if name not in PHI_FUNCTIONS:
        raise InvalidInputError(f"Unknown spike output function '{name}'")
    return PHI_FUNCTIONS[name]


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

def dense_forward(weights: np.ndarray, bias: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """z = W x + b over the last axis of `inputs`

    Args:
        weights: (n_out, n_in)
        bias: (n_out,)
        inputs: (..., n_in)

    Returns:
        (..., n_out) pre-activations
    """
    weights = np.asarray(weights)
    inputs = np.asarray(inputs, dtype=float)
    if weights.ndim != 2 or inputs.shape[-1] != weights.shape[1] or np.shape(bias) != (weights.shape[0],):
        raise InvalidInputError(
            f"Dense shape mismatch: W {weights.shape}, b {np.shape(bias)}, x {inputs.shape}"
        )
    return inputs @ weights.T + bias


def dense_backward(weights: np.ndarray, inputs: np.ndarray,
                   grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a dense layer

    Returns:
        (dW, db, dx) with leading axes of `inputs` summed out of dW and db
    """
    x2 = inputs.reshape(-1, inputs.shape[-1])
    g2 = grad_out.reshape(-1, grad_out.shape[-1])
    return g2.T @ x2, g2.sum(axis=0), grad_out @ weights


# ---------------------------------------------------------------------------
# Variational tensors
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class VariationalTensor:
    """Mean-field Gaussian q(theta) = N(mu_v, softplus(delta)^2)"""

    mu_v: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.mu_v = np.asarray(self.mu_v, dtype=float)
        self.delta = np.asarray(self.delta, dtype=float)
        if self.mu_v.shape != self.delta.shape:
            raise InvalidInputError(
                f"mu_v {self.mu_v.shape} and delta {self.delta.shape} differ in shape"
            )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.mu_v.shape

    @property
    def size(self) -> int:
        return int(self.mu_v.size)

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.delta)

    @classmethod
    def initialize(cls, shape: Tuple[int, ...], rng: np.random.Generator,
                   mu_std: float = 0.05, sigma0: float = 0.05) -> 'VariationalTensor':
        return cls(rng.normal(0.0, mu_std, shape), np.full(shape, float(inverse_softplus(sigma0))))

    @classmethod
    def point_mass(cls, values: np.ndarray, delta: float = -40.0) -> 'VariationalTensor':
        """Near-deterministic tensor centred on `values`"""
        values = np.asarray(values, dtype=float)
        return cls(values.copy(), np.full(values.shape, delta))


def sample_weights(vt: VariationalTensor, noise: np.ndarray) -> np.ndarray:
    """theta = mu_v + softplus(delta) * kappa

    Args:
        vt: Variational tensor
        noise: Standard-normal draws shaped like vt.mu_v

    Returns:
        Realized parameter array
    """
    noise = np.asarray(noise, dtype=float)
    if noise.shape != vt.shape:
        raise InvalidInputError(f"Noise shape {noise.shape} does not match {vt.shape}")
    return vt.mu_v + vt.sigma * noise


def sample_weights_backward(vt: VariationalTensor, noise: np.ndarray,
                            grad_theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Chain rule through the reparameterization: (d mu_v, d delta)"""
    return grad_theta, grad_theta * noise * expit(vt.delta)


def kl_to_standard_normal(vt: VariationalTensor) -> float:
    """KL(q || N(0, I)) = sum[-log sigma + (sigma^2 + mu^2 - 1) / 2]"""
    sigma = vt.sigma
    return float(np.sum(-np.log(sigma) + 0.5 * (sigma ** 2 + vt.mu_v ** 2 - 1.0)))


def kl_gradients(vt: VariationalTensor) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic (d mu_v, d delta) of kl_to_standard_normal"""
    sigma = vt.sigma
    return vt.mu_v.copy(), (sigma - 1.0 / sigma) * expit(vt.delta)


# ---------------------------------------------------------------------------
# Variable Spiking Neurons
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class VsnLayerParams:
    """Per-neuron thresholds and leakage of one VSN layer

    Attributes:
        thresholds: Firing thresholds T_h, shape (n,)
        leak_raw: Leakage logits, beta = sigmoid(leak_raw) in (0, 1)
        t_s: Spike time steps per static input
    """

    thresholds: np.ndarray
    leak_raw: np.ndarray
    t_s: int = 2

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=float)
        self.leak_raw = np.asarray(self.leak_raw, dtype=float)
        if self.thresholds.shape != self.leak_raw.shape or self.thresholds.ndim != 1:
            raise InvalidInputError("VSN thresholds and leak_raw must be matching 1-D arrays")
        if int(self.t_s) < 1:
            raise InvalidInputError("VSN layers need at least one spike time step")
        self.t_s = int(self.t_s)

    @property
    def n_neurons(self) -> int:
        return int(self.thresholds.size)

    @property
    def beta(self) -> np.ndarray:
        return expit(self.leak_raw)

    @classmethod
    def initialize(cls, n_neurons: int, t_s: int = 2, threshold: float = 0.1,
                   beta: float = 0.9) -> 'VsnLayerParams':
        return cls(np.full(n_neurons, threshold), np.full(n_neurons, float(logit(beta))), t_s)


@dataclass(eq=False)
class VsnForwardRecord:
    """Everything vsn_backward needs, plus spike statistics

    Arrays are shaped (T_s, ..., n). `gates` holds the gate applied to
    phi(z): the spike mask in hard mode, the smooth primitive otherwise.
    """

    outputs: np.ndarray
    mask: np.ndarray
    membrane: np.ndarray
    z_seq: np.ndarray
    gates: np.ndarray
    phi: str = 'relu'
    slope: float = SURROGATE_SLOPE
    smooth: bool = False

    @property
    def spike_count(self) -> int:
        return int(np.count_nonzero(self.mask))

    @property
    def slots(self) -> int:
        """Neuron x time-step x sample slots covered by the record"""
        return int(self.mask.size)


def fast_sigmoid(x: np.ndarray, slope: float = SURROGATE_SLOPE) -> np.ndarray:
    """Smooth primitive 0.5 (1 + kx / (1 + k|x|)) of the surrogate derivative"""
    return 0.5 * (1.0 + slope * x / (1.0 + slope * np.abs(x)))


def surrogate_derivative(x: np.ndarray, slope: float = SURROGATE_SLOPE) -> np.ndarray:
    """k / (2 (1 + k|x|)^2)"""
    return slope / (2.0 * (1.0 + slope * np.abs(x)) ** 2)


def vsn_forward(z_seq: np.ndarray, params: VsnLayerParams, phi: str = 'relu',
                smooth: bool = False, slope: float = SURROGATE_SLOPE) -> VsnForwardRecord:
    """Run a VSN layer over its spike time steps

    M_t = beta M_{t-1} + z_t with M_0 = 0 and no reset after firing;
    y_t = phi(z_t) where M_t >= T_h, else 0.

    Args:
        z_seq: (T_s, ..., n) presynaptic drive per time step
        params: Thresholds, leakage and T_s
        phi: Graded-spike output function name
        smooth: Replace the Heaviside gate by its smooth primitive
        slope: Surrogate slope k

    Returns:
        VsnForwardRecord with per-step outputs, spike masks and membrane trace
    """
    z_seq = np.asarray(z_seq, dtype=float)
    if z_seq.shape[0] != params.t_s or z_seq.shape[-1] != params.n_neurons:
        raise InvalidInputError(
            f"VSN input {z_seq.shape} does not match T_s={params.t_s}, n={params.n_neurons}"
        )
    phi_fn, _ = _phi(phi)
    beta = params.beta
    membrane = np.empty_like(z_seq)
    outputs = np.empty_like(z_seq)
    gates = np.empty_like(z_seq)
    mask = np.empty(z_seq.shape, dtype=bool)
    m_prev = np.zeros(z_seq.shape[1:])
    for t in range(params.t_s):
        m_t = beta * m_prev + z_seq[t]
        fired = m_t >= params.thresholds
        value = phi_fn(z_seq[t])
        if smooth:
            gate = fast_sigmoid(m_t - params.thresholds, slope)
            outputs[t] = value * gate
        else:
            gate = fired.astype(float)
            outputs[t] = np.where(fired, value, 0.0)
        membrane[t], gates[t], mask[t] = m_t, gate, fired
        m_prev = m_t
    return VsnForwardRecord(outputs, mask, membrane, z_seq, gates, phi, slope, smooth)


def _neuron_sum(values: np.ndarray) -> np.ndarray:
    """Sum over every axis but the last (neuron) axis"""
    return values.reshape(-1, values.shape[-1]).sum(axis=0)


def vsn_backward(record: VsnForwardRecord, grad_outputs: np.ndarray,
                 params: VsnLayerParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate through a VSN layer

    The spike gate is differentiated with the fast-sigmoid surrogate; the
    leaky membrane recurrence and phi use the exact chain rule.

    Args:
        record: Forward record
        grad_outputs: dL/dy_t, shaped like record.outputs
        params: Layer parameters used in the forward pass

    Returns:
        (dL/dz_seq, dL/dthresholds, dL/dleak_raw)
    """
    phi_fn, phi_grad = _phi(record.phi)
    beta = params.beta
    dz = np.empty_like(record.z_seq)
    d_threshold = np.zeros(params.n_neurons)
    d_beta = np.zeros(params.n_neurons)
    carry = np.zeros(record.z_seq.shape[1:])
    for t in reversed(range(params.t_s)):
        z_t = record.z_seq[t]
        g_t = grad_outputs[t]
        s_t = surrogate_derivative(record.membrane[t] - params.thresholds, record.slope)
        direct = g_t * phi_fn(z_t) * s_t
        carry = direct + beta * carry
        dz[t] = g_t * record.gates[t] * phi_grad(z_t) + carry
        d_threshold -= _neuron_sum(direct)
        if t > 0:
            d_beta += _neuron_sum(carry * record.membrane[t - 1])
    return dz, d_threshold, d_beta * beta * (1.0 - beta)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam moments keyed by parameter name"""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Dict[str, np.ndarray],
              grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """One Adam update

    Args:
        state: Optimizer state, advanced in place
        params: Current parameter arrays by name
        grads: Gradients by name (missing names are left untouched)

    Returns:
        New parameter dict

    Raises:
        NumericalError: if any gradient is non-finite (no state change)
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"Non-finite gradient for '{name}', update rejected")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    updated = dict(params)
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        updated[name] = params[name] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return updated


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(directory: Union[str, Path], manifest: Dict,
                    tensors: Dict[str, np.ndarray]) -> Path:
    """Write `manifest.json` plus one little-endian float64 `.bin` per tensor"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, array in sorted(tensors.items()):
        filename = f"{name}.bin"
        write_tensor(directory / filename, array)
        index[name] = {'file': filename, 'shape': list(np.shape(array))}
    payload = dict(manifest)
    payload['tensors'] = index
    return write_json(directory / 'manifest.json', payload)


def load_checkpoint(directory: Union[str, Path]) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """Read a checkpoint written by save_checkpoint"""
    directory = Path(directory)
    manifest = read_json(directory / 'manifest.json')
    tensors = {
        name: read_tensor(directory / entry['file'], entry['shape'])
        for name, entry in manifest.get('tensors', {}).items()
    }
    return manifest, tensors


def total_kl(tensors: Dict[str, VariationalTensor], names: Optional[list] = None) -> float:
    """Sum of KL terms over a set of variational tensors"""
    keys = names if names is not None else sorted(tensors)
    return float(sum(kl_to_standard_normal(tensors[k]) for k in keys))
