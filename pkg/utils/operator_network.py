"""Bayesian Spiking Operator Network

Branch/trunk operator network with variational weights, VSN activations in
the branch, dual mean/std heads, negative-ELBO training with Adam and
predictive Monte Carlo.

Evaluation is done in grid form: the branch encodes N_s input functions,
the trunk encodes N_t (normalized) times, and the heads are combined by
two matrix products, giving N_s x N_t predictions at once.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from utils.dynamics import OperatorDataset
from utils.errors import InvalidInputError, NumericalError
from utils.neuralcore import (
    SURROGATE_SLOPE,
    AdamState,
    VariationalTensor,
    VsnForwardRecord,
    VsnLayerParams,
    adam_step,
    dense_backward,
    dense_forward,
    kl_gradients,
    load_checkpoint,
    relu,
    relu_grad,
    sample_weights,
    sample_weights_backward,
    save_checkpoint,
    softplus,
    total_kl,
    vsn_backward,
    vsn_forward,
)


logger = logging.getLogger(__name__)

# Floor added to the std head
SIGMA_FLOOR = 1e-6

CHECKPOINT_KIND = 'variational_operator_network'

SELECTION_METRICS = ('posterior_mean', 'sample')

Realized = Dict[str, np.ndarray]


@dataclass
class OperatorArchitecture:
    """Layer layout of the branch and trunk networks

    Both subnetworks end in a linear layer of width 2p whose halves feed the
    mean head and the std head. ReLU (or VSN in the branch) follows the
    first `activated_layers` layers.

    With `init_std` unset the posterior means start fan-scaled (see
    `layer_init_scales`); a number gives every mean a flat N(0, init_std^2).
    `learn_thresholds` and `learn_leak` freeze the VSN thresholds and leak
    factors independently.
    """

    n_sensors: int
    branch_widths: Tuple[int, ...] = (50, 50, 50)
    trunk_widths: Tuple[int, ...] = (50, 50, 50)
    latent: int = 25
    activated_layers: int = 2
    branch_activation: str = 'vsn'
    spike_steps: int = 2
    surrogate_slope: float = SURROGATE_SLOPE
    learn_thresholds: bool = True
    learn_leak: bool = True
    phi: str = 'relu'
    threshold_init: float = 0.1
    leak_init: float = 0.9
    init_std: Optional[float] = None
    sigma_init: float = 1e-3

    ACTIVATIONS = ('vsn', 'relu')

    def __post_init__(self):
        self.branch_widths = tuple(int(w) for w in self.branch_widths)
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        if self.n_sensors < 1 or self.latent < 1:
            raise InvalidInputError("n_sensors and latent width must be positive")
        if min(self.branch_widths + self.trunk_widths, default=1) < 1:
            raise InvalidInputError("Layer widths must be positive")
        if self.branch_activation not in self.ACTIVATIONS:
            raise InvalidInputError(f"Unknown branch activation '{self.branch_activation}'")
        n_layers = min(len(self.branch_widths), len(self.trunk_widths)) + 1
        if not 0 <= self.activated_layers < n_layers:
            raise InvalidInputError(
                f"activated_layers={self.activated_layers} must leave the final layer linear"
            )
        if self.spike_steps < 1:
            raise InvalidInputError("spike_steps must be at least 1")
        if self.sigma_init <= 0 or (self.init_std is not None and self.init_std < 0):
            raise InvalidInputError("sigma_init must be positive and init_std non-negative")

    @property
    def feature_width(self) -> int:
        return 2 * self.latent

    def layer_init_scales(self, prefix: str, index: int) -> Tuple[float, float]:
        """(weight std, bias std) of the initial posterior means of one layer

        Activated layers use He scaling with biases on the same scale, hidden
        linear layers Glorot scaling with zero biases, and the final layer
        Glorot scaling shrunk by latent^(-1/4) so that the p-term head
        products start with unit variance.
        """
        if self.init_std is not None:
            return self.init_std, self.init_std
        sizes = self.layer_sizes(prefix)
        n_in, n_out = sizes[index], sizes[index + 1]
        if index < self.activated_layers:
            std = np.sqrt(2.0 / n_in)
            return std, std
        std = np.sqrt(2.0 / (n_in + n_out))
        if index == len(sizes) - 2:
            std *= self.latent ** -0.25
        return std, 0.0

    def layer_sizes(self, prefix: str) -> List[int]:
        if prefix == 'branch':
            return [self.n_sensors, *self.branch_widths, self.feature_width]
        return [1, *self.trunk_widths, self.feature_width]

    def spiking(self, prefix: str) -> bool:
        return prefix == 'branch' and self.branch_activation == 'vsn'

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict) -> 'OperatorArchitecture':
        return cls(**payload)


@dataclass
class TrainConfig:
    """Negative-ELBO training settings; kl_weight None means 1/N triplets

    select_on picks the retained iterate: 'posterior_mean' scores every
    iterate by the loss at the posterior means, 'sample' by the sampled
    training loss.
    """

    learning_rate: float = 1e-3
    iterations: int = 5000
    kl_weight: Optional[float] = None
    n_elbo_samples: int = 1
    seed: int = 0
    retain_best: bool = True
    select_on: str = 'posterior_mean'
    log_every: int = 500

    def __post_init__(self):
        if self.select_on not in SELECTION_METRICS:
            raise InvalidInputError(f"select_on must be one of {SELECTION_METRICS}, got '{self.select_on}'")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be at least 1")
        if self.kl_weight is not None and self.kl_weight < 0:
            raise InvalidInputError("kl_weight must be non-negative")
        if self.n_elbo_samples < 1 or self.learning_rate <= 0:
            raise InvalidInputError("n_elbo_samples and learning_rate must be positive")


@dataclass(eq=False)
class VariationalModel:
    """Variational posterior over all weights plus VSN parameters

    Attributes:
        architecture: Layer layout
        tensors: VariationalTensor per weight/bias, e.g. 'branch.0.weight'
        vsn: VsnLayerParams per spiking layer, e.g. 'branch.0'
        input_shift, input_scale: Branch-input standardization
        output_shift, output_scale: Response standardization
        horizon: (t_start, t_end) used to map t into [0, 1]
        training_log: Per-iteration loss history, when trained
    """

    architecture: OperatorArchitecture
    tensors: Dict[str, VariationalTensor]
    vsn: Dict[str, VsnLayerParams] = field(default_factory=dict)
    input_shift: float = 0.0
    input_scale: float = 1.0
    output_shift: float = 0.0
    output_scale: float = 1.0
    horizon: Tuple[float, float] = (0.0, 1.0)
    training_log: Optional[pd.DataFrame] = None

    @classmethod
    def initialize(cls, architecture: OperatorArchitecture, seed: int = 0,
                   horizon: Tuple[float, float] = (0.0, 1.0)) -> 'VariationalModel':
        """Fresh posterior: mu_v at the layer's init scale, sigma_v = sigma_init"""
        rng = np.random.default_rng([seed, 0])
        tensors, vsn = {}, {}
        for prefix in ('branch', 'trunk'):
            sizes = architecture.layer_sizes(prefix)
            for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
                weight_std, bias_std = architecture.layer_init_scales(prefix, i)
                tensors[f"{prefix}.{i}.weight"] = VariationalTensor.initialize(
                    (n_out, n_in), rng, weight_std, architecture.sigma_init)
                tensors[f"{prefix}.{i}.bias"] = VariationalTensor.initialize(
                    (n_out,), rng, bias_std, architecture.sigma_init)
                if architecture.spiking(prefix) and i < architecture.activated_layers:
                    vsn[f"{prefix}.{i}"] = VsnLayerParams.initialize(
                        n_out, architecture.spike_steps, architecture.threshold_init,
                        architecture.leak_init)
        return cls(architecture, tensors, vsn, horizon=tuple(float(h) for h in horizon))

    @property
    def n_variational(self) -> int:
        return int(sum(vt.size for vt in self.tensors.values()))

    def draw_noise(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """One standard-normal kappa per variational tensor, in sorted order"""
        return {name: rng.standard_normal(self.tensors[name].shape) for name in sorted(self.tensors)}

    def realize(self, noise: Optional[Dict[str, np.ndarray]] = None) -> Realized:
        """Realized weights; posterior means when noise is None"""
        if noise is None:
            return {name: vt.mu_v for name, vt in self.tensors.items()}
        return {name: sample_weights(vt, noise[name]) for name, vt in self.tensors.items()}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """All parameters as flat named arrays"""
        arrays = {}
        for name, vt in self.tensors.items():
            arrays[f"{name}.mu"] = vt.mu_v
            arrays[f"{name}.delta"] = vt.delta
        for name, params in self.vsn.items():
            arrays[f"{name}.threshold"] = params.thresholds
            arrays[f"{name}.leak_raw"] = params.leak_raw
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, vt in self.tensors.items():
            vt.mu_v = np.array(arrays[f"{name}.mu"], dtype=float)
            vt.delta = np.array(arrays[f"{name}.delta"], dtype=float)
        for name, params in self.vsn.items():
            params.thresholds = np.array(arrays[f"{name}.threshold"], dtype=float)
            params.leak_raw = np.array(arrays[f"{name}.leak_raw"], dtype=float)

    def normalize_times(self, times: np.ndarray) -> np.ndarray:
        t0, t1 = self.horizon
        span = t1 - t0 if t1 > t0 else 1.0
        return (np.asarray(times, dtype=float) - t0) / span

    def normalization(self) -> Dict[str, float]:
        return {
            'input_shift': self.input_shift, 'input_scale': self.input_scale,
            'output_shift': self.output_shift, 'output_scale': self.output_scale,
        }


@dataclass(eq=False)
class PredictiveBand:
    """Empirical predictive mean/std over n1 weight draws x n2 output draws

    mu_hat and sigma_hat are (N_inputs, N_t).
    """

    times: np.ndarray
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    n1: int
    n2: int

    @property
    def n_inputs(self) -> int:
        return int(self.mu_hat.shape[0])

    def row(self, index: int) -> 'PredictiveBand':
        return PredictiveBand(self.times, self.mu_hat[index:index + 1],
                              self.sigma_hat[index:index + 1], self.n1, self.n2)


# ---------------------------------------------------------------------------
# Forward / backward through the subnetworks
# ---------------------------------------------------------------------------

def _subnet_forward(model: VariationalModel, realized: Realized, prefix: str, x: np.ndarray,
                    smooth: bool = False) -> Tuple[np.ndarray, List[Dict]]:
    arch = model.architecture
    n_layers = len(arch.layer_sizes(prefix)) - 1
    h, cache = x, []
    for i in range(n_layers):
        z = dense_forward(realized[f"{prefix}.{i}.weight"], realized[f"{prefix}.{i}.bias"], h)
        entry = {'input': h, 'z': z}
        if i < arch.activated_layers:
            if arch.spiking(prefix):
                params = model.vsn[f"{prefix}.{i}"]
                z_seq = np.broadcast_to(z, (params.t_s,) + z.shape)
                record = vsn_forward(z_seq, params, arch.phi, smooth, arch.surrogate_slope)
                entry['record'] = record
                h = record.outputs.mean(axis=0)
            else:
                h = relu(z)
        else:
            h = z
        cache.append(entry)
    return h, cache


def _subnet_backward(model: VariationalModel, realized: Realized, prefix: str, cache: List[Dict],
                     grad_h: np.ndarray) -> Dict[str, np.ndarray]:
    arch = model.architecture
    grads = {}
    for i in reversed(range(len(cache))):
        entry = cache[i]
        if 'record' in entry:
            record = entry['record']
            params = model.vsn[f"{prefix}.{i}"]
            grad_seq = np.broadcast_to(grad_h / params.t_s, record.outputs.shape)
            dz_seq, d_threshold, d_leak = vsn_backward(record, grad_seq, params)
            dz = dz_seq.sum(axis=0)
            grads[f"{prefix}.{i}.threshold"] = d_threshold
            grads[f"{prefix}.{i}.leak_raw"] = d_leak
        elif i < arch.activated_layers:
            dz = grad_h * relu_grad(entry['z'])
        else:
            dz = grad_h
        weight = realized[f"{prefix}.{i}.weight"]
        d_weight, d_bias, grad_h = dense_backward(weight, entry['input'], dz)
        grads[f"{prefix}.{i}.weight"] = d_weight
        grads[f"{prefix}.{i}.bias"] = d_bias
    return grads


def _heads(branch: np.ndarray, trunk: np.ndarray, latent: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Combine features: mu = B_m T_m^T, sigma = softplus(B_s T_s^T) + floor"""
    mu = branch[:, :latent] @ trunk[:, :latent].T
    raw = branch[:, latent:] @ trunk[:, latent:].T
    return mu, softplus(raw) + SIGMA_FLOOR, raw


def forward_grid(model: VariationalModel, realized: Realized, inputs: np.ndarray, times: np.ndarray,
                 smooth: bool = False):
    """Standardized-unit mean/std heads for every (input, time) pair

    Returns:
        (mu, sigma, cache) with mu and sigma shaped (N_s, N_t)
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != model.architecture.n_sensors:
        raise InvalidInputError(
            f"Input length {inputs.shape[1]} does not match {model.architecture.n_sensors} sensors"
        )
    x_branch = (inputs - model.input_shift) / model.input_scale
    x_trunk = model.normalize_times(np.atleast_1d(times))[:, None]
    branch, branch_cache = _subnet_forward(model, realized, 'branch', x_branch, smooth)
    trunk, trunk_cache = _subnet_forward(model, realized, 'trunk', x_trunk, smooth)
    mu, sigma, raw = _heads(branch, trunk, model.architecture.latent)
    cache = {'branch': branch, 'trunk': trunk, 'raw': raw,
             'branch_cache': branch_cache, 'trunk_cache': trunk_cache}
    return mu, sigma, cache


def forward(model: VariationalModel, realized: Realized, f_vec: np.ndarray,
            t: float) -> Tuple[float, float]:
    """Mean and std of the response at time t for one input, physical units"""
    mu, sigma, _ = forward_grid(model, realized, np.asarray(f_vec, dtype=float)[None, :], np.array([t]))
    return (float(model.output_shift + model.output_scale * mu[0, 0]),
            float(model.output_scale * sigma[0, 0]))


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def negative_log_likelihood(mu: np.ndarray, sigma: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-point Gaussian NLL without constants: log sigma + (u - mu)^2 / (2 sigma^2)"""
    return np.log(sigma) + (targets - mu) ** 2 / (2.0 * sigma ** 2)


def _standardized_targets(model: VariationalModel, targets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    targets = np.asarray(targets, dtype=float)
    observed = np.isfinite(targets)
    y = np.where(observed, (np.where(observed, targets, 0.0) - model.output_shift) / model.output_scale, 0.0)
    return y, observed


def _is_learned(arch: OperatorArchitecture, name: str) -> bool:
    if name.endswith('.threshold'):
        return arch.learn_thresholds
    return arch.learn_leak


def _elbo(model: VariationalModel, inputs: np.ndarray, times: np.ndarray, targets: np.ndarray,
          noise_draws: List[Dict[str, np.ndarray]], kl_weight: float, smooth: bool,
          allow_empty: bool, need_grads: bool):
    y, observed = _standardized_targets(model, targets)
    n_observed = int(observed.sum())
    if n_observed == 0 and not allow_empty:
        raise InvalidInputError("ELBO batch is empty")
    kl = total_kl(model.tensors)
    loss = kl_weight * kl
    grads: Dict[str, np.ndarray] = {}
    if need_grads:
        for name, vt in model.tensors.items():
            d_mu, d_delta = kl_gradients(vt)
            grads[f"{name}.mu"] = kl_weight * d_mu
            grads[f"{name}.delta"] = kl_weight * d_delta
    if n_observed == 0:
        return loss, grads

    latent = model.architecture.latent
    n_draws = len(noise_draws)
    for noise in noise_draws:
        realized = model.realize(noise)
        mu, sigma, cache = forward_grid(model, realized, inputs, times, smooth)
        nll = np.where(observed, negative_log_likelihood(mu, sigma, y), 0.0)
        if not np.all(np.isfinite(nll)):
            bad = int(np.flatnonzero(~np.isfinite(nll.ravel()))[0])
            raise NumericalError(
                f"Non-finite ELBO term at triplet {bad} (input {bad // nll.shape[1]}, "
                f"time index {bad % nll.shape[1]})"
            )
        loss += float(nll.sum()) / n_draws
        if not need_grads:
            continue
        resid = y - mu
        d_mu = np.where(observed, -resid / sigma ** 2, 0.0) / n_draws
        d_sigma = np.where(observed, 1.0 / sigma - resid ** 2 / sigma ** 3, 0.0) / n_draws
        d_raw = d_sigma * expit(cache['raw'])
        branch, trunk = cache['branch'], cache['trunk']
        d_branch = np.concatenate([d_mu @ trunk[:, :latent], d_raw @ trunk[:, latent:]], axis=1)
        d_trunk = np.concatenate([d_mu.T @ branch[:, :latent], d_raw.T @ branch[:, latent:]], axis=1)
        layer_grads = _subnet_backward(model, realized, 'branch', cache['branch_cache'], d_branch)
        layer_grads.update(_subnet_backward(model, realized, 'trunk', cache['trunk_cache'], d_trunk))
        for name, g in layer_grads.items():
            if name in model.tensors:
                d_mu_v, d_delta = sample_weights_backward(model.tensors[name], noise[name], g)
                grads[f"{name}.mu"] = grads[f"{name}.mu"] + d_mu_v
                grads[f"{name}.delta"] = grads[f"{name}.delta"] + d_delta
            elif _is_learned(model.architecture, name):
                grads[name] = grads.get(name, 0.0) + g
    if not np.isfinite(loss):
        raise NumericalError("Non-finite ELBO value")
    return loss, grads


def elbo_loss(model: VariationalModel, inputs: np.ndarray, times: np.ndarray, targets: np.ndarray,
              noise_draws: List[Dict[str, np.ndarray]], kl_weight: float = 0.0,
              smooth: bool = False, allow_empty: bool = False) -> float:
    """Negative ELBO over a grid-form batch

    sum_n [log sigma_n + r_n^2 / (2 sigma_n^2)] averaged over the weight
    draws, plus kl_weight * KL(q || N(0, I)). Targets are standardized with
    the model's output shift/scale; NaN targets are skipped.

    Args:
        model: Variational model
        inputs: (N_s, n_sensors) input functions
        times: (N_t,) evaluation times
        targets: (N_s, N_t) responses
        noise_draws: One kappa dict per ELBO sample
        kl_weight: Weight of the KL term
        smooth: Use the smooth spike gate
        allow_empty: Permit a batch without observations (KL only)

    Returns:
        Scalar loss
    """
    loss, _ = _elbo(model, inputs, times, targets, noise_draws, kl_weight, smooth, allow_empty, False)
    return loss


def elbo_loss_and_grads(model: VariationalModel, inputs: np.ndarray, times: np.ndarray,
                        targets: np.ndarray, noise_draws: List[Dict[str, np.ndarray]],
                        kl_weight: float = 0.0, smooth: bool = False,
                        allow_empty: bool = False) -> Tuple[float, Dict[str, np.ndarray]]:
    """Negative ELBO and its gradients keyed like VariationalModel.state_arrays"""
    return _elbo(model, inputs, times, targets, noise_draws, kl_weight, smooth, allow_empty, True)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _fit_normalization(model: VariationalModel, dataset: OperatorDataset) -> None:
    in_std = float(np.std(dataset.inputs))
    out_std = float(np.nanstd(dataset.responses))
    model.input_shift = float(np.mean(dataset.inputs))
    model.input_scale = in_std if in_std > 0 else 1.0
    model.output_shift = float(np.nanmean(dataset.responses))
    model.output_scale = out_std if out_std > 0 else 1.0


def train(dataset: OperatorDataset, arch: OperatorArchitecture, cfg: TrainConfig) -> VariationalModel:
    """Full-batch Adam on the negative ELBO

    Args:
        dataset: Training triplets in grid form
        arch: Network layout; n_sensors must equal the grid size
        cfg: Training settings

    Returns:
        VariationalModel holding the lowest-loss snapshot under
        cfg.select_on (or the last iterate when retain_best is off), with
        its training log attached
    """
    if arch.n_sensors != dataset.grid.count:
        raise InvalidInputError(
            f"Architecture expects {arch.n_sensors} sensors, dataset grid has {dataset.grid.count}"
        )
    model = VariationalModel.initialize(arch, cfg.seed, dataset.grid.horizon)
    _fit_normalization(model, dataset)
    n_triplets = int(np.isfinite(dataset.responses).sum())
    if n_triplets == 0:
        raise InvalidInputError("Training dataset has no observed responses")
    kl_weight = cfg.kl_weight if cfg.kl_weight is not None else 1.0 / n_triplets
    rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState(lr=cfg.learning_rate)
    params = {k: v.copy() for k, v in model.state_arrays().items()}
    best_loss, best_params = np.inf, params
    history = []
    logger.info(f"Training on {n_triplets} triplets for {cfg.iterations} iterations "
                f"(kl_weight={kl_weight:.3g}, {model.n_variational} variational parameters)")
    for iteration in range(1, cfg.iterations + 1):
        noise = [model.draw_noise(rng) for _ in range(cfg.n_elbo_samples)]
        try:
            loss, grads = elbo_loss_and_grads(model, dataset.inputs, dataset.grid.times,
                                              dataset.responses, noise, kl_weight)
            mean_loss = elbo_loss(model, dataset.inputs, dataset.grid.times,
                                  dataset.responses, [None], kl_weight)
            score = mean_loss if cfg.select_on == 'posterior_mean' else loss
            if score < best_loss:
                best_loss, best_params = score, params
            history.append((iteration, loss, mean_loss, best_loss))
            params = adam_step(state, params, grads)
        except NumericalError as e:
            logger.warning(f"Training aborted at iteration {iteration}: {e}")
            history.append((iteration, np.nan, np.nan, best_loss))
            break
        model.load_state_arrays(params)
        if cfg.log_every and iteration % cfg.log_every == 0:
            logger.info(f"Iteration {iteration}: loss {loss:.4f}, "
                        f"posterior-mean loss {mean_loss:.4f}, best {best_loss:.4f}")
    if cfg.retain_best or not np.isfinite(history[-1][1]):
        model.load_state_arrays(best_params)
    model.training_log = pd.DataFrame(history, columns=['iteration', 'loss', 'mean_loss', 'best'])
    return model


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def _combine_moments(count_a: int, mean_a: np.ndarray, m2_a: np.ndarray, count_b: int,
                     mean_b: np.ndarray, m2_b: np.ndarray):
    """Merge two blocks' (count, mean, sum of squared deviations)"""
    count = count_a + count_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (count_b / count)
    m2 = m2_a + m2_b + delta ** 2 * (count_a * count_b / count)
    return count, mean, m2


def predict_bands(model: VariationalModel, inputs: np.ndarray, times: np.ndarray, n1: int, n2: int,
                  seed: int = 0) -> PredictiveBand:
    """Predictive Monte Carlo for many inputs on a time grid

    For s = 1..n1 a weight draw theta_s is shared by every input and time;
    for each input, n2 trajectory draws u = mu_s(t) + sigma_s(t) eps are
    taken with one eps per (s, r), so identical times get identical entries.

    Args:
        model: Trained model
        inputs: (N, n_sensors) input functions
        times: Evaluation times
        n1: Weight draws
        n2: Output draws per weight draw
        seed: Seed of the draw schedule

    Returns:
        PredictiveBand with (N, N_t) mean and std (ddof 0) over n1 * n2 draws
    """
    if n1 < 1 or n2 < 1:
        raise InvalidInputError("n1 and n2 must be at least 1")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    weight_rng = np.random.default_rng([seed, 0])
    count, mean, m2 = 0, None, None
    for s in range(n1):
        realized = model.realize(model.draw_noise(weight_rng))
        mu, sigma, _ = forward_grid(model, realized, inputs, times)
        mu = model.output_shift + model.output_scale * mu
        sigma = model.output_scale * sigma
        eps = np.random.default_rng([seed, 1, s]).standard_normal((inputs.shape[0], n2))
        draws = mu[:, None, :] + sigma[:, None, :] * eps[:, :, None]
        block_mean = draws.mean(axis=1)
        block_m2 = ((draws - block_mean[:, None, :]) ** 2).sum(axis=1)
        if mean is None:
            count, mean, m2 = n2, block_mean, block_m2
        else:
            count, mean, m2 = _combine_moments(count, mean, m2, n2, block_mean, block_m2)
    return PredictiveBand(times, mean, np.sqrt(np.maximum(m2 / count, 0.0)), n1, n2)


def predict_trajectory(model: VariationalModel, f_vec: np.ndarray, times: np.ndarray, n1: int, n2: int,
                       seed: int = 0) -> PredictiveBand:
    """Predictive band of one input over a time grid"""
    return predict_bands(model, np.asarray(f_vec, dtype=float)[None, :], times, n1, n2, seed)


def predict(model: VariationalModel, f_vec: np.ndarray, t: float, n1: int, n2: int,
            seed: int = 0) -> PredictiveBand:
    """Predictive band of one input at one time"""
    return predict_trajectory(model, f_vec, np.array([t], dtype=float), n1, n2, seed)


def branch_spiking_activity(model: VariationalModel, inputs: np.ndarray) -> Dict[str, float]:
    """Spiking activity (%) of each VSN layer at the posterior-mean weights"""
    return {name: 100.0 * record.spike_count / record.slots
            for name, record in branch_records(model, inputs).items()}


def branch_records(model: VariationalModel, inputs: np.ndarray) -> Dict[str, VsnForwardRecord]:
    """VSN forward records of the branch at the posterior-mean weights, in layer order"""
    if not model.vsn:
        return {}
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    x = (inputs - model.input_shift) / model.input_scale
    _, cache = _subnet_forward(model, model.realize(), 'branch', x)
    return {f"branch.{i}": entry['record'] for i, entry in enumerate(cache) if 'record' in entry}


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_model(model: VariationalModel, directory: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    """Checkpoint: JSON manifest (architecture, normalization, horizon) + .bin tensors"""
    manifest = {
        'kind': CHECKPOINT_KIND,
        'architecture': model.architecture.to_dict(),
        'normalization': model.normalization(),
        'horizon': list(model.horizon),
        'sigma_floor': SIGMA_FLOOR,
    }
    if extra:
        manifest.update(extra)
    return save_checkpoint(directory, manifest, model.state_arrays())


def load_model(directory: Union[str, Path]) -> Tuple[VariationalModel, Dict]:
    """Inverse of save_model; returns the model and its manifest"""
    manifest, arrays = load_checkpoint(directory)
    if manifest.get('kind') != CHECKPOINT_KIND:
        raise InvalidInputError(f"{directory} is not an operator-network checkpoint")
    arch = OperatorArchitecture.from_dict(manifest['architecture'])
    model = VariationalModel.initialize(arch, 0, tuple(manifest['horizon']))
    model.load_state_arrays(arrays)
    for key, value in manifest['normalization'].items():
        setattr(model, key, float(value))
    return model, manifest
