import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.append(str(Path(__file__).parent.parent))

from utils.dynamics import OperatorDataset
from utils.errors import InvalidInputError, NumericalError
from utils.excitation import SensorGrid
from utils.neuralcore import VariationalTensor, inverse_softplus, total_kl
from utils.operator_network import (
    SIGMA_FLOOR,
    OperatorArchitecture,
    TrainConfig,
    VariationalModel,
    branch_records,
    branch_spiking_activity,
    elbo_loss,
    elbo_loss_and_grads,
    forward,
    forward_grid,
    load_model,
    predict,
    predict_bands,
    predict_trajectory,
    save_model,
    train,
)
from utils.reliability import nmse


def tiny_arch(**overrides):
    settings = dict(n_sensors=3, branch_widths=(4,), trunk_widths=(4,), latent=2, activated_layers=1)
    settings.update(overrides)
    return OperatorArchitecture(**settings)


def collapse(model, overrides=None):
    """Replace every tensor by a point mass, optionally at given values"""
    overrides = overrides or {}
    for name, vt in list(model.tensors.items()):
        model.tensors[name] = VariationalTensor.point_mass(overrides.get(name, vt.mu_v))
    return model


def zero_noise(model):
    return {name: np.zeros(vt.shape) for name, vt in model.tensors.items()}


def unit_sigma_model():
    """p = 1 network with mu = 0 and sigma = 1 everywhere"""
    arch = OperatorArchitecture(n_sensors=1, branch_widths=(), trunk_widths=(), latent=1,
                                activated_layers=0, branch_activation='relu')
    model = VariationalModel.initialize(arch)
    a = float(inverse_softplus(1.0 - SIGMA_FLOOR))
    return collapse(model, {
        'branch.0.weight': np.zeros((2, 1)), 'branch.0.bias': np.array([0.0, a]),
        'trunk.0.weight': np.zeros((2, 1)), 'trunk.0.bias': np.array([0.0, 1.0]),
    })


def reference_forward(model, realized, f, t):
    """Straight-line evaluation of the branch/trunk formulas for one (f, t)"""
    arch = model.architecture

    def layer(prefix, i, h):
        W, b = realized[f"{prefix}.{i}.weight"], realized[f"{prefix}.{i}.bias"]
        return np.array([sum(W[r, c] * h[c] for c in range(W.shape[1])) + b[r] for r in range(W.shape[0])])

    def subnet(prefix, h, n_layers):
        for i in range(n_layers):
            z = layer(prefix, i, h)
            if i < arch.activated_layers and arch.spiking(prefix):
                params = model.vsn[f"{prefix}.{i}"]
                beta = 1.0 / (1.0 + np.exp(-params.leak_raw))
                membrane, total = np.zeros_like(z), np.zeros_like(z)
                for _ in range(params.t_s):
                    membrane = beta * membrane + z
                    total += np.where(membrane >= params.thresholds, np.maximum(z, 0.0), 0.0)
                h = total / params.t_s
            elif i < arch.activated_layers:
                h = np.maximum(z, 0.0)
            else:
                h = z
        return h

    t0, t1 = model.horizon
    b = subnet('branch', (np.asarray(f) - model.input_shift) / model.input_scale, len(arch.branch_widths) + 1)
    tau = subnet('trunk', np.array([(t - t0) / (t1 - t0)]), len(arch.trunk_widths) + 1)
    p = arch.latent
    mu = sum(b[k] * tau[k] for k in range(p))
    raw = sum(b[p + k] * tau[p + k] for k in range(p))
    sigma = np.log1p(np.exp(raw)) + SIGMA_FLOOR
    return model.output_shift + model.output_scale * mu, model.output_scale * sigma


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

@pytest.mark.parametrize('activation', ['vsn', 'relu'])
def test_zero_network_gives_log2_sigma(activation):
    model = VariationalModel.initialize(tiny_arch(branch_activation=activation))
    collapse(model, {name: np.zeros(vt.shape) for name, vt in model.tensors.items()})
    mu, sigma = forward(model, model.realize(), np.array([1.0, -2.0, 0.5]), 0.3)
    assert mu == 0.0
    assert sigma == pytest.approx(np.log(2.0) + SIGMA_FLOOR, rel=1e-12)


def test_single_latent_inner_product():
    arch = OperatorArchitecture(n_sensors=2, branch_widths=(), trunk_widths=(), latent=1, activated_layers=0)
    model = collapse(VariationalModel.initialize(arch), {
        'branch.0.weight': np.zeros((2, 2)), 'branch.0.bias': np.array([2.0, 0.0]),
        'trunk.0.weight': np.zeros((2, 1)), 'trunk.0.bias': np.array([3.0, 0.0]),
    })
    mu, _ = forward(model, model.realize(), np.array([0.4, 0.9]), 0.5)
    assert mu == pytest.approx(6.0)


def test_forward_reports_physical_units():
    model = VariationalModel.initialize(tiny_arch())
    collapse(model, {name: np.zeros(vt.shape) for name, vt in model.tensors.items()})
    model.output_shift, model.output_scale = 1.0, 2.0
    mu, sigma = forward(model, model.realize(), np.zeros(3), 0.0)
    assert mu == 1.0
    assert sigma == pytest.approx(2.0 * (np.log(2.0) + SIGMA_FLOOR))


@pytest.mark.parametrize('activation', ['vsn', 'relu'])
def test_forward_matches_straight_line_evaluation(activation):
    arch = tiny_arch(branch_widths=(5, 4), trunk_widths=(3, 4), activated_layers=2,
                     branch_activation=activation, init_std=0.8, threshold_init=0.05)
    model = VariationalModel.initialize(arch, seed=3, horizon=(0.0, 2.0))
    model.input_shift, model.input_scale = 0.2, 1.7
    model.output_shift, model.output_scale = -0.1, 0.3
    realized = model.realize(model.draw_noise(np.random.default_rng(1)))
    rng = np.random.default_rng(2)
    for _ in range(5):
        f, t = rng.normal(size=3), rng.uniform(0.0, 2.0)
        mu, sigma = forward(model, realized, f, t)
        mu_ref, sigma_ref = reference_forward(model, realized, f, t)
        assert mu == pytest.approx(mu_ref, rel=1e-12, abs=1e-12)
        assert sigma == pytest.approx(sigma_ref, rel=1e-12, abs=1e-12)


def test_forward_rejects_wrong_input_length():
    model = VariationalModel.initialize(tiny_arch())
    with pytest.raises(InvalidInputError):
        forward(model, model.realize(), np.zeros(4), 0.0)


def test_architecture_keeps_final_layer_linear():
    with pytest.raises(InvalidInputError):
        OperatorArchitecture(n_sensors=3, branch_widths=(4,), trunk_widths=(4,), activated_layers=2)


def test_default_initialization_is_fan_scaled():
    arch = OperatorArchitecture(n_sensors=101)
    model = VariationalModel.initialize(arch, seed=3)
    first = model.tensors['branch.0.weight']
    assert first.shape == (50, 101)
    assert np.std(first.mu_v) == pytest.approx(np.sqrt(2.0 / 101), rel=0.05)
    np.testing.assert_allclose(first.sigma, 1e-3, rtol=1e-6)
    assert not np.any(model.tensors['branch.2.bias'].mu_v)
    assert arch.layer_init_scales('trunk', 3) == pytest.approx(
        (np.sqrt(2.0 / 100) * 25 ** -0.25, 0.0))
    assert tiny_arch(init_std=0.3).layer_init_scales('branch', 1) == (0.3, 0.3)


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

def test_elbo_perfect_fit_is_zero():
    model = unit_sigma_model()
    loss = elbo_loss(model, np.zeros((2, 1)), np.array([0.0, 0.5]), np.zeros((2, 2)), [zero_noise(model)])
    assert loss == pytest.approx(0.0, abs=1e-9)


def test_elbo_single_datum():
    model = unit_sigma_model()
    loss = elbo_loss(model, np.zeros((1, 1)), np.array([0.5]), np.array([[2.0]]), [zero_noise(model)])
    assert loss == pytest.approx(2.0, abs=1e-9)


def test_elbo_without_data_is_the_kl():
    model = VariationalModel.initialize(tiny_arch(), seed=4)
    targets = np.full((2, 3), np.nan)
    loss = elbo_loss(model, np.zeros((2, 3)), np.linspace(0, 1, 3), targets,
                     [zero_noise(model)], kl_weight=1.0, allow_empty=True)
    assert loss == pytest.approx(total_kl(model.tensors), rel=1e-12)
    with pytest.raises(InvalidInputError):
        elbo_loss(model, np.zeros((2, 3)), np.linspace(0, 1, 3), targets, [zero_noise(model)])


def test_elbo_names_the_non_finite_triplet():
    model = unit_sigma_model()
    model.tensors['trunk.0.bias'] = VariationalTensor.point_mass(np.array([1.0, 1.0]))
    model.tensors['branch.0.bias'] = VariationalTensor.point_mass(np.array([np.inf, 0.0]))
    with pytest.raises(NumericalError, match='triplet 0'):
        elbo_loss(model, np.zeros((1, 1)), np.array([0.0]), np.array([[1.0]]), [zero_noise(model)])


def test_elbo_gradients_match_finite_differences():
    arch = OperatorArchitecture(n_sensors=2, branch_widths=(2,), trunk_widths=(2,), latent=1,
                                activated_layers=1, branch_activation='vsn', init_std=0.5,
                                sigma_init=0.1, threshold_init=0.0)
    model = VariationalModel.initialize(arch, seed=5)
    rng = np.random.default_rng(6)
    inputs = rng.normal(size=(3, 2))
    times = np.array([0.0, 0.3, 0.7, 1.0])
    targets = rng.normal(size=(3, 4))
    targets[1, 2] = np.nan
    noise = [model.draw_noise(rng), model.draw_noise(rng)]
    base = {k: v.copy() for k, v in model.state_arrays().items()}
    assert sum(v.size for v in base.values()) == 48

    _, grads = elbo_loss_and_grads(model, inputs, times, targets, noise, kl_weight=0.3, smooth=True)
    h = 1e-6
    for key, array in base.items():
        for index in np.ndindex(array.shape):
            losses = []
            for step in (h, -h):
                perturbed = {k: v.copy() for k, v in base.items()}
                perturbed[key][index] += step
                model.load_state_arrays(perturbed)
                losses.append(elbo_loss(model, inputs, times, targets, noise, kl_weight=0.3, smooth=True))
            model.load_state_arrays(base)
            numeric = (losses[0] - losses[1]) / (2 * h)
            assert grads[key][index] == pytest.approx(numeric, rel=1e-3, abs=1e-5), key


@pytest.mark.parametrize('flags, learned, frozen', [
    ({'learn_thresholds': False}, 'leak_raw', 'threshold'),
    ({'learn_leak': False}, 'threshold', 'leak_raw'),
])
def test_vsn_parameters_freeze_independently(flags, learned, frozen):
    model = VariationalModel.initialize(tiny_arch(init_std=1.0, threshold_init=0.0, **flags), seed=19)
    rng = np.random.default_rng(20)
    _, grads = elbo_loss_and_grads(model, rng.normal(size=(4, 3)), np.linspace(0, 1, 3),
                                   rng.normal(size=(4, 3)), [model.draw_noise(rng)])
    assert f"branch.0.{learned}" in grads
    assert f"branch.0.{frozen}" not in grads


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def constant_dataset(c=2.5):
    grid = SensorGrid.uniform(0.1, 40.0)
    rng = np.random.default_rng(7)
    return OperatorDataset(grid, rng.normal(size=(8, grid.count)), np.full((8, grid.count), c))


def test_training_fits_a_constant_target():
    dataset = constant_dataset()
    arch = tiny_arch(n_sensors=dataset.grid.count, branch_widths=(8,), trunk_widths=(8,), latent=4,
                     init_std=0.05, sigma_init=0.05)
    model = train(dataset, arch, TrainConfig(learning_rate=5e-3, iterations=300, seed=1))
    realized = model.realize()
    for f in dataset.inputs:
        for t in dataset.grid.times:
            mu, _ = forward(model, realized, f, t)
            assert mu == pytest.approx(2.5, abs=0.026)
    log = model.training_log
    assert len(log) == 300
    assert np.all(np.diff(log['best'].to_numpy()) <= 0)


def operator_dataset(n=64, seed=21):
    """u(t) = cos(2 pi t) + 3 mean(f) (1 + t); most of the variance depends on the input"""
    grid = SensorGrid.uniform(1.0, 10.0)
    inputs = np.random.default_rng(seed).normal(size=(n, grid.count))
    t = grid.times[None, :]
    responses = np.cos(2 * np.pi * t) + 3.0 * inputs.mean(axis=1, keepdims=True) * (1.0 + t)
    return OperatorDataset(grid, inputs, responses)


def posterior_mean_response(model, dataset):
    mu, _, _ = forward_grid(model, model.realize(), dataset.inputs, dataset.grid.times)
    return model.output_shift + model.output_scale * mu


def test_training_learns_an_input_dependent_operator():
    dataset = operator_dataset()
    arch = OperatorArchitecture(n_sensors=dataset.grid.count, branch_widths=(16, 16),
                                trunk_widths=(16, 16), latent=4, activated_layers=2)
    model = train(dataset, arch, TrainConfig(learning_rate=5e-3, iterations=1500, seed=2))
    ensemble_mean = np.broadcast_to(dataset.responses.mean(axis=0), dataset.responses.shape)
    baseline = nmse(ensemble_mean, dataset.responses)
    error = nmse(posterior_mean_response(model, dataset), dataset.responses)
    assert baseline > 0.6
    assert error < 0.2
    assert error < baseline / 4


def test_training_retains_the_best_posterior_mean_iterate():
    dataset = operator_dataset(n=16)
    arch = OperatorArchitecture(n_sensors=dataset.grid.count, branch_widths=(8,), trunk_widths=(8,),
                                latent=2, activated_layers=1)
    model = train(dataset, arch, TrainConfig(learning_rate=1e-2, iterations=60, seed=4))
    log = model.training_log
    assert list(log.columns) == ['iteration', 'loss', 'mean_loss', 'best']
    assert log['best'].iloc[-1] == pytest.approx(log['mean_loss'].min(), rel=1e-12)
    kl_weight = 1.0 / dataset.responses.size
    retained = elbo_loss(model, dataset.inputs, dataset.grid.times, dataset.responses, [None], kl_weight)
    assert retained == pytest.approx(log['best'].iloc[-1], rel=1e-12)


def test_sampled_loss_selection_is_available():
    dataset = operator_dataset(n=16)
    arch = OperatorArchitecture(n_sensors=dataset.grid.count, branch_widths=(8,), trunk_widths=(8,),
                                latent=2, activated_layers=1)
    model = train(dataset, arch, TrainConfig(learning_rate=1e-2, iterations=30, seed=4, select_on='sample'))
    log = model.training_log
    assert log['best'].iloc[-1] == pytest.approx(log['loss'].min(), rel=1e-12)
    with pytest.raises(InvalidInputError):
        TrainConfig(select_on='last')


def test_training_is_deterministic_in_seed():
    dataset = constant_dataset()
    arch = tiny_arch(n_sensors=dataset.grid.count)
    cfg = TrainConfig(learning_rate=1e-2, iterations=40, seed=3)
    first = train(dataset, arch, cfg)
    second = train(dataset, arch, cfg)
    assert np.array_equal(first.training_log['loss'].to_numpy(), second.training_log['loss'].to_numpy())


def test_training_rejects_sensor_mismatch():
    dataset = constant_dataset()
    with pytest.raises(InvalidInputError):
        train(dataset, tiny_arch(n_sensors=dataset.grid.count + 1), TrainConfig(iterations=1))


# ---------------------------------------------------------------------------
# Predictive Monte Carlo
# ---------------------------------------------------------------------------

def sharp_model():
    """Point-mass weights with the std head pinned near the floor"""
    model = VariationalModel.initialize(tiny_arch(init_std=0.5), seed=8)
    overrides = {}
    for prefix, bias in (('branch', -50.0), ('trunk', 1.0)):
        weight = model.tensors[f"{prefix}.1.weight"].mu_v.copy()
        b = model.tensors[f"{prefix}.1.bias"].mu_v.copy()
        weight[2:] = 0.0
        b[2:] = bias
        overrides[f"{prefix}.1.weight"], overrides[f"{prefix}.1.bias"] = weight, b
    return collapse(model, overrides)


def test_collapsed_posterior_is_deterministic():
    model = sharp_model()
    rng = np.random.default_rng(9)
    f = rng.normal(size=3)
    times = np.linspace(0.0, 1.0, 6)
    band = predict_trajectory(model, f, times, n1=20, n2=5, seed=1)
    expected = np.array([forward(model, model.realize(), f, t)[0] for t in times])
    np.testing.assert_allclose(band.mu_hat[0], expected, atol=1e-5)
    assert np.all(band.sigma_hat < 1e-5)


def test_many_output_draws_recover_the_heads():
    model = collapse(VariationalModel.initialize(tiny_arch(init_std=0.5), seed=10))
    f = np.array([0.3, -0.2, 0.1])
    mu, sigma = forward(model, model.realize(), f, 0.4)
    n2 = 100000
    band = predict(model, f, 0.4, n1=1, n2=n2, seed=2)
    assert abs(band.mu_hat[0, 0] - mu) < 4 * sigma / np.sqrt(n2)
    assert abs(band.sigma_hat[0, 0] - sigma) < 4 * sigma / np.sqrt(2 * n2)


def test_prediction_is_deterministic_in_seed():
    model = VariationalModel.initialize(tiny_arch(), seed=11)
    inputs = np.random.default_rng(12).normal(size=(4, 3))
    times = np.linspace(0.0, 1.0, 5)
    a = predict_bands(model, inputs, times, 10, 4, seed=5)
    b = predict_bands(model, inputs, times, 10, 4, seed=5)
    c = predict_bands(model, inputs, times, 10, 4, seed=6)
    assert np.array_equal(a.mu_hat, b.mu_hat) and np.array_equal(a.sigma_hat, b.sigma_hat)
    assert not np.array_equal(a.mu_hat, c.mu_hat)
    assert a.mu_hat.shape == (4, 5) and a.sigma_hat.shape == (4, 5)


def test_single_time_prediction_matches_trajectory():
    model = VariationalModel.initialize(tiny_arch(), seed=13)
    f = np.array([0.5, 0.1, -0.3])
    times = np.linspace(0.0, 1.0, 7)
    trajectory = predict_trajectory(model, f, times, 8, 3, seed=4)
    point = predict(model, f, times[3], 8, 3, seed=4)
    assert point.mu_hat[0, 0] == pytest.approx(trajectory.mu_hat[0, 3], rel=1e-12)
    assert point.sigma_hat[0, 0] == pytest.approx(trajectory.sigma_hat[0, 3], rel=1e-12)


def test_repeated_time_gives_identical_entries():
    model = VariationalModel.initialize(tiny_arch(), seed=14)
    band = predict_trajectory(model, np.ones(3), np.array([0.6, 0.6]), 6, 4, seed=0)
    assert band.mu_hat[0, 0] == pytest.approx(band.mu_hat[0, 1], rel=1e-14)
    assert band.sigma_hat[0, 0] == pytest.approx(band.sigma_hat[0, 1], rel=1e-14)


def test_prediction_rejects_zero_draws():
    model = VariationalModel.initialize(tiny_arch())
    with pytest.raises(InvalidInputError):
        predict(model, np.zeros(3), 0.0, n1=0, n2=1)


def test_spiking_activity_is_a_percentage():
    model = VariationalModel.initialize(tiny_arch(init_std=1.0, threshold_init=0.0), seed=15)
    activity = branch_spiking_activity(model, np.random.default_rng(16).normal(size=(20, 3)))
    assert set(activity) == {'branch.0'}
    assert 0.0 < activity['branch.0'] <= 100.0
    assert branch_spiking_activity(VariationalModel.initialize(tiny_arch(branch_activation='relu')),
                                   np.zeros((1, 3))) == {}


def test_branch_records_follow_layer_order():
    arch = tiny_arch(branch_widths=tuple(range(2, 13)), trunk_widths=(2,) * 11, activated_layers=11)
    model = VariationalModel.initialize(arch, seed=18)
    inputs = np.random.default_rng(19).normal(size=(5, 3))
    records = branch_records(model, inputs)
    assert list(records) == [f"branch.{i}" for i in range(11)]
    for i in range(11):
        assert records[f"branch.{i}"].outputs.shape[-1] == i + 2
    assert list(branch_spiking_activity(model, inputs)) == list(records)


def test_saved_model_predicts_identically(tmp_path):
    model = VariationalModel.initialize(tiny_arch(), seed=17, horizon=(0.0, 2.0))
    model.input_shift, model.input_scale, model.output_scale = 0.1, 3.0, 0.01
    save_model(model, tmp_path / 'dof0', extra={'dof': 0})
    loaded, manifest = load_model(tmp_path / 'dof0')
    assert manifest['dof'] == 0
    inputs = np.random.default_rng(18).normal(size=(3, 3))
    times = np.linspace(0.0, 2.0, 4)
    a = predict_bands(model, inputs, times, 5, 2, seed=1)
    b = predict_bands(loaded, inputs, times, 5, 2, seed=1)
    assert np.array_equal(a.mu_hat, b.mu_hat) and np.array_equal(a.sigma_hat, b.sigma_hat)
