import numpy as np
import pytest

from nirskill.data import load_montage, builtin_montage_path
from nirskill.preprocess import PreprocessConfig
from nirskill.synth import ScenarioConfig, iter_scenario_trials


def numeric_gradients(build_loss, tensors, eps=1e-6):
    """Central finite differences of a rebuilt scalar loss, per tensor."""
    grads = []
    for t in tensors:
        num = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = t.data[idx]
            t.data[idx] = old + eps
            lp = build_loss().item()
            t.data[idx] = old - eps
            lm = build_loss().item()
            t.data[idx] = old
            num[idx] = (lp - lm) / (2 * eps)
            it.iternext()
        grads.append(num)
    return grads


def grad_check(build_loss, tensors, eps=1e-6, tol=1e-4):
    """Max relative error between analytic and numeric gradients."""
    loss = build_loss()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    numeric = numeric_gradients(build_loss, tensors, eps)
    worst = 0.0
    for an, num in zip(analytic, numeric):
        denom = max(np.abs(an).max(), np.abs(num).max(), 1e-8)
        worst = max(worst, float(np.abs(an - num).max() / denom))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3g}"
    return worst


@pytest.fixture(scope="session")
def custom_montage():
    return load_montage(builtin_montage_path("custom"))


@pytest.fixture(scope="session")
def montage_1010():
    return load_montage(builtin_montage_path("1010"))


@pytest.fixture(scope="session")
def preprocess_cfg():
    return PreprocessConfig()


@pytest.fixture(scope="session")
def mini_scenario():
    """Small but class-separable scenario used by pipeline-level tests."""
    return ScenarioConfig(
        seed=11,
        n_subjects=3,
        days=1,
        trials_per_day=8,
        duration_min_s=45.0,
        duration_max_s=60.0,
        positive_fraction=0.625,
    )


@pytest.fixture(scope="session")
def mini_trials(mini_scenario, custom_montage, preprocess_cfg):
    pairs = list(iter_scenario_trials(mini_scenario, custom_montage, preprocess_cfg))
    trials = [t for t, _ in pairs]
    truths = [g for _, g in pairs]
    labels = np.array([t.label for t in trials])
    return trials, truths, labels
