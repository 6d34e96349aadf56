import dataclasses
from collections.abc import Callable, Sequence

import numpy as np
import pytest

from siamsearch.autograd import Tensor, default_dtype
from siamsearch.config import ExperimentConfig
from siamsearch.data import synth_dataset


def numeric_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function with respect to one array, perturbed in place."""
    grad = np.zeros_like(array)
    for i in np.ndindex(array.shape):
        saved = array[i]
        array[i] = saved + eps
        up = f()
        array[i] = saved - eps
        down = f()
        array[i] = saved
        grad[i] = (up - down) / (2 * eps)
    return grad


def check_grads(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    rtol: float = 1e-5,
    atol: float = 1e-7,
) -> None:
    """Compare backward() against central differences for every input, in float64."""
    with default_dtype(np.float64):
        inputs = [Tensor(a, requires_grad=True) for a in arrays]
        build(inputs).backward()
        for t in inputs:
            numeric = numeric_grad(lambda: build(inputs).item(), t.data)
            np.testing.assert_allclose(t.grad, numeric, rtol=rtol, atol=atol)


@pytest.fixture
def gradcheck():
    return check_grads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# gradient checks sweep a hundred draws
@pytest.fixture(params=range(100))
def seeded_rng(request):
    return np.random.default_rng(request.param)


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    """Seconds-scale experiment: 8x8 synthetic images, narrow backbone and heads."""
    config = ExperimentConfig()
    return dataclasses.replace(
        config,
        data=dataclasses.replace(config.data, n=24, test_n=16, classes=2, size=8, split=0.5),
        model=dataclasses.replace(
            config.model,
            encoder_depth=2,
            predictor_depth=2,
            backbone_widths=[4, 6, 8],
            hidden_dim=8,
            out_dim=6,
        ),
        search=dataclasses.replace(config.search, epochs=2, batch_size=6),
        pretrain=dataclasses.replace(config.pretrain, epochs=3, batch_size=8),
        probe=dataclasses.replace(config.probe, epochs=3, batch_size=8),
        ablation=dataclasses.replace(config.ablation, seeds=[0], arms=["S+aug", "S_prime+noaug"]),
        run=dataclasses.replace(config.run, seed=0, out=str(tmp_path / "run")),
    )


@pytest.fixture
def tiny_dataset(tiny_config):
    c = tiny_config.data
    return synth_dataset(c.seed, c.n, c.classes, c.size)


@pytest.fixture
def numeric():
    return numeric_grad
