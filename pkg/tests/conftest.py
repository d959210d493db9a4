import numpy as np
import pytest
import torch

from incpl.backbone import BackendConfig, ToyBackend
from incpl.harness import SyntheticTaskSpec, generate_synthetic

torch.set_num_threads(1)

# Small verification backend: cheap enough for exhaustive finite differences.
GRAD_CHECK_CONFIG = BackendConfig(
    d_v=8, d_l=8, M=4, C_img=3, H=8, W=8, n_layers=2, temperature=20.0, seed=3
)


@pytest.fixture(scope="session")
def grad_backend():
    return ToyBackend(GRAD_CHECK_CONFIG, precision="float64")


@pytest.fixture(scope="session")
def backend():
    return ToyBackend(BackendConfig(), precision="float64")


@pytest.fixture(scope="session")
def mini_task(tmp_path_factory):
    """Small synthetic task: 8 classes, 2 labeled + 6 test samples per class."""
    out = tmp_path_factory.mktemp("mini_task")
    labeled, test = generate_synthetic(SyntheticTaskSpec(samples_per_class=8), out)
    return {"dir": out, "labeled": labeled, "test": test}


@pytest.fixture(scope="session")
def default_task(tmp_path_factory):
    """The default synthetic task: 8 classes x 25 samples, seed 0."""
    out = tmp_path_factory.mktemp("default_task")
    labeled, test = generate_synthetic(SyntheticTaskSpec(), out)
    return {"dir": out, "labeled": labeled, "test": test}


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central-difference gradient oracle over every coordinate."""
    out = {}
    for name, p in params.items():
        g = torch.zeros_like(p)
        flat = g.view(-1)
        for i in range(p.numel()):
            for sign in (1.0, -1.0):
                pert = {k: v.clone() for k, v in params.items()}
                pert[name].view(-1)[i] += sign * h
                flat[i] += sign * float(loss_fn(pert).detach())
        out[name] = g / (2 * h)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    denom = torch.maximum(
        torch.maximum(analytic.abs(), numeric.abs()),
        torch.tensor(floor, dtype=analytic.dtype),
    )
    return float(((analytic - numeric).abs() / denom).max())


def random_image(rng: np.random.Generator, config: BackendConfig, sample_id: str = "img"):
    from incpl.backbone import ImageSample

    return ImageSample(
        pixels=rng.random((config.C_img, config.H, config.W)), id=sample_id
    )
