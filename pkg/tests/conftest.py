import numpy as np
import pytest

from ergflow.models import DenoiserConfig, EncoderConfig, ToyModel, init_model
from ergflow.tensor import Tensor


def perturb_model(model: ToyModel, seed: int = 0, scale: float = 0.2) -> ToyModel:
    """Add noise to every parameter so zero-initialized paths become active.

    Fresh models gate all attention/MLP branches to zero (adaptive-norm and
    head weights start at 0), which makes rectification a no-op; tests that
    probe attention behavior need weights in general position.
    """
    rng = np.random.default_rng(seed)
    params = {
        name: Tensor((p.array + scale * rng.standard_normal(p.shape)).astype(np.float32),
                     name=name)
        for name, p in model.params.items()
    }
    return ToyModel(params=params, denoiser=model.denoiser, encoder=model.encoder)


@pytest.fixture(scope="session")
def tiny_model() -> ToyModel:
    """Small random-weight model with active attention paths."""
    dcfg = DenoiserConfig(image_side=8, patch=2, depth=4, dim=32, heads=2, cond_tokens=6)
    return perturb_model(init_model(dcfg, EncoderConfig(), seed=1), seed=2)
