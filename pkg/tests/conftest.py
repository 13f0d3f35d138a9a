"""Shared fixtures: seeded generators, tiny model configs and a finite-difference helper."""

import numpy as np
import pytest

from core.diffusion import LatentDiffusion, make_schedule
from core.tensor import Tape, Tensor
from core.unet import UNetConfig, UNetLite
from utils.helpers import make_rng


@pytest.fixture
def rng():
    return make_rng(42)


@pytest.fixture
def tiny_unet_config():
    return UNetConfig(latent_channels=2, latent_size=4, base_channels=8, channel_mult=(1, 2),
                      num_res_blocks=1, heads=1, conditional=True, num_classes=2, cond_dim=4, seed=3)


@pytest.fixture
def tiny_model(tiny_unet_config):
    model = LatentDiffusion(UNetLite(tiny_unet_config), make_schedule(20, 1e-4, 0.02))
    model.pretrained_from = "test"
    return model


@pytest.fixture
def tiny_latents():
    gen = make_rng(7)
    latents = gen.standard_normal((12, 2, 4, 4))
    labels = np.arange(12) % 2
    return latents, labels


def numeric_grad(fn, array: np.ndarray, index, eps: float = 1e-6) -> float:
    """Central difference of scalar fn() with respect to array[index], restoring the entry."""
    original = array[index]
    array[index] = original + eps
    up = fn()
    array[index] = original - eps
    down = fn()
    array[index] = original
    return (up - down) / (2 * eps)


@pytest.fixture
def gradcheck():
    """
    Compare tape gradients of fn(*tensors) against central differences at a few
    entries of every input. Returns the worst relative error.
    """

    def check(fn, *arrays, entries: int = 6, seed: int = 0):
        tensors = [Tensor(a, requires_grad=True, name=f"x{i}") for i, a in enumerate(arrays)]
        with Tape() as tape:
            loss = fn(*tensors)
            grads = tape.backward(loss, {t.name: t for t in tensors})

        def value():
            return float(fn(*[Tensor(t.data) for t in tensors]).data)

        pick = np.random.default_rng(seed)
        worst = 0.0
        for t in tensors:
            flat_count = t.data.size
            for flat in pick.choice(flat_count, size=min(entries, flat_count), replace=False):
                index = np.unravel_index(flat, t.shape)
                expected = numeric_grad(value, t.data, index)
                got = grads[t.name][index]
                worst = max(worst, abs(got - expected) / max(1.0, abs(expected)))
        return worst

    return check
