"""Tests for the convolutional autoencoder."""

import numpy as np
import pytest

from core.autoencoder import (
    Autoencoder,
    AutoencoderConfig,
    decode_latents,
    encode_dataset,
    reconstruction_error,
    train_autoencoder,
)
from core.tensor import Tape
from utils.errors import ConfigError, DataError
from utils.helpers import make_rng


@pytest.fixture
def images():
    gen = make_rng(0)
    base = np.zeros((16, 1, 8, 8))
    base[::2, :, 2:6, 2:6] = 0.8
    base[1::2, :, :, :4] = -0.6
    return np.clip(base + 0.05 * gen.standard_normal(base.shape), -1, 1)


class TestShapes:
    @pytest.mark.parametrize("f,side", [(2, 4), (4, 2)])
    def test_encode_decode_shapes(self, images, f, side):
        model = Autoencoder(AutoencoderConfig(f=f, latent_channels=3, base_channels=4))
        z = model.encode(images[:3])
        assert z.shape == (3, 3, side, side)
        x = model.decode(z)
        assert x.shape == (3, 1, 8, 8)
        assert np.all(np.abs(x.data) <= 1)

    def test_batching_does_not_change_latents(self, images):
        model = Autoencoder(AutoencoderConfig(base_channels=4))
        np.testing.assert_allclose(encode_dataset(model, images, batch_size=5),
                                   encode_dataset(model, images, batch_size=16), atol=1e-12)
        latents = encode_dataset(model, images)
        assert decode_latents(model, latents, batch_size=3).shape == images.shape

    def test_reconstruction_error_is_mean_squared(self, images):
        model = Autoencoder(AutoencoderConfig(base_channels=4))
        rec = decode_latents(model, encode_dataset(model, images))
        assert reconstruction_error(model, images, batch_size=7) == pytest.approx(np.mean((rec - images) ** 2))

    @pytest.mark.parametrize("kwargs", [{"f": 3}, {"f": 1}, {"f": 4, "channel_mult": (1,)}])
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigError):
            Autoencoder(AutoencoderConfig(**kwargs))

    def test_bad_inputs(self):
        model = Autoencoder(AutoencoderConfig(f=4, base_channels=4))
        with pytest.raises(ConfigError):
            model.encode(np.zeros((1, 1, 6, 6)))
        with pytest.raises(ConfigError):
            model.encode(np.zeros((1, 3, 8, 8)))

    def test_meta_round_trip(self):
        config = AutoencoderConfig(f=4, channel_mult=(1, 2), seed=7)
        assert AutoencoderConfig.from_meta(config.to_meta()) == config


class TestTraining:
    def test_loss_gradients_match_finite_differences(self, images):
        model = Autoencoder(AutoencoderConfig(base_channels=4, seed=2))
        gen = np.random.default_rng(0)
        # zero-initialised biases leave some relu inputs exactly at the kink
        for name, param in model.store.items():
            if name.endswith(".bias"):
                param.data += 0.05 * gen.standard_normal(param.shape)
        x = images[:2]
        with Tape() as tape:
            loss = model.loss(x)
            grads = tape.backward(loss, model.store.trainable())
        eps = 1e-5
        for name in ("encoder.down0.weight", "decoder.conv_out.weight", "decoder.up0.bias"):
            param = model.store[name].data
            for flat in gen.choice(param.size, size=min(3, param.size), replace=False):
                index = np.unravel_index(flat, param.shape)
                original = param[index]
                param[index] = original + eps
                up = model.loss(x).item()
                param[index] = original - eps
                down = model.loss(x).item()
                param[index] = original
                expected = (up - down) / (2 * eps)
                assert abs(grads[name][index] - expected) / max(1.0, abs(expected)) < 1e-5, name

    def test_training_lowers_loss(self, images):
        model, history = train_autoencoder(images, AutoencoderConfig(base_channels=4), epochs=6,
                                           batch_size=4, lr=0.02)
        assert len(history) == 6
        assert history[-1] < history[0]
        assert isinstance(model, Autoencoder)

    def test_same_seed_same_weights(self, images):
        config = AutoencoderConfig(base_channels=4, seed=5)
        a, history_a = train_autoencoder(images, config, epochs=2, batch_size=4, lr=0.02)
        b, history_b = train_autoencoder(images, config, epochs=2, batch_size=4, lr=0.02)
        assert history_a == history_b
        state_a, state_b = a.store.state_dict(), b.store.state_dict()
        assert state_a.keys() == state_b.keys()
        for name in state_a:
            np.testing.assert_array_equal(state_a[name], state_b[name])

    @pytest.mark.slow
    def test_milder_downsampling_reconstructs_better(self, images):
        errors = {}
        for f in (2, 4):
            runs = []
            for seed in range(3):
                model, _ = train_autoencoder(images, AutoencoderConfig(f=f, base_channels=8, seed=seed),
                                             epochs=40, batch_size=4, lr=0.02)
                runs.append(reconstruction_error(model, images))
            errors[f] = np.mean(runs)
        assert errors[2] <= errors[4]

    def test_empty_dataset(self):
        with pytest.raises(DataError):
            train_autoencoder(np.zeros((0, 1, 8, 8)), AutoencoderConfig(), epochs=1)
