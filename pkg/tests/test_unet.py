"""Tests for attention units, the UNet-lite layout and trainable-subset selection."""

import math

import numpy as np
import pytest

from core.attention import Attention, attention_forward
from core.diffusion import ldm_loss
from core.layers import Placement
from core.params import ParamStore
from core.tensor import Tape, Tensor
from core.unet import UNetConfig, UNetLite, attention_layout, resolve_trainable, select_trainable
from utils.config import AppConfig
from utils.errors import ConfigError, ContractError, DimensionError
from utils.helpers import make_rng

PLACE = Placement("attn", "middle", "middle_block", "attn", attn_index=0)


def loop_attention(unit: Attention, psi: np.ndarray, cond=None) -> np.ndarray:
    """Scalar-loop oracle for a single-head unit on one (N, d) input."""
    context = psi if cond is None else cond
    wq, wk, wv = (p.weight.data for p in unit.projections)
    n, m = psi.shape[0], context.shape[0]
    q = np.array([[sum(wq[o, i] * psi[r, i] for i in range(psi.shape[1])) for o in range(wq.shape[0])]
                  for r in range(n)])
    k = np.array([[sum(wk[o, i] * context[r, i] for i in range(context.shape[1]))
                   for o in range(wk.shape[0])] for r in range(m)])
    v = np.array([[sum(wv[o, i] * context[r, i] for i in range(context.shape[1]))
                   for o in range(wv.shape[0])] for r in range(m)])
    out = np.zeros((n, v.shape[1]))
    for r in range(n):
        scores = [sum(q[r, d] * k[c, d] for d in range(q.shape[1])) / math.sqrt(q.shape[1])
                  for c in range(m)]
        top = max(scores)
        weights = [math.exp(s - top) for s in scores]
        total = sum(weights)
        for c in range(m):
            out[r] += weights[c] / total * v[c]
    return out


class TestAttention:
    @pytest.mark.parametrize("seed", range(10))
    def test_self_attention_matches_loop(self, seed):
        gen = np.random.default_rng(seed)
        d = int(gen.integers(2, 6))
        n = int(gen.integers(1, 6))
        unit = Attention(ParamStore(), "a", d, make_rng(seed), PLACE)
        psi = gen.standard_normal((n, d))
        out = attention_forward(unit, Tensor(psi)).data
        np.testing.assert_allclose(out, loop_attention(unit, psi), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_cross_attention_matches_loop(self, seed):
        gen = np.random.default_rng(100 + seed)
        d, dc = int(gen.integers(2, 6)), int(gen.integers(2, 5))
        n, m = int(gen.integers(1, 6)), int(gen.integers(1, 4))
        unit = Attention(ParamStore(), "a", d, make_rng(seed), PLACE, context_dim=dc)
        psi, cond = gen.standard_normal((n, d)), gen.standard_normal((m, dc))
        out = attention_forward(unit, Tensor(psi), Tensor(cond)).data
        np.testing.assert_allclose(out, loop_attention(unit, psi, cond), rtol=0, atol=1e-12)

    def test_weights_are_row_stochastic(self, rng):
        unit = Attention(ParamStore(), "a", 4, rng, PLACE, heads=2)
        w = unit.weights(Tensor(np.random.default_rng(1).standard_normal((3, 5, 4)))).data
        assert w.shape == (6, 5, 5)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_batched_matches_unbatched(self, rng):
        unit = Attention(ParamStore(), "a", 4, rng, PLACE)
        psi = np.random.default_rng(2).standard_normal((3, 5, 4))
        batched = unit(Tensor(psi)).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], unit(Tensor(psi[b])).data, atol=1e-12)

    def test_contract_errors(self, rng):
        self_unit = Attention(ParamStore(), "s", 4, rng, PLACE)
        cross_unit = Attention(ParamStore(), "c", 4, rng, PLACE, context_dim=3)
        psi = Tensor(np.ones((2, 4)))
        with pytest.raises(ContractError):
            self_unit(psi, Tensor(np.ones((1, 4))))
        with pytest.raises(ContractError):
            cross_unit(psi)
        with pytest.raises(DimensionError):
            cross_unit(psi, Tensor(np.ones((1, 5))))
        with pytest.raises(DimensionError):
            self_unit(Tensor(np.ones((2, 3))))


class TestUNetLayout:
    def test_two_level_layout_has_seven_modules(self, tiny_model):
        layout = attention_layout(tiny_model)
        assert [m["location"] for m in layout] == ["input"] * 2 + ["middle"] + ["out"] * 4
        assert [m["index"] for m in layout] == list(range(7))
        assert len(tiny_model.attention_units) == 14

    def test_unconditional_uses_self_attention_blocks(self, tiny_unet_config):
        cfg = UNetConfig(**{**tiny_unet_config.to_meta(), "channel_mult": (1, 2), "conditional": False})
        unet = UNetLite(cfg)
        assert len(unet.attention_modules) == 7
        assert all(m.kind == "self" for m in unet.attention_modules)
        assert not any(i.group == "cond" for i in unet.store.infos())

    def test_three_level_two_block_layout(self):
        cfg = UNetConfig(latent_channels=1, latent_size=4, base_channels=8, channel_mult=(1, 1, 2),
                         num_res_blocks=2, cond_dim=4)
        assert len(UNetLite(cfg).attention_modules) == 16

    def test_output_shape(self, tiny_model, tiny_latents):
        latents, labels = tiny_latents
        out = tiny_model.predict_noise(Tensor(latents[:3]), np.array([1, 5, 20]), labels[:3])
        assert out.shape == latents[:3].shape

    def test_input_errors(self, tiny_model, tiny_unet_config):
        with pytest.raises(DimensionError):
            tiny_model.predict_noise(Tensor(np.zeros((1, 2, 8, 8))), 1, [0])
        with pytest.raises(ContractError):
            tiny_model.predict_noise(Tensor(np.zeros((1, 2, 4, 4))), 1, [5])
        with pytest.raises(ContractError):
            tiny_model.predict_noise(Tensor(np.zeros((1, 2, 4, 4))), 1, None)
        cfg = UNetConfig(**{**tiny_unet_config.to_meta(), "channel_mult": (1, 2), "conditional": False})
        with pytest.raises(ContractError):
            UNetLite(cfg)(Tensor(np.zeros((1, 2, 4, 4))), 1, [0])

    def test_null_class_handles_unlabeled(self, tiny_unet_config):
        cfg = UNetConfig(**{**tiny_unet_config.to_meta(), "channel_mult": (1, 2), "null_class": True})
        unet = UNetLite(cfg)
        assert unet.embedder.rows == 3
        out = unet(Tensor(np.zeros((2, 2, 4, 4))), 3, [AppConfig.UNLABELED, 1])
        assert out.shape == (2, 2, 4, 4)

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            UNetLite(UNetConfig(latent_size=5, channel_mult=(1, 2)))


class TestUNetGradients:
    def test_full_loss_matches_finite_differences(self, tiny_model, tiny_latents):
        latents, labels = tiny_latents
        gen = np.random.default_rng(5)
        z0, y = latents[:2], labels[:2]
        t = np.array([3, 17])
        noise = gen.standard_normal(z0.shape)
        store = tiny_model.store
        with Tape() as tape:
            loss = ldm_loss(tiny_model, z0, y, t=t, noise=noise)
            grads = tape.backward(loss, store.trainable())

        def value():
            return ldm_loss(tiny_model, z0, y, t=t, noise=noise).item()

        names = ["cond.embed.table", "input_blocks.0.conv.weight", "input_blocks.1.attn.attn1.to_q.weight",
                 "middle_block.attn.attn2.to_v.weight", "out_blocks.3.res.conv1.weight", "head.conv.bias",
                 "time_embed.0.weight"]
        eps = 1e-5
        for name in names:
            param = store[name].data
            for flat in gen.choice(param.size, size=min(3, param.size), replace=False):
                index = np.unravel_index(flat, param.shape)
                original = param[index]
                param[index] = original + eps
                up = value()
                param[index] = original - eps
                down = value()
                param[index] = original
                expected = (up - down) / (2 * eps)
                got = grads[name][index]
                assert abs(got - expected) / max(1.0, abs(expected)) < 1e-5, name


class TestTrainableSelection:
    def test_all_attn_and_cond(self, tiny_model):
        selection = select_trainable(tiny_model, "all-attn+cond")
        groups = {tiny_model.store.info(n).group for n in selection.names}
        assert groups == {"attn", "cond"}
        assert 0 < selection.fraction < 1
        assert selection.trainable == tiny_model.store.count(trainable_only=True)

    def test_empty_spec_selects_nothing(self, tiny_model):
        assert select_trainable(tiny_model, "").trainable == 0
        assert select_trainable(tiny_model, "{}").trainable == 0

    def test_index_and_location_terms(self, tiny_model):
        store = tiny_model.store
        picked = resolve_trainable(store, "attn:0,6", 7)
        assert {store.info(n).attn_index for n in picked} == {0, 6}
        out = resolve_trainable(store, "out-attn", 7)
        assert {store.info(n).attn_index for n in out} == {3, 4, 5, 6}

    def test_ablation(self, tiny_model):
        store = tiny_model.store
        assert resolve_trainable(store, "ablation:-1", 7) == resolve_trainable(store, "all-attn", 7)
        picked = resolve_trainable(store, "ablation:5", 7)
        assert {store.info(n).attn_index for n in picked} == {4, 5, 6}

    def test_block_groups(self, tiny_model):
        store = tiny_model.store
        middle = resolve_trainable(store, "middle_block", 7)
        assert middle and all(store.info(n).location == "middle" for n in middle)
        res = resolve_trainable(store, "resblocks", 7)
        assert res and all(store.info(n).component == "res" for n in res)

    def test_unknown_terms(self, tiny_model):
        with pytest.raises(ConfigError):
            select_trainable(tiny_model, "all-attn+everything")
        with pytest.raises(ConfigError):
            select_trainable(tiny_model, "attn:9")

    def test_frozen_params_get_no_gradient(self, tiny_model, tiny_latents):
        latents, labels = tiny_latents
        select_trainable(tiny_model, "out-attn")
        with Tape() as tape:
            loss = ldm_loss(tiny_model, latents[:2], labels[:2], make_rng(0))
            grads = tape.backward(loss, tiny_model.store.trainable())
        assert all(tiny_model.store.info(n).location == "out" for n in grads)
