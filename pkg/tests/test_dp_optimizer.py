"""Tests for Poisson sampling, clipping, noisy aggregation and the DP-SGD loop."""

import json
import math

import numpy as np
import pytest

from core.accountant import PrivacyLedger
from core.diffusion import LatentDiffusion, draw_noise_and_steps, ldm_loss, make_schedule
from core.dp_optimizer import (
    DPConfig,
    clip_gradient,
    dp_sgd_run,
    noisy_aggregate,
    poisson_subsample,
    steps_for_epochs,
)
from core.tensor import GradMap, Tape
from core.unet import UNetLite, select_trainable
from utils.errors import ContractError, StateError
from utils.helpers import MetricsWriter, make_rng, read_metrics, rng_from_json, rng_state_to_json


@pytest.fixture
def fresh_model(tiny_unet_config):
    def build():
        model = LatentDiffusion(UNetLite(tiny_unet_config), make_schedule(20, 1e-4, 0.02))
        model.pretrained_from = "test"
        return model

    return build


def snapshot(model):
    return {k: v.copy() for k, v in model.store.state_dict().items()}


def plain_sgd_oracle(model, latents, labels, config, spec):
    """Per-sample-sum SGD with the same draws and no clipping or noise."""
    select_trainable(model, spec)
    params = model.store.trainable()
    names = sorted(params)
    rng = make_rng(config.seed)
    n = latents.shape[0]
    for _ in range(config.steps):
        idx = poisson_subsample(n, config.batch_size / n, rng)
        draws = [(int(i),) + draw_noise_and_steps(model.schedule, (1,) + latents.shape[1:], rng) for i in idx]
        total = {k: np.zeros_like(params[k].data) for k in names}
        for i, t, noise in draws:
            with Tape() as tape:
                loss = ldm_loss(model, latents[i:i + 1], labels[i:i + 1], t=t, noise=noise)
                grads = tape.backward(loss, params)
            for k in names:
                np.add(total[k], grads[k], out=total[k])
        for k in names:
            params[k].sub_(config.learning_rate * (total[k] / config.batch_size))


class TestPrimitives:
    def test_poisson_subsample(self):
        idx = poisson_subsample(50, 0.3, make_rng(4))
        np.testing.assert_array_equal(idx, np.flatnonzero(make_rng(4).random(50) < 0.3))
        np.testing.assert_array_equal(poisson_subsample(7, 1.0, make_rng(0)), np.arange(7))
        with pytest.raises(ContractError):
            poisson_subsample(7, 0.0, make_rng(0))

    def test_poisson_rate(self):
        idx = poisson_subsample(100000, 0.05, make_rng(1))
        assert abs(len(idx) - 5000) < 4 * math.sqrt(100000 * 0.05 * 0.95)

    def test_clip_gradient(self):
        grads = GradMap({"a": np.array([3.0]), "b": np.array([4.0])})
        clipped = clip_gradient(grads, 1.0)
        np.testing.assert_allclose(clipped["a"], [0.6])
        np.testing.assert_allclose(clipped["b"], [0.8])
        assert clip_gradient(grads, 10.0) is grads
        assert clip_gradient(grads, math.inf) is grads
        with pytest.raises(ContractError):
            clip_gradient(grads, 0.0)

    def test_noisy_aggregate_without_noise(self):
        template = {"w": np.zeros(2)}
        grads = [GradMap({"w": np.array([1.0, 2.0])}), GradMap({"w": np.array([3.0, 4.0])})]
        update, noise_norm = noisy_aggregate(grads, 0.0, 1.0, 4, make_rng(0), template)
        np.testing.assert_allclose(update["w"], [1.0, 1.5])
        assert noise_norm == 0.0

    def test_noise_is_one_draw_over_sorted_names(self):
        template = {"b": np.zeros(3), "a": np.zeros((2, 2))}
        update, noise_norm = noisy_aggregate([], 2.0, 0.5, 1, make_rng(3), template)
        expected = make_rng(3).standard_normal(7) * 1.0
        np.testing.assert_allclose(update["a"].ravel(), expected[:4])
        np.testing.assert_allclose(update["b"], expected[4:])
        assert noise_norm == pytest.approx(np.linalg.norm(expected))

    def test_noise_needs_finite_clip(self):
        with pytest.raises(ContractError):
            noisy_aggregate([], 1.0, math.inf, 1, make_rng(0), {"w": np.zeros(1)})

    def test_steps_for_epochs(self):
        assert steps_for_epochs(10, 100, 32) == 40
        assert steps_for_epochs(200, 60000, 2000) == 6000


class TestDPConfig:
    @pytest.mark.parametrize("kwargs", [
        {"batch_size": 0}, {"clip_norm": 0.0}, {"noise_multiplier": -1.0},
        {"clip_norm": math.inf}, {"steps": -1}, {"physical_batch_size": 0},
    ])
    def test_invalid(self, kwargs):
        base = dict(batch_size=4, clip_norm=1.0, noise_multiplier=1.0, learning_rate=0.1, steps=2)
        with pytest.raises(ContractError):
            DPConfig(**{**base, **kwargs})

    def test_sampling_rate(self):
        config = DPConfig(batch_size=4, clip_norm=1.0, noise_multiplier=1.0, learning_rate=0.1, steps=1)
        assert config.sampling_rate(12) == pytest.approx(1 / 3)
        with pytest.raises(ContractError):
            config.sampling_rate(3)


class TestDPSGDRun:
    def test_no_noise_no_clip_equals_plain_sgd(self, fresh_model, tiny_latents):
        latents, labels = tiny_latents
        config = DPConfig(batch_size=4, clip_norm=math.inf, noise_multiplier=0.0, learning_rate=0.05,
                          steps=3, seed=11)
        dp_model, oracle_model = fresh_model(), fresh_model()
        result = dp_sgd_run(dp_model, latents, labels, config, trainable="all-attn+cond")
        plain_sgd_oracle(oracle_model, latents, labels, config, "all-attn+cond")
        got, expected = snapshot(dp_model), snapshot(oracle_model)
        for name in expected:
            np.testing.assert_array_equal(got[name], expected[name], err_msg=name)
        assert result.ledger.steps == 3
        assert math.isinf(result.ledger.epsilon())

    def test_clipping_holds_and_frozen_params_stay(self, fresh_model, tiny_latents):
        latents, labels = tiny_latents
        model = fresh_model()
        before = snapshot(model)
        config = DPConfig(batch_size=6, clip_norm=1e-3, noise_multiplier=1.0, learning_rate=0.1, steps=2,
                          seed=2)
        result = dp_sgd_run(model, latents, labels, config, trainable="out-attn")
        assert result.clip_violations == 0
        assert any(r.clipped_fraction > 0 for r in result.reports)
        after = snapshot(model)
        trainable = set(result.selection.names)
        for name in before:
            if name not in trainable:
                np.testing.assert_array_equal(after[name], before[name], err_msg=name)
        assert any(not np.array_equal(after[n], before[n]) for n in trainable)

    @pytest.mark.parametrize("kwargs", [{"workers": 3}, {"physical": 1}])
    def test_workers_and_microbatches_do_not_change_results(self, fresh_model, tiny_latents, kwargs):
        latents, labels = tiny_latents
        base = dict(batch_size=4, clip_norm=0.5, noise_multiplier=0.8, learning_rate=0.1, steps=2, seed=5)
        reference = fresh_model()
        dp_sgd_run(reference, latents, labels, DPConfig(**base), trainable="all-attn")
        other = fresh_model()
        config = DPConfig(**base, physical_batch_size=kwargs.get("physical", 64))
        dp_sgd_run(other, latents, labels, config, trainable="all-attn", workers=kwargs.get("workers", 1))
        expected = snapshot(reference)
        for name, value in snapshot(other).items():
            np.testing.assert_array_equal(value, expected[name], err_msg=name)

    def test_resume_matches_uninterrupted_run(self, fresh_model, tiny_latents):
        latents, labels = tiny_latents
        base = dict(batch_size=4, clip_norm=0.5, noise_multiplier=0.8, learning_rate=0.1, seed=9)
        whole = fresh_model()
        full = dp_sgd_run(whole, latents, labels, DPConfig(**base, steps=4), trainable="all-attn")

        saved = {}

        def on_checkpoint(step, rng, ledger):
            saved.update(step=step, rng=json.dumps(rng_state_to_json(rng)), ledger=ledger.to_meta(),
                         params=snapshot(part))

        part = fresh_model()
        dp_sgd_run(part, latents, labels, DPConfig(**base, steps=4), trainable="all-attn",
                   checkpoint_every=2, on_checkpoint=on_checkpoint)
        assert saved["step"] == 2

        resumed = fresh_model()
        resumed.store.load_state(saved["params"])
        result = dp_sgd_run(resumed, latents, labels, DPConfig(**base, steps=4), trainable="all-attn",
                            start_step=2, rng=rng_from_json(json.loads(saved["rng"])),
                            ledger=PrivacyLedger.from_meta(saved["ledger"]))
        assert result.ledger.steps == full.ledger.steps == 4
        assert result.ledger.epsilon() == full.ledger.epsilon()
        expected = snapshot(whole)
        for name, value in snapshot(resumed).items():
            np.testing.assert_array_equal(value, expected[name], err_msg=name)

    def test_mismatched_resume_step(self, fresh_model, tiny_latents):
        latents, labels = tiny_latents
        config = DPConfig(batch_size=4, clip_norm=1.0, noise_multiplier=1.0, learning_rate=0.1, steps=2)
        with pytest.raises(StateError):
            dp_sgd_run(fresh_model(), latents, labels, config, start_step=1)

    def test_needs_pretrained_model(self, tiny_unet_config, tiny_latents):
        latents, labels = tiny_latents
        model = LatentDiffusion(UNetLite(tiny_unet_config), make_schedule(20, 1e-4, 0.02))
        config = DPConfig(batch_size=4, clip_norm=1.0, noise_multiplier=1.0, learning_rate=0.1, steps=1)
        with pytest.raises(StateError):
            dp_sgd_run(model, latents, labels, config)

    def test_empty_trainable_set_still_spends_budget(self, fresh_model, tiny_latents):
        latents, labels = tiny_latents
        model = fresh_model()
        before = snapshot(model)
        config = DPConfig(batch_size=4, clip_norm=1.0, noise_multiplier=1.0, learning_rate=0.1, steps=3)
        result = dp_sgd_run(model, latents, labels, config, trainable="")
        assert result.ledger.steps == 3
        assert result.selection.trainable == 0
        for name, value in snapshot(model).items():
            np.testing.assert_array_equal(value, before[name])

    def test_reports_are_written(self, fresh_model, tiny_latents, tmp_path):
        latents, labels = tiny_latents
        config = DPConfig(batch_size=4, clip_norm=1.0, noise_multiplier=1.0, learning_rate=0.1, steps=2)
        dp_sgd_run(fresh_model(), latents, labels, config, trainable="attn:0",
                   metrics=MetricsWriter(tmp_path / "m.jsonl"))
        records = read_metrics(tmp_path / "m.jsonl")
        assert [r["step"] for r in records] == [1, 2]
        assert all(r["stage"] == "finetune-dp" for r in records)
