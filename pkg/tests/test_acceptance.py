"""
Quality trends of the whole recipe on the shapes benchmark: fine-tuning a small
subset under DP beats the public model, full attention beats a rank-4 adapter,
and a large batch beats a small one at the same budget.
"""

import shutil

import numpy as np
import pytest

from core.pipeline import AUTOENCODER_FILE, PRETRAINED_FILE, StagePipeline, run_stage
from data import generate_shapes
from utils.config import parse_run_config

pytestmark = pytest.mark.slow


def acceptance_config(out, data, batch_size=64, iterations=30, seed=0, finetune="") -> str:
    return f"""
[run]
version = 1
output_dir = {out}

[data]
public = {data / "public.dpds"}
private = {data / "private.dpds"}
private_test = {data / "private_test.dpds"}

[autoencoder]
f = 2
latent_channels = 2
base_channels = 8
epochs = 5
batch_size = 16

[diffusion]
timesteps = 20
base_channels = 8
channel_mult = 1,2
conditional = true
cond_dim = 4
epochs = 15
batch_size = 16

[dp]
batch_size = {batch_size}
clip_norm = 1.0
target_epsilon = 10
iterations = {iterations}
learning_rate = 0.5
seed = {seed}

[finetune]
{finetune}

[eval]
num_samples = 128
feature_dim = 8
classifier_epochs = 1
"""


@pytest.fixture(scope="module")
def shapes_pair(tmp_path_factory):
    data = tmp_path_factory.mktemp("shapes")
    generate_shapes(128, size=8, domain="public", seed=0).save(data / "public.dpds")
    generate_shapes(1024, size=8, domain="private", gap=2.0, seed=1).save(data / "private.dpds")
    generate_shapes(256, size=8, domain="private", gap=2.0, seed=2).save(data / "private_test.dpds")
    return data


@pytest.fixture(scope="module")
def public_model(tmp_path_factory, shapes_pair):
    out = tmp_path_factory.mktemp("public_model")
    config = parse_run_config(acceptance_config(out, shapes_pair))
    run_stage(config, "train-ae")
    run_stage(config, "pretrain-dm")
    return out


def finetuned_fid(root, name, shapes_pair, public_model, **kwargs):
    out = root / name
    out.mkdir()
    for file in (AUTOENCODER_FILE, PRETRAINED_FILE):
        shutil.copy(public_model / file, out / file)
    pipeline = StagePipeline(parse_run_config(acceptance_config(out, shapes_pair, **kwargs)))
    result = pipeline.run("finetune-dp")
    assert result["dp_stamped"] is True
    pipeline.run("sample")
    return pipeline.run("eval-fid"), result


class TestAcceptanceTrends:
    def test_small_subset_finetuning_beats_public_model(self, tmp_path, shapes_pair, public_model):
        baseline = StagePipeline(parse_run_config(acceptance_config(public_model, shapes_pair)))
        baseline.run("sample", which="pretrained")
        public_fid = baseline.run("eval-fid")

        improved = 0
        for seed in range(5):
            value, result = finetuned_fid(tmp_path, f"seed{seed}", shapes_pair, public_model, seed=seed)
            assert result["trainable_fraction"] < 0.35
            assert result["epsilon"] <= 10.0 * 1.01
            improved += value < public_fid
        assert improved >= 4

    def test_full_attention_beats_rank_four_adapter(self, tmp_path, shapes_pair, public_model):
        full, adapter = [], []
        for seed in range(2):
            full.append(finetuned_fid(tmp_path, f"full{seed}", shapes_pair, public_model, seed=seed,
                                      finetune="trainable = all-attn")[0])
            adapter.append(finetuned_fid(tmp_path, f"lora{seed}", shapes_pair, public_model, seed=seed,
                                         finetune="lora_rank = 4")[0])
        assert np.mean(full) <= np.mean(adapter)

    def test_large_batch_beats_small_batch_at_equal_budget(self, tmp_path, shapes_pair, public_model):
        small, large = [], []
        for seed in range(2):
            small.append(finetuned_fid(tmp_path, f"b64_{seed}", shapes_pair, public_model,
                                       batch_size=64, iterations=20, seed=seed)[0])
            large.append(finetuned_fid(tmp_path, f"b512_{seed}", shapes_pair, public_model,
                                       batch_size=512, iterations=20, seed=seed)[0])
        assert np.mean(large) <= np.mean(small)
