"""Low-rank adapters on the Q/K/V projections of every attention unit."""

import logging
import math
from typing import Sequence

import numpy as np

from core.layers import LoRAAdapter
from core.unet import select_trainable
from utils.errors import ConfigError, ContractError
from utils.helpers import make_rng

logger = logging.getLogger(__name__)

TARGETS = ("to_q", "to_k", "to_v")


def attach_lora(model, targets: Sequence[str] = TARGETS, rank: int = 4, scale: float = 1.0,
                seed: int = 0):
    """
    Reparameterize each targeted projection W as W + scale * B @ A with B = 0, so the
    forward pass is unchanged at attachment. Afterwards only the adapters train.
    """
    if rank < 1:
        raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
    unknown = set(targets) - set(TARGETS)
    if unknown or not targets:
        raise ConfigError(f"unknown LoRA targets {sorted(unknown) or targets}")

    rng = make_rng(seed)
    store = model.store
    added = 0
    for unit in model.attention_units:
        for target in targets:
            linear = getattr(unit, target)
            if linear.adapter is not None:
                raise ContractError(f"{linear.name} already carries an adapter")
            if rank > min(linear.d_in, linear.d_out):
                raise ConfigError(f"LoRA rank {rank} exceeds min({linear.d_in}, {linear.d_out}) "
                                  f"for {linear.name}")
            meta = linear.place.meta()
            meta["group"] = "lora"
            a = store.add(f"{linear.name}.lora_A",
                          rng.standard_normal((rank, linear.d_in)) / math.sqrt(linear.d_in), **meta)
            b = store.add(f"{linear.name}.lora_B", np.zeros((linear.d_out, rank)), **meta)
            linear.adapter = LoRAAdapter(a=a, b=b, rank=rank, scale=scale)
            added += linear.adapter.param_count

    model.lora = {"targets": list(targets), "rank": rank, "scale": scale, "seed": seed}
    select_trainable(model, "lora")
    logger.info("attached rank-%d LoRA to %s: %d adapter parameters", rank, ",".join(targets), added)
    return model
