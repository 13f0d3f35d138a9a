"""Named parameter registry with group labels and trainable flags."""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from core.tensor import Tensor, get_default_dtype
from utils.errors import ConfigError, ContractError, FormatError

logger = logging.getLogger(__name__)

GROUPS = ("unet", "attn", "cond", "autoencoder", "lora", "classifier")


@dataclass(frozen=True)
class ParamInfo:
    name: str
    group: str
    location: str = ""
    block: str = ""
    component: str = ""
    attn_index: Optional[int] = None


class ParamStore:
    """
    Owns every parameter tensor of a model. The requires_grad flag of each tensor
    is its trainable flag; frozen tensors never enter a tape.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._info: Dict[str, ParamInfo] = {}

    def add(self, name: str, value: np.ndarray, group: str, location: str = "",
            block: str = "", component: str = "", attn_index: Optional[int] = None) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name} registered twice")
        if group not in GROUPS:
            raise ContractError(f"unknown parameter group {group}")
        tensor = Tensor(np.array(value, dtype=get_default_dtype()), requires_grad=True, name=name)
        self._params[name] = tensor
        self._info[name] = ParamInfo(name, group, location, block, component, attn_index)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(name, self._params[name]) for name in sorted(self._params)]

    def info(self, name: str) -> ParamInfo:
        return self._info[name]

    def infos(self) -> List[ParamInfo]:
        return [self._info[name] for name in sorted(self._info)]

    def trainable(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self.items() if t.requires_grad}

    def set_trainable(self, names: Iterable[str]) -> None:
        """Flag exactly `names` as trainable; everything else is frozen."""
        names = set(names)
        unknown = names - set(self._params)
        if unknown:
            raise ConfigError(f"unknown parameters: {sorted(unknown)[:5]}")
        for name, tensor in self._params.items():
            tensor.requires_grad = name in names

    def count(self, trainable_only: bool = False) -> int:
        return int(sum(t.size for t in self._params.values()
                       if t.requires_grad or not trainable_only))

    def summary(self) -> Dict[str, float]:
        total = self.count()
        trainable = self.count(trainable_only=True)
        return {
            "trainable": trainable,
            "total": total,
            "fraction": trainable / total if total else 0.0,
        }

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_state(self, tensors: Mapping[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self._params) - set(tensors)
        extra = set(tensors) - set(self._params)
        if strict and (missing or extra):
            raise FormatError(f"parameter mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, value in tensors.items():
            if name not in self._params:
                continue
            target = self._params[name]
            if tuple(value.shape) != target.shape:
                raise FormatError(f"{name}: stored shape {value.shape} != {target.shape}")
            target.data[...] = value
        logger.debug("loaded %d parameter tensors", len(tensors))
