"""Parameter containers: a tiny ``Module`` base walking tensors by attribute name."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, parameter


class Module:
    """Holds parameter tensors and child modules as plain attributes.

    ``named_parameters`` yields dotted names in attribute-definition order; a
    tensor shared between two owners is reported once, under its first name.
    """

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Tensor, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(
                isinstance(v, Module) for v in value
            ):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "", _seen: set | None = None):
        seen = set() if _seen is None else _seen
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad and id(value) not in seen:
                    seen.add(id(value))
                    yield name, value
            else:
                yield from value.named_parameters(prefix=f"{name}.", _seen=seen)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)), dtype=dtype)


def zeros(shape, dtype) -> Tensor:
    return parameter(np.zeros(shape), dtype=dtype)


def ones(shape, dtype) -> Tensor:
    return parameter(np.ones(shape), dtype=dtype)
