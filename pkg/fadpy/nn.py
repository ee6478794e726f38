"""Module tree with an explicit parameter registry, plus the conv building blocks."""
from __future__ import annotations

from collections import Counter
from contextlib import contextmanager
import copy
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from fadpy.params import ParamKind, ParamStore
from fadpy.tensor import (
    conv2d,
    default_num_groups,
    group_norm,
    relu,
    Tensor,
)


# ======
# Module
# ======


class Module:
    """Base class of everything that owns parameters.

    Parameters and sub-modules are registered explicitly; their dotted paths
    (`cells.0.edges.3.entry.weight`) are the names used in a ParamStore and
    in checkpoints. Registering one module under two names aliases its
    parameters: they are reported once, under the first path.
    """

    def __init__(self) -> None:
        self._params: Dict[str, Tuple[Tensor, ParamKind]] = {}
        self._modules: Dict[str, Module] = {}

    def add_param(
            self,
            name: str,
            data: np.ndarray,
            kind: ParamKind = ParamKind.WEIGHT,
    ) -> Tensor:
        if name in self._params or name in self._modules:
            raise ValueError(f"'{name}' already registered on {type(self).__name__}")
        tensor = Tensor(data, requires_grad=True)
        self._params[name] = (tensor, kind)
        return tensor

    def add_module(self, name: str, module: Module) -> Module:
        if name in self._params or name in self._modules:
            raise ValueError(f"'{name}' already registered on {type(self).__name__}")
        self._modules[name] = module
        return module

    def children(self) -> Iterator[Tuple[str, Module]]:
        yield from self._modules.items()

    def named_parameters(self) -> Iterator[Tuple[str, Tensor, ParamKind]]:
        seen = set()
        for name, tensor, kind in self._walk(""):
            if id(tensor) not in seen:
                seen.add(id(tensor))
                yield name, tensor, kind

    def _walk(self, prefix: str) -> Iterator[Tuple[str, Tensor, ParamKind]]:
        for name, (tensor, kind) in self._params.items():
            yield prefix + name, tensor, kind
        for name, module in self._modules.items():
            yield from module._walk(f"{prefix}{name}.")

    def param_store(self) -> ParamStore:
        store = ParamStore()
        for name, tensor, kind in self.named_parameters():
            store.add(name, tensor, kind)
        return store

    def num_parameters(self, kind: Optional[ParamKind] = ParamKind.WEIGHT) -> int:
        return sum(
            tensor.size for _, tensor, k in self.named_parameters()
            if kind is None or k is kind
        )

    def astype(self, dtype) -> Module:
        """Deep copy with every parameter cast to `dtype`; aliasing is preserved."""
        clone = copy.deepcopy(self)
        for _, tensor, _ in clone.named_parameters():
            tensor.data = tensor.data.astype(dtype)
        return clone

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(
        rng: np.random.Generator,
        shape: Tuple[int, ...],
        fan_in: int,
) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# ==================
# Execution counting
# ==================


_counters: List[Counter] = []


@contextmanager
def count_executions() -> Iterator[Counter]:
    """Count conv-representation and adapter evaluations inside the block."""
    counter: Counter = Counter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _record(key: str) -> None:
    for counter in _counters:
        counter[key] += 1


# ===========
# Conv blocks
# ===========


class Conv(Module):
    """Plain 1x1 (or 3x3) convolution with bias."""

    def __init__(
            self,
            in_channels: int,
            out_channels: int,
            rng: np.random.Generator,
            kernel: int = 1,
            stride: int = 1,
            bias: bool = True,
    ) -> None:
        super().__init__()
        self.stride = stride
        fan_in = in_channels * kernel * kernel
        self.weight = self.add_param(
            "weight", he_normal(rng, (out_channels, in_channels, kernel, kernel), fan_in)
        )
        self.bias: Optional[Tensor] = None
        if bias:
            self.bias = self.add_param("bias", np.zeros(out_channels, dtype=np.float32))

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride)


class ConvUnit(Module):
    """One "conv layer": conv (or depthwise + pointwise), group-norm, ReLU.

    Carries no conv bias; the group-norm shift plays that role.
    """

    def __init__(
            self,
            in_channels: int,
            out_channels: int,
            rng: np.random.Generator,
            *,
            kernel: int = 3,
            dilation: int = 1,
            stride: int = 1,
            separable: bool = False,
    ) -> None:
        super().__init__()
        if dilation > 1 and not separable:
            raise ValueError("Dilated conv units must be depthwise separable")
        self.dilation = dilation
        self.stride = stride
        self.separable = separable
        if separable:
            self.depthwise = self.add_param(
                "depthwise",
                he_normal(rng, (in_channels, 1, kernel, kernel), kernel * kernel),
            )
            self.weight = self.add_param(
                "pointwise",
                he_normal(rng, (out_channels, in_channels, 1, 1), in_channels),
            )
        else:
            self.weight = self.add_param(
                "weight",
                he_normal(rng, (out_channels, in_channels, kernel, kernel),
                          in_channels * kernel * kernel),
            )
        self.num_groups = default_num_groups(out_channels)
        self.gamma = self.add_param("gamma", np.ones(out_channels, dtype=np.float32))
        self.beta = self.add_param("beta", np.zeros(out_channels, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        _record("representations")
        if self.separable:
            channels = x.shape[1]
            h = conv2d(x, self.depthwise, stride=self.stride,
                       dilation=self.dilation, groups=channels)
            h = conv2d(h, self.weight)
        else:
            h = conv2d(x, self.weight, stride=self.stride, dilation=self.dilation)
        return relu(group_norm(h, self.num_groups, self.gamma, self.beta))


class Adapter(Module):
    """Decoupling function: 1x1 conv without bias followed by ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.weight = self.add_param(
            "weight", he_normal(rng, (channels, channels, 1, 1), channels)
        )

    def forward(self, x: Tensor) -> Tensor:
        _record("adapters")
        return relu(conv2d(x, self.weight))
