"""Named parameter storage, gradient plumbing and optimizers."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
import logging
from typing import (
    Dict,
    Iterator,
    List,
    Mapping,
    MutableMapping,
    Optional,
    Tuple,
)

import numpy as np

from fadpy.errors import ShapeError
from fadpy.tensor import Tensor


logger = logging.getLogger(__name__)


# ==========
# ParamStore
# ==========


class ParamKind(Enum):
    WEIGHT = "weight"
    ARCHITECTURE = "architecture"


class ParamStore:
    """Parameters by stable dotted name, each tagged as a weight or an
    architecture parameter. Iteration is sorted by name.
    """

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self._kinds: Dict[str, ParamKind] = {}

    def add(self, name: str, tensor: Tensor, kind: ParamKind = ParamKind.WEIGHT) -> None:
        if not name:
            raise ValueError("Parameter name can not be empty")
        if name in self._params:
            raise ValueError(f"Parameter '{name}' already registered")
        tensor.requires_grad = True
        self._params[name] = tensor
        self._kinds[name] = kind

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def kind(self, name: str) -> ParamKind:
        return self._kinds[name]

    def names(self, kind: Optional[ParamKind] = None) -> List[str]:
        return [name for name in self if kind is None or self._kinds[name] is kind]

    def items(self, kind: Optional[ParamKind] = None) -> Iterator[Tuple[str, Tensor]]:
        for name in self.names(kind):
            yield name, self._params[name]

    def num_elements(self, kind: Optional[ParamKind] = None) -> int:
        return sum(tensor.size for _, tensor in self.items(kind))

    def zero_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def grads(self, kind: Optional[ParamKind] = None) -> Dict[str, np.ndarray]:
        """Gradient per name; parameters without one get zeros."""
        return {
            name: tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            for name, tensor in self.items(kind)
        }

    def snapshot(self, kind: Optional[ParamKind] = None) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.items(kind)}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for name, value in values.items():
            tensor = self._params[name]
            if value.shape != tensor.shape:
                raise ShapeError(
                    f"Parameter '{name}' has shape {tensor.shape}, got {value.shape}"
                )
            tensor.data = value.astype(tensor.data.dtype, copy=True)


def backward(loss: Tensor, store: ParamStore) -> Dict[str, np.ndarray]:
    """Populate gradients of `loss` for every parameter in `store`.

    Parameters the loss does not reach get all-zero gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"Loss must be a scalar, got shape {loss.shape}")
    store.zero_grad()
    loss.backward()
    for _, tensor in store.items():
        if tensor.grad is None:
            tensor.grad = np.zeros_like(tensor.data)
    return store.grads()


def global_grad_norm(store: ParamStore, kind: Optional[ParamKind] = None) -> float:
    total = 0.0
    for grad in store.grads(kind).values():
        total += float(np.sum(np.square(grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_grad_norm(
        store: ParamStore,
        max_norm: float,
        kind: Optional[ParamKind] = None,
) -> float:
    """Scale gradients so their global L2 norm is at most `max_norm`.

    Returns the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive ({max_norm})")
    norm = global_grad_norm(store, kind)
    if norm > max_norm:
        factor = max_norm / norm
        for _, tensor in store.items(kind):
            if tensor.grad is not None:
                tensor.grad = (tensor.grad * factor).astype(tensor.data.dtype)
    return norm


# ==========
# Optimizers
# ==========


def _check_lr(lr: float) -> None:
    if lr < 0:
        raise ValueError(f"Learning rate can not be negative ({lr})")


def sgd_step(
        store: ParamStore,
        kind: ParamKind,
        lr: float,
        *,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
        buffers: Optional[MutableMapping[str, np.ndarray]] = None,
) -> None:
    """In-place SGD update of the parameters of one `kind`.

    v <- momentum * v + (g + wd * w);  w <- w - lr * v
    """
    _check_lr(lr)
    if buffers is None:
        buffers = {}
    for name, tensor in store.items(kind):
        if tensor.grad is None:
            continue
        step = tensor.grad + weight_decay * tensor.data if weight_decay else tensor.grad
        if momentum:
            velocity = buffers.get(name)
            velocity = step if velocity is None else momentum * velocity + step
            buffers[name] = velocity
            step = velocity
        tensor.data = (tensor.data - lr * step).astype(tensor.data.dtype)


@dataclass
class AdamState:
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
        store: ParamStore,
        kind: ParamKind,
        lr: float,
        state: AdamState,
        *,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
) -> None:
    """In-place bias-corrected Adam update of the parameters of one `kind`."""
    _check_lr(lr)
    beta1, beta2 = betas
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ValueError(f"Adam betas must be in [0, 1) ({betas})")
    state.step += 1
    correction1 = 1 - beta1 ** state.step
    correction2 = 1 - beta2 ** state.step
    for name, tensor in store.items(kind):
        if tensor.grad is None:
            continue
        grad = tensor.grad + weight_decay * tensor.data if weight_decay else tensor.grad
        m = beta1 * state.first.get(name, 0.0) + (1 - beta1) * grad
        v = beta2 * state.second.get(name, 0.0) + (1 - beta2) * grad * grad
        state.first[name], state.second[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        tensor.data = (tensor.data - update).astype(tensor.data.dtype)


class SGD:

    def __init__(
            self,
            store: ParamStore,
            kind: ParamKind,
            lr: float,
            momentum: float = 0.0,
            weight_decay: float = 0.0,
    ) -> None:
        _check_lr(lr)
        self.store = store
        self.kind = kind
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._buffers: Dict[str, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(
            self.store, self.kind, self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            buffers=self._buffers,
        )


class Adam:

    def __init__(
            self,
            store: ParamStore,
            kind: ParamKind,
            lr: float,
            betas: Tuple[float, float] = (0.9, 0.999),
            weight_decay: float = 0.0,
    ) -> None:
        _check_lr(lr)
        self.store = store
        self.kind = kind
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.state = AdamState()

    def step(self) -> None:
        adam_step(
            self.store, self.kind, self.lr, self.state,
            betas=self.betas,
            weight_decay=self.weight_decay,
        )


class StepLR:
    """Divides the optimizer's initial learning rate by `factor` at `decay_step`."""

    def __init__(self, optimizer, decay_step: int, factor: float = 10.0) -> None:
        if decay_step < 1:
            raise ValueError(f"decay_step must be positive ({decay_step})")
        self.optimizer = optimizer
        self.initial_lr = optimizer.lr
        self.decay_step = decay_step
        self.factor = factor

    def lr_at(self, iteration: int) -> float:
        if iteration >= self.decay_step:
            return self.initial_lr / self.factor
        return self.initial_lr

    def update(self, iteration: int) -> None:
        lr = self.lr_at(iteration)
        if lr != self.optimizer.lr:
            logger.info("learning rate %.3g -> %.3g at iteration %d",
                        self.optimizer.lr, lr, iteration)
        self.optimizer.lr = lr
