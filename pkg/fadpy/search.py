"""First-order bilevel search over weights and alphas."""
from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    Generic,
    IO,
    Iterator,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Protocol,
    Tuple,
    TypeVar,
)

import numpy as np

from fadpy.errors import NumericalError
from fadpy.genotype import derive_genotype, Genotype
from fadpy.params import (
    Adam,
    backward,
    clip_grad_norm,
    ParamKind,
    ParamStore,
    SGD,
    StepLR,
)
from fadpy.supernet import AlphaTable
from fadpy.tensor import softmax_array, Tensor
from fadpy.utils import SequenceView


logger = logging.getLogger(__name__)


# Type variables
Batch = TypeVar("Batch")


LossFn = Callable[[Any, Any], Tensor]


class Searchable(Protocol):
    """Any network carrying an AlphaTable: detection or classification."""

    alphas: Optional[AlphaTable]

    def param_store(self) -> ParamStore:
        ...


# ========
# Schedule
# ========


@dataclass(frozen=True)
class ScheduleConfig:
    total_iters: int = 3000
    batch_size: int = 4
    w_lr: float = 0.01
    w_momentum: float = 0.9
    w_weight_decay: float = 1e-5
    alpha_lr: float = 3e-3
    alpha_betas: Tuple[float, float] = (0.5, 0.999)
    alpha_weight_decay: float = 1e-3
    decay_step: int = 2400
    lr_factor: float = 10.0
    grad_clip: float = 20.0
    derive_every: int = 600
    val_fraction: float = 0.5
    log_every: int = 50
    train_iters: int = 1000
    train_weight_decay: float = 1e-4

    def __post_init__(self) -> None:
        for name in ("total_iters", "batch_size", "derive_every", "decay_step",
                     "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"'{name}' must be at least 1 ({getattr(self, name)})")
        if self.total_iters % self.derive_every:
            raise ValueError(
                f"derive_every ({self.derive_every}) must divide"
                f" total_iters ({self.total_iters})"
            )
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be positive ({self.grad_clip})")
        if self.w_lr < 0 or self.alpha_lr < 0:
            raise ValueError("Learning rates can not be negative")
        if self.lr_factor <= 0:
            raise ValueError(f"lr_factor must be positive ({self.lr_factor})")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must be in (0, 1) ({self.val_fraction})")
        if len(self.alpha_betas) != 2:
            raise ValueError("alpha_betas needs two values")
        if self.train_iters < 0:
            raise ValueError(f"train_iters can not be negative ({self.train_iters})")


# ===========
# Metrics log
# ===========


class MetricsLog:
    """JSON-lines metrics: a header line followed by one record per line.

    Records are kept in memory as well; `path=None` keeps them only there.
    """

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = path
        self.header: Dict[str, Any] = {}
        self.records: List[Dict[str, Any]] = []
        self._file: Optional[IO[str]] = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(path, "w", encoding="utf-8")

    def write_header(self, header: Mapping[str, Any]) -> None:
        self.header = dict(header)
        self._emit({"header": self.header})

    def write(self, record: Mapping[str, Any]) -> None:
        self.records.append(dict(record))
        self._emit(record)

    def _emit(self, obj: Mapping[str, Any]) -> None:
        if self._file is not None:
            self._file.write(json.dumps(obj, allow_nan=False) + "\n")
            self._file.flush()

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self) -> MetricsLog:
        return self

    def __exit__(self, *exc) -> bool:
        self.close()
        return False


def read_metrics(path: Path) -> Tuple[Dict[str, Any], List[Dict[str, Any]]]:
    header: Dict[str, Any] = {}
    records = []
    with open(path, encoding="utf-8") as file:
        for line in file:
            obj = json.loads(line)
            if "header" in obj:
                header = obj["header"]
            else:
                records.append(obj)
    return header, records


def alpha_entropy(alphas: AlphaTable) -> List[List[float]]:
    """Softmax entropy of every edge, per group."""
    entropies = []
    for group in range(alphas.num_groups):
        weights = softmax_array(alphas.logits(group).astype(np.float64), axis=-1)
        entropies.append([
            round(float(-np.sum(w * np.log(w))), 6) for w in weights
        ])
    return entropies


# =====
# State
# =====


@dataclass
class SearchState:
    iteration: int = 0
    genotypes: List[Genotype] = field(default_factory=list)
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    grad_norm: float = float("nan")
    rng_state: Optional[Dict[str, Any]] = None

    @property
    def history(self) -> SequenceView[Genotype]:
        return SequenceView(self.genotypes)


class SearchEngine(Generic[Batch]):
    """Supernet with its optimizers: SGD with momentum for the weights and
    Adam for the alphas, each restricted to its own partition.
    """

    def __init__(
            self,
            net: Searchable,
            schedule: ScheduleConfig,
            loss_fn: LossFn,
            metrics: Optional[MetricsLog] = None,
    ) -> None:
        if net.alphas is None:
            raise ValueError("Search needs a supernet with alphas")
        self.net = net
        self.alphas: AlphaTable = net.alphas
        self.schedule = schedule
        self.loss_fn = loss_fn
        self.metrics = metrics if metrics is not None else MetricsLog()
        self.store = net.param_store()
        self.w_optimizer = SGD(
            self.store, ParamKind.WEIGHT, schedule.w_lr,
            momentum=schedule.w_momentum,
            weight_decay=schedule.w_weight_decay,
        )
        self.alpha_optimizer = Adam(
            self.store, ParamKind.ARCHITECTURE, schedule.alpha_lr,
            betas=schedule.alpha_betas,
            weight_decay=schedule.alpha_weight_decay,
        )
        self.lr_schedule = StepLR(
            self.w_optimizer, schedule.decay_step, schedule.lr_factor
        )

    def evaluate_loss(self, batch: Batch, step: int, name: str) -> Tensor:
        loss = self.loss_fn(self.net, batch)
        if not np.isfinite(loss.data).all():
            raise NumericalError(f"{name} loss is not finite at step {step}",
                                 node=name, step=step)
        return loss

    def backward(self, loss: Tensor, step: int) -> None:
        try:
            backward(loss, self.store)
        except NumericalError as err:
            raise NumericalError(
                f"{err} (step {step})", node=err.node, step=step
            ) from err


def search_step(
        state: SearchState,
        engine: SearchEngine,
        train_batch: Any,
        val_batch: Any,
) -> SearchState:
    """One alpha update on the validation batch, then one weight update on
    the training batch; derives a genotype every `derive_every` iterations.
    """
    schedule = engine.schedule
    step = state.iteration

    val_loss = engine.evaluate_loss(val_batch, step, "validation")
    engine.backward(val_loss, step)
    engine.alpha_optimizer.step()

    train_loss = engine.evaluate_loss(train_batch, step, "training")
    engine.backward(train_loss, step)
    grad_norm = clip_grad_norm(engine.store, schedule.grad_clip, ParamKind.WEIGHT)
    engine.lr_schedule.update(step)
    engine.w_optimizer.step()

    state.iteration += 1
    state.train_loss = float(train_loss.item())
    state.val_loss = float(val_loss.item())
    state.grad_norm = grad_norm

    engine.metrics.write({
        "iter": state.iteration,
        "L_train": state.train_loss,
        "L_val": state.val_loss,
        "alpha_entropy_per_edge": alpha_entropy(engine.alphas),
        "grad_norm_pre_clip": grad_norm,
    })
    if state.iteration % schedule.log_every == 0:
        logger.info(
            "iter %d: L_train=%.4f L_val=%.4f grad_norm=%.3f",
            state.iteration, state.train_loss, state.val_loss, grad_norm,
        )
    if state.iteration % schedule.derive_every == 0:
        genotype = derive_genotype(engine.alphas)
        state.genotypes.append(genotype)
        logger.info("iter %d: derived %s", state.iteration, genotype)
    return state


def should_terminate(
        history: SequenceView[Genotype],
        iteration: Optional[int] = None,
        total_iters: Optional[int] = None,
) -> bool:
    """True once the last two derived genotypes agree or the budget is spent."""
    if not history:
        raise ValueError("No genotype has been derived yet")
    if iteration is not None and total_iters is not None and iteration >= total_iters:
        return True
    return len(history) >= 2 and history[-1] == history[-2]


class SearchResult(NamedTuple):
    genotype: Genotype
    state: SearchState
    stable: bool


def run_search(
        engine: SearchEngine,
        train_batches: Iterator[Any],
        val_batches: Iterator[Any],
        *,
        early_stop: bool = True,
        state: Optional[SearchState] = None,
        rng: Optional[np.random.Generator] = None,
) -> SearchResult:
    """Alternate search steps until the derived genotype is stable or the
    iteration budget is spent.

    `rng` is the generator behind both batch streams; its state is recorded
    after every step. When resuming from `state`, the streams are expected
    fresh from the seed and are replayed up to `state.iteration` first.
    """
    schedule = engine.schedule
    if state is None:
        state = SearchState()
    elif state.iteration:
        for _ in range(state.iteration):
            next(train_batches)
            next(val_batches)
        if (rng is not None and state.rng_state is not None
                and rng.bit_generator.state != state.rng_state):
            raise ValueError(
                "Batch streams do not match the saved state"
                f" at iteration {state.iteration}"
            )
    stable = False
    while state.iteration < schedule.total_iters:
        search_step(state, engine, next(train_batches), next(val_batches))
        if rng is not None:
            state.rng_state = rng.bit_generator.state
        if state.iteration % schedule.derive_every:
            continue
        stable = should_terminate(state.history)
        if stable and early_stop:
            logger.info("derived genotype is stable at iteration %d", state.iteration)
            break
    genotype = state.history[-1] if state.history else derive_genotype(engine.alphas)
    return SearchResult(genotype, state, stable)
