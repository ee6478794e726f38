"""Candidate transformations, receptive-field calculus and transformation blocks.

A transformation block turns an input x' of c' channels into one output per
candidate. The shared block computes the stacked 3x3 stem of each stream once
and taps its intermediate representations; the unshared block gives every
candidate its own independent pipeline of layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import (
    Dict,
    Final,
    FrozenSet,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from fadpy.errors import ShapeError
from fadpy.nn import Adapter, ConvUnit, Module
from fadpy.tensor import pool2d, subsample, Tensor, zeros


# ==========
# Operations
# ==========


class Stream(Enum):
    STANDARD = "std"
    SEPARABLE = "sep"


class TransformationId(Enum):
    """Edge candidates in canonical order: std t1..t6, sep t1..t6, none."""

    STD_T1 = "std_t1"
    STD_T2 = "std_t2"
    STD_T3 = "std_t3"
    STD_T4 = "std_t4"
    STD_T5 = "std_t5"
    STD_T6 = "std_t6"
    SEP_T1 = "sep_t1"
    SEP_T2 = "sep_t2"
    SEP_T3 = "sep_t3"
    SEP_T4 = "sep_t4"
    SEP_T5 = "sep_t5"
    SEP_T6 = "sep_t6"
    NONE = "none"

    @property
    def stream(self) -> Optional[Stream]:
        if self is TransformationId.NONE:
            return None
        return Stream(self.value[:3])

    @property
    def variant(self) -> Optional[int]:
        if self is TransformationId.NONE:
            return None
        return int(self.value[-1])

    @classmethod
    def of(cls, stream: Stream, variant: int) -> TransformationId:
        return cls(f"{stream.value}_t{variant}")


class CellOp(Enum):
    """Parameter-free candidates of the classification cells."""

    SKIP_CONNECT = "skip_connect"
    MAX_POOL = "max_pool_3x3"
    AVG_POOL = "avg_pool_3x3"


Operation = Union[TransformationId, CellOp]


CANDIDATES: Final[Tuple[TransformationId, ...]] = tuple(TransformationId)
VARIANTS: Final[Tuple[int, ...]] = (1, 2, 3, 4, 5, 6)


def parse_operation(name: str) -> Operation:
    for enum in (TransformationId, CellOp):
        try:
            return enum(name)
        except ValueError:
            pass
    raise ValueError(f"Unknown operation '{name}'")


def is_none(op: Operation) -> bool:
    return op is TransformationId.NONE


def apply_cell_op(op: CellOp, x: Tensor, stride: int = 1) -> Tensor:
    if op is CellOp.SKIP_CONNECT:
        return x if stride == 1 else subsample(x, stride)
    if op is CellOp.MAX_POOL:
        return pool2d(x, "max", stride)
    return pool2d(x, "avg", stride)


# ==============
# Block topology
# ==============


INPUT: Final[str] = "x"


@dataclass(frozen=True)
class Branch:
    """Dilated depthwise separable 3x3 applied to an earlier representation."""

    name: str
    source: str
    dilation: int


@dataclass(frozen=True)
class Layer:
    name: str
    source: str
    dilation: int
    is_stem: bool


@dataclass(frozen=True)
class BlockTopology:
    stem: Tuple[str, ...] = ("p1", "p2", "p3")
    branches: Tuple[Branch, ...] = (
        Branch("q4", "p1", 2),
        Branch("q5", "p2", 2),
        Branch("q6", "p1", 3),
    )
    # variant k is the representation taps[k - 1]
    taps: Tuple[str, ...] = ("p1", "p2", "p3", "q4", "q5", "q6")
    layers: Dict[str, Layer] = field(init=False, compare=False, repr=False)

    def __post_init__(self) -> None:
        layers = {}
        for index, name in enumerate(self.stem):
            source = self.stem[index - 1] if index else INPUT
            layers[name] = Layer(name, source, 1, True)
        for branch in self.branches:
            if branch.source not in layers:
                raise ValueError(
                    f"Branch '{branch.name}' reads unknown '{branch.source}'"
                )
            layers[branch.name] = Layer(
                branch.name, branch.source, branch.dilation, False
            )
        if len(self.taps) != len(VARIANTS) or not set(self.taps) <= set(layers):
            raise ValueError("Every variant must tap a representation of the block")
        object.__setattr__(self, "layers", layers)

    def tap(self, variant: int) -> str:
        return self.taps[variant - 1]

    def chain(self, representation: str) -> Tuple[Layer, ...]:
        """Layers from the block input up to `representation`, in order."""
        path: List[Layer] = []
        name = representation
        while name != INPUT:
            layer = self.layers[name]
            path.append(layer)
            name = layer.source
        return tuple(reversed(path))

    def representations_for(self, variants: Sequence[int]) -> Tuple[str, ...]:
        """Representations the given variants need, in topology order."""
        needed = {layer.name for v in variants for layer in self.chain(self.tap(v))}
        return tuple(name for name in self.layers if name in needed)

    @property
    def decoupled_variants(self) -> FrozenSet[int]:
        """Variants whose output is a representation that also feeds other layers."""
        sources = {layer.source for layer in self.layers.values()}
        return frozenset(v for v in VARIANTS if self.tap(v) in sources)

    def unshared_layer_count(self, variants: Sequence[int] = VARIANTS) -> int:
        return sum(len(self.chain(self.tap(v))) for v in variants)


DEFAULT_TOPOLOGY: Final = BlockTopology()


def receptive_field(
        transformation: TransformationId,
        topology: BlockTopology = DEFAULT_TOPOLOGY,
) -> int:
    """RF of a candidate, growing by (k - 1) * dilation per stacked 3x3 layer."""
    if transformation is TransformationId.NONE:
        raise ValueError("'none' has no receptive field")
    assert transformation.variant is not None
    rf = 1
    for layer in topology.chain(topology.tap(transformation.variant)):
        rf += 2 * layer.dilation
    return rf


# =============
# Search spaces
# =============


def _space(
        streams: Sequence[Stream],
        variants: Sequence[int],
) -> Tuple[TransformationId, ...]:
    chosen = {TransformationId.of(s, v) for s in streams for v in variants}
    return tuple(t for t in CANDIDATES if t in chosen) + (TransformationId.NONE,)


SPACES: Final[Mapping[str, Tuple[TransformationId, ...]]] = {
    "full": CANDIDATES,
    "subset1": _space(tuple(Stream), (1, 2)),
    "subset2": _space(tuple(Stream), (1, 2, 3, 4)),
    "std_only": _space((Stream.STANDARD,), VARIANTS),
    "sep_only": _space((Stream.SEPARABLE,), VARIANTS),
}


# classification cells: separable t1..t5 for normal cells, pooling for reduction cells
NORMAL_CELL_CANDIDATES: Final[Tuple[Operation, ...]] = (
    TransformationId.SEP_T1,
    TransformationId.SEP_T2,
    TransformationId.SEP_T3,
    TransformationId.SEP_T4,
    TransformationId.SEP_T5,
    CellOp.SKIP_CONNECT,
    TransformationId.NONE,
)
REDUCTION_CELL_CANDIDATES: Final[Tuple[Operation, ...]] = (
    CellOp.MAX_POOL,
    CellOp.AVG_POOL,
    CellOp.SKIP_CONNECT,
    TransformationId.NONE,
)


def space_candidates(space: str) -> Tuple[TransformationId, ...]:
    try:
        return SPACES[space]
    except KeyError:
        raise ValueError(
            f"Unknown search space '{space}' (expected one of: {', '.join(SPACES)})"
        ) from None


def _validate_candidates(candidates: Sequence[TransformationId]) -> None:
    if not candidates:
        raise ValueError("A transformation block needs at least one candidate")
    if len(set(candidates)) != len(candidates):
        raise ValueError("Duplicate candidates")
    for candidate in candidates:
        if not isinstance(candidate, TransformationId):
            raise ValueError(f"'{candidate}' is not a transformation")


def _check_input(x: Tensor, c_prime: int) -> None:
    if x.data.ndim != 4 or x.shape[1] != c_prime:
        raise ShapeError(
            f"Transformation block expects {c_prime} channels, got shape {x.shape}"
        )


# =====================
# Transformation blocks
# =====================


class _SharedStream(Module):

    def __init__(
            self,
            stream: Stream,
            variants: Sequence[int],
            c_prime: int,
            rng: np.random.Generator,
            decouple: bool,
            topology: BlockTopology,
    ) -> None:
        super().__init__()
        self.topology = topology
        self.variants = tuple(variants)
        self.representations = topology.representations_for(variants)
        self.units: Dict[str, ConvUnit] = {}
        for name in self.representations:
            layer = topology.layers[name]
            unit = ConvUnit(
                c_prime, c_prime, rng,
                dilation=layer.dilation,
                separable=stream is Stream.SEPARABLE or layer.dilation > 1,
            )
            self.units[name] = self.add_module(name, unit)
        self.adapters: Dict[int, Adapter] = {}
        if decouple:
            for variant in sorted(topology.decoupled_variants & set(variants)):
                adapter = Adapter(c_prime, rng)
                self.adapters[variant] = self.add_module(f"h{variant}", adapter)

    def forward(self, x: Tensor) -> Dict[int, Tensor]:
        maps = {INPUT: x}
        for name in self.representations:
            maps[name] = self.units[name](maps[self.topology.layers[name].source])
        outputs = {}
        for variant in self.variants:
            out = maps[self.topology.tap(variant)]
            if variant in self.adapters:
                out = self.adapters[variant](out)
            outputs[variant] = out
        return outputs


class SharedBlock(Module):
    """Representation-sharing block: each stream's stem runs once per forward."""

    def __init__(
            self,
            c_prime: int,
            rng: np.random.Generator,
            *,
            decouple: bool = False,
            candidates: Sequence[TransformationId] = CANDIDATES,
            topology: BlockTopology = DEFAULT_TOPOLOGY,
    ) -> None:
        super().__init__()
        if c_prime < 1:
            raise ValueError(f"c_prime must be positive ({c_prime})")
        _validate_candidates(candidates)
        self.c_prime = c_prime
        self.decouple = decouple
        self.candidates = tuple(candidates)
        self.topology = topology
        self.streams: Dict[Stream, _SharedStream] = {}
        for stream in Stream:
            variants = [t.variant for t in self.candidates if t.stream is stream]
            if variants:
                module = _SharedStream(stream, variants, c_prime, rng, decouple, topology)
                self.streams[stream] = self.add_module(stream.value, module)

    @property
    def num_representations(self) -> int:
        return sum(len(s.representations) for s in self.streams.values())

    @property
    def num_adapters(self) -> int:
        return sum(len(s.adapters) for s in self.streams.values())

    def forward(self, x: Tensor) -> List[Optional[Tensor]]:
        """Candidate outputs in `candidates` order; `None` stands for the zero map."""
        _check_input(x, self.c_prime)
        by_stream = {stream: module(x) for stream, module in self.streams.items()}
        return [
            None if t is TransformationId.NONE else by_stream[t.stream][t.variant]
            for t in self.candidates
        ]


class _Pipeline(Module):

    def __init__(
            self,
            stream: Stream,
            chain: Sequence,
            c_prime: int,
            rng: np.random.Generator,
    ) -> None:
        super().__init__()
        self.units = [
            self.add_module(str(index), ConvUnit(
                c_prime, c_prime, rng,
                dilation=layer.dilation,
                separable=stream is Stream.SEPARABLE or layer.dilation > 1,
            ))
            for index, layer in enumerate(chain)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for unit in self.units:
            x = unit(x)
        return x


class UnsharedBlock(Module):
    """Every candidate owns an independent pipeline of conv layers."""

    def __init__(
            self,
            c_prime: int,
            rng: np.random.Generator,
            *,
            candidates: Sequence[TransformationId] = CANDIDATES,
            topology: BlockTopology = DEFAULT_TOPOLOGY,
    ) -> None:
        super().__init__()
        if c_prime < 1:
            raise ValueError(f"c_prime must be positive ({c_prime})")
        _validate_candidates(candidates)
        self.c_prime = c_prime
        self.decouple = False
        self.candidates = tuple(candidates)
        self.topology = topology
        self.pipelines: Dict[TransformationId, _Pipeline] = {}
        for t in self.candidates:
            if t is TransformationId.NONE:
                continue
            assert t.stream is not None and t.variant is not None
            chain = topology.chain(topology.tap(t.variant))
            pipeline = _Pipeline(t.stream, chain, c_prime, rng)
            self.pipelines[t] = self.add_module(t.value, pipeline)

    @property
    def num_representations(self) -> int:
        return sum(len(p.units) for p in self.pipelines.values())

    def forward(self, x: Tensor) -> List[Optional[Tensor]]:
        _check_input(x, self.c_prime)
        return [
            None if t is TransformationId.NONE else self.pipelines[t](x)
            for t in self.candidates
        ]


Block = Union[SharedBlock, UnsharedBlock]


def build_shared_block(
        c_prime: int,
        decouple: bool,
        rng: Optional[np.random.Generator] = None,
        candidates: Sequence[TransformationId] = CANDIDATES,
) -> SharedBlock:
    if rng is None:
        rng = np.random.default_rng(0)
    return SharedBlock(c_prime, rng, decouple=decouple, candidates=candidates)


def build_unshared_block(
        c_prime: int,
        rng: Optional[np.random.Generator] = None,
        candidates: Sequence[TransformationId] = CANDIDATES,
) -> UnsharedBlock:
    if rng is None:
        rng = np.random.default_rng(0)
    return UnsharedBlock(c_prime, rng, candidates=candidates)


def candidate_outputs(block: Block, x_prime: Tensor) -> List[Tensor]:
    """All candidate outputs of a block with the none entry as an explicit zero map."""
    outputs = block(x_prime)
    shape = x_prime.shape
    return [zeros(shape, x_prime.dtype) if out is None else out for out in outputs]


def count_representations(block: Block) -> int:
    return block.num_representations
