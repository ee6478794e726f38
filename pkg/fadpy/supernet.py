"""Searchable module: cells of relaxed edges, two groups with a shortcut, heads.

An edge maps x_i (c channels) through an entry 1x1 conv to c' channels, mixes
the candidate outputs of a transformation block with softmax(alpha) weights
and maps the mixture back to c channels with an exit 1x1 conv. A cell sums
the edges entering each intermediate node and reduces the concatenated nodes
back to c channels.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import (
    Dict,
    Final,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

from fadpy.errors import ShapeError
from fadpy.nn import Conv, ConvUnit, Module
from fadpy.params import ParamKind
from fadpy.search_space import (
    apply_cell_op,
    CellOp,
    Operation,
    REDUCTION_CELL_CANDIDATES,
    NORMAL_CELL_CANDIDATES,
    SharedBlock,
    space_candidates,
    SPACES,
    TransformationId,
    UnsharedBlock,
)
from fadpy.tensor import (
    add,
    concat,
    softmax,
    subsample,
    Tensor,
    weighted_sum,
)


logger = logging.getLogger(__name__)


# Constants
TASKS: Final[Tuple[str, ...]] = ("detect", "classify")
MACROS: Final[Tuple[str, ...]] = ("sequential", "reversed", "parallel")
NUM_GROUPS: Final[int] = 2
CLASS_PRIOR: Final[float] = 0.01


# =============
# Configuration
# =============


@dataclass(frozen=True)
class SupernetConfig:
    M: int = 1
    c: int = 32
    c_prime: int = 16
    decouple: bool = True
    sharing: bool = True
    space: str = "full"
    macro: str = "sequential"
    shortcut: bool = True
    task: str = "detect"
    num_classes: int = 3
    in_channels: int = 1
    num_nodes: int = 3

    def __post_init__(self) -> None:
        for name in ("M", "c", "c_prime", "num_classes", "in_channels", "num_nodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"'{name}' must be at least 1 ({getattr(self, name)})")
        if self.space not in SPACES:
            raise ValueError(f"Unknown search space '{self.space}'")
        if self.macro not in MACROS:
            raise ValueError(f"Unknown macro structure '{self.macro}'")
        if self.task not in TASKS:
            raise ValueError(f"Unknown task '{self.task}'")


def group_candidates(config: SupernetConfig) -> Tuple[Tuple[Operation, ...], ...]:
    """Candidate list of each alpha group: both detection groups use the
    configured space; classification has normal and reduction cells.
    """
    if config.task == "classify":
        return NORMAL_CELL_CANDIDATES, REDUCTION_CELL_CANDIDATES
    return (space_candidates(config.space),) * NUM_GROUPS


# ========
# Topology
# ========


@dataclass(frozen=True)
class CellTopology:
    """One input node (index 0) followed by `num_nodes` intermediate nodes.

    Node j reads from every node with a lower index, so it has j incoming
    edges. Edges are numbered node by node: (0,1), (0,2), (1,2), (0,3), ...
    """

    num_nodes: int = 3

    @property
    def edges(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(
            (pred, node)
            for node in range(1, self.num_nodes + 1)
            for pred in range(node)
        )

    @property
    def num_edges(self) -> int:
        return self.num_nodes * (self.num_nodes + 1) // 2

    def edge_index(self, pred: int, node: int) -> int:
        if not 0 <= pred < node <= self.num_nodes:
            raise ValueError(f"No edge ({pred}, {node}) in a {self.num_nodes}-node cell")
        return node * (node - 1) // 2 + pred

    def predecessors(self, node: int) -> range:
        return range(node)


# ==========
# AlphaTable
# ==========


class AlphaTable(Module):
    """Architecture logits: one vector per (group, edge), named `g{group}.e{edge}`."""

    def __init__(
            self,
            candidates: Sequence[Sequence[Operation]],
            topology: CellTopology,
    ) -> None:
        super().__init__()
        self.candidates: Tuple[Tuple[Operation, ...], ...] = tuple(map(tuple, candidates))
        self.topology = topology
        self._rows: Dict[Tuple[int, int], Tensor] = {}
        for group, ops in enumerate(self.candidates):
            for edge in range(topology.num_edges):
                self._rows[group, edge] = self.add_param(
                    f"g{group}.e{edge}",
                    np.zeros(len(ops), dtype=np.float32),
                    ParamKind.ARCHITECTURE,
                )

    @property
    def num_groups(self) -> int:
        return len(self.candidates)

    def row(self, group: int, edge: int) -> Tensor:
        return self._rows[group, edge]

    def logits(self, group: int) -> np.ndarray:
        """(num_edges, num_candidates) copy of one group's logits."""
        return np.stack([
            self._rows[group, edge].data for edge in range(self.topology.num_edges)
        ])

    def set_logits(self, group: int, values: np.ndarray) -> None:
        expected = (self.topology.num_edges, len(self.candidates[group]))
        if values.shape != expected:
            raise ShapeError(f"Group {group} logits must have shape {expected}")
        for edge in range(self.topology.num_edges):
            row = self._rows[group, edge]
            row.data = values[edge].astype(row.data.dtype)

    def weights(self, group: int) -> Dict[int, Tensor]:
        return {
            edge: softmax(self._rows[group, edge])
            for edge in range(self.topology.num_edges)
        }


def init_alphas(config: SupernetConfig) -> AlphaTable:
    return AlphaTable(group_candidates(config), CellTopology(config.num_nodes))


# =====
# Edges
# =====


class Edge(Module):
    """entry 1x1 conv -> candidate operations -> exit 1x1 conv."""

    def __init__(
            self,
            c: int,
            c_prime: int,
            candidates: Sequence[Operation],
            rng: np.random.Generator,
            *,
            decouple: bool = False,
            sharing: bool = True,
            stride: int = 1,
    ) -> None:
        super().__init__()
        self.candidates = tuple(candidates)
        self.stride = stride
        self.entry = self.add_module("entry", Conv(c, c_prime, rng))
        transformations = [t for t in self.candidates if isinstance(t, TransformationId)]
        self.block: Optional[Module] = None
        if any(t is not TransformationId.NONE for t in transformations):
            block = (
                SharedBlock(c_prime, rng, decouple=decouple, candidates=transformations)
                if sharing else
                UnsharedBlock(c_prime, rng, candidates=transformations)
            )
            self.block = self.add_module("block", block)
        self.exit = self.add_module("exit", Conv(c_prime, c, rng))

    def candidate_maps(self, x: Tensor) -> Tuple[List[Optional[Tensor]], Tuple[int, ...]]:
        """Outputs in candidate order (`None` for none) and their common shape."""
        h = self.entry(x)
        block_out = iter(self.block(h) if self.block is not None else ())
        maps: List[Optional[Tensor]] = []
        for op in self.candidates:
            if isinstance(op, CellOp):
                maps.append(apply_cell_op(op, h, self.stride))
                continue
            out = next(block_out) if self.block is not None else None
            if out is not None and self.stride > 1:
                out = subsample(out, self.stride)
            maps.append(out)
        n, _, height, width = h.shape
        size = (height - 1) // self.stride + 1, (width - 1) // self.stride + 1
        return maps, (n, h.shape[1]) + size

    def mix(self, x: Tensor, weights: Optional[Tensor]) -> Tensor:
        maps, shape = self.candidate_maps(x)
        if weights is None:
            if len(maps) != 1 or maps[0] is None:
                raise ShapeError("A fixed edge needs exactly one non-none operation")
            return maps[0]
        if weights.shape != (len(self.candidates),):
            raise ShapeError(
                f"Edge has {len(self.candidates)} candidates,"
                f" got {weights.shape[0]} weights"
            )
        return weighted_sum(weights, maps, shape)

    def forward(self, x: Tensor, weights: Optional[Tensor] = None) -> Tensor:
        return self.exit(self.mix(x, weights))


def edge_forward(edge: Edge, alphas: Tensor, x_i: Tensor) -> Tensor:
    """Relaxed edge: exit( sum_p softmax(alphas)_p * p ) over candidate outputs p."""
    if alphas.data.ndim != 1 or alphas.shape[0] != len(edge.candidates):
        raise ShapeError(
            f"Edge has {len(edge.candidates)} candidates,"
            f" got alphas of shape {alphas.shape}"
        )
    return edge(x_i, softmax(alphas))


# =====
# Cells
# =====


EdgeOps = Mapping[int, Sequence[Operation]]


class Cell(Module):

    def __init__(
            self,
            c: int,
            c_prime: int,
            edge_ops: EdgeOps,
            rng: np.random.Generator,
            *,
            topology: CellTopology = CellTopology(),
            decouple: bool = False,
            sharing: bool = True,
            reduction: bool = False,
    ) -> None:
        super().__init__()
        self.c = c
        self.topology = topology
        self.reduction = reduction
        self.edges: Dict[int, Edge] = {}
        for index in sorted(edge_ops):
            pred, _ = topology.edges[index]
            edge = Edge(
                c, c_prime, edge_ops[index], rng,
                decouple=decouple,
                sharing=sharing,
                stride=2 if reduction and pred == 0 else 1,
            )
            self.edges[index] = self.add_module(f"e{index}", edge)
        for node in range(1, topology.num_nodes + 1):
            incoming = [topology.edge_index(p, node) for p in topology.predecessors(node)]
            if not any(i in self.edges for i in incoming):
                raise ValueError(f"Node {node} has no incoming edge")
        self.output = self.add_module("output", Conv(topology.num_nodes * c, c, rng))

    def nodes(
            self,
            x: Tensor,
            weights: Optional[Mapping[int, Tensor]] = None,
    ) -> List[Tensor]:
        """Input node followed by every intermediate node."""
        if x.data.ndim != 4 or x.shape[1] != self.c:
            raise ShapeError(f"Cell expects {self.c} input channels, got shape {x.shape}")
        states = [x]
        for node in range(1, self.topology.num_nodes + 1):
            total: Optional[Tensor] = None
            for pred in self.topology.predecessors(node):
                index = self.topology.edge_index(pred, node)
                if index not in self.edges:
                    continue
                w = None if weights is None else weights[index]
                out = self.edges[index](states[pred], w)
                total = out if total is None else add(total, out)
            assert total is not None
            states.append(total)
        return states

    def forward(
            self,
            x: Tensor,
            weights: Optional[Mapping[int, Tensor]] = None,
    ) -> Tensor:
        return self.output(concat(self.nodes(x, weights)[1:], axis=1))


def cell_forward(
        cell: Cell,
        x_in: Tensor,
        weights: Optional[Mapping[int, Tensor]] = None,
) -> Tensor:
    return cell(x_in, weights)


class Group(Module):
    """Cells evaluated in sequence; `repeats` reuses a single cell (shared weights)."""

    def __init__(self, cells: Sequence[Cell], repeats: int = 1) -> None:
        super().__init__()
        if repeats > 1 and len(cells) != 1:
            raise ValueError("Only a single cell can be repeated")
        for index, cell in enumerate(cells):
            self.add_module(str(index), cell)
        self.cells: List[Cell] = list(cells) * repeats

    def forward(
            self,
            x: Tensor,
            weights: Optional[Mapping[int, Tensor]] = None,
    ) -> Tensor:
        for cell in self.cells:
            x = cell(x, weights)
        return x


# =================
# Searchable module
# =================


class ModuleOutput(NamedTuple):
    reg_features: Tensor
    cls_features: Tensor
    box: Tensor
    centerness: Tensor
    cls: Tensor


class DetectionStem(Module):
    """Two stride-2 conv units lifting the image to c channels at stride 4."""

    def __init__(self, in_channels: int, c: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.first = self.add_module("0", ConvUnit(in_channels, c, rng, stride=2))
        self.second = self.add_module("1", ConvUnit(c, c, rng, stride=2))

    def forward(self, images: Tensor) -> Tensor:
        return self.second(self.first(images))


STEM_STRIDE: Final[int] = 4


class Heads(Module):

    def __init__(self, c: int, num_classes: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.box = self.add_module("box", Conv(c, 4, rng))
        self.centerness = self.add_module("centerness", Conv(c, 1, rng))
        self.cls = self.add_module("cls", Conv(c, num_classes, rng))
        prior = -np.log((1 - CLASS_PRIOR) / CLASS_PRIOR)
        assert self.cls.bias is not None
        self.cls.bias.data[...] = prior


class SearchableModule(Module):
    """Detector with the searchable two-group module between a stem and heads.

    With an AlphaTable attached every edge mixes its candidates; without one
    every edge holds a single operation.
    """

    def __init__(
            self,
            config: SupernetConfig,
            groups: Sequence[Group],
            alphas: Optional[AlphaTable],
            rng: np.random.Generator,
    ) -> None:
        super().__init__()
        if len(groups) != NUM_GROUPS:
            raise ValueError(f"Module needs {NUM_GROUPS} groups, got {len(groups)}")
        self.config = config
        self.stem = self.add_module(
            "stem", DetectionStem(config.in_channels, config.c, rng)
        )
        self.groups = [
            self.add_module(f"group{g}", group) for g, group in enumerate(groups)
        ]
        self.heads = self.add_module("heads", Heads(config.c, config.num_classes, rng))
        self.alphas = alphas
        if alphas is not None:
            self.add_module("alphas", alphas)

    def group_weights(self, group: int) -> Optional[Dict[int, Tensor]]:
        return None if self.alphas is None else self.alphas.weights(group)

    def num_module_parameters(self) -> int:
        return sum(group.num_parameters() for group in self.groups)

    def forward(self, images: Tensor) -> ModuleOutput:
        return module_forward(self, self.stem(images))


def module_forward(
        net: SearchableModule,
        x: Tensor,
        *,
        shortcut: Optional[bool] = None,
) -> ModuleOutput:
    config = net.config
    if shortcut is None:
        shortcut = config.shortcut
    if x.data.ndim != 4 or x.shape[1] != config.c:
        raise ShapeError(f"Module expects {config.c} channels, got shape {x.shape}")
    first, second = net.groups
    g1 = first(x, net.group_weights(0))
    if config.macro == "parallel":
        second_input = x
    else:
        second_input = add(g1, x) if shortcut else g1
    g2 = second(second_input, net.group_weights(1))
    reg, cls = (g2, g1) if config.macro == "reversed" else (g1, g2)
    heads = net.heads
    return ModuleOutput(
        reg_features=reg,
        cls_features=cls,
        box=heads.box(reg),
        centerness=heads.centerness(reg),
        cls=heads.cls(cls),
    )


def build_supernet(
        config: SupernetConfig,
        rng: np.random.Generator,
) -> SearchableModule:
    """Supernet with one aliased cell per group repeated M times."""
    if config.task != "detect":
        raise ValueError("build_supernet() builds detection supernets only")
    alphas = init_alphas(config)
    topology = alphas.topology
    groups = []
    for group, candidates in enumerate(alphas.candidates):
        edge_ops = {index: candidates for index in range(topology.num_edges)}
        cell = Cell(
            config.c, config.c_prime, edge_ops, rng,
            topology=topology,
            decouple=config.decouple,
            sharing=config.sharing,
        )
        groups.append(Group([cell], repeats=config.M))
    net = SearchableModule(config, groups, alphas, rng)
    logger.debug(
        "supernet: %d weight parameters, %d architecture parameters",
        net.num_parameters(ParamKind.WEIGHT),
        net.num_parameters(ParamKind.ARCHITECTURE),
    )
    return net


def baseline_head_parameters(c: int, layers: int = 8) -> int:
    """Parameters of `layers` plain 3x3 c->c convs with bias."""
    return layers * (c * c * 9 + c)
