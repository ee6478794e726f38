"""Discrete architectures: derivation from alphas, text format, sampling, counting."""
from __future__ import annotations

from dataclasses import dataclass
import itertools
import json
import logging
from math import comb, prod
from typing import (
    Any,
    Dict,
    Final,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

from fadpy.errors import GenotypeError, GenotypeParseError
from fadpy.search_space import is_none, Operation, parse_operation
from fadpy.supernet import AlphaTable, CellTopology
from fadpy.tensor import softmax_array
from fadpy.utils import canonical_json


logger = logging.getLogger(__name__)


# Constants
GENOTYPE_VERSION: Final[int] = 1
INPUTS_PER_NODE: Final[int] = 2
REPORTED_PATH_COUNT: Final[float] = 2.3e13


# ========
# Genotype
# ========


class EdgeChoice(NamedTuple):
    pred: int
    op: Operation


NodeGene = Tuple[EdgeChoice, ...]
GroupGene = Tuple[NodeGene, ...]


@dataclass(frozen=True)
class Genotype:
    """Per group, per intermediate node (1-based: `groups[g][j - 1]`), the
    retained (predecessor, operation) pairs sorted by predecessor.
    """

    groups: Tuple[GroupGene, ...]

    def __post_init__(self) -> None:
        validate_genotype(self)

    @property
    def num_nodes(self) -> int:
        return len(self.groups[0])

    def edge_ops(self, group: int, topology: CellTopology) -> Dict[int, Tuple[Operation]]:
        """Edge index -> the single operation it realizes, for retained edges."""
        return {
            topology.edge_index(choice.pred, node): (choice.op,)
            for node, gene in enumerate(self.groups[group], start=1)
            for choice in gene
        }

    def operations(self) -> Iterator[Operation]:
        for group in self.groups:
            for gene in group:
                for choice in gene:
                    yield choice.op

    def __str__(self) -> str:
        return " | ".join(
            "; ".join(
                ",".join(f"{c.pred}:{c.op.value}" for c in gene) for gene in group
            )
            for group in self.groups
        )


def inputs_for(node: int) -> int:
    return min(INPUTS_PER_NODE, node)


def validate_genotype(genotype: Genotype) -> None:
    if not genotype.groups:
        raise GenotypeError("Genotype has no groups")
    num_nodes = len(genotype.groups[0])
    if num_nodes < 1:
        raise GenotypeError("Genotype groups have no nodes")
    for g, group in enumerate(genotype.groups):
        if len(group) != num_nodes:
            raise GenotypeError(f"Group {g} has {len(group)} nodes, expected {num_nodes}")
        for node, gene in enumerate(group, start=1):
            where = f"group {g}, node {node}"
            if len(gene) != inputs_for(node):
                raise GenotypeError(
                    f"{where}: {len(gene)} inputs, expected {inputs_for(node)}"
                )
            preds = [choice.pred for choice in gene]
            if preds != sorted(set(preds)):
                raise GenotypeError(f"{where}: predecessors must be distinct and sorted")
            for choice in gene:
                if not 0 <= choice.pred < node:
                    raise GenotypeError(
                        f"{where}: predecessor {choice.pred} out of range"
                    )
                if is_none(choice.op):
                    raise GenotypeError(f"{where}: 'none' can not be retained")


def is_genotype_valid(genotype: Genotype) -> bool:
    try:
        validate_genotype(genotype)
    except GenotypeError:
        return False
    else:
        return True


# ==========
# Derivation
# ==========


def derive_group(
        logits: np.ndarray,
        candidates: Sequence[Operation],
        topology: CellTopology,
) -> GroupGene:
    """Discrete cell from one group's (num_edges, num_candidates) logits.

    Each edge keeps its strongest non-none candidate; each node keeps the
    edges whose strongest non-none softmax weight is largest (ties go to the
    lower predecessor, and between candidates to the canonical order).
    """
    weights = softmax_array(np.asarray(logits, dtype=np.float64), axis=-1)
    usable = [k for k, op in enumerate(candidates) if not is_none(op)]
    if not usable:
        raise GenotypeError("Every candidate of the group is 'none'")
    best = np.asarray(usable)[np.argmax(weights[:, usable], axis=1)]
    score = weights[np.arange(len(weights)), best]

    nodes = []
    for node in range(1, topology.num_nodes + 1):
        preds = topology.predecessors(node)
        ranked = sorted(preds, key=lambda p: (-score[topology.edge_index(p, node)], p))
        kept = sorted(ranked[:inputs_for(node)])
        nodes.append(tuple(
            EdgeChoice(p, candidates[best[topology.edge_index(p, node)]]) for p in kept
        ))
    return tuple(nodes)


def derive_from_logits(
        logits: Sequence[np.ndarray],
        candidates: Sequence[Sequence[Operation]],
        topology: CellTopology,
) -> Genotype:
    return Genotype(tuple(
        derive_group(group_logits, group_candidates, topology)
        for group_logits, group_candidates in zip(logits, candidates)
    ))


def derive_genotype(alphas: AlphaTable) -> Genotype:
    """Pure function of the alpha values. Candidates already name the actual
    transformation, so a tapped stem representation is reported as the
    variant it realizes.
    """
    return derive_from_logits(
        [alphas.logits(g) for g in range(alphas.num_groups)],
        alphas.candidates,
        alphas.topology,
    )


def genotype_logits(
        genotype: Genotype,
        candidates: Sequence[Sequence[Operation]],
        topology: CellTopology,
        strength: float = 5.0,
) -> List[np.ndarray]:
    """Logits that derive back to `genotype`: retained edges favour their
    operation, every other entry is zero.
    """
    tables = []
    for group, ops in zip(genotype.groups, candidates):
        table = np.zeros((topology.num_edges, len(ops)))
        for node, gene in enumerate(group, start=1):
            for choice in gene:
                edge = topology.edge_index(choice.pred, node)
                table[edge, ops.index(choice.op)] = strength
        tables.append(table)
    return tables


# =============
# Serialization
# =============


def genotype_to_dict(genotype: Genotype) -> Dict[str, Any]:
    return {
        "version": GENOTYPE_VERSION,
        "groups": [
            {"nodes": [
                {"inputs": [{"from": c.pred, "trans": c.op.value} for c in gene]}
                for gene in group
            ]}
            for group in genotype.groups
        ],
    }


def serialize_genotype(genotype: Genotype) -> str:
    return canonical_json(genotype_to_dict(genotype))


def _expect(value: Any, kind: type, field: str) -> Any:
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise GenotypeParseError(f"expected {kind.__name__}, got {value!r}", field=field)
    return value


def _line_of(text: str, needle: str) -> Optional[int]:
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


def parse_genotype(
        text: str,
        candidates: Optional[Sequence[Sequence[Operation]]] = None,
) -> Genotype:
    """Parse genotype JSON; with `candidates` (one list per group) every
    transformation must also belong to its group's candidate list.
    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as err:
        raise GenotypeParseError(err.msg, line=err.lineno) from err
    _expect(document, dict, "document")
    if "version" not in document:
        raise GenotypeParseError("missing version", field="version")
    version = _expect(document["version"], int, "version")
    if version != GENOTYPE_VERSION:
        raise GenotypeParseError(
            f"unsupported genotype version {version} (supported: {GENOTYPE_VERSION})",
            field="version", line=_line_of(text, '"version"'),
        )
    unknown = set(document) - {"version", "groups"}
    if unknown:
        raise GenotypeParseError(f"unknown keys {sorted(unknown)}", field="document")

    group_list = _expect(document.get("groups"), list, "groups")
    if candidates is not None and len(group_list) != len(candidates):
        raise GenotypeParseError(
            f"expected {len(candidates)} groups, got {len(group_list)}", field="groups"
        )
    groups = []
    for g, group in enumerate(group_list):
        nodes = []
        node_list = _expect(_expect(group, dict, f"groups[{g}]").get("nodes"),
                            list, f"groups[{g}].nodes")
        for j, node in enumerate(node_list):
            path = f"groups[{g}].nodes[{j}]"
            node = _expect(node, dict, path)
            inputs = _expect(node.get("inputs"), list, f"{path}.inputs")
            gene = []
            for i, entry in enumerate(inputs):
                field = f"{path}.inputs[{i}]"
                _expect(entry, dict, field)
                pred = _expect(entry.get("from"), int, f"{field}.from")
                name = _expect(entry.get("trans"), str, f"{field}.trans")
                if not 0 <= pred <= j:
                    raise GenotypeParseError(
                        f"predecessor {pred} out of range for node {j + 1}",
                        field=f"{field}.from",
                    )
                try:
                    op = parse_operation(name)
                except ValueError:
                    raise GenotypeParseError(
                        f"unknown transformation '{name}'",
                        field=f"{field}.trans", line=_line_of(text, f'"{name}"'),
                    ) from None
                if candidates is not None and op not in candidates[g]:
                    raise GenotypeParseError(
                        f"unknown transformation '{name}' for group {g}",
                        field=f"{field}.trans", line=_line_of(text, f'"{name}"'),
                    )
                gene.append(EdgeChoice(pred, op))
            nodes.append(tuple(gene))
        groups.append(tuple(nodes))
    try:
        return Genotype(tuple(groups))
    except GenotypeError as err:
        raise GenotypeParseError(str(err), field="groups") from err


# ========
# Sampling
# ========


def random_genotype(
        rng: np.random.Generator,
        candidates: Sequence[Sequence[Operation]],
        topology: CellTopology,
) -> Genotype:
    """Uniform edges per node (without replacement) and a uniform non-none
    operation per retained edge.
    """
    groups = []
    for ops in candidates:
        usable = [op for op in ops if not is_none(op)]
        nodes = []
        for node in range(1, topology.num_nodes + 1):
            picked = rng.choice(node, size=inputs_for(node), replace=False)
            preds = sorted(int(p) for p in picked)
            nodes.append(tuple(
                EdgeChoice(p, usable[int(rng.integers(len(usable)))]) for p in preds
            ))
        groups.append(tuple(nodes))
    return Genotype(tuple(groups))


# ========
# Counting
# ========


def count_discrete_paths(topology: CellTopology, groups: int, num_candidates: int) -> int:
    """Number of derivable genotypes; `num_candidates` excludes none.

    Per group: prod over nodes j of C(j, k_j) * K^k_j with k_j = min(2, j).
    """
    per_group = prod(
        comb(node, inputs_for(node)) * num_candidates ** inputs_for(node)
        for node in range(1, topology.num_nodes + 1)
    )
    return per_group ** groups


def enumerate_genotypes(
        topology: CellTopology,
        candidates: Sequence[Sequence[Operation]],
) -> Iterator[Genotype]:
    """Every valid genotype over the given groups, in lexicographic order."""

    def node_genes(node: int, ops: Sequence[Operation]) -> List[NodeGene]:
        usable = [op for op in ops if not is_none(op)]
        genes = []
        for preds in itertools.combinations(range(node), inputs_for(node)):
            for chosen in itertools.product(usable, repeat=len(preds)):
                genes.append(tuple(EdgeChoice(p, op) for p, op in zip(preds, chosen)))
        return genes

    per_group = [
        [tuple(nodes) for nodes in itertools.product(*(
            node_genes(node, ops) for node in range(1, topology.num_nodes + 1)
        ))]
        for ops in candidates
    ]
    for groups in itertools.product(*per_group):
        yield Genotype(tuple(groups))


def count_by_enumeration(
        topology: CellTopology,
        candidates: Sequence[Sequence[Operation]],
) -> int:
    """Brute-force count of distinct genotypes that derivation can produce.

    Each enumerated genotype is turned into an alpha table and must derive
    back to itself.
    """
    derived = set()
    for genotype in enumerate_genotypes(topology, candidates):
        back = derive_from_logits(genotype_logits(genotype, candidates, topology),
                                  candidates, topology)
        if back != genotype:
            raise GenotypeError(f"Genotype {genotype} is not derivable")
        derived.add(back)
    return len(derived)
