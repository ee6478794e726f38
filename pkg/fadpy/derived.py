"""Discrete networks realizing a genotype."""
from __future__ import annotations

import logging

import numpy as np

from fadpy.errors import GenotypeError
from fadpy.genotype import Genotype
from fadpy.supernet import (
    Cell,
    CellTopology,
    group_candidates,
    Group,
    NUM_GROUPS,
    SearchableModule,
    SupernetConfig,
)


logger = logging.getLogger(__name__)


def check_compatible(genotype: Genotype, config: SupernetConfig) -> None:
    if len(genotype.groups) != NUM_GROUPS:
        raise GenotypeError(
            f"Genotype has {len(genotype.groups)} groups, the module needs {NUM_GROUPS}"
        )
    if genotype.num_nodes != config.num_nodes:
        raise GenotypeError(
            f"Genotype has {genotype.num_nodes} nodes per cell,"
            f" config has {config.num_nodes}"
        )
    for g, (group, allowed) in enumerate(zip(genotype.groups, group_candidates(config))):
        for gene in group:
            for choice in gene:
                if choice.op not in allowed:
                    raise GenotypeError(
                        f"'{choice.op.value}' (group {g}) is not in the"
                        f" '{config.space}' space"
                    )


def build_derived_network(
        genotype: Genotype,
        config: SupernetConfig,
        rng: np.random.Generator,
) -> SearchableModule:
    """Same stem, macro structure and heads as the supernet; every one of the
    M cells of a group gets fresh weights and every retained edge realizes
    exactly its chosen transformation.
    """
    if config.task != "detect":
        raise ValueError("Derived networks are built for the detection task")
    check_compatible(genotype, config)
    topology = CellTopology(config.num_nodes)
    groups = []
    for g in range(NUM_GROUPS):
        edge_ops = genotype.edge_ops(g, topology)
        cells = [
            Cell(config.c, config.c_prime, edge_ops, rng, topology=topology)
            for _ in range(config.M)
        ]
        groups.append(Group(cells))
    net = SearchableModule(config, groups, None, rng)
    logger.debug("derived network: %d parameters", net.num_parameters())
    return net
