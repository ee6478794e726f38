"""Brute-force checks of the sharing construction and of the gradients."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, replace
import logging
from typing import (
    Callable,
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

from fadpy.errors import ShapeError
from fadpy.genotype import count_by_enumeration, count_discrete_paths
from fadpy.nn import count_executions, Module
from fadpy.params import ParamKind
from fadpy.search_space import (
    Block,
    build_shared_block,
    build_unshared_block,
    count_representations,
    is_none,
    SharedBlock,
    TransformationId,
    UnsharedBlock,
)
from fadpy.supernet import (
    build_supernet,
    CellTopology,
    Edge,
    SearchableModule,
    SupernetConfig,
)
from fadpy import tensor as tensor_ops
from fadpy.tensor import mul, no_grad, sum_all, Tensor
from fadpy.utils import derive_rng


logger = logging.getLogger(__name__)


# Constants
EQUIVALENCE_TOLERANCE: Final[float] = 1e-5
MODULE_EQUIVALENCE_TOLERANCE: Final[float] = 1e-4
GRAD_CHECK_TOLERANCE: Final[float] = 2e-2
GRAD_CHECK_EPS: Final[float] = 1e-3
REL_ERR_FLOOR: Final[float] = 1e-6

# reduced space for checking the closed-form path count by enumeration
ENUMERATION_NODES: Final[int] = 2
ENUMERATION_CANDIDATES: Final[int] = 3


# ============
# Weight tying
# ============


TieMap = Dict[str, str]


def _module_at(root: Module, path: str) -> Module:
    module = root
    for part in path.split("."):
        module = dict(module.children())[part]
    return module


def tie_weights(shared: SharedBlock, unshared: UnsharedBlock) -> TieMap:
    """Copy shared stem/branch layers into every unshared pipeline using them.

    Returns unshared layer path -> shared layer path, one binding per
    unshared conv layer. Adapters of a decoupled block have no counterpart.
    """
    tie_map: TieMap = {}
    topology = shared.topology
    for t, pipeline in unshared.pipelines.items():
        assert t.stream is not None and t.variant is not None
        if t not in shared.candidates:
            raise ValueError(f"Shared block has no candidate '{t.value}'")
        for index, layer in enumerate(topology.chain(topology.tap(t.variant))):
            tie_map[f"{t.value}.{index}"] = f"{t.stream.value}.{layer.name}"

    for target_path, source_path in tie_map.items():
        target = _module_at(unshared, target_path)
        source = _module_at(shared, source_path)
        sources = {name: tensor for name, tensor, _ in source.named_parameters()}
        for name, tensor, _ in target.named_parameters():
            if name not in sources or sources[name].shape != tensor.shape:
                raise ShapeError(
                    f"Can not tie '{target_path}.{name}' to '{source_path}.{name}'"
                )
            tensor.data = sources[name].data.copy()
    return tie_map


def _copy_common(source: Module, target: Module) -> int:
    """Copy every parameter present under the same path in both modules."""
    sources = {name: tensor for name, tensor, _ in source.named_parameters()}
    copied = 0
    for name, tensor, _ in target.named_parameters():
        if name in sources and sources[name].shape == tensor.shape:
            tensor.data = sources[name].data.copy()
            copied += 1
    return copied


def _edges(net: SearchableModule) -> List[Edge]:
    return [
        edge for group in net.groups for cell in group.cells
        for edge in cell.edges.values()
    ]


def tie_supernets(shared_net: SearchableModule, unshared_net: SearchableModule) -> None:
    """Make an unshared supernet compute what a shared one computes."""
    _copy_common(shared_net, unshared_net)
    for shared_edge, unshared_edge in zip(_edges(shared_net), _edges(unshared_net)):
        if shared_edge.block is None or unshared_edge.block is None:
            continue
        assert isinstance(shared_edge.block, SharedBlock)
        assert isinstance(unshared_edge.block, UnsharedBlock)
        tie_weights(shared_edge.block, unshared_edge.block)


# ===========
# Equivalence
# ===========


class EquivalenceReport(NamedTuple):
    max_diff: float
    per_candidate: Dict[str, float]


def equivalence_check(
        shared: SharedBlock,
        unshared: UnsharedBlock,
        trials: int,
        seed: int,
        *,
        spatial: int = 8,
        batch: int = 2,
) -> EquivalenceReport:
    """Largest per-candidate |shared - unshared| over random inputs.

    For a decoupled shared block the tapped outputs are compared against the
    adapter applied to the unshared output.
    """
    rng = derive_rng(seed, "probe")
    per_candidate = {t.value: 0.0 for t in unshared.pipelines}
    dtype = _block_dtype(shared)
    with no_grad():
        for _ in range(trials):
            shape = (batch, shared.c_prime, spatial, spatial)
            x = Tensor(rng.standard_normal(shape).astype(dtype))
            shared_out = dict(zip(shared.candidates, shared(x)))
            unshared_out = dict(zip(unshared.candidates, unshared(x)))
            for t in unshared.pipelines:
                expected = unshared_out[t]
                assert expected is not None and t.stream is not None
                adapter = shared.streams[t.stream].adapters.get(t.variant)
                if adapter is not None:
                    expected = adapter(expected)
                actual = shared_out[t]
                assert actual is not None
                diff = float(np.max(np.abs(actual.data - expected.data)))
                per_candidate[t.value] = max(per_candidate[t.value], diff)
    max_diff = max(per_candidate.values(), default=0.0)
    return EquivalenceReport(max_diff, per_candidate)


def _block_dtype(block: Module):
    for _, tensor, _ in block.named_parameters():
        return tensor.dtype
    return np.float32


def module_equivalence(config: SupernetConfig, seed: int, *, spatial: int = 16) -> float:
    """Max abs diff of every module output between a shared supernet and a
    tied unshared one (decoupling off).
    """
    config = replace(config, decouple=False)
    shared_net = build_supernet(
        replace(config, sharing=True), derive_rng(seed, "weights")
    )
    unshared_net = build_supernet(
        replace(config, sharing=False), derive_rng(seed, "weights")
    )
    tie_supernets(shared_net, unshared_net)
    rng = derive_rng(seed, "probe")
    images = Tensor(rng.standard_normal((1, config.in_channels, spatial, spatial)))
    images = Tensor(images.data.astype(np.float32))
    with no_grad():
        a = shared_net(images)
        b = unshared_net(images)
    return max(float(np.max(np.abs(x.data - y.data))) for x, y in zip(a, b))


def count_block_executions(
        block: Block,
        c_prime: int,
        spatial: int = 8,
) -> Dict[str, int]:
    x = Tensor(np.zeros((1, c_prime, spatial, spatial), dtype=_block_dtype(block)))
    with no_grad(), count_executions() as counter:
        block(x)
    return {key: counter[key] for key in ("representations", "adapters")}


# ==============
# Gradient audit
# ==============


class Probe(NamedTuple):
    name: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    probes: List[Probe] = field(default_factory=list)
    tolerance: float = GRAD_CHECK_TOLERANCE

    @property
    def worst(self) -> Optional[Probe]:
        return max(self.probes, key=lambda p: p.rel_err, default=None)

    @property
    def worst_rel_err(self) -> float:
        worst = self.worst
        return 0.0 if worst is None else worst.rel_err

    @property
    def passed(self) -> bool:
        return self.worst_rel_err < self.tolerance

    @property
    def flagged(self) -> List[Probe]:
        return [p for p in self.probes if p.rel_err >= self.tolerance]


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERR_FLOOR)


def projection_loss(
        outputs: Sequence[Tensor],
        projections: Sequence[np.ndarray],
) -> Tensor:
    """sum_k sum(out_k * R_k) for fixed random projections R_k."""
    total: Optional[Tensor] = None
    for out, projection in zip(outputs, projections):
        term = sum_all(mul(out, Tensor(projection.astype(out.dtype))))
        total = term if total is None else total + term
    assert total is not None
    return total


def grad_check_supernet(
        net: SearchableModule,
        probes: int,
        eps: float = GRAD_CHECK_EPS,
        seed: int = 0,
        *,
        kinds: Sequence[ParamKind] = (ParamKind.WEIGHT, ParamKind.ARCHITECTURE),
        spatial: int = 16,
        tolerance: float = GRAD_CHECK_TOLERANCE,
) -> GradCheckReport:
    """Central finite differences against backward on randomly probed entries.

    Runs on a float64 clone so the difference quotient is not swamped by
    rounding; the given network is left untouched.
    """
    clone = net.astype(np.float64)
    assert isinstance(clone, SearchableModule)
    store = clone.param_store()
    rng = derive_rng(seed, "probe")
    images = Tensor(rng.standard_normal((1, net.config.in_channels, spatial, spatial)))

    def forward() -> Tensor:
        outputs = clone(images)
        return projection_loss(outputs, projections)

    with no_grad():
        shapes = [out.shape for out in clone(images)]
    projections = [rng.standard_normal(shape) for shape in shapes]

    loss = forward()
    store.zero_grad()
    loss.backward()

    report = GradCheckReport(tolerance=tolerance)
    names_by_kind = {kind: store.names(kind) for kind in kinds}
    for number in range(probes):
        kind = kinds[number % len(kinds)]
        names = names_by_kind[kind]
        if not names:
            continue
        name = names[int(rng.integers(len(names)))]
        tensor = store[name]
        index = tuple(int(rng.integers(size)) for size in tensor.shape)
        analytic = 0.0 if tensor.grad is None else float(tensor.grad[index])
        original = tensor.data[index]
        with no_grad():
            tensor.data[index] = original + eps
            plus = forward().item()
            tensor.data[index] = original - eps
            minus = forward().item()
        tensor.data[index] = original
        numeric = (plus - minus) / (2 * eps)
        report.probes.append(Probe(name, index, analytic, numeric,
                                   relative_error(analytic, numeric)))
    worst = report.worst
    if worst is not None:
        logger.info("grad check: worst relative error %.2e at %s%s",
                    worst.rel_err, worst.name, list(worst.index))
    return report


# ==========
# Path count
# ==========


class PathCountReport(NamedTuple):
    nodes: int
    candidates: int
    closed_form: int
    enumerated: int

    @property
    def agrees(self) -> bool:
        return self.closed_form == self.enumerated


def path_count_check(
        nodes: int = ENUMERATION_NODES,
        num_candidates: int = ENUMERATION_CANDIDATES,
) -> PathCountReport:
    """Closed-form genotype count against brute-force enumeration on a
    reduced space of `nodes` nodes and `num_candidates` transformations.
    """
    topology = CellTopology(nodes)
    ops = [t for t in TransformationId if not is_none(t)][:num_candidates]
    return PathCountReport(
        nodes=nodes,
        candidates=num_candidates,
        closed_form=count_discrete_paths(topology, 1, num_candidates),
        enumerated=count_by_enumeration(topology, [ops + [TransformationId.NONE]]),
    )


# ============
# Verification
# ============


@dataclass
class VerifyReport:
    shared_representations: int
    unshared_representations: int
    executions: Dict[str, Dict[str, int]]
    block_equivalence: EquivalenceReport
    module_diff: float
    grad_check: GradCheckReport
    path_count: PathCountReport
    violations: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


Fault = Callable[[SharedBlock, UnsharedBlock], None]


def perturb_unshared_weight(shared: SharedBlock, unshared: UnsharedBlock) -> None:
    """Fault fixture: nudge one unshared conv weight after tying."""
    pipeline = unshared.pipelines[unshared.candidates[0]]
    pipeline.units[0].weight.data[0, 0] += 0.5


@contextmanager
def broken_relu_gradient() -> Iterator[None]:
    """Fault fixture: ReLU passes its gradient through unmasked."""
    original = tensor_ops._relu_vjp
    tensor_ops._relu_vjp = lambda mask, g: g
    try:
        yield
    finally:
        tensor_ops._relu_vjp = original


def run_verification(
        config: SupernetConfig,
        seed: int,
        *,
        trials: int = 100,
        probes: int = 50,
        fault: Optional[Fault] = None,
) -> VerifyReport:
    rng = derive_rng(seed, "weights")
    shared = build_shared_block(config.c_prime, False, rng)
    unshared = build_unshared_block(config.c_prime, rng)
    decoupled = build_shared_block(config.c_prime, True, rng)
    tie_weights(shared, unshared)
    if fault is not None:
        fault(shared, unshared)

    executions = {
        "shared": count_block_executions(shared, config.c_prime),
        "decoupled": count_block_executions(decoupled, config.c_prime),
        "unshared": count_block_executions(unshared, config.c_prime),
    }
    equivalence = equivalence_check(shared, unshared, trials, seed)
    module_diff = module_equivalence(replace(config, M=1), seed)
    grad_report = grad_check_supernet(
        build_supernet(config, derive_rng(seed, "weights")), probes, seed=seed
    )
    report = VerifyReport(
        shared_representations=count_representations(shared),
        unshared_representations=count_representations(unshared),
        executions=executions,
        block_equivalence=equivalence,
        module_diff=module_diff,
        grad_check=grad_report,
        path_count=path_count_check(),
    )
    if executions["shared"]["representations"] != report.shared_representations:
        report.violations.append("shared block execution count")
    if executions["unshared"]["representations"] != report.unshared_representations:
        report.violations.append("unshared block execution count")
    if equivalence.max_diff >= EQUIVALENCE_TOLERANCE:
        report.violations.append(f"block equivalence {equivalence.max_diff:.2e}")
    if module_diff >= MODULE_EQUIVALENCE_TOLERANCE:
        report.violations.append(f"module equivalence {module_diff:.2e}")
    if not grad_report.passed:
        report.violations.append(f"gradient check {grad_report.worst_rel_err:.2e}")
    if not report.path_count.agrees:
        report.violations.append(
            f"path count: closed form {report.path_count.closed_form},"
            f" enumeration {report.path_count.enumerated}"
        )
    return report

