"""Classification mode: a small cell network searched over separable
transformations and pooling, used to measure how often the transformations
tapping shared representations are selected.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
import logging
from statistics import mean
from typing import (
    Any,
    Dict,
    Final,
    FrozenSet,
    Iterator,
    List,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

from fadpy.data import batches, NOISE_STD, paint_object, scene_seed
from fadpy.genotype import derive_from_logits, Genotype
from fadpy.nn import Conv, ConvUnit, Module
from fadpy.search import (
    MetricsLog,
    run_search,
    ScheduleConfig,
    SearchEngine,
    SearchResult,
)
from fadpy.search_space import TransformationId
from fadpy.supernet import (
    AlphaTable,
    Cell,
    CellTopology,
    init_alphas,
    SupernetConfig,
)
from fadpy.tensor import cross_entropy, global_avg_pool, no_grad, Tensor
from fadpy.utils import derive_rng


logger = logging.getLogger(__name__)


# Constants
# variants whose output is a stem representation itself
SHARED_VARIANTS: Final[FrozenSet[int]] = frozenset((1, 2))
NORMAL_GROUP: Final[int] = 0
REDUCTION_GROUP: Final[int] = 1
MIN_SEARCHES: Final[int] = 4


# ====
# Data
# ====


@dataclass(frozen=True)
class ClassificationDataConfig:
    num_images: int = 64
    eval_images: int = 32
    image_size: int = 16
    channels: int = 1
    num_classes: int = 4
    min_fill: float = 0.5
    max_fill: float = 0.9

    def __post_init__(self) -> None:
        for name in ("num_images", "eval_images", "image_size", "channels",
                     "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"'{name}' must be at least 1 ({getattr(self, name)})")
        if not 0 < self.min_fill <= self.max_fill <= 1:
            raise ValueError(
                f"Object fill range [{self.min_fill}, {self.max_fill}] must lie in (0, 1]"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ClassificationBatch(NamedTuple):
    images: Tensor
    labels: np.ndarray


@dataclass(frozen=True, eq=False)
class ClassificationSet:
    images: np.ndarray  # (N, C, S, S) float32
    labels: np.ndarray  # (N,) int

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, indices: Sequence[int]) -> ClassificationBatch:
        index = np.asarray(indices)
        return ClassificationBatch(Tensor(self.images[index]), self.labels[index])

    def split(
            self,
            val_fraction: float,
            seed: int,
    ) -> Tuple[ClassificationSet, ClassificationSet]:
        order = derive_rng(seed, "sampling").permutation(len(self))
        num_val = min(max(1, int(round(len(self) * val_fraction))), len(self) - 1)
        val, train = np.sort(order[:num_val]), np.sort(order[num_val:])
        return (
            ClassificationSet(self.images[train], self.labels[train]),
            ClassificationSet(self.images[val], self.labels[val]),
        )


def generate_classification_dataset(
        seed: int,
        n: int,
        config: ClassificationDataConfig,
) -> ClassificationSet:
    """One textured object per image; the label is the object's class."""
    if n < 1:
        raise ValueError(f"Dataset needs at least one image ({n})")
    size = config.image_size
    images = np.empty((n, config.channels, size, size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = np.random.default_rng(scene_seed(seed, i))
        image = rng.normal(0.0, NOISE_STD, (config.channels, size, size))
        image = image.astype(np.float32)
        label = int(rng.integers(config.num_classes))
        w, h = (
            max(2, int(round(size * rng.uniform(config.min_fill, config.max_fill))))
            for _ in range(2)
        )
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        paint_object(image, label, x1, y1, w, h)
        images[i] = image
        labels[i] = label
    return ClassificationSet(images, labels)


def batch_stream(
        data: ClassificationSet,
        batch_size: int,
        rng: np.random.Generator,
) -> Iterator[ClassificationBatch]:
    for chunk in batches(range(len(data)), batch_size, rng):
        yield data.batch(chunk)


# =======
# Network
# =======


class ClassificationNet(Module):
    """stem -> normal cell -> reduction cell -> normal cell -> GAP -> 1x1 classifier.

    Both normal cells read the alphas of group 0 but own separate weights;
    the reduction cell reads group 1.
    """

    def __init__(
            self,
            config: SupernetConfig,
            rng: np.random.Generator,
            alphas: Optional[AlphaTable] = None,
    ) -> None:
        super().__init__()
        if config.task != "classify":
            raise ValueError("ClassificationNet needs a 'classify' config")
        self.config = config
        self.alphas = alphas if alphas is not None else init_alphas(config)
        topology = CellTopology(config.num_nodes)
        normal_ops, reduction_ops = self.alphas.candidates
        self.stem = self.add_module("stem", ConvUnit(config.in_channels, config.c, rng))
        self.cells: List[Cell] = []
        for name, ops, reduction in (
                ("normal0", normal_ops, False),
                ("reduce", reduction_ops, True),
                ("normal1", normal_ops, False),
        ):
            cell = Cell(
                config.c, config.c_prime,
                {index: ops for index in range(topology.num_edges)}, rng,
                topology=topology,
                decouple=config.decouple,
                sharing=config.sharing,
                reduction=reduction,
            )
            self.cells.append(self.add_module(name, cell))
        self.classifier = self.add_module(
            "classifier", Conv(config.c, config.num_classes, rng)
        )
        self.add_module("alphas", self.alphas)

    def forward(self, images: Tensor) -> Tensor:
        x = self.stem(images)
        normal = self.alphas.weights(NORMAL_GROUP)
        reduction = self.alphas.weights(REDUCTION_GROUP)
        for cell in self.cells:
            x = cell(x, reduction if cell.reduction else normal)
        return self.classifier(global_avg_pool(x))


def classification_loss(net: ClassificationNet, batch: ClassificationBatch) -> Tensor:
    return cross_entropy(net(batch.images), batch.labels)


def evaluate_classifier(
        net: ClassificationNet,
        data: ClassificationSet,
        batch_size: int = 16,
) -> float:
    """Top-1 accuracy."""
    correct = 0
    with no_grad():
        for start in range(0, len(data), batch_size):
            batch = data.batch(range(start, min(start + batch_size, len(data))))
            logits = net(batch.images).data.reshape(len(batch.labels), -1)
            correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
    return correct / len(data)


# ==========
# Statistics
# ==========


def shared_trans_fraction(genotypes: Sequence[Genotype]) -> float:
    """Share of t1/t2 among all selected transformations (pooling and skip
    selections are not transformations and are not counted).
    """
    if not genotypes:
        raise ValueError("shared_trans_fraction() needs at least one genotype")
    shared = total = 0
    for genotype in genotypes:
        for op in genotype.operations():
            if not isinstance(op, TransformationId):
                continue
            total += 1
            shared += op.variant in SHARED_VARIANTS
    return shared / total if total else 0.0


def expected_shared_fraction(candidates: Sequence[Any]) -> float:
    """Fraction an argmax over uniformly tied candidates selects on average."""
    transformations = [
        op for op in candidates
        if isinstance(op, TransformationId) and op is not TransformationId.NONE
    ]
    if not transformations:
        raise ValueError("No transformation among the candidates")
    shared = sum(t.variant in SHARED_VARIANTS for t in transformations)
    return shared / len(transformations)


def perturbed_init_fraction(
        config: SupernetConfig,
        rng: np.random.Generator,
        samples: int,
        noise: float = 1e-3,
) -> float:
    """Fraction over genotypes derived from the initial alphas plus small
    random perturbations; converges to `expected_shared_fraction`.
    """
    alphas = init_alphas(config)
    genotypes = []
    for _ in range(samples):
        logits = [
            alphas.logits(g) + rng.normal(0.0, noise, alphas.logits(g).shape)
            for g in range(alphas.num_groups)
        ]
        genotypes.append(derive_from_logits(logits, alphas.candidates, alphas.topology))
    return shared_trans_fraction(genotypes)


# ======
# Search
# ======


class DecouplingStudy(NamedTuple):
    fractions: Mapping[bool, List[float]]
    accuracies: Mapping[bool, List[float]]
    genotypes: Mapping[bool, List[Genotype]]

    def mean_fraction(self, decouple: bool) -> float:
        return mean(self.fractions[decouple])

    @property
    def decoupling_helps(self) -> bool:
        return self.mean_fraction(True) > self.mean_fraction(False)


class ClassificationRun(NamedTuple):
    result: SearchResult
    net: ClassificationNet
    accuracy: float

    @property
    def genotype(self) -> Genotype:
        return self.result.genotype


def classification_search(
        config: SupernetConfig,
        schedule: ScheduleConfig,
        data: ClassificationDataConfig,
        seed: int,
        metrics: Optional[MetricsLog] = None,
) -> ClassificationRun:
    """One search plus the supernet accuracy on a held-out set."""
    images = generate_classification_dataset(seed, data.num_images, data)
    held_out = generate_classification_dataset(seed + 1, data.eval_images, data)
    train, val = images.split(schedule.val_fraction, seed)
    net = ClassificationNet(config, derive_rng(seed, "weights"))
    engine: SearchEngine = SearchEngine(net, schedule, classification_loss, metrics)
    sampling = derive_rng(seed, "data")
    result = run_search(
        engine,
        batch_stream(train, schedule.batch_size, sampling),
        batch_stream(val, schedule.batch_size, sampling),
        rng=sampling,
    )
    return ClassificationRun(result, net, evaluate_classifier(net, held_out))


def classification_mode_search(
        config: SupernetConfig,
        schedule: ScheduleConfig,
        data: ClassificationDataConfig,
        seed: int,
        searches: int = MIN_SEARCHES,
) -> DecouplingStudy:
    """Runs `searches` searches with and without decoupling adapters and
    collects the shared-transformation fraction of each derived genotype.
    """
    if searches < 1:
        raise ValueError(f"Need at least one search per setting ({searches})")
    fractions: Dict[bool, List[float]] = {True: [], False: []}
    accuracies: Dict[bool, List[float]] = {True: [], False: []}
    genotypes: Dict[bool, List[Genotype]] = {True: [], False: []}
    for decouple in (True, False):
        setting = replace(config, decouple=decouple)
        for number in range(searches):
            run_seed = scene_seed(seed, number)
            run = classification_search(setting, schedule, data, run_seed)
            genotype, accuracy = run.genotype, run.accuracy
            genotypes[decouple].append(genotype)
            fractions[decouple].append(shared_trans_fraction([genotype]))
            accuracies[decouple].append(accuracy)
            logger.info(
                "decouple=%s run %d: shared fraction %.3f, accuracy %.3f",
                decouple, number, fractions[decouple][-1], accuracy,
            )
    return DecouplingStudy(fractions, accuracies, genotypes)
