"""Desk-scale detection task: FCOS-style targets, losses, toy AP and training."""
from __future__ import annotations

from dataclasses import dataclass
import logging
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

from fadpy.data import batches, DataConfig, split_scenes, SyntheticScene
from fadpy.derived import build_derived_network
from fadpy.errors import NumericalError
from fadpy.genotype import Genotype, random_genotype
from fadpy.params import (
    backward,
    clip_grad_norm,
    ParamKind,
    SGD,
    StepLR,
)
from fadpy.search import (
    MetricsLog,
    run_search,
    ScheduleConfig,
    SearchEngine,
    SearchResult,
)
from fadpy.supernet import (
    build_supernet,
    CellTopology,
    group_candidates,
    ModuleOutput,
    SearchableModule,
    SupernetConfig,
)
from fadpy.tensor import (
    bernoulli_kl_loss,
    iou_loss,
    no_grad,
    sigmoid_array,
    sigmoid_focal_loss,
    Tensor,
)
from fadpy.utils import derive_rng


logger = logging.getLogger(__name__)


# Constants
BACKGROUND: Final[int] = -1
FOCAL_GAMMA: Final[float] = 2.0
FOCAL_ALPHA: Final[float] = 0.25
AP_IOU: Final[float] = 0.5
SCORE_THRESHOLD: Final[float] = 0.05
NMS_IOU: Final[float] = 0.5
MAX_DETECTIONS: Final[int] = 50
RECALL_POINTS: Final[np.ndarray] = np.linspace(0.0, 1.0, 11)


# =======
# Targets
# =======


class DetectionTarget(NamedTuple):
    labels: np.ndarray       # (H', W') int, BACKGROUND outside every box
    distances: np.ndarray    # (4, H', W') l, t, r, b in units of the stride
    centerness: np.ndarray   # (H', W')

    @property
    def foreground(self) -> np.ndarray:
        return self.labels != BACKGROUND


def location_centers(size: int, stride: int) -> np.ndarray:
    return np.arange(size // stride) * stride + stride // 2


def centerness_of(distances: np.ndarray) -> np.ndarray:
    l, t, r, b = distances
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = (
            (np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b))
        )
    return np.sqrt(np.nan_to_num(ratio, nan=0.0))


def assign_fcos_targets(scene: SyntheticScene, stride: int) -> DetectionTarget:
    """A location is foreground iff it lies strictly inside a box; on overlap
    the box with the smallest area wins.
    """
    height, width = scene.image.shape[-2:]
    if height % stride or width % stride:
        raise ValueError(f"stride {stride} does not divide the {height}x{width} image")
    ys = location_centers(height, stride).astype(np.float64)
    xs = location_centers(width, stride).astype(np.float64)
    grid_h, grid_w = len(ys), len(xs)

    labels = np.full((grid_h, grid_w), BACKGROUND, dtype=np.int64)
    distances = np.zeros((4, grid_h, grid_w), dtype=np.float32)
    best_area = np.full((grid_h, grid_w), np.inf)
    for obj in scene.objects:
        x1, y1, x2, y2 = obj.box
        l = xs[None, :] - x1
        r = x2 - xs[None, :]
        t = ys[:, None] - y1
        b = y2 - ys[:, None]
        inside = (l > 0) & (r > 0) & (t > 0) & (b > 0)
        area = (x2 - x1) * (y2 - y1)
        wins = inside & (area < best_area)
        if not wins.any():
            continue
        best_area[wins] = area
        labels[wins] = obj.label
        for k, d in enumerate(np.broadcast_arrays(l, t, r, b)):
            distances[k][wins] = d[wins] / stride

    centerness = np.where(labels != BACKGROUND, centerness_of(distances), 0.0)
    return DetectionTarget(labels, distances, centerness.astype(np.float32))


# =======
# Batches
# =======


@dataclass(frozen=True)
class DetectionBatch:
    images: Tensor           # (N, C, H, W)
    labels: np.ndarray       # (N, H', W')
    distances: np.ndarray    # (N, 4, H', W')
    centerness: np.ndarray   # (N, 1, H', W')
    num_classes: int

    @property
    def foreground(self) -> np.ndarray:
        return (self.labels != BACKGROUND)[:, None]

    @property
    def num_foreground(self) -> int:
        return int(self.foreground.sum())

    def class_targets(self) -> np.ndarray:
        """One-hot (N, K, H', W') targets; background rows are all zero."""
        onehot = np.zeros((len(self.labels), self.num_classes) + self.labels.shape[1:],
                          dtype=np.float32)
        n, y, x = np.nonzero(self.labels != BACKGROUND)
        onehot[n, self.labels[n, y, x], y, x] = 1.0
        return onehot


def make_batch(
        scenes: Sequence[SyntheticScene],
        stride: int,
        num_classes: int,
) -> DetectionBatch:
    targets = [assign_fcos_targets(scene, stride) for scene in scenes]
    return DetectionBatch(
        images=Tensor(np.stack([scene.image for scene in scenes]).astype(np.float32)),
        labels=np.stack([t.labels for t in targets]),
        distances=np.stack([t.distances for t in targets]),
        centerness=np.stack([t.centerness for t in targets])[:, None],
        num_classes=num_classes,
    )


def batch_stream(
        scenes: Sequence[SyntheticScene],
        data: DataConfig,
        batch_size: int,
        rng: np.random.Generator,
) -> Iterator[DetectionBatch]:
    for chunk in batches(scenes, batch_size, rng):
        yield make_batch(chunk, data.stride, data.num_classes)


# ======
# Losses
# ======


class DetectionLoss(NamedTuple):
    total: Tensor
    cls: Tensor
    box: Tensor
    centerness: Tensor


def detection_loss_terms(output: ModuleOutput, batch: DetectionBatch) -> DetectionLoss:
    """Focal loss on classes, IoU loss on boxes and centerness loss, all
    normalized by the number of foreground locations (at least 1).
    """
    mask = batch.foreground
    norm = 1.0 / max(1, batch.num_foreground)
    cls = sigmoid_focal_loss(output.cls, batch.class_targets(), FOCAL_GAMMA, FOCAL_ALPHA)
    box = iou_loss(output.box, batch.distances, mask)
    centerness = bernoulli_kl_loss(output.centerness, batch.centerness, mask)
    return DetectionLoss(
        total=(cls + box + centerness) * norm,
        cls=cls * norm,
        box=box * norm,
        centerness=centerness * norm,
    )


def detection_loss(output: ModuleOutput, batch: DetectionBatch) -> Tensor:
    return detection_loss_terms(output, batch).total


def network_loss(net: SearchableModule, batch: DetectionBatch) -> Tensor:
    return detection_loss(net(batch.images), batch)


# ==========
# Evaluation
# ==========


class Detection(NamedTuple):
    label: int
    score: float
    box: Tuple[float, float, float, float]


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) and (m, 4) x1, y1, x2, y2 boxes."""
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=-1)
    area_a = np.prod(a[:, 2:] - a[:, :2], axis=-1)
    area_b = np.prod(b[:, 2:] - b[:, :2], axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float = NMS_IOU) -> List[int]:
    """Greedy non-maximum suppression; returns kept indices by falling score."""
    order = list(np.argsort(-scores, kind="stable"))
    keep = []
    while order:
        best = order.pop(0)
        keep.append(int(best))
        if not order:
            break
        ious = box_iou(boxes[[best]], boxes[order])[0]
        order = [i for i, iou in zip(order, ious) if iou <= threshold]
    return keep


def decode_detections(
        output: ModuleOutput,
        index: int,
        stride: int,
        threshold: float = SCORE_THRESHOLD,
) -> List[Detection]:
    cls = sigmoid_array(output.cls.data[index])
    centerness = sigmoid_array(output.centerness.data[index, 0])
    distances = np.exp(np.clip(output.box.data[index], -10, 10)) * stride
    grid_h, grid_w = cls.shape[1:]
    ys = location_centers(grid_h * stride, stride)
    xs = location_centers(grid_w * stride, stride)
    boxes = np.stack([
        xs[None, :] - distances[0],
        ys[:, None] - distances[1],
        xs[None, :] + distances[2],
        ys[:, None] + distances[3],
    ], axis=-1)
    detections: List[Detection] = []
    for label in range(cls.shape[0]):
        scores = np.sqrt(cls[label] * centerness)
        y, x = np.nonzero(scores > threshold)
        if not len(y):
            continue
        candidate_boxes = boxes[y, x]
        candidate_scores = scores[y, x]
        for i in nms(candidate_boxes, candidate_scores)[:MAX_DETECTIONS]:
            detections.append(Detection(label, float(candidate_scores[i]),
                                        tuple(float(v) for v in candidate_boxes[i])))
    return detections


def average_precision(
        detections: Sequence[Sequence[Detection]],
        scenes: Sequence[SyntheticScene],
        num_classes: int,
        iou_threshold: float = AP_IOU,
) -> float:
    """Mean over classes with ground truth of the 11-point interpolated AP."""
    aps = []
    for label in range(num_classes):
        truth = [
            np.array([obj.box for obj in scene.objects if obj.label == label])
            .reshape(-1, 4)
            for scene in scenes
        ]
        total = sum(len(boxes) for boxes in truth)
        if not total:
            continue
        ranked = sorted(
            ((d.score, i, d.box) for i, dets in enumerate(detections)
             for d in dets if d.label == label),
            key=lambda item: -item[0],
        )
        matched = [np.zeros(len(boxes), dtype=bool) for boxes in truth]
        hits = []
        for _, image, box in ranked:
            hit = False
            if len(truth[image]):
                ious = box_iou(np.array([box]), truth[image])[0]
                ious[matched[image]] = -1.0
                best = int(np.argmax(ious))
                if ious[best] >= iou_threshold:
                    matched[image][best] = True
                    hit = True
            hits.append(hit)
        tp = np.cumsum(hits)
        recall = tp / total if len(tp) else np.zeros(0)
        precision = tp / np.arange(1, len(tp) + 1) if len(tp) else np.zeros(0)
        ap = 0.0
        for point in RECALL_POINTS:
            reached = precision[recall >= point]
            ap += (reached.max() if reached.size else 0.0) / len(RECALL_POINTS)
        aps.append(ap)
    return float(np.mean(aps)) if aps else 0.0


def evaluate_detector(
        net: SearchableModule,
        scenes: Sequence[SyntheticScene],
        data: DataConfig,
        batch_size: int = 8,
) -> float:
    detections: List[List[Detection]] = []
    with no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            images = Tensor(np.stack([scene.image for scene in chunk]).astype(np.float32))
            output = net(images)
            detections.extend(
                decode_detections(output, i, data.stride) for i in range(len(chunk))
            )
    return average_precision(detections, scenes, data.num_classes)


# ========
# Training
# ========


@dataclass(frozen=True)
class Metrics:
    ap: Optional[float] = None
    accuracy: Optional[float] = None
    final_loss: Optional[float] = None
    num_parameters: int = 0
    iterations: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ap": self.ap,
            "accuracy": self.accuracy,
            "final_loss": self.final_loss,
            "num_parameters": self.num_parameters,
            "iterations": self.iterations,
        }


def train_derived(
        net: SearchableModule,
        train_scenes: Sequence[SyntheticScene],
        eval_scenes: Sequence[SyntheticScene],
        schedule: ScheduleConfig,
        data: DataConfig,
        rng: np.random.Generator,
        metrics: Optional[MetricsLog] = None,
) -> Metrics:
    """Train a discrete network from scratch, then measure toy AP."""
    if metrics is None:
        metrics = MetricsLog()
    store = net.param_store()
    optimizer = SGD(store, ParamKind.WEIGHT, schedule.w_lr,
                    momentum=schedule.w_momentum,
                    weight_decay=schedule.train_weight_decay)
    decay_step = max(1, schedule.train_iters * 4 // 5)
    lr_schedule = StepLR(optimizer, decay_step, schedule.lr_factor)
    stream = batch_stream(train_scenes, data, schedule.batch_size, rng)
    loss_value: Optional[float] = None
    for step in range(schedule.train_iters):
        loss = network_loss(net, next(stream))
        if not np.isfinite(loss.data).all():
            raise NumericalError(f"training loss is not finite at step {step}",
                                 node="training", step=step)
        backward(loss, store)
        grad_norm = clip_grad_norm(store, schedule.grad_clip, ParamKind.WEIGHT)
        lr_schedule.update(step)
        optimizer.step()
        loss_value = loss.item()
        metrics.write({
            "iter": step + 1,
            "L_train": loss_value,
            "grad_norm_pre_clip": grad_norm,
        })
        if (step + 1) % schedule.log_every == 0:
            logger.info("train iter %d: loss=%.4f", step + 1, loss_value)

    ap = evaluate_detector(net, eval_scenes, data)
    result = Metrics(
        ap=ap,
        final_loss=loss_value,
        num_parameters=net.num_parameters(),
        iterations=schedule.train_iters,
    )
    metrics.write({"eval": result.to_dict()})
    logger.info("toy AP@0.5 = %.4f", ap)
    return result


# ===========
# Experiments
# ===========


def split_eval(
        scenes: Sequence[SyntheticScene],
        data: DataConfig,
) -> Tuple[List[SyntheticScene], List[SyntheticScene]]:
    """The first `num_scenes` scenes feed search and training, the rest is held out."""
    if len(scenes) != data.num_scenes + data.eval_scenes:
        raise ValueError(
            f"Expected {data.num_scenes + data.eval_scenes} scenes, got {len(scenes)}"
        )
    return list(scenes[:data.num_scenes]), list(scenes[data.num_scenes:])


def search_detection(
        config: SupernetConfig,
        schedule: ScheduleConfig,
        scenes: Sequence[SyntheticScene],
        data: DataConfig,
        seed: int,
        metrics: Optional[MetricsLog] = None,
) -> Tuple[SearchResult, SearchableModule]:
    net = build_supernet(config, derive_rng(seed, "weights"))
    train, val = split_scenes(scenes, schedule.val_fraction, seed)
    rng = derive_rng(seed, "data")
    engine: SearchEngine = SearchEngine(net, schedule, network_loss, metrics)
    result = run_search(
        engine,
        batch_stream(train, data, schedule.batch_size, rng),
        batch_stream(val, data, schedule.batch_size, rng),
        rng=rng,
    )
    return result, net


def train_genotype(
        genotype: Genotype,
        config: SupernetConfig,
        schedule: ScheduleConfig,
        train_scenes: Sequence[SyntheticScene],
        eval_scenes: Sequence[SyntheticScene],
        data: DataConfig,
        seed: int,
        metrics: Optional[MetricsLog] = None,
) -> Metrics:
    net = build_derived_network(genotype, config, derive_rng(seed, "weights"))
    return train_derived(
        net, train_scenes, eval_scenes, schedule, data, derive_rng(seed, "data"), metrics
    )


def random_baseline(
        config: SupernetConfig,
        schedule: ScheduleConfig,
        train_scenes: Sequence[SyntheticScene],
        eval_scenes: Sequence[SyntheticScene],
        data: DataConfig,
        seed: int,
        count: int = 10,
) -> List[Metrics]:
    """Train `count` random genotypes with the same budget as a searched one."""
    rng = derive_rng(seed, "sampling")
    candidates = group_candidates(config)
    topology = CellTopology(config.num_nodes)
    results = []
    for number in range(count):
        genotype = random_genotype(rng, candidates, topology)
        logger.info("random genotype %d: %s", number, genotype)
        results.append(train_genotype(
            genotype, config, schedule, train_scenes, eval_scenes, data, seed
        ))
    return results


def median_ap(results: Sequence[Metrics]) -> float:
    return float(np.median([m.ap for m in results if m.ap is not None]))
