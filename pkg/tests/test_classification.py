import numpy as np
import pytest

from fadpy.classification import (
    classification_loss,
    classification_mode_search,
    classification_search,
    ClassificationDataConfig,
    ClassificationNet,
    DecouplingStudy,
    evaluate_classifier,
    expected_shared_fraction,
    generate_classification_dataset,
    perturbed_init_fraction,
    shared_trans_fraction,
)
from fadpy.genotype import EdgeChoice, Genotype
from fadpy.params import ParamKind
from fadpy.search import ScheduleConfig
from fadpy.search_space import (
    CellOp,
    NORMAL_CELL_CANDIDATES,
    REDUCTION_CELL_CANDIDATES,
    TransformationId as T,
)
from fadpy.supernet import SupernetConfig


CONFIG = SupernetConfig(c=8, c_prime=4, num_nodes=2, task="classify", num_classes=4)
DATA = ClassificationDataConfig(num_images=8, eval_images=4, image_size=8)
SCHEDULE = ScheduleConfig(total_iters=2, derive_every=1, batch_size=4, decay_step=100,
                          log_every=1)


def make_genotype(normal, reduction=CellOp.MAX_POOL):
    return Genotype((((EdgeChoice(0, normal),),), ((EdgeChoice(0, reduction),),)))


# ====
# Data
# ====


@pytest.mark.parametrize(
    "change",
    ({"num_images": 0}, {"num_classes": 0}, {"min_fill": 0.0},
     {"min_fill": 0.9, "max_fill": 0.5}),
)
def test_classification_data_config__invalid(change):
    with pytest.raises(ValueError):
        ClassificationDataConfig(**{**DATA.to_dict(), **change})


def test_generate_classification_dataset():
    data = generate_classification_dataset(0, 6, DATA)
    assert data.images.shape == (6, 1, 8, 8)
    assert data.images.dtype == np.float32
    assert 0 <= data.labels.min() and data.labels.max() < DATA.num_classes
    again = generate_classification_dataset(0, 6, DATA)
    np.testing.assert_array_equal(data.images, again.images)
    np.testing.assert_array_equal(data.labels, again.labels)


def test_generate_classification_dataset__empty():
    with pytest.raises(ValueError):
        generate_classification_dataset(0, 0, DATA)


def test_classification_set__split():
    data = generate_classification_dataset(0, 8, DATA)
    train, val = data.split(0.25, seed=1)
    assert len(train) == 6 and len(val) == 2
    split = train.labels.tolist() + val.labels.tolist()
    assert sorted(split) == sorted(data.labels.tolist())


# =======
# Network
# =======


def test_classification_net__forward():
    net = ClassificationNet(CONFIG, np.random.default_rng(0))
    batch = generate_classification_dataset(0, 3, DATA).batch([0, 1, 2])
    assert net(batch.images).shape == (3, 4, 1, 1)
    assert np.isfinite(classification_loss(net, batch).item())


def test_classification_net__alpha_groups():
    net = ClassificationNet(CONFIG, np.random.default_rng(0))
    assert net.alphas.candidates == (NORMAL_CELL_CANDIDATES, REDUCTION_CELL_CANDIDATES)
    assert net.num_parameters(ParamKind.ARCHITECTURE) == 3 * 7 + 3 * 4


def test_classification_net__needs_classify_task():
    with pytest.raises(ValueError):
        ClassificationNet(SupernetConfig(c=8, c_prime=4), np.random.default_rng(0))


def test_evaluate_classifier():
    net = ClassificationNet(CONFIG, np.random.default_rng(0))
    accuracy = evaluate_classifier(net, generate_classification_dataset(0, 5, DATA), 2)
    assert 0.0 <= accuracy <= 1.0
    assert accuracy * 5 == pytest.approx(round(accuracy * 5))


# ==========
# Statistics
# ==========


@pytest.mark.parametrize(
    "genotypes, expected",
    (
        ([make_genotype(T.SEP_T1)], 1.0),
        ([make_genotype(T.SEP_T2, CellOp.AVG_POOL)], 1.0),
        ([make_genotype(T.SEP_T3)], 0.0),
        ([make_genotype(CellOp.SKIP_CONNECT, CellOp.SKIP_CONNECT)], 0.0),
        ([make_genotype(T.SEP_T1), make_genotype(T.SEP_T3),
          make_genotype(T.SEP_T4), make_genotype(T.SEP_T5)], 0.25),
        ([make_genotype(T.SEP_T2), make_genotype(CellOp.SKIP_CONNECT)], 1.0),
    ),
)
def test_shared_trans_fraction(genotypes, expected):
    assert shared_trans_fraction(genotypes) == pytest.approx(expected)


def test_shared_trans_fraction__empty():
    with pytest.raises(ValueError):
        shared_trans_fraction([])


def test_expected_shared_fraction():
    assert expected_shared_fraction(NORMAL_CELL_CANDIDATES) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        expected_shared_fraction(REDUCTION_CELL_CANDIDATES)


def test_perturbed_init_fraction():
    config = SupernetConfig(task="classify", num_nodes=3)
    fraction = perturbed_init_fraction(config, np.random.default_rng(0), samples=400)
    expected = expected_shared_fraction(NORMAL_CELL_CANDIDATES)
    assert fraction == pytest.approx(expected, abs=0.05)


def test_decoupling_study():
    study = DecouplingStudy(
        fractions={True: [0.5, 0.7], False: [0.4, 0.4]},
        accuracies={True: [0.5, 0.5], False: [0.5, 0.5]},
        genotypes={True: [], False: []},
    )
    assert study.mean_fraction(True) == pytest.approx(0.6)
    assert study.decoupling_helps


# ======
# Search
# ======


def test_classification_search__deterministic():
    first = classification_search(CONFIG, SCHEDULE, DATA, seed=2)
    second = classification_search(CONFIG, SCHEDULE, DATA, seed=2)
    assert first.genotype == second.genotype
    assert first.accuracy == second.accuracy
    assert 0.0 <= first.accuracy <= 1.0


def test_classification_mode_search__small():
    study = classification_mode_search(CONFIG, SCHEDULE, DATA, seed=0, searches=1)
    assert len(study.fractions[True]) == len(study.fractions[False]) == 1
    assert all(0.0 <= f <= 1.0 for f in study.fractions[True] + study.fractions[False])


def test_classification_mode_search__needs_searches():
    with pytest.raises(ValueError):
        classification_mode_search(CONFIG, SCHEDULE, DATA, seed=0, searches=0)


@pytest.mark.slow
def test_decoupling_raises_shared_fraction():
    config = SupernetConfig(c=16, c_prime=8, num_nodes=3, task="classify", num_classes=4)
    data = ClassificationDataConfig(num_images=128, eval_images=64)
    schedule = ScheduleConfig(total_iters=400, derive_every=100, batch_size=8,
                              decay_step=320, log_every=100)
    study = classification_mode_search(config, schedule, data, seed=0, searches=4)
    assert study.decoupling_helps
