from collections import Counter

import numpy as np
import pytest

from fadpy.errors import ShapeError
from fadpy.nn import count_executions
from fadpy.search_space import (
    apply_cell_op,
    BlockTopology,
    Branch,
    build_shared_block,
    build_unshared_block,
    candidate_outputs,
    CANDIDATES,
    CellOp,
    count_representations,
    DEFAULT_TOPOLOGY,
    parse_operation,
    receptive_field,
    space_candidates,
    SPACES,
    Stream,
    TransformationId,
)
from fadpy.tensor import Tensor


C_PRIME = 4


@pytest.fixture
def x_prime():
    return Tensor(np.random.default_rng(0).standard_normal((2, C_PRIME, 8, 8)))


# ==========
# Operations
# ==========


def test_candidates__canonical_order():
    assert len(CANDIDATES) == 13
    assert [t.value for t in CANDIDATES[:3]] == ["std_t1", "std_t2", "std_t3"]
    assert CANDIDATES[6] is TransformationId.SEP_T1
    assert CANDIDATES[-1] is TransformationId.NONE


def test_transformation_id__parts():
    assert TransformationId.SEP_T4.stream is Stream.SEPARABLE
    assert TransformationId.SEP_T4.variant == 4
    assert TransformationId.NONE.stream is None
    assert TransformationId.of(Stream.STANDARD, 6) is TransformationId.STD_T6


@pytest.mark.parametrize(
    "name, expected",
    (
        ("std_t3", TransformationId.STD_T3),
        ("none", TransformationId.NONE),
        ("max_pool_3x3", CellOp.MAX_POOL),
        ("skip_connect", CellOp.SKIP_CONNECT),
    ),
)
def test_parse_operation(name, expected):
    assert parse_operation(name) is expected


def test_parse_operation__unknown():
    with pytest.raises(ValueError):
        parse_operation("std_t7")


@pytest.mark.parametrize(
    "op, stride, size",
    (
        (CellOp.SKIP_CONNECT, 1, 8),
        (CellOp.SKIP_CONNECT, 2, 4),
        (CellOp.MAX_POOL, 2, 4),
        (CellOp.AVG_POOL, 1, 8),
    ),
)
def test_apply_cell_op(x_prime, op, stride, size):
    assert apply_cell_op(op, x_prime, stride).shape == (2, C_PRIME, size, size)


def test_apply_cell_op__skip_is_identity(x_prime):
    assert apply_cell_op(CellOp.SKIP_CONNECT, x_prime) is x_prime


# ================
# Receptive fields
# ================


@pytest.mark.parametrize(
    "variant, rf",
    ((1, 3), (2, 5), (3, 7), (4, 7), (5, 9), (6, 9)),
)
def test_receptive_field(variant, rf):
    for stream in Stream:
        assert receptive_field(TransformationId.of(stream, variant)) == rf


def test_receptive_field__multiset():
    rfs = Counter(receptive_field(t) for t in CANDIDATES
                  if t is not TransformationId.NONE)
    assert rfs == Counter([3, 3, 5, 5, 7, 7, 7, 7, 9, 9, 9, 9])


def test_receptive_field__none():
    with pytest.raises(ValueError):
        receptive_field(TransformationId.NONE)


# ========
# Topology
# ========


def test_topology__chain():
    assert [layer.name for layer in DEFAULT_TOPOLOGY.chain("q5")] == ["p1", "p2", "q5"]


def test_topology__decoupled_variants():
    assert DEFAULT_TOPOLOGY.decoupled_variants == frozenset((1, 2))


def test_topology__unshared_layer_count():
    assert DEFAULT_TOPOLOGY.unshared_layer_count() == 13
    assert DEFAULT_TOPOLOGY.representations_for((1, 2)) == ("p1", "p2")


def test_topology__unknown_branch_source():
    with pytest.raises(ValueError):
        BlockTopology(branches=(Branch("q4", "p9", 2),))


# =============
# Search spaces
# =============


@pytest.mark.parametrize(
    "space, size",
    (("full", 13), ("subset1", 5), ("subset2", 9), ("std_only", 7), ("sep_only", 7)),
)
def test_spaces__sizes_end_with_none(space, size):
    candidates = space_candidates(space)
    assert len(candidates) == size
    assert candidates[-1] is TransformationId.NONE


def test_spaces__keep_canonical_order():
    for candidates in SPACES.values():
        order = [CANDIDATES.index(t) for t in candidates]
        assert order == sorted(order)


def test_space_candidates__unknown():
    with pytest.raises(ValueError):
        space_candidates("tiny")


# =====================
# Transformation blocks
# =====================


class BaseTest_Block:

    def make_block(self, **kwargs):
        raise NotImplementedError

    def test_outputs_follow_candidates(self, x_prime):
        block = self.make_block()
        outputs = block(x_prime)
        assert len(outputs) == len(CANDIDATES)
        assert outputs[-1] is None
        for out in outputs[:-1]:
            assert out.shape == x_prime.shape

    def test_candidate_outputs__explicit_zero_map(self, x_prime):
        outputs = candidate_outputs(self.make_block(), x_prime)
        assert not outputs[-1].data.any()
        assert outputs[-1].shape == x_prime.shape

    def test_rejects_wrong_channels(self):
        with pytest.raises(ShapeError):
            self.make_block()(Tensor(np.zeros((1, C_PRIME + 1, 8, 8))))

    def test_rejects_bad_candidates(self):
        with pytest.raises(ValueError):
            self.make_block(candidates=())
        with pytest.raises(ValueError):
            self.make_block(candidates=(TransformationId.STD_T1,) * 2)

    def test_reduced_candidates(self, x_prime):
        candidates = space_candidates("subset1")
        assert len(self.make_block(candidates=candidates)(x_prime)) == len(candidates)


class Test_SharedBlock(BaseTest_Block):

    def make_block(self, decouple=False, **kwargs):
        return build_shared_block(C_PRIME, decouple, **kwargs)

    def test_representations(self):
        assert count_representations(self.make_block()) == 12
        assert count_representations(self.make_block(decouple=True)) == 12

    @pytest.mark.parametrize("decouple, adapters", ((True, 4), (False, 0)))
    def test_adapters(self, decouple, adapters):
        assert self.make_block(decouple=decouple).num_adapters == adapters

    def test_executions(self, x_prime):
        block = self.make_block(decouple=True)
        with count_executions() as counter:
            block(x_prime)
        assert counter == {"representations": 12, "adapters": 4}

    def test_subset_shares_stem(self):
        block = self.make_block(candidates=space_candidates("subset1"))
        assert count_representations(block) == 4

    def test_taps_are_shared(self, x_prime):
        block = self.make_block()
        outputs = block(x_prime)
        # without adapters std_t1 is the representation std_t2 builds on
        p1 = block.streams[Stream.STANDARD].units["p1"](x_prime)
        np.testing.assert_array_equal(outputs[0].data, p1.data)


class Test_UnsharedBlock(BaseTest_Block):

    def make_block(self, **kwargs):
        return build_unshared_block(C_PRIME, **kwargs)

    def test_representations(self):
        assert count_representations(self.make_block()) == 26

    def test_executions(self, x_prime):
        with count_executions() as counter:
            self.make_block()(x_prime)
        assert counter == {"representations": 26}

    def test_pipeline_lengths(self):
        block = self.make_block()
        lengths = {t: len(p.units) for t, p in block.pipelines.items()}
        assert lengths[TransformationId.STD_T1] == 1
        assert lengths[TransformationId.SEP_T3] == 3
        assert lengths[TransformationId.SEP_T5] == 3
        assert lengths[TransformationId.STD_T6] == 2
