from itertools import product

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rationale_lab.tasks import TaskFamilySpec, TaskSpecError, Vocabulary, all_instances, answer_of, golden_rationale, instance_at, instance_from_digits


def test_vocabulary_layout() -> None:
    """
    Digits come first, then EOS, PLUS, EQ, ANS, SEP.
    Only digits and EOS are emittable.
    """
    vocab = Vocabulary(3)
    assert (vocab.eos, vocab.plus, vocab.eq, vocab.ans, vocab.sep) == (3, 4, 5, 6, 7)
    assert vocab.size == 8
    assert vocab.output_size == 4
    assert vocab.role(1) == "digit(1)"
    assert vocab.role(6) == "ANS"
    with pytest.raises(KeyError):
        vocab.role(8)


def test_instance_encoding(task: TaskFamilySpec) -> None:
    inst = instance_from_digits(task, [2, 2])
    vocab = task.vocab
    assert inst.x == (2, vocab.plus, 2, vocab.eq)
    assert inst.y == 1
    assert inst.golden == (1, 1, vocab.eos)
    assert vocab.render(inst.x) == "2 + 2 ="


def test_golden_rationale_announces_partial_sums() -> None:
    """
    Three digits 1, 2, 2 in base 3 have partial sums 1, 0, 2.
    The golden rationale lists s_2 and s_3, repeats the answer, then ends with EOS.
    """
    assert golden_rationale([1, 2, 2], 3) == (0, 2, 2, 3)
    assert golden_rationale([2, 4, 3], 5) == (1, 4, 4, 5)
    assert golden_rationale([2], 3) == (2, 3)


@pytest.mark.parametrize(
    ("z", "expected"),
    [
        ((1, 2, 3), 2),
        ((3,), None),
        ((1, 2), None),
        ((1, 3, 2, 3), 1),
        ((0, 0, 0, 1, 3), 1),
    ],
)
def test_answer_of(z: tuple[int, ...], expected: int | None) -> None:
    assert answer_of(z, Vocabulary(3)) == expected


def test_answer_of_respects_t_max() -> None:
    """An EOS past ``t_max`` does not count."""
    assert answer_of((1, 2, 3), Vocabulary(3), t_max=2) is None
    assert answer_of((1, 3), Vocabulary(3), t_max=2) == 1


@given(st.integers(min_value=2, max_value=6).flatmap(lambda b: st.tuples(st.just(b), st.lists(st.integers(0, b - 1), min_size=1, max_size=4))))
def test_golden_rationale_reaches_the_answer(case: tuple[int, list[int]]) -> None:
    base, digits = case
    spec = TaskFamilySpec(base=base, chain_length=len(digits), max_rationale_len=len(digits) + 1)
    inst = instance_from_digits(spec, digits)
    assert len(inst.golden) == spec.golden_length
    assert answer_of(inst.golden, spec.vocab) == inst.y == sum(digits) % base


@pytest.mark.parametrize(
    "kwargs",
    [
        {"base": 1},
        {"base": 11},
        {"chain_length": 0},
        {"max_rationale_len": 1},
        {"family": "copy"},
        {"base": 10, "max_rationale_len": 7},
        {"chain_length": 3, "max_rationale_len": 3},
    ],
)
def test_task_spec_rejects_invalid(kwargs: dict) -> None:
    with pytest.raises(TaskSpecError):
        TaskFamilySpec(**kwargs)


def test_instance_from_digits_rejects_out_of_range(task: TaskFamilySpec) -> None:
    with pytest.raises(TaskSpecError):
        instance_from_digits(task, [3, 0])
    with pytest.raises(TaskSpecError):
        instance_from_digits(task, [1])


def test_instance_at_is_reproducible(task: TaskFamilySpec) -> None:
    a = [instance_at(task, 7, i) for i in range(20)]
    b = [instance_at(task, 7, i) for i in range(20)]
    assert a == b
    assert a != [instance_at(task, 8, i) for i in range(20)]


def test_all_instances_is_exhaustive_and_ordered(task: TaskFamilySpec) -> None:
    instances = all_instances(task)
    assert len(instances) == task.n_queries == 9
    assert [inst.digits for inst in instances[:3]] == [(0, 0), (0, 1), (0, 2)]
    assert len({inst.x for inst in instances}) == 9


def test_instances_cover_every_answer(task: TaskFamilySpec) -> None:
    ys = [instance_at(task, 3, i).y for i in range(300)]
    counts = np.bincount(ys, minlength=task.base)
    assert (counts > 50).all()


def test_golden_rationale_must_fit_in_max_rationale_len() -> None:
    with pytest.raises(TaskSpecError, match="golden"):
        TaskFamilySpec(base=3, chain_length=3, max_rationale_len=2)
    assert TaskFamilySpec(base=3, chain_length=3, max_rationale_len=4).golden_length == 4


def _valid_rationale_count(spec: TaskFamilySpec, y: int) -> int:
    # only complete sequences (digits then EOS) have an answer
    vocab = spec.vocab
    return sum(
        answer_of((*digits, vocab.eos), vocab) == y
        for k in range(spec.max_rationale_len)
        for digits in product(range(spec.base), repeat=k)
    )


@pytest.mark.parametrize(("base", "chain_length"), [(2, 1), (3, 1), (3, 2), (2, 3), (4, 2)])
def test_one_extra_token_gives_several_valid_rationales(base: int, chain_length: int) -> None:
    tight = TaskFamilySpec(base=base, chain_length=chain_length, max_rationale_len=chain_length + 1)
    roomy = TaskFamilySpec(base=base, chain_length=chain_length, max_rationale_len=chain_length + 2)
    for inst in all_instances(tight):
        assert _valid_rationale_count(tight, inst.y) >= 1
        assert _valid_rationale_count(roomy, inst.y) >= 2
