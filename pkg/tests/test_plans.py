import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from latentplan import vocab
from latentplan.plans import (
    PlanConfigError,
    PlanOverflowError,
    VariablePlan,
    VariableSpan,
    cosine,
    embed_plan,
    embed_text,
    encode_prompt,
    make_projection,
    pool,
    split,
)
from latentplan.seeding import torch_generator
from latentplan.tasks import ToyEmbedder

TEXT = st.text(alphabet=vocab.SYMBOLS, min_size=1, max_size=60)


@pytest.fixture(scope="module")
def enc():
    return ToyEmbedder(d_e=16, seed=3)


@pytest.fixture(scope="module")
def proj(enc):
    return make_projection(enc.embedding_dim, 24, torch_generator(0, "proj-test"))


def test_split_basic():
    spans = split("ab\ncd\tef", 8)
    assert [s.text for s in spans] == ["ab", "cd", "ef"]
    assert [s.index for s in spans] == [0, 1, 2]


def test_split_collapses_empty_segments():
    spans = split("\n\nab\n\n\ncd\n", 8)
    assert [s.text for s in spans] == ["ab", "cd"]


def test_split_overflow():
    with pytest.raises(PlanOverflowError):
        split("a\nb\nc", 2)


def test_split_rejects_empty_and_delimiter_only():
    with pytest.raises(ValueError):
        split("", 4)
    with pytest.raises(ValueError):
        split("\n\t\n", 4)


@given(TEXT)
def test_split_preserves_content(text):
    try:
        spans = split(text, 64)
    except ValueError:
        assert all(ch in "\n\t" for ch in text)
        return
    joined = "".join(s.text for s in spans)
    stripped = text.replace("\n", "").replace("\t", "")
    assert joined == stripped


def test_pool_is_mean():
    states = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(pool(states).numpy(), [2.0, 3.0])


def test_pool_rejects_empty():
    with pytest.raises(ValueError):
        pool(torch.zeros(0, 4))


def test_embed_plan_layout(enc, proj):
    spans = split("abc\nde", 4)
    plan = embed_plan(spans, enc, proj, n_max=4)
    assert plan.V.shape == (4, 24)
    assert plan.n == 2
    assert torch.all(plan.V[2:] == 0)
    assert plan.s.tolist() == [1.0, 1.0, 0.0, 0.0]


def test_embed_plan_row_equals_embed_text(enc, proj):
    spans = split("abc\nde", 4)
    plan = embed_plan(spans, enc, proj, n_max=4)
    row0 = embed_text(vocab.encode("abc"), enc, proj)
    assert torch.allclose(plan.V[0], row0, atol=1e-6)


def test_embed_plan_dim_mismatch(enc):
    bad = make_projection(enc.embedding_dim + 1, 8, torch_generator(0, "bad"))
    with pytest.raises(PlanConfigError):
        embed_plan(split("ab", 2), enc, bad, n_max=2)


def test_span_standalone_matches_prompt_segment(enc, proj):
    """A span embedded alone must equal the same segment's prompt state."""
    prompt = "abc\nxyz\nqq"
    states = encode_prompt(vocab.encode(prompt), enc, proj)
    plan = embed_plan(split(prompt, 4), enc, proj, n_max=4)
    assert states.shape == (3, 24)
    assert torch.allclose(plan.V[:3], states, atol=1e-5)


def test_embed_text_empty_is_zero(enc, proj):
    v = embed_text([], enc, proj)
    assert v.shape == (24,)
    assert torch.all(v == 0)


def test_encode_prompt_one_state_per_segment(enc, proj):
    states = encode_prompt(vocab.encode("abcd"), enc, proj)
    assert states.shape == (1, 24)
    states = encode_prompt(vocab.encode("ab\ncd\tef\n"), enc, proj)
    assert states.shape == (3, 24)


def test_encode_prompt_rejects_empty(enc, proj):
    with pytest.raises(ValueError):
        encode_prompt([], enc, proj)
    with pytest.raises(ValueError):
        encode_prompt(vocab.encode("\n\n"), enc, proj)


def test_cosine_zero_norm():
    assert cosine(torch.zeros(4), torch.ones(4)) == 0.0


def test_cosine_parallel_and_orthogonal():
    a = torch.tensor([1.0, 0.0])
    assert cosine(a, 3 * a) == pytest.approx(1.0)
    assert cosine(a, torch.tensor([0.0, 2.0])) == pytest.approx(0.0)


def test_variable_plan_validation():
    with pytest.raises(ValueError):
        VariablePlan(V=torch.zeros(4, 8), s=torch.tensor([1.0, 1.0, 0.0, 0.0]), n=3)
    with pytest.raises(ValueError):
        VariablePlan(V=torch.ones(4, 8), s=torch.tensor([1.0, 1.0, 1.0, 0.0]), n=3)
    plan = VariablePlan(V=torch.zeros(4, 8), s=torch.tensor([1.0, 1.0, 1.0, 0.0]), n=3)
    assert plan.active_rows().shape == (3, 8)


def test_variable_span_rejects_delimiters():
    with pytest.raises(ValueError):
        VariableSpan(tokens=(0, vocab.NEWLINE_ID), index=0)


def test_make_projection_seeded():
    a = make_projection(8, 4, torch_generator(0, "p"))
    b = make_projection(8, 4, torch_generator(0, "p"))
    assert torch.equal(a.weight, b.weight)
    assert torch.all(a.bias == 0)
