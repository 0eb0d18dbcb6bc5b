import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cft import numerics as nx
from helpers import OP_CASES, grad_check

pytestmark = pytest.mark.usefixtures("float64")


@pytest.mark.parametrize("name, build", OP_CASES)
def test_op_gradients_match_central_differences(name, build, gen):
    inputs, fn = build(gen)
    assert grad_check(fn, *inputs) < 1e-6, name


def test_relu_gradient_away_from_kink(gen):
    x = (torch.rand(10, generator=gen) + 0.1) * torch.tensor([1.0, -1.0] * 5)
    x.requires_grad_(True)
    assert grad_check(lambda t: nx.relu(t).pow(2).sum(), x) < 1e-8


@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, shift):
    t = torch.as_tensor(x)
    p = nx.softmax(t, axis=-1)
    assert torch.allclose(p.sum(-1), torch.ones(3))
    assert torch.allclose(nx.softmax(t + shift, axis=-1), p, atol=1e-12)


def test_masked_softmax_zeroes_masked_keys():
    x = torch.randn(4, 6)
    mask = torch.tensor([True, False, True, True, False, True])
    p = nx.softmax(x, mask=mask)
    assert torch.all(p[:, ~mask] == 0)
    assert torch.allclose(p.sum(-1), torch.ones(4))


def test_fully_masked_row_is_non_finite():
    with pytest.raises(nx.NonFiniteError):
        nx.softmax(torch.randn(2, 3), mask=torch.zeros(3, dtype=torch.bool))


def test_layer_norm_statistics():
    x = torch.randn(5, 16) * 3 + 2
    y = nx.layer_norm(x)
    assert torch.allclose(y.mean(-1), torch.zeros(5), atol=1e-12)
    assert torch.allclose(y.var(-1, unbiased=False), torch.ones(5), atol=1e-4)
    with pytest.raises(ValueError):
        nx.layer_norm(x, torch.ones(3))


def test_non_finite_raises_immediately():
    with pytest.raises(nx.NonFiniteError):
        nx.add(torch.tensor([1.0]), torch.tensor([math.inf]))
    with pytest.raises(nx.NonFiniteError):
        nx.tensor([0.0, math.nan])
    with pytest.raises(nx.NonFiniteError):
        nx.matmul(torch.full((2, 2), 1e308), torch.full((2, 2), 1e308))


def test_non_finite_checks_can_be_disabled():
    with nx.finite_checks(False):
        out = nx.add(torch.tensor([1.0]), torch.tensor([math.inf]))
    assert math.isinf(out.item())
    assert nx.finite_checks_enabled()


def test_shape_errors():
    with pytest.raises(ValueError):
        nx.matmul(torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(ValueError):
        nx.matmul(torch.ones(2, 2, 3), torch.ones(3, 3, 4))
    with pytest.raises(ValueError):
        nx.linear(torch.ones(2, 3), torch.ones(4, 5))
    with pytest.raises(ValueError):
        nx.add(torch.ones(2, 3), torch.ones(4))
    with pytest.raises(IndexError):
        nx.softmax(torch.ones(2, 3), axis=2)
    with pytest.raises(ValueError):
        nx.concat([])
    with pytest.raises(ValueError):
        nx.concat([torch.ones(2, 3), torch.ones(3, 3)], axis=-1)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(1, 3))
def test_concat_round_trip(widths, rows):
    parts = [torch.randn(rows, w) for w in widths]
    joined = nx.concat(parts, axis=-1)
    for a, b in zip(torch.split(joined, widths, dim=-1), parts):
        assert torch.equal(a, b)


def test_counter_records_matmul_mul_adds():
    with nx.counting() as c:
        nx.matmul(torch.ones(2, 3, 4), torch.ones(4, 5), label="mm")
        nx.matmul(torch.ones(3, 4), torch.ones(4, 5), label="mm", valid=7)
        nx.linear(torch.ones(6, 4), torch.ones(2, 4), label="lin")
    assert c.mul_adds == {"mm": 2 * 3 * 4 * 5 + 3 * 4 * 5, "lin": 6 * 4 * 2}
    assert c.valid_mul_adds["mm"] == 2 * 3 * 4 * 5 + 7
    assert c.total("mm") == 180
    assert c.total() == 228
    c.reset()
    assert c.empty


def test_counters_nest_and_are_inactive_outside():
    nx.matmul(torch.ones(2, 2), torch.ones(2, 2))
    with nx.counting() as outer:
        with nx.counting() as inner:
            nx.matmul(torch.ones(2, 2), torch.ones(2, 2))
        nx.matmul(torch.ones(1, 2), torch.ones(2, 2))
    assert inner.total() == 8 and outer.total() == 4
    assert nx.active_counter() is None
    with pytest.raises(ValueError):
        outer.add("x", -1)


def test_backward_needs_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ValueError):
        nx.backward(x * 2)
    nx.backward((x * 2).sum())
    assert torch.equal(x.grad, torch.full((3,), 2.0))


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": torch.randn(2, 3), "b": torch.arange(5, dtype=torch.int64), "c": torch.randn(4).float()}
    path = tmp_path / "ck.json"
    nx.save_checkpoint(path, tensors, {"note": "x"})
    back, meta = nx.load_checkpoint(path)
    assert meta == {"note": "x"}
    for k, t in tensors.items():
        assert back[k].dtype == t.dtype and torch.equal(back[k], t)


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other", "version": 1}')
    with pytest.raises(ValueError):
        nx.load_checkpoint(p)
    p.write_text('{"format": "cft-checkpoint", "version": 99}')
    with pytest.raises(ValueError, match="version"):
        nx.load_checkpoint(p)
    p.write_text('{"format": "cft-checkpoint", "version": 1, "tensors": {"a": {"shape": [3], "dtype": "float64", "data": [1, 2]}}}')
    with pytest.raises(ValueError, match="length"):
        nx.load_checkpoint(p)


def test_seeded_generators_repeat():
    assert torch.equal(torch.randn(4, generator=nx.seeded(3)), torch.randn(4, generator=nx.seeded(3)))
