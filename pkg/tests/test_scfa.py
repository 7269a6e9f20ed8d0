import logging

import numpy as np
import pytest

from pointdg.autodiff import ShapeError, Tensor, apply_primitive as P, backward, finite_difference_check
from pointdg.data import IndexPlan
from pointdg.rng import Rng
from pointdg.scfa import SCFA, aggregate, assemble_sequence, select_partner


def identity_scfa(width=1):
    m = SCFA(width, 1, Rng(0))
    eye = np.eye(width)
    for mlp in (m.mlp1, m.mlp2):
        for lin in (mlp.fc1, mlp.fc2):
            lin.weight.data[:] = eye
            lin.bias.data[:] = 0.0
    m.conv.weight.data[:] = eye[None]
    m.conv.bias.data[:] = 0.0
    return m


def three_domain_plan():
    entries = {(d, c): np.arange(4) + 10 * d for d in range(3) for c in range(2)}
    return IndexPlan(entries, {0: [0, 1, 2], 1: [0, 1, 2]}, {0: 4, 1: 4})


def test_identity_networks_reduce_to_product():
    m = identity_scfa()
    assert aggregate(m, Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]
    assert aggregate(m, Tensor([[2.0]]), Tensor([[0.0]])).data.tolist() == [[0.0]]


def test_zero_partner_annihilates(rng):
    m = identity_scfa(4)
    f1 = np.abs(rng.normal(size=(5, 4)))
    np.testing.assert_array_equal(aggregate(m, Tensor(f1), Tensor(np.zeros((5, 4)))).data, 0.0)


def test_aggregate_shape_mismatch(rng):
    m = SCFA(4, 5, Rng(1))
    with pytest.raises(ShapeError):
        aggregate(m, Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(4, 4))))


def test_aggregate_gradients(rng):
    m = SCFA(4, 5, Rng(2), kernel=3)
    f1 = Tensor(rng.normal(size=(2, 5, 4)))
    f2 = Tensor(rng.normal(size=(2, 5, 4)))
    w = Tensor(rng.normal(size=(2, 5, 4)))
    loss = lambda: P("sum", aggregate(m, f1, f2) * w)
    assert finite_difference_check(loss, m.parameters()) < 1e-5
    assert finite_difference_check(lambda t: P("sum", aggregate(m, t, f2) * w), f1) < 1e-5
    assert finite_difference_check(lambda t: P("sum", aggregate(m, f1, t) * w), f2) < 1e-5


def test_assemble_shape_and_slices(rng):
    f1, fp, fg = (rng.normal(size=(4, 8)) for _ in range(3))
    F, bounds = assemble_sequence(f1, fp, fg)
    assert F.shape == (12, 8)
    assert bounds == [(0, 4), (4, 8), (8, 12)]
    for (a, b), blk in zip(bounds, (f1, fp, fg)):
        np.testing.assert_array_equal(F.data[a:b], blk)
    with pytest.raises(ShapeError):
        assemble_sequence(f1, fp, rng.normal(size=(3, 8)))


def test_assemble_prompt_gradient_is_ones(rng):
    fg = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    F, _ = assemble_sequence(rng.normal(size=(4, 8)), rng.normal(size=(4, 8)), fg)
    backward(P("sum", F))
    np.testing.assert_array_equal(fg.grad, np.ones((4, 8)))


def test_prompt_gets_gradient_from_every_sample(rng):
    m = SCFA(4, 3, Rng(3))
    f = Tensor(rng.normal(size=(5, 3, 4)))
    backward(P("sum", m(f, f)))
    np.testing.assert_array_equal(m.global_prompt.grad, np.full((3, 4), 5.0))
    assert np.std(m.global_prompt.data) < 0.1


def test_module_layout_and_variants(rng):
    f1, f2 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 3, 4))
    full = SCFA(4, 3, Rng(4))
    assert full(Tensor(f1), Tensor(f2)).shape == (2, 9, 4)
    s = SCFA(4, 3, Rng(4), aggregation="sum")
    np.testing.assert_array_equal(s(Tensor(f1), Tensor(f2)).data[:, 3:6], f1 + f2)
    c = SCFA(4, 3, Rng(4), aggregation="concat", global_prompt=False)
    out = c(Tensor(f1), Tensor(f2)).data
    assert c.n_blocks == 2 and out.shape == (2, 6, 4)
    np.testing.assert_array_equal(out[:, 3:], f2)
    with pytest.raises(ValueError):
        SCFA(4, 3, Rng(4), aggregation="fda")


def test_partner_infer_is_self():
    assert select_partner(2, 1, 7, None, "infer") == (2, 7)


def test_partner_train_other_domain():
    plan = three_domain_plan()
    r = Rng(5)
    seen = set()
    for _ in range(300):
        for dom in range(3):
            d, idx = select_partner(dom, 1, 0, plan, "train", r)
            assert d != dom and idx in plan.entries[(d, 1)]
            seen.add(d)
    assert seen == {0, 1, 2}


def test_partner_deterministic():
    plan = three_domain_plan()
    r1, r2 = Rng(6), Rng(6)
    a = [select_partner(i % 3, 0, 0, plan, "train", r1) for i in range(50)]
    b = [select_partner(i % 3, 0, 0, plan, "train", r2) for i in range(50)]
    assert a == b


def test_partner_single_domain_fallback(caplog):
    plan = IndexPlan({(1, 0): np.array([3, 4])}, {0: [1]}, {0: 2})
    with caplog.at_level(logging.WARNING):
        d, idx = select_partner(1, 0, 3, plan, "train", Rng(7))
    assert d == 1 and idx in (3, 4)
    assert "pairing within the domain" in caplog.text


def test_partner_errors():
    with pytest.raises(ValueError):
        select_partner(0, 0, 0, None, "train", Rng(0))
    with pytest.raises(ValueError):
        select_partner(0, 0, 0, None, "eval")
