import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sglpt import autodiff as ad
from sglpt.autodiff import DegenerateInputError, Tensor
from sglpt.config import GlobalLossConfig, LocalLossConfig, PretrainConfig
from sglpt.graph import AugmentSpec, Graph
from sglpt.gnn import ModelState
from sglpt.optim import ContractViolation
from sglpt.pretrain import (DynamicQueue, NumericAbort, init_pretrain_state, local_loss, nt_xent, nt_xent_with_queue,
                            pretrain, pretrain_epoch, pretrain_step, queue_push, scaled_cosine_error)

import oracles

E = math.e
vec = arrays(np.float64, 3, elements=st.floats(-3, 3)).filter(lambda v: np.linalg.norm(v) > 1e-2)


def T(a):
    return Tensor(np.array(a, dtype=np.float64))


def small_cfg(**kw):
    base = PretrainConfig(batch_size=4, epochs=2, lr=1e-2, momentum=0.9,
                          local=LocalLossConfig(2.0, 0.5, 0.2), global_=GlobalLossConfig(1.0, 8),
                          aug1=AugmentSpec(0.2, 0.0), aug2=AugmentSpec(0.3, 0.2), seed=3)
    return replace(base, **kw)


# -- scaled cosine error --------------------------------------------------------------------

def test_sce_perfect_reconstruction_is_zero():
    x = np.random.default_rng(0).normal(size=(5, 3))
    for gamma in (1, 2, 3.5):
        assert scaled_cosine_error(x, T(x), gamma).item() == pytest.approx(0.0, abs=1e-12)


def test_sce_orthogonal_gamma_one():
    assert scaled_cosine_error([[1.0, 0.0]], T([[0.0, 1.0]]), 1).item() == pytest.approx(1.0)


def test_sce_derived_value():
    got = scaled_cosine_error([[1.0, 1.0]], T([[1.0, 0.0]]), 2).item()
    assert got == pytest.approx((1 - 1 / math.sqrt(2)) ** 2, abs=1e-12)
    assert got == pytest.approx(0.08578644, abs=1e-8)


def test_sce_empty_and_degenerate():
    assert scaled_cosine_error(np.zeros((0, 3)), T(np.zeros((0, 3))), 2).item() == 0.0
    with pytest.raises(DegenerateInputError):
        scaled_cosine_error([[0.0, 0.0]], T([[1.0, 0.0]]), 2)


@given(st.lists(st.tuples(vec, vec), min_size=1, max_size=6), st.floats(1, 4))
def test_sce_matches_oracle_and_bounds(rows, gamma):
    xs, xr = np.array([r[0] for r in rows]), np.array([r[1] for r in rows])
    got = scaled_cosine_error(xs, T(xr), gamma).item()
    assert got == pytest.approx(oracles.scaled_cosine_error(xs, xr, gamma), rel=1e-9, abs=1e-12)
    assert 0 <= got <= 2 ** gamma + 1e-12


# -- NT-Xent with queue ---------------------------------------------------------------------------

@given(vec, vec, st.floats(0.05, 5))
def test_nt_xent_single_pair_is_zero(a, b, tau):
    assert nt_xent_with_queue(T([a]), T([b]), None, tau).item() == pytest.approx(0.0, abs=1e-12)


def test_nt_xent_two_pairs():
    z = [[1.0, 0.0], [0.0, 1.0]]
    got = nt_xent_with_queue(T(z), T(z), DynamicQueue(4), 1.0).item()
    assert got == pytest.approx(-math.log(E / (E + 1)), abs=1e-12)
    assert got == pytest.approx(0.31326169, abs=1e-7)


def test_nt_xent_with_one_queue_row():
    z = [[1.0, 0.0], [0.0, 1.0]]
    q = DynamicQueue(4).push(np.array([[1.0, 0.0]]))
    l1 = -math.log(E / (2 * E + 1))
    assert l1 == pytest.approx(0.86199480, abs=1e-7)
    l2 = -math.log(E / (E + 2))
    got = nt_xent_with_queue(T(z), T(z), q, 1.0).item()
    assert got == pytest.approx((l1 + l2) / 2, abs=1e-12)
    assert got == pytest.approx(oracles.nt_xent(z, z, [[1.0, 0.0]], 1.0), abs=1e-12)
    per = nt_xent_with_queue(T(z), T(z), q, 1.0, reduction="none").data
    np.testing.assert_allclose(per, [l1, l2], atol=1e-12)
    with pytest.raises(ValueError, match="reduction"):
        nt_xent_with_queue(T(z), T(z), q, 1.0, reduction="sum")


@given(st.lists(st.tuples(vec, vec), min_size=1, max_size=5), st.lists(vec, max_size=4), st.floats(0.1, 4))
def test_nt_xent_matches_enumeration(pairs, queue, tau):
    z1, z2 = np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
    q = np.array(queue).reshape(-1, 3)
    got = nt_xent_with_queue(T(z1), T(z2), q, tau).item()
    assert got == pytest.approx(oracles.nt_xent(z1, z2, q, tau), rel=1e-9, abs=1e-12)
    assert got >= -1e-12


@given(st.lists(st.tuples(vec, vec), min_size=1, max_size=5), st.lists(vec, max_size=4), vec)
def test_adding_queue_row_never_decreases_loss(pairs, queue, extra):
    z1, z2 = T([p[0] for p in pairs]), T([p[1] for p in pairs])
    q = np.array(queue).reshape(-1, 3)
    before = nt_xent_with_queue(z1, z2, q, 1.0).item()
    after = nt_xent_with_queue(z1, z2, np.vstack([q, extra]), 1.0).item()
    assert after >= before - 1e-12


@given(st.lists(st.tuples(vec, vec), min_size=1, max_size=8), st.floats(0.1, 4))
def test_capacity_zero_equals_plain_nt_xent_bitwise(pairs, tau):
    z1, z2 = T([p[0] for p in pairs]), T([p[1] for p in pairs])
    q = DynamicQueue(0).push(np.ones((5, 3)))
    assert len(q) == 0
    assert nt_xent_with_queue(z1, z2, q, tau).data.tobytes() == nt_xent(z1, z2, tau).data.tobytes()


def test_nt_xent_errors():
    with pytest.raises(DegenerateInputError):
        nt_xent_with_queue(T([[0.0, 0.0]]), T([[1.0, 0.0]]), None, 1.0)
    with pytest.raises(ValueError):
        nt_xent_with_queue(T([[1.0, 0.0]]), T([[1.0, 0.0]]), None, 0.0)


def test_queue_rows_carry_no_gradient():
    z1 = Tensor(np.array([[1.0, 0.5], [0.2, 1.0]]), requires_grad=True)
    z2 = Tensor(np.array([[0.9, 0.4], [0.1, 1.0]]), requires_grad=True)
    q = DynamicQueue(4).push(z2)
    z2.data[...] = 0.0  # the queue holds a copy, not a view
    assert np.all(q.rows != 0)
    grads = ad.backward(nt_xent_with_queue(z1, T(np.ones((2, 2))), q, 1.0), {"z1": z1, "z2": z2})
    np.testing.assert_array_equal(grads["z2"], 0.0)


# -- queue -------------------------------------------------------------------------------------

def test_queue_fifo_example():
    q = DynamicQueue(4)
    a, b, c = (np.full((2, 1), v) for v in (1.0, 2.0, 3.0))
    for rows in (a, b, c):
        queue_push(q, rows)
    np.testing.assert_array_equal(q.rows[:, 0], [2, 2, 3, 3])


def test_queue_capacity_zero_stays_empty():
    q = DynamicQueue(0)
    q.push(np.ones((3, 2)))
    assert len(q) == 0


def test_queue_evicts_exactly_the_oldest():
    q = DynamicQueue(1024)
    ids = np.arange(1032, dtype=float)[:, None]
    for s in range(0, 1032, 64):
        q.push(ids[s:s + 64])
    np.testing.assert_array_equal(q.rows[:, 0], np.arange(8, 1032))


def test_queue_width_mismatch():
    q = DynamicQueue(4).push(np.ones((1, 3)))
    with pytest.raises(ContractViolation):
        q.push(np.ones((1, 2)))


@given(st.integers(0, 12), st.lists(st.integers(0, 7), max_size=20))
def test_queue_holds_last_rows_in_order(cap, sizes):
    q, pushed, k = DynamicQueue(cap, 1), [], 0
    for s in sizes:
        rows = np.arange(k, k + s, dtype=float)[:, None]
        k += s
        pushed.extend(rows[:, 0])
        q.push(rows)
    want = pushed[-cap:] if cap and pushed else []
    np.testing.assert_array_equal(q.rows[:, 0], want)


# -- training loop -------------------------------------------------------------------------------

def _snap(params):
    return {k: v.data.copy() for k, v in params.items()}


def test_lambda_one_leaves_projector_untouched(graphs):
    model = ModelState(4, 8, 2, seed=0)
    before = _snap(model.projector_params())
    step = pretrain_step(model, graphs[:4], small_cfg(lambda_pre=1.0), DynamicQueue(8), np.random.default_rng(0))
    grads = ad.backward(step.loss, model.projector_params())
    assert all(np.all(g == 0) for g in grads.values())
    pretrain(model, graphs, small_cfg(lambda_pre=1.0))
    after = _snap(model.projector_params())
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_lambda_zero_leaves_decoder_untouched(graphs):
    model = ModelState(4, 8, 2, seed=0)
    before = _snap(model.decoder_params())
    step = pretrain_step(model, graphs[:4], small_cfg(lambda_pre=0.0), DynamicQueue(8), np.random.default_rng(0))
    grads = ad.backward(step.loss, model.decoder_params())
    assert all(np.all(g == 0) for g in grads.values())
    pretrain(model, graphs, small_cfg(lambda_pre=0.0))
    assert all(np.array_equal(before[k], v) for k, v in _snap(model.decoder_params()).items())


def test_default_lambda_logs_positive_components(graphs):
    model = ModelState(4, 8, 2, seed=0)
    hist = pretrain(model, graphs, small_cfg(lambda_pre=0.5))
    for m in hist:
        assert m["loss_local"] > 0 and m["loss_global"] > 0
        assert m["loss_pre"] == pytest.approx(0.5 * m["loss_local"] + 0.5 * m["loss_global"], rel=1e-12)


def test_queue_persists_across_epochs(graphs):
    model = ModelState(4, 8, 2, seed=0)
    cfg = small_cfg(global_=GlobalLossConfig(1.0, 1000))
    hist = pretrain(model, graphs, replace(cfg, epochs=3))
    assert [m["queue_fill"] for m in hist] == [12.0, 24.0, 36.0]


def test_ema_moves_target_toward_online(graphs):
    model = ModelState(4, 8, 2, seed=0)
    tgt, onl = model.target_pairs()
    t0 = {k: v.data.copy() for k, v in tgt.items()}
    state = init_pretrain_state(model, small_cfg())
    pretrain_epoch(model, graphs, small_cfg(), state)
    moved = [k for k in tgt if not np.array_equal(tgt[k].data, t0[k])]
    assert moved and all(np.all(np.isfinite(tgt[k].data)) for k in tgt)


def test_epoch_is_deterministic(graphs):
    runs = []
    for _ in range(2):
        model = ModelState(4, 8, 2, seed=5)
        runs.append((pretrain(model, graphs, small_cfg()), model.state_dict()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])


def test_nan_loss_aborts_with_diagnostics(graphs):
    bad = graphs[:3] + [Graph(np.full((3, 4), np.nan), [(0, 1)], 0, 99)]
    with pytest.raises(NumericAbort) as info:
        with np.errstate(all="ignore"):
            pretrain(ModelState(4, 8, 2, seed=0), bad, small_cfg(epochs=1))
    assert info.value.seed == 3 and ":" in info.value.batch_id


def test_zero_feature_rows_are_excluded_and_counted():
    x_true = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    x_rec = T([[5.0, 5.0], [1.0, 1.0], [0.0, 2.0], [1.0, 0.0]])
    loss, excluded = local_loss(x_true, x_rec, np.array([0, 1, 2, 3]), 2.0)
    assert excluded == 2
    assert loss.item() == pytest.approx(oracles.scaled_cosine_error(x_true[1:3], x_rec.data[1:3], 2.0))
