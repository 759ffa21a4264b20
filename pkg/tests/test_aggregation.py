"""Online aggregation: clipping, losses, weight rules, streaming machine."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandcast.aggregation import (
    AggregateRun,
    BOAState,
    EWAState,
    ExpertPanel,
    LossSpec,
    OnlineAggregator,
    boa_update,
    clip_experts,
    gradient_trick_loss,
    online_aggregate,
)
from bandcast.errors import ConfigError, ProtocolError


# ---------------------------------------------------------------- clipping

def test_clip_experts_maps_infinities_to_bounds():
    out = clip_experts([-np.inf, -5.0, 0.3, 7.0, np.inf], (-2.0, 4.0))
    assert out.tolist() == [-2.0, -2.0, 0.3, 4.0, 4.0]


def test_clip_experts_rejects_bad_bounds_and_nan():
    with pytest.raises(ValueError, match="finite"):
        clip_experts([0.0], (-np.inf, 1.0))
    with pytest.raises(ValueError, match="lo < hi"):
        clip_experts([0.0], (2.0, 2.0))
    with pytest.raises(ValueError, match="NaN"):
        clip_experts([np.nan], (0.0, 1.0))


# ------------------------------------------------------- linearized losses

def test_gradient_trick_hand_values():
    preds = np.array([1.0, -2.0, 0.5])
    # truth above the aggregate: subgradient is -beta
    np.testing.assert_allclose(
        gradient_trick_loss(preds, agg_pred=0.0, y=3.0, beta=0.9), -0.9 * preds
    )
    # truth below: subgradient is 1 - beta
    np.testing.assert_allclose(
        gradient_trick_loss(preds, agg_pred=0.0, y=-3.0, beta=0.9), 0.1 * preds
    )


def test_gradient_trick_kink_uses_left_branch():
    # at y == agg_pred the subgradient convention is 1 - beta
    out = gradient_trick_loss([2.0], agg_pred=1.5, y=1.5, beta=0.25)
    np.testing.assert_allclose(out, [0.75 * 2.0])


def test_loss_spec_dispatch():
    preds = np.array([0.0, 4.0])
    spec = LossSpec(beta=0.5, gradient_trick=False)
    np.testing.assert_allclose(
        spec.expert_losses(preds, agg_pred=1.0, y=2.0),
        pinball := np.array([1.0, 1.0]),
    )
    assert pinball.shape == (2,)
    spec = LossSpec(beta=0.5, gradient_trick=True)
    np.testing.assert_allclose(
        spec.expert_losses(preds, agg_pred=1.0, y=2.0), -0.5 * preds
    )
    with pytest.raises(ValueError):
        LossSpec(beta=1.0)


# ------------------------------------------------------------- weight rules

def test_fresh_state_weights_equal_prior():
    st8 = BOAState.fresh(3)
    np.testing.assert_array_equal(st8.weights, [1 / 3] * 3)
    st8 = BOAState.fresh(2, prior=(0.25, 0.75))
    np.testing.assert_array_equal(st8.weights, [0.25, 0.75])


def test_fresh_state_validation():
    with pytest.raises(ConfigError):
        BOAState.fresh(0)
    with pytest.raises(ConfigError):
        BOAState.fresh(2, prior=(0.5, 0.6))
    with pytest.raises(ConfigError):
        BOAState.fresh(2, prior=(1.0, 0.0))


def test_boa_update_returns_weights_in_force():
    state = BOAState.fresh(2)
    w, nxt = boa_update(state, [1.0, 0.0])
    np.testing.assert_array_equal(w, [0.5, 0.5])
    assert nxt.step == 1
    w2, _ = boa_update(nxt, [1.0, 0.0])
    assert w2[1] > w2[0]


def test_update_rejects_bad_losses():
    state = BOAState.fresh(2)
    with pytest.raises(ValueError, match="2 losses"):
        state.update([1.0])
    with pytest.raises(ValueError, match="non-finite"):
        state.update([1.0, np.inf])


def test_weights_stay_on_simplex_under_rough_losses():
    rng = np.random.default_rng(5)
    state = BOAState.fresh(4)
    for _ in range(400):
        w = state.weights
        assert np.all(w >= 0)
        assert abs(float(w.sum()) - 1.0) <= 1e-12
        state = state.update(rng.normal(scale=50.0, size=4))


def test_weights_invariant_to_common_loss_shift():
    # regrets subtract the mixture loss, so a constant shift cancels
    rng = np.random.default_rng(11)
    losses = rng.normal(size=(60, 3))
    a, b = BOAState.fresh(3), BOAState.fresh(3)
    for t in range(60):
        a = a.update(losses[t])
        b = b.update(losses[t] + 7.5)
        np.testing.assert_allclose(a.weights, b.weights, rtol=0, atol=1e-10)


def test_single_expert_stays_at_one():
    state = BOAState.fresh(1)
    for loss in (0.3, -2.0, 100.0):
        w, state = boa_update(state, [loss])
        assert w.tolist() == [1.0]


def test_boa_serialization_round_trip_bitwise():
    rng = np.random.default_rng(3)
    state = BOAState.fresh(3, prior=(0.2, 0.3, 0.5))
    for _ in range(25):
        state = state.update(rng.normal(size=3))
    blob = json.dumps(state.to_dict())
    back = BOAState.from_dict(json.loads(blob))
    assert back == state
    np.testing.assert_array_equal(back.weights, state.weights)
    np.testing.assert_array_equal(
        back.update([1.0, 2.0, 3.0]).weights, state.update([1.0, 2.0, 3.0]).weights
    )


def test_boa_from_dict_rejects_unknown_format():
    with pytest.raises(ValueError, match="format"):
        BOAState.from_dict({"format": "bandcast.boa.v2"})


def test_ewa_matches_closed_form():
    losses = np.array([[1.0, 0.0], [0.5, 0.25], [2.0, 0.0]])
    state = EWAState.fresh(2, eta=0.7)
    for row in losses:
        state = state.update(row)
    L = losses.sum(axis=0)
    u = 0.5 * np.exp(-0.7 * (L - L.min()))
    np.testing.assert_allclose(state.weights, u / u.sum(), rtol=1e-15)


def test_ewa_validation():
    with pytest.raises(ConfigError):
        EWAState.fresh(2, eta=0.0)
    with pytest.raises(ConfigError):
        EWAState.fresh(0, eta=0.5)


def test_boa_and_ewa_agree_on_clear_winner():
    # expert 0 loses 1 every step, expert 1 loses 0: both rules should
    # park nearly all mass on expert 1
    boa, ewa = BOAState.fresh(2), EWAState.fresh(2, eta=0.5)
    for _ in range(200):
        boa = boa.update([1.0, 0.0])
        ewa = ewa.update([1.0, 0.0])
    assert boa.weights[1] > 0.95
    assert ewa.weights[1] > 0.95


# ------------------------------------------------------- streaming machine

def test_aggregator_protocol_enforced():
    agg = OnlineAggregator(2, LossSpec(beta=0.5))
    with pytest.raises(ProtocolError, match="before an aggregate"):
        agg.update(1.0)
    agg.predict([0.0, 1.0])
    with pytest.raises(ProtocolError, match="already issued"):
        agg.predict([0.0, 1.0])
    agg.update(1.0)
    agg.predict([0.0, 1.0])  # cycle restored


def test_aggregator_input_validation():
    agg = OnlineAggregator(2, LossSpec(beta=0.5), expert_ids=("a", "b"))
    with pytest.raises(ValueError, match="shape"):
        agg.predict([1.0])
    with pytest.raises(ValueError, match="'b'"):
        agg.predict([1.0, np.nan])
    with pytest.raises(ValueError, match="no clip bound"):
        agg.predict([1.0, np.inf])
    with pytest.raises(ConfigError):
        OnlineAggregator(3, LossSpec(beta=0.5), expert_ids=("a", "b"))
    with pytest.raises(ConfigError):
        OnlineAggregator(3, LossSpec(beta=0.5), state=BOAState.fresh(2))


def test_aggregator_clips_infinite_experts():
    agg = OnlineAggregator(2, LossSpec(beta=0.5), clip_bound=(-10.0, 10.0))
    out = agg.predict([np.inf, -np.inf])
    assert -10.0 <= out <= 10.0


def test_first_weights_are_prior_and_history_grows():
    agg = OnlineAggregator(3, LossSpec(beta=0.5))
    assert agg.weight_history.shape == (0, 3)
    agg.predict([1.0, 2.0, 3.0])
    agg.update(2.0)
    agg.predict([1.0, 2.0, 3.0])
    agg.update(2.0)
    hist = agg.weight_history
    assert hist.shape == (2, 3)
    np.testing.assert_array_equal(hist[0], [1 / 3] * 3)


@settings(max_examples=60, deadline=None)
@given(
    data=st.data(),
    n_experts=st.integers(min_value=1, max_value=5),
    n_steps=st.integers(min_value=1, max_value=30),
)
def test_aggregate_is_convex_combination(data, n_experts, n_steps):
    finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
    preds = np.array(
        data.draw(
            st.lists(
                st.lists(finite, min_size=n_experts, max_size=n_experts),
                min_size=n_steps,
                max_size=n_steps,
            )
        )
    )
    truths = np.array(data.draw(st.lists(finite, min_size=n_steps, max_size=n_steps)))
    agg = OnlineAggregator(n_experts, LossSpec(beta=0.7), clip_bound=(-1e6, 1e6))
    for t in range(n_steps):
        out = agg.predict(preds[t])
        assert preds[t].min() <= out <= preds[t].max()
        agg.update(truths[t])


def test_online_aggregate_matches_manual_loop():
    rng = np.random.default_rng(9)
    preds = rng.normal(size=(40, 3))
    truth = rng.normal(size=40)
    panel = ExpertPanel(expert_ids=("p", "q", "r"), preds=preds)
    run = online_aggregate(panel, truth, LossSpec(beta=0.8), clip_bound=(-5.0, 5.0))

    machine = OnlineAggregator(
        3, LossSpec(beta=0.8), clip_bound=(-5.0, 5.0), expert_ids=("p", "q", "r")
    )
    manual = np.array(
        [(machine.predict(preds[t]), machine.update(truth[t]))[0] for t in range(40)]
    )
    assert isinstance(run, AggregateRun)
    np.testing.assert_array_equal(run.aggregates, manual)
    np.testing.assert_array_equal(run.weights, machine.weight_history)
    assert run.weights.shape == (40, 3)


def test_expert_panel_validation():
    with pytest.raises(ValueError, match="n_steps, n_experts"):
        ExpertPanel(expert_ids=("a",), preds=np.zeros((3, 2)))
    with pytest.raises(ValueError, match="'b' at step 1"):
        ExpertPanel(expert_ids=("a", "b"), preds=[[0.0, 1.0], [0.0, np.nan]])
    panel = ExpertPanel(expert_ids=("a", "b"), preds=[[0.0, 1.0]])
    with pytest.raises(ValueError):
        panel.preds[0, 0] = 9.0


def test_online_aggregate_shape_checks():
    panel = ExpertPanel(expert_ids=("a", "b"), preds=np.zeros((5, 2)))
    with pytest.raises(ValueError, match=r"\(5,\)"):
        online_aggregate(panel, np.zeros(4), LossSpec(beta=0.5))


def test_dominant_expert_absorbs_weight_under_gradient_trick():
    # expert 0 tracks the truth's 0.8-quantile, expert 1 sits far below:
    # the linearized loss must push nearly all weight to expert 0
    rng = np.random.default_rng(21)
    n = 600
    truth = rng.uniform(2.0, 4.0, size=n)
    preds = np.column_stack([np.full(n, 3.6), np.full(n, -3.0)])
    run = online_aggregate(
        ExpertPanel(("good", "bad"), preds),
        truth,
        LossSpec(beta=0.8, gradient_trick=True),
        clip_bound=(-4.0, 5.0),
    )
    assert run.weights[-1, 0] > 0.99
    # aggregate pinball ends close to the better expert's
    from bandcast.models import pinball_loss

    agg_loss = pinball_loss(truth, run.aggregates, 0.8).mean()
    good_loss = pinball_loss(truth, preds[:, 0], 0.8).mean()
    assert agg_loss <= good_loss + 0.05 * 9.0
