"""Online aggregation of expert forecasts under pinball loss.

The default weight rule is a second-order bound-aware scheme with one
adaptive learning rate per expert (Bernstein-style online aggregation):
track each expert's instantaneous regret r = (w . losses) - loss_k, its
running range E_k = max |r| and second moment V_k = sum r^2, set

    eta_k = min( 1 / (2 E_k), sqrt( ln(1/prior_k) / V_k ) ),

accumulate the regularized regret R_k += r_k - eta_k * r_k^2, and weight

    w_k  proportional to  eta_k * exp(eta_k * R_k) * prior_k.

Because the rule acts on regrets, it is invariant to adding a common
constant to all losses. Its learning rates need bounded losses, which is
why expert predictions are clipped before weighting. An exponentially
weighted average rule with a fixed learning rate lives behind the same
contract as a cross-check in tests.

All rule states are immutable; updates return new states, so any weight
trajectory can be replayed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ProtocolError
from .models import check_level, pinball_loss

__all__ = [
    "LossSpec",
    "ExpertPanel",
    "BOAState",
    "EWAState",
    "OnlineAggregator",
    "AggregateRun",
    "clip_experts",
    "gradient_trick_loss",
    "boa_update",
    "online_aggregate",
]

# Finite stand-in for an unconstrained learning rate (E = V = 0 so far).
# Kept finite so eta * r^2 is 0, not NaN, while r stays 0.
_ETA_CAP = 1e12


def clip_experts(preds, bound) -> np.ndarray:
    """Clamp expert predictions into the finite interval `bound`.

    Infinite predictions map to the respective bound; the bound itself
    must be finite and non-degenerate.
    """
    lo, hi = float(bound[0]), float(bound[1])
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"clip bound must be finite, got ({lo}, {hi})")
    if not lo < hi:
        raise ValueError(f"clip bound must satisfy lo < hi, got ({lo}, {hi})")
    preds = np.asarray(preds, dtype=float)
    if np.isnan(preds).any():
        raise ValueError("expert predictions contain NaN")
    return np.clip(preds, lo, hi)


def gradient_trick_loss(expert_preds, agg_pred: float, y: float, beta: float) -> np.ndarray:
    """Linearized pinball losses g * f_k at the aggregated prediction.

    g = 1{y <= agg_pred} - beta is the pinball subgradient at the
    aggregate; at the kink y == agg_pred the value is 1 - beta. Feeding
    these to a weight rule makes aggregation of the convex pinball loss
    behave like aggregation of a linear one.
    """
    beta = check_level(beta)
    g = (1.0 if y <= agg_pred else 0.0) - beta
    return g * np.asarray(expert_preds, dtype=float)


def _check_losses(losses, k: int, expert_ids=None) -> np.ndarray:
    losses = np.asarray(losses, dtype=float)
    if losses.shape != (k,):
        raise ValueError(f"expected {k} losses, got shape {losses.shape}")
    bad = np.nonzero(~np.isfinite(losses))[0]
    if bad.size:
        j = int(bad[0])
        name = expert_ids[j] if expert_ids is not None else f"#{j}"
        raise ValueError(f"non-finite loss for expert {name}")
    return losses


def _simplex(w: np.ndarray) -> np.ndarray:
    if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-12:
        raise AssertionError(f"weights left the simplex: {w}")
    return w


@dataclass(frozen=True)
class BOAState:
    """Immutable snapshot of the second-order aggregation rule.

    Weights are a pure function of the snapshot, so `weights` computed
    before and after serialization agree bitwise.
    """

    prior: tuple[float, ...]
    range_: tuple[float, ...]
    second_moment: tuple[float, ...]
    regret: tuple[float, ...]
    step: int = 0

    @classmethod
    def fresh(cls, n_experts: int, prior=None) -> "BOAState":
        if n_experts < 1:
            raise ConfigError("need at least one expert")
        if prior is None:
            prior = (1.0 / n_experts,) * n_experts
        prior = tuple(float(p) for p in prior)
        if len(prior) != n_experts or any(p <= 0 for p in prior) or abs(sum(prior) - 1.0) > 1e-9:
            raise ConfigError("prior must be a positive probability vector")
        zero = (0.0,) * n_experts
        return cls(prior=prior, range_=zero, second_moment=zero, regret=zero)

    @property
    def n_experts(self) -> int:
        return len(self.prior)

    def _rates(self, E: np.ndarray, V: np.ndarray) -> np.ndarray:
        lnp = np.log(1.0 / np.asarray(self.prior))
        inv2e = np.where(E > 0.0, 1.0 / (2.0 * np.where(E > 0.0, E, 1.0)), _ETA_CAP)
        sq = np.where(
            V > 0.0,
            np.sqrt(lnp / np.where(V > 0.0, V, 1.0)),
            np.where(lnp == 0.0, 0.0, _ETA_CAP),
        )
        return np.minimum(inv2e, sq)

    @property
    def weights(self) -> np.ndarray:
        prior = np.asarray(self.prior)
        eta = self._rates(np.asarray(self.range_), np.asarray(self.second_moment))
        expo = eta * np.asarray(self.regret)
        u = eta * np.exp(expo - expo.max()) * prior
        s = float(u.sum())
        if not math.isfinite(s) or s <= 0.0:
            # all rates zero (e.g. a single expert) or total underflow:
            # fall back to the prior
            return _simplex(prior.copy())
        return _simplex(u / s)

    def update(self, losses) -> "BOAState":
        losses = _check_losses(losses, self.n_experts)
        w = self.weights
        r = float(w @ losses) - losses
        E = np.maximum(np.asarray(self.range_), np.abs(r))
        V = np.asarray(self.second_moment) + r * r
        eta = self._rates(E, V)
        R = np.asarray(self.regret) + r - eta * r * r
        return BOAState(
            prior=self.prior,
            range_=tuple(E.tolist()),
            second_moment=tuple(V.tolist()),
            regret=tuple(R.tolist()),
            step=self.step + 1,
        )

    def to_dict(self) -> dict:
        return {
            "format": "bandcast.boa.v1",
            "prior": list(self.prior),
            "range": list(self.range_),
            "second_moment": list(self.second_moment),
            "regret": list(self.regret),
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BOAState":
        if d.get("format") != "bandcast.boa.v1":
            raise ValueError(f"unsupported rule format {d.get('format')!r}")
        return cls(
            prior=tuple(d["prior"]),
            range_=tuple(d["range"]),
            second_moment=tuple(d["second_moment"]),
            regret=tuple(d["regret"]),
            step=int(d["step"]),
        )


def boa_update(state: BOAState, losses) -> tuple[np.ndarray, BOAState]:
    """One aggregation step: returns (weights used, advanced state).

    The returned weights are the ones in force when `losses` arrived,
    i.e. a function of strictly earlier data.
    """
    w = state.weights
    return w, state.update(losses)


@dataclass(frozen=True)
class EWAState:
    """Exponentially weighted average with a fixed learning rate.

    Cross-check rule: same contract as BOAState, far simpler math.
    """

    prior: tuple[float, ...]
    eta: float
    cum_loss: tuple[float, ...]
    step: int = 0

    @classmethod
    def fresh(cls, n_experts: int, eta: float, prior=None) -> "EWAState":
        if n_experts < 1:
            raise ConfigError("need at least one expert")
        if eta <= 0:
            raise ConfigError("eta must be > 0")
        if prior is None:
            prior = (1.0 / n_experts,) * n_experts
        return cls(prior=tuple(float(p) for p in prior), eta=float(eta),
                   cum_loss=(0.0,) * n_experts)

    @property
    def n_experts(self) -> int:
        return len(self.prior)

    @property
    def weights(self) -> np.ndarray:
        L = np.asarray(self.cum_loss)
        u = np.asarray(self.prior) * np.exp(-self.eta * (L - L.min()))
        return _simplex(u / u.sum())

    def update(self, losses) -> "EWAState":
        losses = _check_losses(losses, self.n_experts)
        L = np.asarray(self.cum_loss) + losses
        return EWAState(prior=self.prior, eta=self.eta,
                        cum_loss=tuple(L.tolist()), step=self.step + 1)


@dataclass(frozen=True)
class LossSpec:
    """Loss the aggregation engine optimizes: pinball level + trick flag."""

    beta: float
    gradient_trick: bool = True

    def __post_init__(self):
        check_level(self.beta)

    def expert_losses(self, expert_preds: np.ndarray, agg_pred: float, y: float) -> np.ndarray:
        if self.gradient_trick:
            return gradient_trick_loss(expert_preds, agg_pred, y, self.beta)
        return pinball_loss(y, expert_preds, self.beta)


@dataclass(frozen=True)
class ExpertPanel:
    """Batch view of an expert stream: one row per step, column per expert."""

    expert_ids: tuple[str, ...]
    preds: np.ndarray

    def __post_init__(self):
        preds = np.asarray(self.preds, dtype=float)
        if preds.ndim != 2 or preds.shape[1] != len(self.expert_ids):
            raise ValueError("preds must be (n_steps, n_experts)")
        if np.isnan(preds).any():
            step, j = map(int, np.argwhere(np.isnan(preds))[0])
            raise ValueError(
                f"missing prediction for expert {self.expert_ids[j]!r} at step {step}"
            )
        preds.flags.writeable = False
        object.__setattr__(self, "preds", preds)


class OnlineAggregator:
    """Single-writer streaming machine for one (level, bound) aggregation.

    Strict cycle: predict(expert_preds) -> update(truth). Weights used at
    each step depend only on strictly earlier truths.
    """

    def __init__(self, n_experts: int, loss: LossSpec,
                 clip_bound=None, state=None, expert_ids=None):
        self.loss = loss
        self.clip_bound = tuple(map(float, clip_bound)) if clip_bound is not None else None
        self.expert_ids = tuple(expert_ids) if expert_ids is not None else tuple(
            f"expert_{k}" for k in range(n_experts)
        )
        if len(self.expert_ids) != n_experts:
            raise ConfigError("expert_ids length must match n_experts")
        self.state = state if state is not None else BOAState.fresh(n_experts)
        if self.state.n_experts != n_experts:
            raise ConfigError("rule state does not match n_experts")
        self._weight_history: list[np.ndarray] = []
        self._pending = None

    @property
    def n_experts(self) -> int:
        return self.state.n_experts

    @property
    def weight_history(self) -> np.ndarray:
        if not self._weight_history:
            return np.empty((0, self.n_experts))
        return np.vstack(self._weight_history)

    def predict(self, expert_preds) -> float:
        if self._pending is not None:
            raise ProtocolError("aggregate already issued; call update() first")
        preds = np.asarray(expert_preds, dtype=float)
        if preds.shape != (self.n_experts,):
            raise ValueError(
                f"expected {self.n_experts} expert predictions, got shape {preds.shape}"
            )
        if np.isnan(preds).any():
            j = int(np.nonzero(np.isnan(preds))[0][0])
            raise ValueError(f"missing prediction for expert {self.expert_ids[j]!r}")
        if self.clip_bound is not None:
            preds = clip_experts(preds, self.clip_bound)
        elif not np.isfinite(preds).all():
            j = int(np.nonzero(~np.isfinite(preds))[0][0])
            raise ValueError(
                f"infinite prediction for expert {self.expert_ids[j]!r} with no clip bound"
            )
        w = self.state.weights
        # the dot product can round one ulp outside the expert range;
        # clamp so the convex-combination invariant holds bitwise
        agg = float(np.clip(w @ preds, preds.min(), preds.max()))
        self._weight_history.append(w)
        self._pending = (preds, agg)
        return agg

    def update(self, y: float) -> None:
        if self._pending is None:
            raise ProtocolError("truth delivered before an aggregate was issued")
        preds, agg = self._pending
        self._pending = None
        losses = self.loss.expert_losses(preds, agg, float(y))
        _check_losses(losses, self.n_experts, self.expert_ids)
        self.state = self.state.update(losses)


@dataclass(frozen=True)
class AggregateRun:
    expert_ids: tuple[str, ...]
    aggregates: np.ndarray
    weights: np.ndarray


def online_aggregate(panel: ExpertPanel, truth, loss: LossSpec,
                     clip_bound=None, state=None) -> AggregateRun:
    """Replay an expert panel against truths under strict causality.

    Expert predictions are clipped into `clip_bound` (when given) before
    weighting; the emitted aggregate at step t uses weights computed from
    losses up to t-1 only. Returns the aggregate stream and the full
    weight history (one row per step, the weights actually used).
    """
    truth = np.asarray(truth, dtype=float)
    n_steps = panel.preds.shape[0]
    if truth.shape != (n_steps,):
        raise ValueError(f"truth must have shape ({n_steps},), got {truth.shape}")
    machine = OnlineAggregator(
        n_experts=len(panel.expert_ids), loss=loss,
        clip_bound=clip_bound, state=state, expert_ids=panel.expert_ids,
    )
    agg = np.empty(n_steps)
    for t in range(n_steps):
        agg[t] = machine.predict(panel.preds[t])
        machine.update(truth[t])
    return AggregateRun(
        expert_ids=panel.expert_ids,
        aggregates=agg,
        weights=machine.weight_history,
    )
