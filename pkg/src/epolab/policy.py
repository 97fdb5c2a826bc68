"""Softmax token policies with exact gradients, and a tabular value baseline.

A token distribution is conditioned on a context ``(feature_tag, turn,
prefix bucket)``. Two scorers map a context to logits:

* ``tabular``: one logit row per context.
* ``mlp``: one hidden tanh layer on the concatenated one-hot encodings.

Everything downstream needs only two things from a scorer: the logits for
a set of contexts, and the pull-back of a logit-space gradient to the flat
parameter vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Batch, Observation, TokenStep, Trajectory, Turn

SCORERS = ("tabular", "mlp")
MAX_VOCAB = 1024
MAX_HIDDEN = 32


class FeatureMapMismatch(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMap:
    n_tags: int
    horizon: int
    vocab_size: int
    max_tokens: int
    n_buckets: int = 0

    def __post_init__(self):
        if not 2 <= self.vocab_size <= MAX_VOCAB:
            raise ValueError(f"vocabulary size must be in [2, {MAX_VOCAB}]")
        if self.n_buckets <= 0:
            # exact prefix coding: one bucket per possible within-turn prefix
            exact = sum(self.vocab_size**m for m in range(self.max_tokens))
            object.__setattr__(self, "n_buckets", exact)

    @property
    def n_contexts(self) -> int:
        return self.n_tags * self.horizon * self.n_buckets

    @property
    def input_dim(self) -> int:
        return self.n_tags + self.horizon + self.n_buckets

    def bucket(self, prefix) -> int:
        code = sum(self.vocab_size**m for m in range(len(prefix)))
        acc = 0
        for tok in prefix:
            acc = acc * self.vocab_size + int(tok)
        return (code + acc) % self.n_buckets

    def context_index(self, tag: np.ndarray, turn: np.ndarray, bucket: np.ndarray) -> np.ndarray:
        return (np.asarray(tag) * self.horizon + np.asarray(turn)) * self.n_buckets + np.asarray(bucket)


@dataclass
class PolicyParams:
    scorer_kind: str
    weights: np.ndarray
    feature_map: FeatureMap
    hidden: int = 0

    def __post_init__(self):
        if self.scorer_kind not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer_kind!r}")
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (param_count(self.feature_map, self.scorer_kind, self.hidden),):
            raise ValueError("weight vector does not match the feature map")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite policy weights")

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.scorer_kind, weights, self.feature_map, self.hidden)


def param_count(fmap: FeatureMap, kind: str, hidden: int = 0) -> int:
    if kind == "tabular":
        return fmap.n_contexts * fmap.vocab_size
    h, d, v = hidden, fmap.input_dim, fmap.vocab_size
    return h * d + h + v * h + v


def init_params(
    fmap: FeatureMap,
    kind: str = "tabular",
    hidden: int = 16,
    scale: float = 0.0,
    rng: np.random.Generator | None = None,
) -> PolicyParams:
    if kind == "tabular":
        hidden = 0
    elif not 1 <= hidden <= MAX_HIDDEN:
        raise ValueError(f"hidden width must be in [1, {MAX_HIDDEN}]")
    n = param_count(fmap, kind, hidden)
    if scale == 0.0:
        w = np.zeros(n)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        w = scale * rng.standard_normal(n)
    return PolicyParams(kind, w, fmap, hidden)


def _mlp_views(params: PolicyParams):
    fm, h = params.feature_map, params.hidden
    d, v = fm.input_dim, fm.vocab_size
    w = params.weights
    i = 0
    w1 = w[i : i + h * d].reshape(h, d)
    i += h * d
    b1 = w[i : i + h]
    i += h
    w2 = w[i : i + v * h].reshape(v, h)
    i += v * h
    b2 = w[i : i + v]
    return w1, b1, w2, b2


@dataclass(frozen=True)
class Contexts:
    tag: np.ndarray
    turn: np.ndarray
    bucket: np.ndarray

    def __len__(self) -> int:
        return len(self.tag)


def compute_logits(params: PolicyParams, ctx: Contexts) -> np.ndarray:
    fm = params.feature_map
    if params.scorer_kind == "tabular":
        table = params.weights.reshape(fm.n_contexts, fm.vocab_size)
        return table[fm.context_index(ctx.tag, ctx.turn, ctx.bucket)]
    w1, b1, w2, b2 = _mlp_views(params)
    pre = w1[:, ctx.tag].T + w1[:, fm.n_tags + ctx.turn].T + w1[:, fm.n_tags + fm.horizon + ctx.bucket].T + b1
    return np.tanh(pre) @ w2.T + b2


def backprop(params: PolicyParams, ctx: Contexts, dlogits: np.ndarray) -> np.ndarray:
    """Pull a per-context logit gradient back to the flat weight vector."""
    fm = params.feature_map
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if params.scorer_kind == "tabular":
        grad = np.zeros((fm.n_contexts, fm.vocab_size))
        np.add.at(grad, fm.context_index(ctx.tag, ctx.turn, ctx.bucket), dlogits)
        return grad.ravel()
    w1, b1, w2, _ = _mlp_views(params)
    cols = (ctx.tag, fm.n_tags + ctx.turn, fm.n_tags + fm.horizon + ctx.bucket)
    pre = w1[:, cols[0]].T + w1[:, cols[1]].T + w1[:, cols[2]].T + b1
    hid = np.tanh(pre)
    g_w2 = dlogits.T @ hid
    g_b2 = dlogits.sum(axis=0)
    g_pre = (dlogits @ w2) * (1.0 - hid**2)
    g_w1 = np.zeros_like(w1)
    for c in cols:
        np.add.at(g_w1.T, c, g_pre)
    g_b1 = g_pre.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def act(
    params: PolicyParams,
    observation: Observation,
    turn_index: int,
    rng: np.random.Generator,
    decode: Callable[[tuple[int, ...]], int],
    greedy: bool = False,
) -> Turn:
    """Sample one turn's tokens autoregressively and decode them."""
    fm = params.feature_map
    prefix: list[int] = []
    steps = []
    for _ in range(fm.max_tokens):
        ctx = Contexts(
            np.array([observation.feature_tag]), np.array([turn_index]), np.array([fm.bucket(prefix)])
        )
        logp = log_softmax(compute_logits(params, ctx))[0]
        probs = np.exp(logp)
        if greedy:
            k = int(np.argmax(logp))
        else:
            cdf = np.cumsum(probs)
            k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
            k = min(k, fm.vocab_size - 1)
        nz = probs > 0.0
        ent = float(-np.sum(probs[nz] * logp[nz]))
        steps.append(TokenStep(probs=probs / probs.sum(), chosen=k, logprob=float(logp[k]), entropy=ent))
        prefix.append(k)
    return Turn(observation=observation, steps=tuple(steps), decoded_action=decode(tuple(prefix)))


@dataclass
class TokenView:
    """Flattened per-token quantities of a batch under given parameters.

    ``weight`` holds the nested-mean weight ``1 / (B * T_j * |turn|)`` of each
    token, so any per-token field ``x`` aggregates as ``weight @ x``.
    """

    ctx: Contexts
    chosen: np.ndarray
    traj_index: np.ndarray
    turn_pos: np.ndarray
    weight: np.ndarray
    logp_old: np.ndarray
    entropy_old: np.ndarray
    token_pos: np.ndarray
    logp_all: np.ndarray = field(repr=False, default=None)
    probs: np.ndarray = field(repr=False, default=None)

    @property
    def logp(self) -> np.ndarray:
        return self.logp_all[np.arange(len(self.chosen)), self.chosen]

    @property
    def entropy(self) -> np.ndarray:
        return -np.sum(np.where(self.probs > 0.0, self.probs * self.logp_all, 0.0), axis=1)

    def dlogp_dlogits(self) -> np.ndarray:
        g = -self.probs.copy()
        g[np.arange(len(self.chosen)), self.chosen] += 1.0
        return g

    def dentropy_dlogits(self) -> np.ndarray:
        safe = np.where(self.probs > 0.0, self.logp_all, 0.0)
        return -self.probs * (safe + self.entropy[:, None])


def flatten_batch(batch: Batch, fmap: FeatureMap) -> TokenView:
    tags, turns, buckets, chosen = [], [], [], []
    tj, tt, w, lo, eo, pos = [], [], [], [], [], []
    n_traj = len(batch.trajectories)
    for j, traj in enumerate(batch.trajectories):
        if not traj.turns:
            raise FeatureMapMismatch("trajectory without turns")
        n_turns = len(traj.turns)
        for t, turn in enumerate(traj.turns):
            obs = turn.observation
            if not 0 <= obs.feature_tag < fmap.n_tags or not 0 <= obs.turn_index < fmap.horizon:
                raise FeatureMapMismatch("observation outside the policy's feature map")
            if len(turn.steps) > fmap.max_tokens:
                raise FeatureMapMismatch("turn longer than the policy's token cap")
            prefix: list[int] = []
            for i, st in enumerate(turn.steps):
                if len(st.probs) != fmap.vocab_size:
                    raise FeatureMapMismatch("token distribution has the wrong vocabulary size")
                tags.append(obs.feature_tag)
                turns.append(obs.turn_index)
                buckets.append(fmap.bucket(prefix))
                chosen.append(st.chosen)
                tj.append(j)
                tt.append(t)
                w.append(1.0 / (n_traj * n_turns * len(turn.steps)))
                lo.append(st.logprob)
                eo.append(st.entropy)
                pos.append(i)
                prefix.append(st.chosen)
    ctx = Contexts(np.array(tags, dtype=np.int64), np.array(turns, dtype=np.int64), np.array(buckets, dtype=np.int64))
    return TokenView(
        ctx=ctx,
        chosen=np.array(chosen, dtype=np.int64),
        traj_index=np.array(tj, dtype=np.int64),
        turn_pos=np.array(tt, dtype=np.int64),
        weight=np.array(w),
        logp_old=np.array(lo),
        entropy_old=np.array(eo),
        token_pos=np.array(pos, dtype=np.int64),
    )


def evaluate_tokens(params: PolicyParams, batch: Batch | TokenView) -> TokenView:
    """Recompute current-policy log-probabilities and entropies per token."""
    view = batch if isinstance(batch, TokenView) else flatten_batch(batch, params.feature_map)
    logp_all = log_softmax(compute_logits(params, view.ctx))
    view = TokenView(**{**view.__dict__, "logp_all": logp_all, "probs": np.exp(logp_all)})
    return view


def logprob_entropy_grads(params: PolicyParams, traj: Trajectory):
    """Per-token ``(logprob, entropy, grad logprob, grad entropy)`` under ``params``.

    Gradients are dense vectors over the flat weights; meant for inspection
    and tests, the loss code works on the flattened view directly.
    """
    view = evaluate_tokens(params, Batch((traj,)))
    g_lp = view.dlogp_dlogits()
    g_h = view.dentropy_dlogits()
    out = []
    for n in range(len(view.chosen)):
        one = Contexts(view.ctx.tag[n : n + 1], view.ctx.turn[n : n + 1], view.ctx.bucket[n : n + 1])
        out.append(
            (
                float(view.logp[n]),
                float(view.entropy[n]),
                backprop(params, one, g_lp[n : n + 1]),
                backprop(params, one, g_h[n : n + 1]),
            )
        )
    return out


@dataclass(frozen=True)
class ValueBaseline:
    """Tabular ``V(state_id, turn)`` fit to Monte Carlo returns."""

    table: np.ndarray
    learning_rate: float

    @classmethod
    def zeros(cls, n_states: int, horizon: int, learning_rate: float) -> "ValueBaseline":
        return cls(np.zeros((n_states, horizon)), float(learning_rate))


def value_estimate(baseline: ValueBaseline, observation: Observation, turn_index: int) -> float:
    s, t = observation.state_id, turn_index
    if 0 <= s < baseline.table.shape[0] and 0 <= t < baseline.table.shape[1]:
        return float(baseline.table[s, t])
    return 0.0


def value_update(baseline: ValueBaseline, batch: Batch, returns) -> ValueBaseline:
    """One averaged step toward the observed returns for every visited cell."""
    returns = list(returns)
    if len(returns) != len(batch.trajectories):
        raise ValueError("returns are not aligned with the batch")
    sums: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    for g, traj in zip(returns, batch.trajectories):
        for turn in traj.turns:
            key = (turn.observation.state_id, turn.observation.turn_index)
            sums[key] = sums.get(key, 0.0) + float(g)
            counts[key] = counts.get(key, 0) + 1
    table = baseline.table.copy()
    lr = baseline.learning_rate
    for key in sorted(sums):
        s, t = key
        if 0 <= s < table.shape[0] and 0 <= t < table.shape[1]:
            target = sums[key] / counts[key]
            table[s, t] += lr * (target - table[s, t])
    return ValueBaseline(table, lr)
