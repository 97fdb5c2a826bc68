"""Exact checks of the regularized-objective performance bounds on tiny MDPs.

Everything here is computed by enumeration, so the identities can be tested
to near machine precision.  An MDP is deterministic with a fixed start state,
which makes the action prefix a sufficient state.  Policies are therefore
parameterized on the unrolled history tree: one softmax row per decision node
(an action prefix of length ``t < H``), stored as a ``(n_nodes, |A|)`` array in
level order.  A time-indexed Markov table can be lifted onto the tree with
:func:`lift_markov`.

The regularized value of a policy is

    V_{lam,beta} = E[sum_t r_t] + lam * H(traj) - lam * beta * E[L_smooth]

where ``L_smooth`` averages the band penalty of each step's entropy over the
``H`` steps, measured against a fixed reference entropy.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .losses import EpoConfig, penalty, penalty_slope

MAX_STATES, MAX_ACTIONS, MAX_HORIZON = 6, 4, 5


class TheoryError(ValueError):
    pass


class DegenerateBoundError(TheoryError):
    pass


@dataclass(frozen=True, eq=False)
class MdpSpec:
    transitions: np.ndarray  # (S, A) next-state indices
    rewards: np.ndarray  # (S, A)
    horizon: int
    s0: int = 0

    def __post_init__(self):
        t = np.asarray(self.transitions, dtype=np.int64)
        r = np.asarray(self.rewards, dtype=np.float64)
        object.__setattr__(self, "transitions", t)
        object.__setattr__(self, "rewards", r)
        if t.ndim != 2 or t.shape != r.shape:
            raise TheoryError(f"transition table {t.shape} and reward table {r.shape} must match as (S, A)")
        S, A = t.shape
        if not (1 <= S <= MAX_STATES and 1 <= A <= MAX_ACTIONS and 1 <= self.horizon <= MAX_HORIZON):
            raise TheoryError(
                f"MDP too large for enumeration: |S|={S} (max {MAX_STATES}), |A|={A} "
                f"(max {MAX_ACTIONS}), H={self.horizon} (max {MAX_HORIZON})"
            )
        if t.min() < 0 or t.max() >= S:
            raise TheoryError("transition table points outside the state set")
        if not 0 <= self.s0 < S:
            raise TheoryError("start state outside the state set")
        if not np.all(np.isfinite(r)):
            raise TheoryError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    def to_dict(self) -> dict:
        return {
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "horizon": self.horizon,
            "s0": self.s0,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MdpSpec":
        return cls(np.array(d["transitions"]), np.array(d["rewards"], dtype=np.float64), int(d["horizon"]), int(d.get("s0", 0)))

    # -- history tree ---------------------------------------------------
    @cached_property
    def offsets(self) -> np.ndarray:
        """Index of the first node of each level; ``offsets[H]`` is the node count."""
        A = self.n_actions
        return np.concatenate([[0], np.cumsum([A**t for t in range(self.horizon)])]).astype(np.int64)

    @property
    def n_nodes(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def node_states(self) -> np.ndarray:
        states = [np.array([self.s0])]
        for _ in range(self.horizon - 1):
            states.append(self.transitions[states[-1]].reshape(-1))
        return np.concatenate(states)

    @cached_property
    def node_rewards(self) -> np.ndarray:
        return self.rewards[self.node_states]

    @cached_property
    def node_levels(self) -> np.ndarray:
        return np.repeat(np.arange(self.horizon), np.diff(self.offsets))

    def level(self, t: int) -> slice:
        return slice(int(self.offsets[t]), int(self.offsets[t + 1]))


@dataclass(frozen=True)
class Regularizer:
    """Weights of the entropy bonus and of the smoothing penalty."""

    lam: float = 0.0
    beta: float = 0.0
    h_ref: float = 0.0
    kappa_l: float = 0.0
    kappa_r: float = 2.0
    alpha: float = 1.0
    mode: str = "hinge"

    @classmethod
    def from_config(cls, cfg: EpoConfig, beta: float, h_ref: float, mode: str = "hinge") -> "Regularizer":
        return cls(cfg.lam, beta, h_ref, cfg.kappa_l, cfg.kappa_r, cfg.alpha, mode)

    def penalty(self, h):
        return penalty(h, self.h_ref, self.kappa_l, self.kappa_r, self.alpha, self.mode)

    def slope(self, h):
        return penalty_slope(h, self.h_ref, self.kappa_l, self.kappa_r, self.alpha, self.mode)

    def with_mode(self, mode: str) -> "Regularizer":
        return Regularizer(self.lam, self.beta, self.h_ref, self.kappa_l, self.kappa_r, self.alpha, mode)


NO_REG = Regularizer()


@dataclass(frozen=True)
class Values:
    v: float
    v_lam: float
    v_lam_beta: float
    entropy: float  # trajectory entropy
    smooth: float  # expected per-trajectory smoothing loss


# ---------------------------------------------------------------------------
# policies


def softmax_rows(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    z = theta - theta.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def row_entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -t.sum(axis=-1)


def lift_markov(mdp: MdpSpec, table) -> np.ndarray:
    """Map a ``(H, S, A)`` time-indexed table onto the history tree."""
    table = np.asarray(table, dtype=np.float64)
    if table.shape != (mdp.horizon, mdp.n_states, mdp.n_actions):
        raise TheoryError(f"expected table of shape {(mdp.horizon, mdp.n_states, mdp.n_actions)}, got {table.shape}")
    return table[mdp.node_levels, mdp.node_states]


def _check_policy(mdp: MdpSpec, pi: np.ndarray) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape != (mdp.n_nodes, mdp.n_actions):
        raise TheoryError(f"policy must have shape {(mdp.n_nodes, mdp.n_actions)}, got {pi.shape}")
    if np.any(pi < 0) or not np.allclose(pi.sum(axis=1), 1.0, atol=1e-9):
        raise TheoryError("policy rows must be probability vectors")
    return pi


def reach_probs(mdp: MdpSpec, pi: np.ndarray) -> np.ndarray:
    """Probability of arriving at every decision node."""
    reach = np.empty(mdp.n_nodes)
    reach[0] = 1.0
    for t in range(1, mdp.horizon):
        parent = mdp.level(t - 1)
        reach[mdp.level(t)] = (reach[parent, None] * pi[parent]).reshape(-1)
    return reach


# ---------------------------------------------------------------------------
# exact evaluation


def _paths(mdp: MdpSpec):
    """Node and action index of every step of every full action sequence."""
    A, H = mdp.n_actions, mdp.horizon
    n = np.arange(A**H)
    nodes = np.stack([mdp.offsets[t] + n // A ** (H - t) for t in range(H)], axis=1)
    acts = np.stack([(n // A ** (H - 1 - t)) % A for t in range(H)], axis=1)
    return nodes, acts


def evaluate_policy(mdp: MdpSpec, pi, reg: Regularizer = NO_REG) -> Values:
    """Exact values of a tree policy by enumerating every action sequence."""
    pi = _check_policy(mdp, pi)
    nodes, acts = _paths(mdp)
    step_p = pi[nodes, acts]
    prob = step_p.prod(axis=1)
    live = prob > 0
    ret = mdp.node_rewards[nodes, acts].sum(axis=1)
    v = float(np.dot(prob, ret))
    logprob = np.log(np.where(live, prob, 1.0))
    entropy = float(-np.dot(prob[live], logprob[live]))
    step_h = row_entropy(pi)[nodes]
    smooth_path = np.asarray(reg.penalty(step_h)).mean(axis=1)
    smooth = float(np.dot(prob, smooth_path))
    v_lam = v + reg.lam * entropy
    return Values(v, v_lam, v_lam - reg.lam * reg.beta * smooth, entropy, smooth)


def exact_value(mdp: MdpSpec, theta, reg: Regularizer = NO_REG) -> Values:
    return evaluate_policy(mdp, softmax_rows(theta), reg)


def _node_bonus(pi: np.ndarray, reg: Regularizer, horizon: int) -> np.ndarray:
    h = row_entropy(pi)
    bonus = reg.lam * h
    if reg.beta:
        bonus = bonus - reg.lam * reg.beta / horizon * np.asarray(reg.penalty(h))
    return bonus


def backward_values(mdp: MdpSpec, pi, reg: Regularizer = NO_REG):
    """Regularized node values ``W`` and action values ``Q`` by backward induction on the tree."""
    pi = _check_policy(mdp, pi)
    A, H = mdp.n_actions, mdp.horizon
    W = np.zeros(mdp.n_nodes)
    Q = mdp.node_rewards.copy()
    bonus = _node_bonus(pi, reg, H)
    for t in range(H - 1, -1, -1):
        sl = mdp.level(t)
        if t < H - 1:
            Q[sl] += W[mdp.level(t + 1)].reshape(-1, A)
        W[sl] = (pi[sl] * Q[sl]).sum(axis=1) + bonus[sl]
    return W, Q


def markov_backward(mdp: MdpSpec, table, reg: Regularizer = NO_REG) -> float:
    """Regularized start value of a time-indexed Markov policy by dynamic programming over ``(t, s)``."""
    table = np.asarray(table, dtype=np.float64)
    W = np.zeros(mdp.n_states)
    for t in range(mdp.horizon - 1, -1, -1):
        p = table[t]
        h = row_entropy(p)
        pen = np.asarray(reg.penalty(h)) if reg.beta else 0.0
        W = (p * (mdp.rewards + W[mdp.transitions])).sum(axis=1) + reg.lam * h - reg.lam * reg.beta / mdp.horizon * pen
    return float(W[mdp.s0])


def value_gradient(mdp: MdpSpec, theta, reg: Regularizer = NO_REG) -> np.ndarray:
    """Gradient of ``V_{lam,beta}`` with respect to the tree logits."""
    pi = softmax_rows(theta)
    W, Q = backward_values(mdp, pi, reg)
    reach = reach_probs(mdp, pi)
    h = row_entropy(pi)
    mean_q = (pi * Q).sum(axis=1, keepdims=True)
    logp = np.log(np.where(pi > 0, pi, 1.0))
    dh = -pi * (logp + h[:, None])
    coef = reg.lam - (reg.lam * reg.beta / mdp.horizon * np.asarray(reg.slope(h)) if reg.beta else 0.0)
    return reach[:, None] * (pi * (Q - mean_q) + np.asarray(coef).reshape(-1, 1) * dh)


# ---------------------------------------------------------------------------
# optimal policies


def _returns(mdp: MdpSpec) -> np.ndarray:
    nodes, acts = _paths(mdp)
    return mdp.node_rewards[nodes, acts].sum(axis=1)


def optimal_sequences(mdp: MdpSpec, rtol: float = 1e-12):
    """Best achievable return and the mask of action sequences attaining it."""
    R = _returns(mdp)
    best = R.max()
    return float(best), R >= best - rtol * max(1.0, abs(best))


def max_entropy_optimal_policy(mdp: MdpSpec) -> np.ndarray:
    """Optimal policy that is uniform over the optimal action sequences.

    Its trajectory entropy is exactly ``log |A*_H|``.  Nodes it never reaches
    get a uniform row.
    """
    A, H = mdp.n_actions, mdp.horizon
    _, mask = optimal_sequences(mdp)
    pi = np.full((mdp.n_nodes, A), 1.0 / A)
    for t in range(H):
        counts = mask.reshape(A**t, A, A ** (H - t - 1)).sum(axis=2).astype(np.float64)
        tot = counts.sum(axis=1, keepdims=True)
        sl = mdp.level(t)
        pi[sl] = np.where(tot > 0, counts / np.where(tot > 0, tot, 1.0), pi[sl])
    return pi


def soft_optimal_policy(mdp: MdpSpec, lam: float):
    """Maximizer of ``V + lam * H`` and its value, by the soft Bellman backup."""
    if lam <= 0:
        raise TheoryError("soft optimum needs lam > 0")
    A = mdp.n_actions
    W = np.zeros(mdp.n_nodes)
    pi = np.zeros((mdp.n_nodes, A))
    Q = mdp.node_rewards.copy()
    for t in range(mdp.horizon - 1, -1, -1):
        sl = mdp.level(t)
        if t < mdp.horizon - 1:
            Q[sl] += W[mdp.level(t + 1)].reshape(-1, A)
        z = Q[sl] / lam
        m = z.max(axis=1, keepdims=True)
        W[sl] = lam * (m[:, 0] + np.log(np.exp(z - m).sum(axis=1)))
        pi[sl] = softmax_rows(z)
    return pi, float(W[0])


def _gibbs(q: np.ndarray, tau: float) -> np.ndarray:
    if tau == 0.0:
        top = q >= q.max()
        return top / top.sum()
    return softmax_rows(q / tau)


def _bisect(f, lo: float, hi: float, target: float, iters: int = 200) -> float:
    # f increasing on [lo, hi]
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(hi)):
            break
    return 0.5 * (lo + hi)


def _at_entropy(q: np.ndarray, h: float) -> np.ndarray | None:
    """Distribution with entropy ``h`` maximizing ``p . q``; ``None`` if ``h`` is infeasible."""
    n = len(q)
    top = q >= q.max()
    m = int(top.sum())
    if h < 0 or h > math.log(n):
        return None
    if h <= math.log(m):
        # any mass split inside the argmax set keeps p . q at its maximum
        one = np.zeros(n)
        one[np.argmax(top)] = 1.0
        uni = top / m

        def ent(w):
            return float(row_entropy((1 - w) * one + w * uni))

        w = _bisect(ent, 0.0, 1.0, h)
        return (1 - w) * one + w * uni
    spread = q.max() - q.min()

    def ent_log_tau(x):
        return float(row_entropy(_gibbs(q, math.exp(x))))

    lo, hi = math.log(spread) - 40.0, math.log(spread) + 40.0
    x = _bisect(ent_log_tau, lo, hi, h)
    return _gibbs(q, math.exp(x))


def _node_objective(p: np.ndarray, q: np.ndarray, reg: Regularizer, horizon: int) -> float:
    h = float(row_entropy(p))
    return float(p @ q) + reg.lam * h - reg.lam * reg.beta / horizon * float(reg.penalty(h))


def _best_row(q: np.ndarray, reg: Regularizer, horizon: int) -> np.ndarray:
    """Exact maximizer of ``p . q + lam H(p) - (lam beta / H) P(H(p))`` over the simplex.

    For a fixed entropy the best ``p`` is a Gibbs distribution (or any split of
    the argmax set), and the penalty is piecewise linear in the entropy, so the
    optimum sits at a stationary temperature of some linear piece or at a
    band edge.  All such candidates are scored and the best one is kept.
    """
    n = len(q)
    if n == 1:
        return np.ones(1)
    c = reg.lam * reg.beta / horizon
    cands = [_gibbs(q, 0.0), np.full(n, 1.0 / n)]
    for tau in (reg.lam, reg.lam + c * reg.alpha, reg.lam - c * reg.alpha):
        if tau > 0:
            cands.append(_gibbs(q, tau))
    for h in (reg.kappa_l * reg.h_ref, reg.kappa_r * reg.h_ref):
        p = _at_entropy(q, h)
        if p is not None:
            cands.append(p)
    scores = [_node_objective(p, q, reg, horizon) for p in cands]
    return cands[int(np.argmax(scores))]


def epo_optimal_policy(mdp: MdpSpec, reg: Regularizer):
    """Global maximizer of ``V_{lam,beta}`` in hinge mode and its value."""
    reg = reg.with_mode("hinge")
    A, H = mdp.n_actions, mdp.horizon
    W = np.zeros(mdp.n_nodes)
    pi = np.zeros((mdp.n_nodes, A))
    Q = mdp.node_rewards.copy()
    for t in range(H - 1, -1, -1):
        sl = mdp.level(t)
        if t < H - 1:
            Q[sl] += W[mdp.level(t + 1)].reshape(-1, A)
        for i in range(sl.start, sl.stop):
            pi[i] = _best_row(Q[i], reg, H)
            W[i] = _node_objective(pi[i], Q[i], reg, H)
    return pi, float(W[0])


# ---------------------------------------------------------------------------
# checks


def performance_difference_terms(mdp: MdpSpec, pi, pi_prime):
    """``(V^pi - V^pi', E_pi[sum_t A^pi'_t])``, both by enumeration."""
    pi = _check_policy(mdp, pi)
    pi_prime = _check_policy(mdp, pi_prime)
    lhs = evaluate_policy(mdp, pi).v - evaluate_policy(mdp, pi_prime).v
    W, Q = backward_values(mdp, pi_prime)
    adv = Q - W[:, None]
    nodes, acts = _paths(mdp)
    prob = pi[nodes, acts].prod(axis=1)
    rhs = float(np.dot(prob, adv[nodes, acts].sum(axis=1)))
    return lhs, rhs


def verify_performance_difference(mdp: MdpSpec, pi, pi_prime, as_probs: bool = False) -> float:
    if not as_probs:
        pi, pi_prime = softmax_rows(pi), softmax_rows(pi_prime)
    lhs, rhs = performance_difference_terms(mdp, pi, pi_prime)
    return abs(lhs - rhs)


def entropy_gradient_formula(mdp: MdpSpec, theta) -> np.ndarray:
    """``-E[sum_h grad log pi_h * sum_{t>=h} log pi_t]`` by enumeration."""
    pi = softmax_rows(theta)
    nodes, acts = _paths(mdp)
    step_logp = np.log(pi[nodes, acts])
    prob = np.exp(step_logp.sum(axis=1))
    to_go = np.cumsum(step_logp[:, ::-1], axis=1)[:, ::-1]
    grad = np.zeros_like(pi)
    A = mdp.n_actions
    for h in range(mdp.horizon):
        score = np.eye(A)[acts[:, h]] - pi[nodes[:, h]]
        np.add.at(grad, nodes[:, h], -(prob * to_go[:, h])[:, None] * score)
    return grad


def verify_entropy_gradient(mdp: MdpSpec, theta, step: float = 1e-5) -> float:
    """Max error of the enumerated formula against central differences, relative to ``max(1, |grad|)``."""
    theta = np.asarray(theta, dtype=np.float64)
    g = entropy_gradient_formula(mdp, theta)
    fd = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        tp, tm = theta.copy(), theta.copy()
        tp[idx] += step
        tm[idx] -= step
        fd[idx] = (exact_value(mdp, tp).entropy - exact_value(mdp, tm).entropy) / (2 * step)
    return float(np.max(np.abs(g - fd)) / max(1.0, float(np.max(np.abs(fd)))))


def entropy_bias_term(mdp: MdpSpec, lam: float) -> float:
    _, mask = optimal_sequences(mdp)
    return lam * (mdp.horizon * math.log(mdp.n_actions) - math.log(int(mask.sum())))


def verify_entropy_bias(mdp: MdpSpec, theta, lam: float) -> float:
    """Slack ``RHS - LHS`` of the entropy-bias inequality (non-negative when it holds)."""
    v_star, _ = optimal_sequences(mdp)
    vals = exact_value(mdp, theta, Regularizer(lam=lam))
    _, v_soft = soft_optimal_policy(mdp, lam)
    lhs = v_star - vals.v
    rhs = v_soft - vals.v_lam + entropy_bias_term(mdp, lam)
    return rhs - lhs


@dataclass(frozen=True)
class BoundReport:
    suboptimality: float
    epsilon: float
    c_const: float
    entropy_bias: float
    phi: float
    corrective: float
    rhs: float
    holds: bool
    # same bound with the smoothing gap measured against the regularized optimum
    phi_reg: float = 0.0
    rhs_reg: float = 0.0
    holds_reg: bool = True
    phi_literal: float = 0.0
    n_optimal: int = 1
    opt_error: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs - self.suboptimality

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "extras"}
        d["slack"] = self.slack
        d.update(self.extras)
        return d


def bound_constant(mdp: MdpSpec, pi: np.ndarray, pi_opt: np.ndarray) -> float:
    """``C_d^2 * min P_theta * (min pi_theta)^2 * min P_theta / P_opt`` over reachable nodes."""
    reach = reach_probs(mdp, pi)
    if np.any(reach <= 0):
        raise DegenerateBoundError("some history is unreachable under the evaluated policy")
    reach_opt = reach_probs(mdp, pi_opt)
    seen = reach_opt > 0
    ratio = float(np.min(reach[seen] / reach_opt[seen]))
    c_d2 = float(mdp.n_actions) ** (-mdp.horizon)
    return c_d2 * float(reach.min()) * float(pi.min()) ** 2 * ratio


def verify_epo_bound(mdp: MdpSpec, theta, cfg: EpoConfig | Regularizer, h_ref: float | None = None, beta: float | None = None) -> BoundReport:
    """Evaluate every term of the smoothed performance bound at ``theta``."""
    if isinstance(cfg, Regularizer):
        reg = cfg.with_mode("hinge")
    else:
        if h_ref is None:
            raise TheoryError("a reference entropy is required")
        reg = Regularizer.from_config(cfg, cfg.beta_start if beta is None else beta, h_ref)
    if reg.lam <= 0:
        raise TheoryError("bound needs lam > 0")
    pi = softmax_rows(theta)
    v_star, mask = optimal_sequences(mdp)
    vals = evaluate_policy(mdp, pi, reg)
    eps = float(np.linalg.norm(value_gradient(mdp, theta, reg)))
    pi_reg, _ = epo_optimal_policy(mdp, reg)
    c = bound_constant(mdp, pi, pi_reg)
    d_size = 1.0  # single start state
    opt_err = d_size**2 * eps**2 / (2 * reg.lam * c)
    bias = entropy_bias_term(mdp, reg.lam)
    pi_star = max_entropy_optimal_policy(mdp)
    phi = vals.smooth - evaluate_policy(mdp, pi_star, reg).smooth
    phi_reg = vals.smooth - evaluate_policy(mdp, pi_reg, reg).smooth
    lit = reg.with_mode("literal")
    phi_lit = evaluate_policy(mdp, pi, lit).smooth - evaluate_policy(mdp, pi_star, lit).smooth
    sub = v_star - vals.v
    rhs = opt_err + bias - reg.lam * reg.beta * phi
    rhs_reg = opt_err + bias - reg.lam * reg.beta * phi_reg
    return BoundReport(
        suboptimality=sub,
        epsilon=eps,
        c_const=c,
        entropy_bias=bias,
        phi=phi,
        corrective=reg.lam * reg.beta * phi,
        rhs=rhs,
        holds=bool(sub <= rhs + 1e-9),
        phi_reg=phi_reg,
        rhs_reg=rhs_reg,
        holds_reg=bool(sub <= rhs_reg + 1e-9),
        phi_literal=phi_lit,
        n_optimal=int(mask.sum()),
        opt_error=opt_err,
    )


# ---------------------------------------------------------------------------
# randomized suite


def random_mdp(rng: np.random.Generator, max_states: int = 4, max_actions: int = 3, max_horizon: int = 4) -> MdpSpec:
    S = int(rng.integers(1, max_states + 1))
    A = int(rng.integers(1, max_actions + 1))
    H = int(rng.integers(1, max_horizon + 1))
    trans = rng.integers(0, S, size=(S, A))
    if rng.random() < 0.5:
        # coarse rewards produce ties, hence several optimal sequences
        rew = rng.integers(0, 3, size=(S, A)) / 2.0
    else:
        rew = rng.uniform(0.0, 1.0, size=(S, A))
    return MdpSpec(trans, rew, H, int(rng.integers(0, S)))


def random_regularizer(rng: np.random.Generator, mdp: MdpSpec) -> Regularizer:
    lam = float(rng.uniform(0.05, 0.5))
    h_max = math.log(mdp.n_actions)
    return Regularizer(
        lam=lam,
        beta=float(rng.choice([1.0, 1.049787, 2.0])),
        h_ref=float(rng.uniform(0.1, 1.0) * h_max) if h_max > 0 else 0.5,
        kappa_l=float(rng.choice([0.0, 0.5])),
        kappa_r=float(rng.choice([1.0, 2.0])),
        alpha=float(rng.choice([0.5, 1.0, 2.0])),
    )


TOLERANCES = {
    "value_oracle": 1e-12,
    "performance_difference": 1e-10,
    "entropy_gradient": 1e-6,
    "entropy_bias": 1e-6,
    "epo_bound": 1e-6,
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    index: int
    value: float
    tolerance: float
    passed: bool
    replay: dict

    def to_dict(self) -> dict:
        return {
            "check": self.name,
            "index": self.index,
            "value": self.value,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "replay": self.replay,
        }


def _oracle_gap(mdp: MdpSpec, table: np.ndarray, reg: Regularizer) -> float:
    pi = lift_markov(mdp, table)
    vals = evaluate_policy(mdp, pi, reg)
    W, _ = backward_values(mdp, pi, reg)
    dp = markov_backward(mdp, table, reg)
    scale = max(1.0, abs(vals.v_lam_beta))
    return max(abs(vals.v_lam_beta - W[0]), abs(vals.v_lam_beta - dp)) / scale


def check_mdp(index: int, rng: np.random.Generator, tolerances: dict | None = None) -> list[CheckResult]:
    tol = dict(TOLERANCES, **(tolerances or {}))
    mdp = random_mdp(rng)
    reg = random_regularizer(rng, mdp)
    shape = (mdp.n_nodes, mdp.n_actions)
    theta = rng.normal(0.0, 1.0, size=shape)
    theta_b = rng.normal(0.0, 1.0, size=shape)
    table = softmax_rows(rng.normal(0.0, 1.0, size=(mdp.horizon, mdp.n_states, mdp.n_actions)))
    pi_reg, _ = epo_optimal_policy(mdp, reg)
    theta_opt = np.log(np.maximum(pi_reg, 1e-300)).clip(min=-30.0)
    replay = {
        "mdp": mdp.to_dict(),
        "theta": theta.tolist(),
        "regularizer": reg.__dict__.copy(),
    }

    out = []

    def add(name, value, ok):
        out.append(CheckResult(name, index, float(value), tol[name], bool(ok), replay))

    gap = _oracle_gap(mdp, table, reg)
    add("value_oracle", gap, gap <= tol["value_oracle"])
    pd = max(
        verify_performance_difference(mdp, theta, theta_b),
        verify_performance_difference(mdp, softmax_rows(theta), max_entropy_optimal_policy(mdp), as_probs=True),
    )
    add("performance_difference", pd, pd <= tol["performance_difference"])
    eg = verify_entropy_gradient(mdp, theta)
    add("entropy_gradient", eg, eg <= tol["entropy_gradient"])
    eb = verify_entropy_bias(mdp, theta, reg.lam)
    add("entropy_bias", eb, eb >= -tol["entropy_bias"])
    slack = min(verify_epo_bound(mdp, th, reg).slack for th in (theta, theta_opt))
    add("epo_bound", slack, slack >= -tol["epo_bound"])
    return out


def run_suite(n: int = 50, seed: int = 0, tolerances: dict | None = None) -> list[CheckResult]:
    if n < 1:
        raise TheoryError("suite size must be at least 1")
    results = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        results.extend(check_mdp(i, rng, tolerances))
    return results


def summarize_suite(results: list[CheckResult]) -> dict:
    """Per check: count, failures and the worst observed value."""
    summary = {}
    for name in TOLERANCES:
        rs = [r for r in results if r.name == name]
        if not rs:
            continue
        vals = [r.value for r in rs]
        worst = min(vals) if name in ("entropy_bias", "epo_bound") else max(vals)
        summary[name] = {"n": len(rs), "failed": sum(not r.passed for r in rs), "worst": worst, "tolerance": rs[0].tolerance}
    return summary


def enumerate_deterministic(mdp: MdpSpec):
    """Yield every deterministic action sequence with its return (small MDPs only)."""
    for seq in itertools.product(range(mdp.n_actions), repeat=mdp.horizon):
        s, ret = mdp.s0, 0.0
        for a in seq:
            ret += mdp.rewards[s, a]
            s = mdp.transitions[s, a]
        yield seq, ret
