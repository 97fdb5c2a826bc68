"""Objective terms for PPO/GRPO and the entropy-smoothed variants.

All losses are minimised. ``l_mt`` is the negated clipped surrogate, ``l_h``
the trajectory-aware mean token entropy and ``l_smooth`` the mean band
penalty; they combine as ``l_epo = l_mt - lam * (l_h - beta_k * l_smooth)``.
Every term returns its exact gradient with respect to the flat policy
weights alongside its value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .core import Batch
from .policy import PolicyParams, TokenView, backprop, evaluate_tokens, value_estimate, ValueBaseline
from .window import EntropyWindow, historical_mean

VARIANTS = ("ppo", "grpo", "epo", "epo_base", "epo_decay", "ea")
PENALTY_MODES = ("literal", "hinge")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class EpoConfig:
    lam: float = 0.001
    alpha: float = 1.0
    kappa_l: float = 0.0
    kappa_r: float = 2.0
    beta_start: float = 2.0
    beta_end: float = 1.0
    lambda_d: float = 3.0
    K: int = 120
    clip_eps: float = 0.2
    grpo_delta: float = 1e-8
    batch_size: int = 16
    group_size: int = 4
    variant: str = "epo"
    base: str = "ppo"
    penalty_mode: str = "hinge"
    ea_psi: float = 0.1
    ea_clip: float = 0.5
    decay_lambda_hi: float | None = None
    decay_lambda_lo: float = 0.0
    # listed in the reference hyperparameter tables; recorded, never read
    lambda_k: float | None = None

    def __post_init__(self):
        checks = [
            ("lambda", self.lam >= 0, "must be >= 0"),
            ("alpha", self.alpha >= 0, "must be >= 0"),
            ("kappa_l", self.kappa_l >= 0, "must be >= 0"),
            ("kappa_r", self.kappa_l <= self.kappa_r, "kappa_l must not exceed kappa_r"),
            ("K", self.K >= 2, "must be >= 2"),
            ("clip_eps", 0 < self.clip_eps < 1, "must lie in (0, 1)"),
            ("grpo_delta", self.grpo_delta > 0, "must be > 0"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("variant", self.variant in VARIANTS, f"must be one of {VARIANTS}"),
            ("base", self.base in ("ppo", "grpo"), "must be ppo or grpo"),
            ("penalty_mode", self.penalty_mode in PENALTY_MODES, f"must be one of {PENALTY_MODES}"),
            ("ea_clip", self.ea_clip > 0, "must be > 0"),
            ("decay_lambda_lo", self.decay_lambda_lo >= 0, "must be >= 0"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)
        if self.uses_grpo:
            if self.group_size < 2:
                raise ConfigError("group_size", "GRPO needs groups of at least 2")
            if self.batch_size % self.group_size:
                raise ConfigError("batch_size", "must be divisible by group_size for GRPO")
        if self.decay_lambda_hi is not None and self.decay_lambda_hi < self.decay_lambda_lo:
            raise ConfigError("decay_lambda_hi", "must be >= decay_lambda_lo")

    @property
    def uses_grpo(self) -> bool:
        return self.variant == "grpo" or (self.variant not in ("ppo", "grpo") and self.base == "grpo")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EpoConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class LossReport:
    l_mt: float
    l_h: float
    l_smooth: float
    beta_k: float
    lam: float
    l_epo: float
    n_penalized: int
    grad: np.ndarray = field(repr=False)
    components: dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# surrogate
# ---------------------------------------------------------------------------


def clipped_surrogate(logp_new, logp_old, advantage, eps: float):
    """Per-token ``min(r A, clip(r, 1-eps, 1+eps) A)`` with ``r = exp(new - old)``."""
    with np.errstate(over="ignore"):
        ratio = np.exp(np.asarray(logp_new, dtype=np.float64) - np.asarray(logp_old, dtype=np.float64))
    if not np.all(np.isfinite(ratio)):
        raise FloatingPointError("non-finite importance ratio")
    a = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(ratio * a, np.clip(ratio, 1.0 - eps, 1.0 + eps) * a)
    return out if out.ndim else float(out)


def _surrogate_slope(logp_new, logp_old, advantage, eps):
    """Derivative of the clipped surrogate with respect to ``logp_new``."""
    ratio = np.exp(logp_new - logp_old)
    unclipped = ratio * advantage
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage
    return np.where(unclipped <= clipped, unclipped, 0.0)


def broadcast_advantages(view: TokenView, advantages) -> np.ndarray:
    """Spread per-trajectory (scalar) or per-turn advantages onto tokens."""
    n_traj = int(view.traj_index.max()) + 1 if len(view.traj_index) else 0
    if len(advantages) != n_traj:
        raise ValueError("advantages are not aligned with the batch")
    per_turn = []
    for a in advantages:
        arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
        per_turn.append(arr)
    out = np.empty(len(view.chosen))
    for n, (j, t) in enumerate(zip(view.traj_index, view.turn_pos)):
        arr = per_turn[j]
        if arr.size == 1:
            out[n] = arr[0]
        elif t < arr.size:
            out[n] = arr[t]
        else:
            raise ValueError("advantage row shorter than its trajectory")
    for j in range(n_traj):
        n_turns = int(view.turn_pos[view.traj_index == j].max()) + 1
        if per_turn[j].size not in (1, n_turns):
            raise ValueError("advantage row length differs from the trajectory's turn count")
    return out


def multi_turn_policy_loss(view: TokenView, adv_tokens: np.ndarray, params: PolicyParams, eps: float):
    """Nested mean of the negated clipped surrogate, and its gradient."""
    adv_tokens = np.asarray(adv_tokens, dtype=np.float64)
    if adv_tokens.shape != view.chosen.shape:
        raise ValueError("token advantages do not match the batch")
    surr = clipped_surrogate(view.logp, view.logp_old, adv_tokens, eps)
    loss = -float(view.weight @ surr)
    slope = _surrogate_slope(view.logp, view.logp_old, adv_tokens, eps)
    dz = -(view.weight * slope)[:, None] * view.dlogp_dlogits()
    return loss, backprop(params, view.ctx, dz)


# ---------------------------------------------------------------------------
# advantages
# ---------------------------------------------------------------------------


def ppo_advantage(batch: Batch, baseline: ValueBaseline) -> list[np.ndarray]:
    """``A_t = r_T - V(s_t, t)`` for every turn (undiscounted, terminal reward only)."""
    out = []
    for traj in batch.trajectories:
        r = float(traj.terminal_reward)
        out.append(np.array([r - value_estimate(baseline, t.observation, t.observation.turn_index) for t in traj.turns]))
    return out


def grpo_advantage(returns, delta: float = 1e-8) -> np.ndarray:
    """Group-standardised returns using the population standard deviation."""
    r = np.asarray(returns, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("GRPO groups need at least two trajectories")
    mu = r.mean()
    sigma = np.sqrt(np.mean((r - mu) ** 2))
    return (r - mu) / (sigma + delta)


def grpo_batch_advantages(batch: Batch, group_size: int, delta: float) -> list[np.ndarray]:
    trajs = batch.trajectories
    if len(trajs) % group_size:
        raise ValueError("batch size is not a multiple of the group size")
    out = []
    for g in range(0, len(trajs), group_size):
        group = trajs[g : g + group_size]
        if len({t.task_id for t in group}) != 1:
            raise ValueError("GRPO group mixes task variants")
        out.extend(np.array([a]) for a in grpo_advantage([t.terminal_reward for t in group], delta))
    return out


def ea_shaped_advantage(advantage, entropy, psi: float, c: float):
    """Add a clipped, detached entropy bonus to the advantage."""
    if c <= 0:
        raise ValueError("clip bound must be positive")
    bonus = np.clip(psi * np.asarray(entropy, dtype=np.float64), -c, c)
    out = np.asarray(advantage, dtype=np.float64) + bonus
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# entropy terms
# ---------------------------------------------------------------------------


def entropy_loss(view: TokenView, params: PolicyParams):
    """Trajectory-aware mean token entropy and its gradient."""
    if len(view.chosen) == 0:
        raise ValueError("empty batch")
    value = float(view.weight @ view.entropy)
    dz = view.weight[:, None] * view.dentropy_dlogits()
    return value, backprop(params, view.ctx, dz)


def penalty(h, h_ref: float, kappa_l: float, kappa_r: float, alpha: float, mode: str = "literal"):
    """Token penalty against the band ``[kappa_l h_ref, kappa_r h_ref]`` (inclusive).

    ``literal`` charges a flat ``alpha`` outside the band. ``hinge`` charges
    ``alpha`` times the distance to the violated edge, so its slope in ``h`` is
    ``+alpha`` above the band and ``-alpha`` below it.
    """
    if alpha < 0:
        raise ValueError("penalty weight must be non-negative")
    if h_ref < 0:
        raise ValueError("reference entropy must be non-negative")
    h = np.asarray(h, dtype=np.float64)
    lo, hi = kappa_l * h_ref, kappa_r * h_ref
    if mode == "literal":
        out = np.where((h >= lo) & (h <= hi), 0.0, alpha)
    elif mode == "hinge":
        out = alpha * (np.maximum(h - hi, 0.0) + np.maximum(lo - h, 0.0))
    else:
        raise ValueError(f"unknown penalty mode {mode!r}")
    return out if out.ndim else float(out)


def penalty_slope(h, h_ref: float, kappa_l: float, kappa_r: float, alpha: float, mode: str = "literal"):
    h = np.asarray(h, dtype=np.float64)
    if mode == "literal":
        return np.zeros_like(h)
    return np.where(h > kappa_r * h_ref, alpha, 0.0) - np.where(h < kappa_l * h_ref, alpha, 0.0)


def smoothing_loss(view: TokenView, h_ref: float | None, cfg: EpoConfig, params: PolicyParams):
    """Mean band penalty; returns ``(value, gradient, n_out_of_band)``."""
    if h_ref is None:
        raise ValueError("smoothing needs a non-empty entropy window")
    h = view.entropy
    vals = penalty(h, h_ref, cfg.kappa_l, cfg.kappa_r, cfg.alpha, cfg.penalty_mode)
    n_out = int(np.sum((h < cfg.kappa_l * h_ref) | (h > cfg.kappa_r * h_ref)))
    value = float(view.weight @ vals)
    if cfg.penalty_mode == "literal":
        return value, np.zeros_like(params.weights), n_out
    slope = penalty_slope(h, h_ref, cfg.kappa_l, cfg.kappa_r, cfg.alpha, cfg.penalty_mode)
    dz = (view.weight * slope)[:, None] * view.dentropy_dlogits()
    return value, backprop(params, view.ctx, dz), n_out


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def beta_schedule(k: int, cfg: EpoConfig) -> float:
    if not 0 <= k < cfg.K:
        raise ValueError(f"step {k} outside [0, {cfg.K})")
    k_mid = cfg.K // 2
    if k <= k_mid:
        return cfg.beta_start + (1.0 - cfg.beta_start) * (1.0 - math.exp(-cfg.lambda_d * k / k_mid))
    return 1.0 + (cfg.beta_end - 1.0) * (1.0 - math.exp(-cfg.lambda_d * (k - k_mid) / (cfg.K - k_mid)))


def decay_coefficient(k: int, lam_hi: float, lam_lo: float, K: int) -> float:
    """Entropy weight of the decaying variant: ``lo + (hi - lo) exp(-3 k / K)``."""
    if not 0 <= k < K:
        raise ValueError(f"step {k} outside [0, {K})")
    if lam_hi < lam_lo or lam_lo < 0:
        raise ValueError("need lam_hi >= lam_lo >= 0")
    return lam_lo + (lam_hi - lam_lo) * math.exp(-3.0 * k / K)


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------


def effective_lambda(k: int, cfg: EpoConfig) -> float:
    if cfg.variant in ("ppo", "grpo", "ea"):
        return 0.0
    if cfg.variant == "epo_decay":
        hi = cfg.lam if cfg.decay_lambda_hi is None else cfg.decay_lambda_hi
        return decay_coefficient(k, hi, cfg.decay_lambda_lo, cfg.K)
    return cfg.lam


def epo_loss(
    batch: Batch | TokenView,
    advantages,
    window: EntropyWindow,
    k: int,
    cfg: EpoConfig,
    params: PolicyParams,
) -> LossReport:
    """Evaluate ``l_mt - lam (l_h - beta_k l_smooth)`` and its gradient at ``params``.

    ``advantages`` holds one entry per trajectory: a scalar or a per-turn row.
    The smoothing term is zero at ``k == 0`` and for every variant other
    than ``epo``.
    """
    view = evaluate_tokens(params, batch)
    adv = broadcast_advantages(view, advantages)
    if cfg.variant == "ea":
        adv = ea_shaped_advantage(adv, view.entropy_old, cfg.ea_psi, cfg.ea_clip)
    l_mt, g_mt = multi_turn_policy_loss(view, adv, params, cfg.clip_eps)
    l_h, g_h = entropy_loss(view, params)
    beta = beta_schedule(k, cfg)
    lam = effective_lambda(k, cfg)

    l_s, g_s, n_pen = 0.0, np.zeros_like(g_mt), 0
    if cfg.variant == "epo" and k > 0:
        if len(window) == 0:
            raise ValueError("entropy window is empty after the first step")
        l_s, g_s, n_pen = smoothing_loss(view, historical_mean(window), cfg, params)

    l_epo = l_mt - lam * (l_h - beta * l_s)
    grad = g_mt - lam * (g_h - beta * g_s)
    return LossReport(
        l_mt=l_mt,
        l_h=l_h,
        l_smooth=l_s,
        beta_k=beta,
        lam=lam,
        l_epo=l_epo,
        n_penalized=n_pen,
        grad=grad,
        components={"g_mt": g_mt, "g_h": g_h, "g_smooth": g_s},
    )
