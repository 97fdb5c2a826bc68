"""The on-policy training loop: rollout, advantages, loss, update, window.

Randomness is derived from ``(seed, step, stream, index)`` seed sequences, so a
run is a pure function of its configuration and seed.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Batch, Trajectory, batch_mean_entropy
from .env import Environment
from .losses import EpoConfig, LossReport, epo_loss, grpo_batch_advantages, ppo_advantage
from .policy import FeatureMap, PolicyParams, ValueBaseline, act, init_params, value_update
from .window import EntropyWindow, push

log = logging.getLogger(__name__)

_STREAM_ROLLOUT = 0
_STREAM_TASK = 1
_STREAM_INIT = 2
_STREAM_EVAL = 3


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class PolicyConfig:
    scorer: str = "tabular"
    hidden: int = 16
    n_buckets: int = 0
    init_scale: float = 0.0
    value_lr: float = 0.5


@dataclass(frozen=True)
class TrainerConfig:
    step_size: float = 1.0
    eval_every: int = 5
    eval_episodes: int = 0
    tail_fraction: float = 0.25
    checkpoint_every: int = 0
    early_late_tokens: int = 10

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if not 0 < self.tail_fraction <= 1:
            raise ValueError("tail_fraction must lie in (0, 1]")


@dataclass
class MetricsRecord:
    k: int
    train_reward: float
    l_mt: float
    l_h: float
    l_smooth: float
    beta_k: float
    lam: float
    l_epo: float
    n_penalized: int
    batch_entropy: float
    early_entropy: float
    late_entropy: float
    iid_success: float | None = None
    ood_success: float | None = None
    wall_clock: float = 0.0

    def to_json(self) -> str:
        # wall-clock time is kept out of the metrics stream so reruns are byte-identical
        d = asdict(self)
        d.pop("wall_clock")
        return json.dumps(d, sort_keys=True)


@dataclass
class RunState:
    params: PolicyParams
    baseline: ValueBaseline
    window: EntropyWindow
    k: int
    rng_root: int
    metrics: list[MetricsRecord] = field(default_factory=list)


def _rng(root: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(root, spawn_key=key))


def feature_map_for(env: Environment, n_buckets: int = 0) -> FeatureMap:
    return FeatureMap(env.n_tags, env.horizon, env.spec.vocab_size, env.spec.max_tokens_per_turn, n_buckets)


def init_run(env: Environment, policy_cfg: PolicyConfig, seed: int, window_capacity: int | None = None) -> RunState:
    fmap = feature_map_for(env, policy_cfg.n_buckets)
    params = init_params(fmap, policy_cfg.scorer, policy_cfg.hidden, policy_cfg.init_scale, _rng(seed, _STREAM_INIT))
    baseline = ValueBaseline.zeros(env.n_states, env.horizon, policy_cfg.value_lr)
    return RunState(params, baseline, EntropyWindow((), window_capacity), 0, int(seed))


def rollout(
    params: PolicyParams,
    env: Environment,
    task_id: int,
    rng: np.random.Generator,
    seed: int = 0,
    greedy: bool = False,
) -> Trajectory:
    obs = env.reset(task_id, seed)
    turns = []
    while True:
        turn = act(params, obs, obs.turn_index, rng, env.decode, greedy=greedy)
        turns.append(turn)
        obs, done = env.step(obs, turn.decoded_action)
        if done:
            break
    return Trajectory(tuple(turns), int(obs.success), task_id, seed)


def collect_batch(state: RunState, env: Environment, batch_size: int, group_size: int = 1) -> Batch:
    """Sample ``batch_size`` episodes on IID variants; groups share a task."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    if batch_size % group_size:
        raise ValueError("batch size must be a multiple of the group size")
    pool = env.task_ids("iid")
    trajs = []
    for g in range(batch_size // group_size):
        task = pool[int(_rng(state.rng_root, state.k, _STREAM_TASK, g).integers(len(pool)))]
        for i in range(group_size):
            j = g * group_size + i
            ss = np.random.SeedSequence(state.rng_root, spawn_key=(state.k, _STREAM_ROLLOUT, j))
            seed = int(ss.generate_state(1)[0])
            trajs.append(rollout(state.params, env, task, np.random.default_rng(ss), seed))
    return Batch(tuple(trajs), state.k)


def evaluate(
    params: PolicyParams,
    env: Environment,
    split: str,
    episodes: int = 0,
    greedy: bool = True,
    seed: int = 0,
) -> float:
    """Success rate of rollouts cycling over the variants of ``split``."""
    tasks = env.task_ids(split)
    if not tasks:
        raise ValueError(f"split {split!r} has no variants")
    n = episodes if episodes > 0 else len(tasks)
    wins = 0
    for e in range(n):
        rng = _rng(seed, _STREAM_EVAL, e)
        wins += rollout(params, env, tasks[e % len(tasks)], rng, greedy=greedy).terminal_reward
    return wins / n


def summarize_run(metrics, tail_fraction: float = 0.25, split: str = "iid") -> tuple[float, float]:
    """Best evaluation and mean over the trailing ``tail_fraction`` of evaluations."""
    rates = []
    for m in metrics:
        if isinstance(m, MetricsRecord):
            v = m.iid_success if split == "iid" else m.ood_success
        elif isinstance(m, dict):
            v = m.get(f"{split}_success")
        else:
            v = m
        if v is not None:
            rates.append(float(v))
    if not rates:
        raise ValueError("no evaluation records")
    n_tail = max(1, math.ceil(tail_fraction * len(rates) - 1e-9))
    tail = rates[-n_tail:]
    return max(rates), math.fsum(tail) / len(tail)


def early_late_entropy(batch: Batch, n_tokens: int = 10) -> tuple[float, float]:
    """Mean token entropy of the first and last ``n_tokens`` positions of each episode."""
    if n_tokens < 1:
        raise ValueError("n_tokens must be >= 1")
    early, late = [], []
    for traj in batch.trajectories:
        ent = [s.entropy for turn in traj.turns for s in turn.steps]
        early.append(math.fsum(ent[:n_tokens]) / len(ent[:n_tokens]))
        late.append(math.fsum(ent[-n_tokens:]) / len(ent[-n_tokens:]))
    return math.fsum(early) / len(early), math.fsum(late) / len(late)


def compute_advantages(state: RunState, batch: Batch, cfg: EpoConfig):
    if cfg.uses_grpo:
        return grpo_batch_advantages(batch, cfg.group_size, cfg.grpo_delta)
    return ppo_advantage(batch, state.baseline)


def train_step(
    state: RunState,
    env: Environment,
    cfg: EpoConfig,
    tcfg: TrainerConfig,
) -> tuple[RunState, LossReport]:
    if state.k >= cfg.K:
        raise ValueError("training already finished")
    t0 = time.perf_counter()
    group = cfg.group_size if cfg.uses_grpo else 1
    batch = collect_batch(state, env, cfg.batch_size, group)
    advantages = compute_advantages(state, batch, cfg)
    report = epo_loss(batch, advantages, state.window, state.k, cfg, state.params)
    h_batch = batch_mean_entropy(batch)
    early, late = early_late_entropy(batch, tcfg.early_late_tokens)
    record = MetricsRecord(
        k=state.k,
        train_reward=float(np.mean([t.terminal_reward for t in batch.trajectories])),
        l_mt=report.l_mt,
        l_h=report.l_h,
        l_smooth=report.l_smooth,
        beta_k=report.beta_k,
        lam=report.lam,
        l_epo=report.l_epo,
        n_penalized=report.n_penalized,
        batch_entropy=h_batch,
        early_entropy=early,
        late_entropy=late,
    )
    if not (math.isfinite(report.l_epo) and np.all(np.isfinite(report.grad))):
        raise NonFiniteLossError(f"non-finite loss at step {state.k}", json.loads(record.to_json()))

    params = state.params.with_weights(state.params.weights - tcfg.step_size * report.grad)
    baseline = state.baseline
    if not cfg.uses_grpo:
        baseline = value_update(baseline, batch, [t.terminal_reward for t in batch.trajectories])
    window = push(state.window, h_batch)

    k_next = state.k + 1
    if k_next % tcfg.eval_every == 0 or k_next == cfg.K:
        record.iid_success = evaluate(params, env, "iid", tcfg.eval_episodes)
        record.ood_success = evaluate(params, env, "ood", tcfg.eval_episodes)
    record.wall_clock = time.perf_counter() - t0
    new_state = RunState(params, baseline, window, k_next, state.rng_root, state.metrics + [record])
    return new_state, report


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_checkpoint(state: RunState, path: Path) -> None:
    p = state.params
    fm = p.feature_map
    payload = {
        "k": state.k,
        "rng_root": state.rng_root,
        "params": {
            "scorer_kind": p.scorer_kind,
            "hidden": p.hidden,
            "feature_map": asdict(fm),
            "weights": p.weights.tolist(),
        },
        "baseline": {"table": state.baseline.table.tolist(), "learning_rate": state.baseline.learning_rate},
        "window": state.window.to_dict(),
    }
    tmp = Path(path).with_suffix(".tmp")
    tmp.write_text(json.dumps(payload))
    tmp.replace(path)


def load_checkpoint(path: Path, metrics: list[MetricsRecord] | None = None) -> RunState:
    d = json.loads(Path(path).read_text())
    pp = d["params"]
    params = PolicyParams(pp["scorer_kind"], np.array(pp["weights"]), FeatureMap(**pp["feature_map"]), pp["hidden"])
    baseline = ValueBaseline(np.array(d["baseline"]["table"]), d["baseline"]["learning_rate"])
    return RunState(params, baseline, EntropyWindow.from_dict(d["window"]), d["k"], d["rng_root"], list(metrics or []))


def read_metrics(path: Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_training(
    env: Environment,
    cfg: EpoConfig,
    tcfg: TrainerConfig,
    pcfg: PolicyConfig,
    seed: int,
    out_dir: Path | None = None,
    resume: bool = False,
    window_capacity: int | None = None,
) -> RunState:
    """Train for ``cfg.K`` steps, streaming metrics and checkpoints to ``out_dir``."""
    state = init_run(env, pcfg, seed, window_capacity)
    metrics_path = ckpt_path = timing_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        timing_path = out_dir / "timing.jsonl"
        ckpt_path = out_dir / "checkpoint.json"
        if resume and ckpt_path.exists():
            state = load_checkpoint(ckpt_path)
            kept = read_metrics(metrics_path)[: state.k] if metrics_path.exists() else []
            state.metrics = [MetricsRecord(**r) for r in kept]
            metrics_path.write_text("".join(MetricsRecord(**r).to_json() + "\n" for r in kept))
            log.info("resumed seed %d at step %d", seed, state.k)
        else:
            metrics_path.write_text("")
            timing_path.write_text("")

    while state.k < cfg.K:
        state, _ = train_step(state, env, cfg, tcfg)
        rec = state.metrics[-1]
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(rec.to_json() + "\n")
            with open(timing_path, "a") as fh:
                fh.write(json.dumps({"k": rec.k, "wall_clock": rec.wall_clock}) + "\n")
            due = tcfg.checkpoint_every and state.k % tcfg.checkpoint_every == 0
            if due or state.k == cfg.K:
                save_checkpoint(state, ckpt_path)
    return state
