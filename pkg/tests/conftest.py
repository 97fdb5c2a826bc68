import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from epolab.core import Batch, Observation, TokenStep, Trajectory, Turn
from epolab.env import ChainLock
from epolab.policy import init_params
from epolab.trainer import feature_map_for, rollout

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def step_with_entropy(h: float, vocab: int = 4) -> TokenStep:
    """Token step whose recorded entropy is ``h`` (distribution left uniform)."""
    probs = np.full(vocab, 1.0 / vocab)
    return TokenStep(probs=probs, chosen=0, logprob=math.log(probs[0]), entropy=float(h))


def traj_from_entropies(turns: list[list[float]], reward: int = 0, task_id: int = 0) -> Trajectory:
    out = []
    for t, ents in enumerate(turns):
        obs = Observation(state_id=0, turn_index=t, feature_tag=0, task_id=task_id)
        out.append(Turn(obs, tuple(step_with_entropy(h) for h in ents), 0))
    return Trajectory(tuple(out), reward, task_id, 0)


@pytest.fixture
def small_env():
    return ChainLock(horizon=4, vocab_size=6, tokens_per_turn=2, n_commands=3, n_variants=6)


def sample_batch(env, params, seed: int, n: int = 4, greedy: bool = False) -> Batch:
    rng = np.random.default_rng(seed)
    tasks = env.task_ids("iid")
    trajs = tuple(rollout(params, env, tasks[i % len(tasks)], rng, seed=i, greedy=greedy) for i in range(n))
    return Batch(trajs, 0)


def random_params(env, kind: str, seed: int, scale: float = 0.7, hidden: int = 6, n_buckets: int = 0):
    fmap = feature_map_for(env, n_buckets)
    return init_params(fmap, kind, hidden, scale, np.random.default_rng(seed))
