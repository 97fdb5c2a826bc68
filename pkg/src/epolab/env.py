"""Deterministic multi-turn environments with a single binary terminal reward.

Two environments are provided:

* ``ChainLock``: each turn the agent emits a short token command; a hidden
  per-variant command sequence must be entered in order. Every variant ships
  the same decoy sequence whose progress is visible in the observation but
  which never pays out.
* ``GridQuest``: a 5x5 grid where the agent must pick up a key and then
  reach a door. Token tuples decode to moves. A fake key near the start is
  the decoy.

Transitions are pure functions of ``(observation, action)``; no randomness
is involved once a task variant is chosen.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .core import Observation, Trajectory

NOOP = -1
SPLITS = ("iid", "ood")


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    task_id: int
    split: str


@dataclass(frozen=True)
class EnvSpec:
    name: str
    horizon: int
    vocab_size: int
    max_tokens_per_turn: int
    variant_pool: tuple[Variant, ...]

    def __post_init__(self):
        if self.horizon < 2:
            raise EnvError("horizon must be at least 2")
        if self.vocab_size < 2:
            raise EnvError("vocabulary must have at least 2 tokens")
        if self.max_tokens_per_turn < 1:
            raise EnvError("need at least one token per turn")
        ids = [v.task_id for v in self.variant_pool]
        if len(set(ids)) != len(ids):
            raise EnvError("duplicate task ids in variant pool")
        if any(v.split not in SPLITS for v in self.variant_pool):
            raise EnvError("variant split must be 'iid' or 'ood'")

    def task_ids(self, split: str | None = None) -> list[int]:
        return [v.task_id for v in self.variant_pool if split is None or v.split == split]


class Environment:
    """Shared plumbing; subclasses define the transition and decoding tables."""

    spec: EnvSpec
    n_states: int
    n_tags: int
    decoy_actions: tuple[int, ...]

    def __init__(self, allowed_split: str | None = None):
        self._allowed_split = allowed_split

    # -- subclass hooks -------------------------------------------------
    def _initial(self, task_id: int) -> Observation:
        raise NotImplementedError

    def _transition(self, obs: Observation, action: int) -> Observation:
        raise NotImplementedError

    def decode(self, tokens: Sequence[int]) -> int:
        raise NotImplementedError

    @property
    def actions(self) -> tuple[int, ...]:
        """Every non-no-op action."""
        raise NotImplementedError

    def tokens_for(self, action: int) -> tuple[int, ...]:
        """Some token sequence of full length that decodes to ``action``."""
        for toks in itertools.product(range(self.spec.vocab_size), repeat=self.spec.max_tokens_per_turn):
            if self.decode(toks) == action:
                return toks
        raise EnvError(f"no token sequence decodes to action {action}")

    # -- public interface ----------------------------------------------
    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    def task_ids(self, split: str | None = None) -> list[int]:
        ids = self.spec.task_ids(split)
        if self._allowed_split is not None:
            ids = [t for t in ids if t in self.spec.task_ids(self._allowed_split)]
        return ids

    def restricted(self, split: str) -> "Environment":
        """A view of this environment that only accepts variants of ``split``."""
        if split not in SPLITS:
            raise EnvError(f"unknown split {split!r}")
        view = object.__new__(type(self))
        view.__dict__.update(self.__dict__)
        view._allowed_split = split
        return view

    def reset(self, task_id: int, seed: int = 0) -> Observation:
        # seed is accepted for interface symmetry; transitions are deterministic
        if task_id not in self.spec.task_ids():
            raise EnvError(f"unknown task id {task_id}")
        if self._allowed_split is not None and task_id not in self.spec.task_ids(self._allowed_split):
            raise EnvError(f"task {task_id} is not in the {self._allowed_split} split")
        return self._initial(task_id)

    def step(self, obs: Observation, action: int) -> tuple[Observation, bool]:
        if obs.done:
            raise EnvError("step called on a finished episode")
        if action not in self.actions:
            action = NOOP
        nxt = self._transition(obs, action)
        return nxt, nxt.done

    def rollout_actions(self, task_id: int, actions: Iterable[int]) -> list[Observation]:
        obs = self.reset(task_id)
        path = [obs]
        for a in actions:
            obs, _ = self.step(obs, a)
            path.append(obs)
        return path

    def terminal_reward(self, traj: Trajectory) -> int:
        """Replay the decoded actions and report the binary outcome."""
        path = self.rollout_actions(traj.task_id, [t.decoded_action for t in traj.turns])
        if not path[-1].done:
            raise EnvError("trajectory is incomplete")
        return int(path[-1].success)

    # -- exhaustive search helpers -------------------------------------
    def success_reachable(self, obs: Observation) -> bool:
        return _reachable(self, obs)

    def oracle_actions(self, task_id: int) -> list[int]:
        """A shortest successful action sequence, found by search."""
        best = _shortest(self, self.reset(task_id))
        if best is None:
            raise EnvError(f"task {task_id} is unsolvable")
        return list(best)

    def decoy_is_suboptimal(self, depth: int = 3) -> bool:
        """True iff, for every variant, success is reachable from the start but
        not after following the decoy for its first ``depth`` turns."""
        for task in self.spec.task_ids():
            obs = self.reset(task)
            if not self.success_reachable(obs):
                return False
            for a in self.decoy_actions[:depth]:
                if obs.done:
                    break
                obs, _ = self.step(obs, a)
            if obs.success or (not obs.done and self.success_reachable(obs)):
                return False
        return True


def _reachable(env: Environment, obs: Observation) -> bool:
    @functools.lru_cache(maxsize=None)
    def search(o: Observation) -> bool:
        if o.done:
            return o.success
        return any(search(env.step(o, a)[0]) for a in env.actions)

    return search(obs)


def _shortest(env: Environment, obs: Observation) -> tuple[int, ...] | None:
    frontier = [(obs, ())]
    seen = {obs}
    while frontier:
        nxt = []
        for o, path in frontier:
            for a in env.actions:
                o2, _ = env.step(o, a)
                if o2.success:
                    return path + (a,)
                if not o2.done and o2 not in seen:
                    seen.add(o2)
                    nxt.append((o2, path + (a,)))
        frontier = nxt
    return None


def _split_pool(n_variants: int) -> tuple[Variant, ...]:
    if n_variants < 2:
        raise EnvError("need at least two variants for an IID/OOD split")
    half = n_variants // 2
    return tuple(Variant(i, "iid" if i < half else "ood") for i in range(n_variants))


class ChainLock(Environment):
    """Enter the hidden command sequence, one command per turn.

    Commands are decoded from ``tokens_per_turn`` tokens. With
    ``decode="modular"`` the token sum modulo ``n_commands`` names the command
    (every full-length sequence is valid); with ``decode="exact"`` each command
    has one canonical token sequence and anything else is a no-op.

    The observation's ``feature_tag`` is ``status * n_commands + cue`` where the
    cue is the next required command shifted by a fixed per-turn key, and the
    status flags whether the agent is only on the decoy track. A wrong command
    ends the episode unless it keeps the decoy alive.
    """

    def __init__(
        self,
        horizon: int = 6,
        vocab_size: int = 8,
        tokens_per_turn: int = 1,
        n_commands: int = 2,
        n_variants: int = 8,
        decode: str = "modular",
        env_seed: int = 0,
        decoy_depth: int = 3,
    ):
        super().__init__()
        if n_commands < 2:
            raise EnvError("ChainLock needs at least two commands")
        if decode not in ("modular", "exact"):
            raise EnvError(f"unknown decode mode {decode!r}")
        if decode == "exact" and n_commands > vocab_size**tokens_per_turn:
            raise EnvError("more commands than distinct token sequences")
        self.spec = EnvSpec("chainlock", horizon, vocab_size, tokens_per_turn, _split_pool(n_variants))
        self.n_commands = n_commands
        self.decode_mode = decode
        rng = np.random.default_rng(env_seed)
        if decode == "exact":
            codes = rng.choice(vocab_size**tokens_per_turn, size=n_commands, replace=False)
            self._canonical = {_code_to_tokens(int(c), vocab_size, tokens_per_turn): i for i, c in enumerate(codes)}
        else:
            self._canonical = {}
        self.cue_key = tuple(int(x) for x in rng.integers(0, n_commands, size=horizon))
        self.decoy_actions = tuple([0] * horizon)
        self.hidden = self._make_variants(rng, n_variants, min(decoy_depth, horizon))
        self.n_tags = 2 * n_commands
        self.n_states = (horizon + 2) ** 2

    def _make_variants(self, rng, n_variants, decoy_depth):
        c, t = self.n_commands, self.horizon
        if c**t <= 200_000:
            pool = [seq for seq in itertools.product(range(c), repeat=t)]
        else:
            pool = list({tuple(int(x) for x in rng.integers(0, c, size=t)) for _ in range(20 * n_variants)})
            pool.sort()
        pool = [s for s in pool if s[:decoy_depth] != self.decoy_actions[:decoy_depth]]
        order = rng.permutation(len(pool))
        pool = [pool[i] for i in order]
        # round-robin on the first command so neighbouring variants start differently
        buckets = [[s for s in pool if s[0] == k] for k in range(c)]
        chosen = []
        for i in itertools.count():
            b = buckets[i % c]
            if b:
                chosen.append(b.pop(0))
            if len(chosen) == n_variants or not any(buckets):
                break
        if len(chosen) < n_variants:
            raise EnvError("not enough distinct hidden sequences for the requested variant count")
        return tuple(chosen)

    @property
    def actions(self) -> tuple[int, ...]:
        return tuple(range(self.n_commands))

    def decode(self, tokens: Sequence[int]) -> int:
        toks = tuple(int(x) for x in tokens)
        if len(toks) != self.spec.max_tokens_per_turn or any(not 0 <= x < self.spec.vocab_size for x in toks):
            return NOOP
        if self.decode_mode == "exact":
            return self._canonical.get(toks, NOOP)
        return sum(toks) % self.n_commands

    def _observe(self, task_id, turn, progress, decoy, done, success) -> Observation:
        hidden = self.hidden[task_id]
        t = min(turn, self.horizon - 1)
        if progress >= 0 and progress < len(hidden):
            tag = (hidden[progress] + self.cue_key[t]) % self.n_commands
        elif decoy >= 0 and decoy < len(self.decoy_actions):
            tag = self.n_commands + (self.decoy_actions[decoy] + self.cue_key[t]) % self.n_commands
        else:
            tag = 0
        state_id = (progress + 1) * (self.horizon + 2) + (decoy + 1)
        return Observation(
            state_id=state_id,
            turn_index=turn,
            feature_tag=tag,
            task_id=task_id,
            done=done,
            success=success,
            detail=(progress, decoy),
        )

    def _initial(self, task_id):
        return self._observe(task_id, 0, 0, 0, False, False)

    def _transition(self, obs, action):
        progress, decoy = obs.detail
        hidden = self.hidden[obs.task_id]
        if action != NOOP:
            progress = progress + 1 if progress >= 0 and action == hidden[progress] else -1
            if decoy >= 0 and decoy < len(self.decoy_actions) and action == self.decoy_actions[decoy]:
                decoy += 1
            else:
                decoy = -1
        turn = obs.turn_index + 1
        success = progress == len(hidden)
        done = success or turn >= self.horizon or (progress < 0 and decoy < 0)
        return self._observe(obs.task_id, turn, progress, decoy, done, success)


def _code_to_tokens(code: int, base: int, length: int) -> tuple[int, ...]:
    out = []
    for _ in range(length):
        out.append(code % base)
        code //= base
    return tuple(reversed(out))


MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


class GridQuest(Environment):
    """Fetch the key, then walk onto the door, within the horizon.

    Token tuples are read as a base-``vocab_size`` number ``q``; ``q % 5``
    selects up/down/left/right or (value 4) a no-op. The fake key is the
    decoy: stepping on it sets a visible flag but does nothing else.
    """

    def __init__(
        self,
        horizon: int = 10,
        vocab_size: int = 4,
        tokens_per_turn: int = 2,
        n_variants: int = 8,
        env_seed: int = 0,
        size: int = 5,
    ):
        super().__init__()
        self.size = size
        self.start = (0, 0)
        self.fake_key = (0, 3)
        self.decoy_actions = (3, 3, 3)
        self.spec = EnvSpec("gridquest", horizon, vocab_size, tokens_per_turn, _split_pool(n_variants))
        rng = np.random.default_rng(env_seed)
        cells = [(r, c) for r in range(size) for c in range(size)]
        dist = lambda a, b: abs(a[0] - b[0]) + abs(a[1] - b[1])  # noqa: E731
        after_decoy = len(self.decoy_actions)
        # cells the decoy walk visits; a key there would be collected by the decoy
        on_decoy = {self.start}
        r, c = self.start
        for a in self.decoy_actions:
            r, c = r + MOVES[a][0], c + MOVES[a][1]
            on_decoy.add((r, c))
        candidates = [
            (k, d)
            for k in cells
            for d in cells
            if k != d
            and k not in on_decoy
            and d != self.start
            and dist(self.start, k) + dist(k, d) <= horizon
            and dist(self.fake_key, k) + dist(k, d) > horizon - after_decoy
        ]
        if len(candidates) < n_variants:
            raise EnvError("horizon too short or too long for the requested variant count")
        order = rng.permutation(len(candidates))[:n_variants]
        self.layouts = tuple(candidates[i] for i in order)
        self.n_tags = 36
        self.n_states = size * size * 4

    @property
    def actions(self) -> tuple[int, ...]:
        return (0, 1, 2, 3)

    def decode(self, tokens: Sequence[int]) -> int:
        toks = tuple(int(x) for x in tokens)
        v = self.spec.vocab_size
        if len(toks) != self.spec.max_tokens_per_turn or any(not 0 <= x < v for x in toks):
            return NOOP
        q = 0
        for x in toks:
            q = q * v + x
        m = q % 5
        return NOOP if m == 4 else m

    def _observe(self, task_id, turn, pos, has_key, has_fake, done, success):
        key, door = self.layouts[task_id]
        target = door if has_key else key
        dr = int(np.sign(target[0] - pos[0])) + 1
        dc = int(np.sign(target[1] - pos[1])) + 1
        tag = 3 * dr + dc + 9 * has_key + 18 * has_fake
        state_id = ((pos[0] * self.size + pos[1]) * 2 + has_key) * 2 + has_fake
        return Observation(
            state_id=state_id,
            turn_index=turn,
            feature_tag=tag,
            task_id=task_id,
            done=done,
            success=success,
            detail=(pos, has_key, has_fake),
        )

    def _initial(self, task_id):
        return self._observe(task_id, 0, self.start, 0, 0, False, False)

    def _transition(self, obs, action):
        pos, has_key, has_fake = obs.detail
        key, door = self.layouts[obs.task_id]
        if action != NOOP:
            dr, dc = MOVES[action]
            r, c = pos[0] + dr, pos[1] + dc
            if 0 <= r < self.size and 0 <= c < self.size:
                pos = (r, c)
        if pos == key:
            has_key = 1
        if pos == self.fake_key:
            has_fake = 1
        turn = obs.turn_index + 1
        success = bool(has_key and pos == door)
        done = success or turn >= self.horizon
        return self._observe(obs.task_id, turn, pos, has_key, has_fake, done, success)


ENVIRONMENTS = {"chainlock": ChainLock, "gridquest": GridQuest}


def make_env(name: str, **kwargs) -> Environment:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise EnvError(f"unknown environment {name!r}") from None
    return cls(**kwargs)


def describe(env: Environment) -> dict:
    out = {"name": env.name, "horizon": env.horizon, "n_states": env.n_states, "n_tags": env.n_tags}
    out["iid"] = env.task_ids("iid")
    out["ood"] = env.task_ids("ood")
    return out


__all__ = [
    "NOOP",
    "ChainLock",
    "EnvError",
    "EnvSpec",
    "Environment",
    "GridQuest",
    "Variant",
    "describe",
    "make_env",
]
