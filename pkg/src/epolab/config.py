"""Experiment configuration files.

A config is an INI-style text file with the sections ``env``, ``policy``,
``epo``, ``trainer``, ``run`` and (optionally) ``sweep``.  Values are Python
literals (``0.05``, ``None``, ``[0, 1]``) or bare words for strings.  Every
key must be known; anything else is reported with its line number.

Example::

    [env]
    name = chainlock
    horizon = 6
    vocab_size = 8

    [epo]
    variant = epo
    lambda = 0.05

    [trainer]
    K = 200
    step_size = 50

    [run]
    seeds = 0, 1, 2, 3, 4
    out_dir = runs/chainlock

    [sweep]
    epo.variant = ppo, epo_base, epo
"""

from __future__ import annotations

import ast
import configparser
import hashlib
import inspect
import itertools
import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .env import ENVIRONMENTS, EnvError, make_env
from .losses import ConfigError, EpoConfig
from .trainer import PolicyConfig, TrainerConfig

SECTIONS = ("env", "policy", "epo", "trainer", "run", "sweep")
RUN_KEYS = {"seeds": "0", "out_dir": "runs/default", "workers": "1"}
# fields of EpoConfig whose file key differs from the attribute name
EPO_ALIASES = {"lambda": "lam"}


class ConfigFileError(ValueError):
    """Invalid config; ``str()`` reads ``path:line: message``."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        self.message = message
        loc = f"{path or '<config>'}:{line}" if line else (path or "<config>")
        super().__init__(f"{loc}: {message}")


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Line number of every section header and key."""
    index: dict[tuple[str, str | None], int] = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), n)
            continue
        if section is not None and not raw[:1].isspace():
            key = re.split(r"[=:]", line, maxsplit=1)[0].strip()
            index.setdefault((section, key), n)
    return index


def parse_value(raw: str):
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def _coerce(value, annotation: str, key: str):
    """Match a parsed literal against a dataclass annotation string."""
    ann = annotation.replace(" ", "")
    optional = "None" in ann
    if value is None:
        if optional:
            return None
        raise ValueError(f"{key} may not be None")
    base = ann.split("|")[0]
    if base == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{key} must be a number, got {value!r}")
        return float(value)
    if base == "int":
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ValueError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if base == "str":
        return str(value)
    if base == "bool":
        if not isinstance(value, bool):
            raise ValueError(f"{key} must be True or False, got {value!r}")
        return value
    return value


def _seed_list(value) -> tuple[int, ...]:
    if isinstance(value, int) and not isinstance(value, bool):
        return (value,)
    if isinstance(value, (list, tuple)) and value and all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        return tuple(value)
    raise ValueError(f"seeds must be an integer or a list of integers, got {value!r}")


def _list_values(raw: str) -> list:
    v = parse_value(raw)
    if isinstance(v, (list, tuple)):
        return list(v)
    if isinstance(v, str) and "," in v:
        return [parse_value(x) for x in v.split(",")]
    return [v]


def _env_signature(name: str) -> dict[str, inspect.Parameter]:
    params = inspect.signature(ENVIRONMENTS[name].__init__).parameters
    return {k: p for k, p in params.items() if k != "self"}


@dataclass(frozen=True)
class ExperimentConfig:
    env_name: str = "chainlock"
    env_kwargs: dict = field(default_factory=dict)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    epo: EpoConfig = field(default_factory=EpoConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    window_capacity: int | None = None
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/default"
    workers: int = 1
    sweep: dict = field(default_factory=dict)

    def make_env(self):
        return make_env(self.env_name, **self.env_kwargs)

    def to_dict(self) -> dict:
        trainer = {f.name: getattr(self.trainer, f.name) for f in fields(self.trainer)}
        trainer["K"] = self.epo.K
        trainer["window_capacity"] = self.window_capacity
        epo = self.epo.to_dict()
        epo.pop("K", None)
        return {
            "env": {"name": self.env_name, **self.env_kwargs},
            "policy": {f.name: getattr(self.policy, f.name) for f in fields(self.policy)},
            "epo": epo,
            "trainer": trainer,
            "run": {"seeds": list(self.seeds), "out_dir": self.out_dir, "workers": self.workers},
            "sweep": {k: list(v) for k, v in self.sweep.items()},
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        # where results land and how they are scheduled does not change them
        d["run"] = {"seeds": d["run"]["seeds"]}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """Copy with ``section.key`` overrides applied and re-validated."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            section, key = dotted.split(".", 1)
            d[section][key] = value
        d["sweep"] = {}
        return from_dict(d)

    def sweep_points(self) -> list[dict]:
        keys = sorted(self.sweep)
        return [dict(zip(keys, combo)) for combo in itertools.product(*(self.sweep[k] for k in keys))]


def _build(sections: dict[str, dict], where) -> ExperimentConfig:
    """Assemble and validate from parsed per-section dicts; ``where(section, key)`` gives a line."""

    def fail(section, key, msg):
        raise ConfigFileError(f"[{section}] {key}: {msg}" if key else f"[{section}] {msg}", where(section, key))

    for section in sections:
        if section not in SECTIONS:
            fail(section, None, f"unknown section (expected one of {', '.join(SECTIONS)})")

    # env
    env = dict(sections.get("env", {}))
    name = env.pop("name", "chainlock")
    if name not in ENVIRONMENTS:
        fail("env", "name", f"unknown environment {name!r} (known: {', '.join(sorted(ENVIRONMENTS))})")
    sig = _env_signature(name)
    env_kwargs = {}
    for key, value in env.items():
        if key not in sig:
            fail("env", key, f"unknown key for {name} (known: {', '.join(sig)})")
        default = sig[key].default
        ann = type(default).__name__ if default is not inspect.Parameter.empty and default is not None else ""
        try:
            env_kwargs[key] = _coerce(value, ann, key) if ann in ("int", "float", "str") else value
        except ValueError as exc:
            fail("env", key, str(exc))
    try:
        make_env(name, **env_kwargs)
    except (EnvError, ValueError, TypeError) as exc:
        fail("env", None, f"invalid environment: {exc}")

    def dataclass_section(section, cls, aliases=None, extra=()):
        aliases = aliases or {}
        known = {f.name: f for f in fields(cls)}
        kwargs, rest = {}, {}
        for key, value in sections.get(section, {}).items():
            attr = aliases.get(key, key)
            if key in extra:
                rest[key] = value
                continue
            if attr not in known or key in aliases.values():
                names = sorted((set(known) - set(aliases.values()) - {"K"}) | set(aliases) | set(extra))
                fail(section, key, f"unknown key (known: {', '.join(names)})")
            try:
                kwargs[attr] = _coerce(value, str(known[attr].type), key)
            except ValueError as exc:
                fail(section, key, str(exc))
        return kwargs, rest

    pol_kw, _ = dataclass_section("policy", PolicyConfig)
    epo_kw, _ = dataclass_section("epo", EpoConfig, EPO_ALIASES)
    if "K" in epo_kw:
        fail("epo", "K", "set the step budget K under [trainer]")
    tr_kw, tr_rest = dataclass_section("trainer", TrainerConfig, extra=("K", "window_capacity"))

    try:
        policy = PolicyConfig(**pol_kw)
        if policy.scorer not in ("tabular", "mlp"):
            raise ValueError("scorer must be 'tabular' or 'mlp'")
    except ValueError as exc:
        fail("policy", _guess_key(exc, pol_kw), str(exc))
    try:
        trainer = TrainerConfig(**tr_kw)
    except ValueError as exc:
        fail("trainer", _guess_key(exc, tr_kw), str(exc))
    try:
        K = _coerce(tr_rest.get("K", EpoConfig.K), "int", "K")
        cap = _coerce(tr_rest.get("window_capacity"), "int | None", "window_capacity")
        if cap is not None and cap < 1:
            raise ValueError("window_capacity must be positive")
    except ValueError as exc:
        fail("trainer", "window_capacity" if "window" in str(exc) else "K", str(exc))
    try:
        epo = EpoConfig(K=K, **epo_kw)
    except ConfigError as exc:
        key = {v: k for k, v in EPO_ALIASES.items()}.get(exc.key, exc.key)
        msg = str(exc).split(": ", 1)[-1]
        if key == "K":
            fail("trainer", "K", msg)
        fail("epo", key if key in sections.get("epo", {}) else None, msg if key in sections.get("epo", {}) else str(exc))

    # run
    run = dict(RUN_KEYS)
    run_vals = {k: parse_value(v) for k, v in run.items()}
    for key, value in sections.get("run", {}).items():
        if key not in RUN_KEYS:
            fail("run", key, f"unknown key (known: {', '.join(RUN_KEYS)})")
        run_vals[key] = value
    try:
        seeds = _seed_list(run_vals["seeds"])
    except ValueError as exc:
        fail("run", "seeds", str(exc))
    workers = run_vals["workers"]
    if not isinstance(workers, int) or isinstance(workers, bool) or workers < 1:
        fail("run", "workers", "must be a positive integer")

    # sweep
    sweep = {}
    for key, values in sections.get("sweep", {}).items():
        if "." not in key or key.split(".", 1)[0] not in ("env", "policy", "epo", "trainer"):
            fail("sweep", key, "sweep keys look like section.key, e.g. epo.lambda")
        if not values:
            fail("sweep", key, "needs at least one value")
        sweep[key] = list(values)

    cfg = ExperimentConfig(name, env_kwargs, policy, epo, trainer, cap, seeds, str(run_vals["out_dir"]), workers, sweep)
    # every sweep point must itself be valid before anything runs
    for point in cfg.sweep_points() if sweep else ():
        try:
            cfg.with_overrides(point)
        except ConfigFileError as exc:
            first = next(iter(point))
            raise ConfigFileError(f"sweep point {point}: {exc.message}", where("sweep", first)) from None
    return cfg


def _guess_key(exc: Exception, kwargs: dict) -> str | None:
    msg = str(exc)
    for key in kwargs:
        if key in msg:
            return key
    return None


def loads(text: str, path: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), strict=True)
    parser.optionxform = str  # keys are case-sensitive (K)
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        msg = str(exc).splitlines()[0]
        if isinstance(exc, configparser.MissingSectionHeaderError):
            msg = "expected a [section] header before the first key"
        elif isinstance(exc, configparser.ParsingError) and getattr(exc, "errors", None):
            line, bad = exc.errors[0]
            msg = f"cannot parse line {bad.strip()!r} (expected key = value)"
        raise ConfigFileError(msg, line, path) from None
    index = _line_index(text)

    def where(section, key):
        return index.get((section, key)) or index.get((section, None))

    sections: dict[str, dict] = {}
    for section in parser.sections():
        items = {}
        for key, raw in parser.items(section):
            items[key] = _list_values(raw) if section == "sweep" else parse_value(raw)
        if section == "run" and "seeds" in items and isinstance(items["seeds"], str):
            items["seeds"] = [parse_value(x) for x in items["seeds"].split(",")]
        sections[section] = items
    try:
        return _build(sections, where)
    except ConfigFileError as exc:
        if exc.path is None and path is not None:
            raise ConfigFileError(exc.message, exc.line, path) from None
        raise


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigFileError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    return loads(text, str(path))


def from_dict(d: dict) -> ExperimentConfig:
    """Inverse of :meth:`ExperimentConfig.to_dict` (also used for manifests)."""
    sections = {k: dict(v) for k, v in d.items() if v}
    if "run" in sections and "seeds" in sections["run"]:
        sections["run"]["seeds"] = list(sections["run"]["seeds"])
    return _build(sections, lambda s, k: None)


def dumps(cfg: ExperimentConfig) -> str:
    """Render a config back to the file format."""
    out = []
    for section, values in cfg.to_dict().items():
        if not values:
            continue
        out.append(f"[{section}]")
        for key, value in values.items():
            if section == "sweep":
                out.append(f"{key} = {', '.join(repr(v) for v in value)}")
            elif isinstance(value, str):
                out.append(f"{key} = {value}")
            else:
                out.append(f"{key} = {value!r}")
        out.append("")
    return "\n".join(out)
