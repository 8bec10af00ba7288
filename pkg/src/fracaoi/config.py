"""Flat ``[section] key = value`` configuration files.

Sections map onto the dataclass configs: ``scenario`` -> Scenario,
``learner`` -> LearnerConfig, ``fql`` -> FqlConfig, ``fnql`` -> FnqlConfig.
``mdp`` and ``game`` describe tabular problems and ``run`` holds the seed list
and output options.
"""
from __future__ import annotations

import ast
import configparser
import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .fql import FqlConfig, FractionalMdp, random_mdp, single_state_mdp
from .marl import LearnerConfig
from .mec import Scenario
from .nashq import FnqlConfig, MarkovGame, random_game


class ConfigError(ValueError):
    pass


SECTIONS = {"scenario": Scenario, "learner": LearnerConfig, "fql": FqlConfig, "fnql": FnqlConfig}


def _coerce(raw: str, hint: Any, key: str):
    hint_s = str(hint)
    text = raw.strip()
    if text.lower() in ("none", "") and "Optional" in hint_s:
        return None
    try:
        if hint is bool or hint_s == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int or hint_s in ("int", "Optional[int]", "typing.Optional[int]"):
            return int(text)
        if hint is float or hint_s in ("float", "Optional[float]", "typing.Optional[float]"):
            return float(text)
        if hint is str or hint_s == "str":
            return text
        val = ast.literal_eval(text)
        return tuple(val) if isinstance(val, list) else val
    except (ValueError, SyntaxError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def build(cls, items: dict[str, str], section: str = ""):
    """Instantiate dataclass ``cls`` from string items, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(items) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in items.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


@dataclass
class RunConfig:
    seeds: tuple = (0,)
    modes: tuple = ("fractional", "nonfractional")
    baselines: tuple = ("zero-wait", "random")


@dataclass
class LoadedConfig:
    scenario: Scenario = field(default_factory=Scenario)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    fql: FqlConfig = field(default_factory=FqlConfig)
    fnql: FnqlConfig = field(default_factory=FnqlConfig)
    run: RunConfig = field(default_factory=RunConfig)
    mdp: Optional[dict] = None
    game: Optional[dict] = None


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case
    return cp


def load_config(path) -> LoadedConfig:
    cp = _parser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    out = LoadedConfig()
    for sec in cp.sections():
        items = dict(cp.items(sec))
        if sec in SECTIONS:
            setattr(out, sec, build(SECTIONS[sec], items, sec))
        elif sec == "run":
            out.run = build(RunConfig, items, sec)
        elif sec in ("mdp", "game"):
            setattr(out, sec, items)
        else:
            raise ConfigError(f"unknown section [{sec}]")
    return out


def _array(items: dict, key: str) -> np.ndarray:
    if key not in items:
        raise ConfigError(f"missing key {key}")
    try:
        return np.asarray(json.loads(items[key]), dtype=float)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{key} is not a JSON array") from exc


def mdp_from_items(items: dict) -> FractionalMdp:
    """``kind = random`` (seed, n_states, n_actions, delta), ``kind = pairs``
    (single state, JSON list of [c_N, c_D]) or ``kind = explicit`` (JSON
    arrays P, cost_n, cost_d, mu0)."""
    kind = items.get("kind", "random")
    try:
        delta = float(items.get("delta", 0.6))
        if kind == "random":
            return random_mdp(int(items.get("seed", 0)), int(items.get("n_states", 3)),
                              int(items.get("n_actions", 2)), delta)
        if kind == "pairs":
            return single_state_mdp([tuple(p) for p in _array(items, "pairs")], delta)
        if kind == "explicit":
            P = _array(items, "P")
            mu0 = _array(items, "mu0") if "mu0" in items else np.eye(P.shape[0])[0]
            return FractionalMdp(P, _array(items, "cost_n"), _array(items, "cost_d"), delta, mu0)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[mdp]: {exc}") from exc
    raise ConfigError(f"unknown mdp kind {kind!r}")


def game_from_items(items: dict) -> MarkovGame:
    """``kind = random`` (seed, n_states, action_counts, delta) or ``kind =
    explicit`` (action_counts plus JSON arrays P, cost_n, cost_d, mu0)."""
    kind = items.get("kind", "random")
    try:
        delta = float(items.get("delta", 0.6))
        counts = tuple(int(a) for a in json.loads(items.get("action_counts", "[2, 2]")))
        if kind == "random":
            return random_game(int(items.get("seed", 0)), int(items.get("n_states", 2)), counts, delta)
        if kind == "explicit":
            P = _array(items, "P")
            mu0 = _array(items, "mu0") if "mu0" in items else np.eye(P.shape[0])[0]
            return MarkovGame(counts, P, _array(items, "cost_n"), _array(items, "cost_d"), delta, mu0)
    except (TypeError, ValueError, json.JSONDecodeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"[game]: {exc}") from exc
    raise ConfigError(f"unknown game kind {kind!r}")
