"""Scenario configuration: TOML schema, validation and bundled scenarios."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..bridge import FCFS, STAKED_SHUFFLE, BridgeParams
from ..faults import FAULT_KINDS

SCHEMA_VERSION = 1

VERDICT_NAMES = (
    "liveness", "safety", "peg_conservation", "no_invalid_finalization", "bond_accounting",
    "finality", "fork_freedom", "convergence", "da_soundness",
)


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class ScriptedRound:
    round: int
    winners: tuple[str, ...]


@dataclass(frozen=True)
class EdgeDelay:
    src: str
    dst: str
    rounds: int
    from_round: int = 1
    until_round: Optional[int] = None

    def applies(self, r: int) -> bool:
        return r >= self.from_round and (self.until_round is None or r <= self.until_round)


@dataclass(frozen=True)
class MinerConfig:
    names: tuple[str, ...] = ("m0",)
    weights: tuple[float, ...] = ()
    script: tuple[ScriptedRound, ...] = ()
    delays: tuple[EdgeDelay, ...] = ()


@dataclass(frozen=True)
class ProducerConfig:
    id: str
    view: str
    strategy: str = "honest"  # honest | invalid | withholding
    fault: str = ""
    at_height: int = 0
    extend_invalid: bool = False
    withhold: int = 0
    fund: int = 0
    submit_empty: bool = False
    max_txs: Optional[int] = None
    staked: bool = False
    ignore_halt: bool = False


@dataclass(frozen=True)
class WatcherConfig:
    id: str
    view: str


@dataclass(frozen=True)
class UserConfig:
    count: int = 4
    view: str = ""
    mode: str = "random"  # random | ring
    deposit: int = 1000
    transfer_prob: float = 0.5
    burn_prob: float = 0.0
    burn_amount: int = 10
    start_round: int = 1
    stop_round: Optional[int] = None
    max_transfers: Optional[int] = None


@dataclass(frozen=True)
class CensorConfig:
    ids: tuple[str, ...]
    from_height: int
    duration: int


@dataclass(frozen=True)
class DAConfig:
    enabled: bool = False
    k: int = 8
    n: int = 16
    samples: int = 3
    clients: int = 2
    corrupt_coding_at: Optional[int] = None


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int = 1
    rounds: int = 50
    description: str = ""
    bridge: BridgeParams = field(default_factory=BridgeParams)
    witness_window: int = 8
    miners: MinerConfig = field(default_factory=MinerConfig)
    producers: tuple[ProducerConfig, ...] = ()
    watchers: tuple[WatcherConfig, ...] = ()
    users: UserConfig = field(default_factory=UserConfig)
    censors: tuple[CensorConfig, ...] = ()
    da: DAConfig = field(default_factory=DAConfig)
    finalizer: bool = True
    expect_fail: frozenset[str] = frozenset()
    source: str = ""

    @property
    def censorship_duration(self) -> int:
        return max((c.duration for c in self.censors), default=0)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)

    def digest(self) -> str:
        return hashlib.sha256(self.source.encode()).hexdigest()


def _take(table: dict, key: str, kind, default=None, required: bool = False):
    if key not in table:
        if required:
            raise ConfigInvalid(f"missing key {key!r}")
        return default
    value = table[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigInvalid(f"{key!r} must be an integer")
    if not isinstance(value, kind):
        raise ConfigInvalid(f"{key!r} must be {kind.__name__}, got {type(value).__name__}")
    return value


def _no_extra(table: dict, allowed: set[str], where: str) -> None:
    extra = set(table) - allowed
    if extra:
        raise ConfigInvalid(f"unknown keys in {where}: {sorted(extra)}")


def parse_scenario(text: str, default_name: str = "scenario") -> Scenario:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"TOML error: {exc}") from exc
    _no_extra(raw, {"name", "seed", "rounds", "description", "expect_fail", "bridge", "miners",
                    "producers", "watchers", "users", "adversary", "da", "finalizer"}, "scenario")

    b = raw.get("bridge", {})
    _no_extra(b, {"bond", "delay", "k", "challenge_window", "halt_height", "leader_mode",
                  "witness_window"}, "[bridge]")
    halt = _take(b, "halt_height", int, 0)
    mode = _take(b, "leader_mode", str, FCFS)
    if mode not in (FCFS, STAKED_SHUFFLE):
        raise ConfigInvalid(f"unknown leader_mode {mode!r}")
    params = BridgeParams(bond=_take(b, "bond", int, 100), delay=_take(b, "delay", int, 10),
                          k=_take(b, "k", int, 4),
                          challenge_window=_take(b, "challenge_window", int, 50),
                          halt_height=halt or None, leader_mode=mode)
    if params.k < 1 or params.delay < 1 or params.bond < 0:
        raise ConfigInvalid("bridge parameters out of range")

    m = raw.get("miners", {})
    _no_extra(m, {"names", "weights", "script", "delay"}, "[miners]")
    names = tuple(_take(m, "names", list, ["m0"]))
    if not names or len(set(names)) != len(names) or not all(isinstance(x, str) for x in names):
        raise ConfigInvalid("miner names must be distinct strings")
    weights = tuple(float(w) for w in _take(m, "weights", list, []))
    if weights and (len(weights) != len(names) or min(weights) < 0 or sum(weights) <= 0):
        raise ConfigInvalid("weights must match miners and be non-negative")
    script = []
    for s in _take(m, "script", list, []):
        winners = tuple(_take(s, "winners", list, required=True))
        if not set(winners) <= set(names):
            raise ConfigInvalid(f"unknown winner in script: {winners}")
        script.append(ScriptedRound(_take(s, "round", int, required=True), winners))
    delays = []
    for d in _take(m, "delay", list, []):
        src, dst = _take(d, "from", str, required=True), _take(d, "to", str, required=True)
        if src not in names or dst not in names:
            raise ConfigInvalid("delay edge names unknown miner")
        delays.append(EdgeDelay(src, dst, _take(d, "rounds", int, required=True),
                                _take(d, "from_round", int, 1), _take(d, "until_round", int)))
    miners = MinerConfig(names, weights, tuple(script), tuple(delays))

    producers = []
    for p in _take(raw, "producers", list, []):
        _no_extra(p, {"id", "view", "strategy", "fault", "at_height", "extend_invalid", "withhold",
                      "fund", "submit_empty", "max_txs", "staked", "ignore_halt"}, "[[producers]]")
        pc = ProducerConfig(
            id=_take(p, "id", str, required=True), view=_take(p, "view", str, names[0]),
            strategy=_take(p, "strategy", str, "honest"), fault=_take(p, "fault", str, ""),
            at_height=_take(p, "at_height", int, 0),
            extend_invalid=_take(p, "extend_invalid", bool, False),
            withhold=_take(p, "withhold", int, 0), fund=_take(p, "fund", int, 0),
            submit_empty=_take(p, "submit_empty", bool, False),
            max_txs=_take(p, "max_txs", int), staked=_take(p, "staked", bool, False),
            ignore_halt=_take(p, "ignore_halt", bool, False))
        if pc.strategy not in ("honest", "invalid", "withholding"):
            raise ConfigInvalid(f"unknown strategy {pc.strategy!r}")
        if pc.strategy == "invalid" and pc.fault not in FAULT_KINDS:
            raise ConfigInvalid(f"unknown fault {pc.fault!r}")
        if pc.view not in names:
            raise ConfigInvalid(f"producer view {pc.view!r} is not a miner")
        producers.append(pc)

    watchers = []
    for w in _take(raw, "watchers", list, []):
        _no_extra(w, {"id", "view"}, "[[watchers]]")
        wc = WatcherConfig(_take(w, "id", str, required=True), _take(w, "view", str, names[0]))
        if wc.view not in names:
            raise ConfigInvalid(f"watcher view {wc.view!r} is not a miner")
        watchers.append(wc)

    u = raw.get("users", {})
    _no_extra(u, {"count", "view", "mode", "deposit", "transfer_prob", "burn_prob", "burn_amount",
                  "start_round", "stop_round", "max_transfers"}, "[users]")
    users = UserConfig(
        count=_take(u, "count", int, 4), view=_take(u, "view", str, names[0]),
        mode=_take(u, "mode", str, "random"), deposit=_take(u, "deposit", int, 1000),
        transfer_prob=_take(u, "transfer_prob", float, 0.5),
        burn_prob=_take(u, "burn_prob", float, 0.0), burn_amount=_take(u, "burn_amount", int, 10),
        start_round=_take(u, "start_round", int, 1), stop_round=_take(u, "stop_round", int),
        max_transfers=_take(u, "max_transfers", int))
    if users.mode not in ("random", "ring") or users.view not in names or users.count < 0:
        raise ConfigInvalid("bad [users] section")

    adv = raw.get("adversary", {})
    _no_extra(adv, {"censor"}, "[adversary]")
    censors = []
    for c in _take(adv, "censor", list, []):
        ids = tuple(_take(c, "ids", list, required=True))
        cc = CensorConfig(ids, _take(c, "from_height", int, required=True),
                          _take(c, "duration", int, required=True))
        if cc.duration < 0:
            raise ConfigInvalid("censor duration must be non-negative")
        censors.append(cc)

    da = raw.get("da", {})
    _no_extra(da, {"enabled", "k", "n", "samples", "clients", "corrupt_coding_at"}, "[da]")
    dac = DAConfig(_take(da, "enabled", bool, False), _take(da, "k", int, 8), _take(da, "n", int, 16),
                   _take(da, "samples", int, 3), _take(da, "clients", int, 2),
                   _take(da, "corrupt_coding_at", int))
    if dac.enabled and not (1 <= dac.k <= dac.n and 0 <= dac.samples <= dac.n):
        raise ConfigInvalid("bad [da] section")

    expect = frozenset(_take(raw, "expect_fail", list, []))
    if not expect <= set(VERDICT_NAMES):
        raise ConfigInvalid(f"unknown verdicts in expect_fail: {sorted(expect - set(VERDICT_NAMES))}")
    rounds = _take(raw, "rounds", int, 50)
    if rounds < 1:
        raise ConfigInvalid("rounds must be positive")
    return Scenario(
        name=_take(raw, "name", str, default_name), seed=_take(raw, "seed", int, 1), rounds=rounds,
        description=_take(raw, "description", str, ""), bridge=params,
        witness_window=_take(b, "witness_window", int, 8), miners=miners,
        producers=tuple(producers), watchers=tuple(watchers), users=users,
        censors=tuple(censors), da=dac, finalizer=_take(raw, "finalizer", bool, True),
        expect_fail=expect, source=text)


def _bundled_dir():
    return resources.files("sidechain.harness") / "scenarios"


def bundled_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in _bundled_dir().iterdir() if p.name.endswith(".toml"))


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario from a path, or by bundled name (``honest``, ``fraud`` ...)."""
    path = Path(ref)
    if path.is_file():
        return parse_scenario(path.read_text(encoding="utf-8"), path.stem)
    name = str(ref)
    name = name[:-5] if name.endswith(".toml") else name
    res = _bundled_dir() / f"{name}.toml"
    if res.is_file():
        return parse_scenario(res.read_text(encoding="utf-8"), name)
    raise ConfigInvalid(f"no scenario file or bundled scenario named {ref!r}")
