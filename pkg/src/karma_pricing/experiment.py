"""Scenario files, seeded episode runs, logs and summary metrics."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .env import Population, RoutingEnv
from .flows import FlowTarget, flow_targets
from .learner import ChangeEvent, EpisodeLog, LearnerConfig, run_episode
from .network import NetworkConfig

logger = logging.getLogger(__name__)

CONVERGENCE_TOL = 0.05
CONVERGENCE_RUN = 10


class ScenarioError(ValueError):
    def __init__(self, msg, key=None):
        super().__init__(msg)
        # offending key inside the section being parsed, used to locate the line
        self.key = key


@dataclass(frozen=True)
class PopulationSpec:
    M: int = 500
    karma_low: float = 50.0
    karma_high: float = 100.0
    k_ref_mean: float = 50.0
    k_ref_std: float = 10.0
    sensitivity_rate: float = 1.0
    T_horizon: int = 5

    def sample(self, rng: np.random.Generator) -> Population:
        return Population.sample(
            self.M, rng, self.karma_low, self.karma_high, self.k_ref_mean,
            self.k_ref_std, self.sensitivity_rate, self.T_horizon,
        )


@dataclass(frozen=True)
class Scenario:
    name: str
    network: NetworkConfig
    population: PopulationSpec = field(default_factory=PopulationSpec)
    learner: dict = field(default_factory=dict)
    episode_length: int = 100
    change_events: tuple[tuple[int, NetworkConfig], ...] = ()
    seed: int = 0
    reference: tuple[dict, ...] = ()

    def __post_init__(self):
        days = [d for d, _ in self.change_events]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise ScenarioError("change_events must be strictly increasing in day")
        if days and (days[0] < 0 or days[-1] >= self.episode_length):
            raise ScenarioError("change_events days must lie in [0, episode_length)")

    def configs(self) -> list[tuple[int, NetworkConfig]]:
        """``(first_day, config)`` for each stationary segment."""
        return [(1, self.network)] + [(d + 1, c) for d, c in self.change_events]


# -- scenario files ---------------------------------------------------------------

_NETWORK_KEYS = {"d0", "kappa", "alpha", "beta", "p_min", "p_max", "p_home"}
_POP_KEYS = {"M", "karma_init", "k_ref", "sensitivity_rate", "T_horizon"}
_LEARNER_KEYS = {"H", "sigma_c", "t_init", "t_update", "init_cov", "policy_restarts",
                 "policy_maxiter", "restart_scale", "gp_restarts", "gp_maxiter"}
_TOP_KEYS = {"name", "seed", "episode_length", "network", "population", "learner",
             "change_events", "reference"}


def _num(v, where):
    if isinstance(v, bool):
        raise ScenarioError(f"{where}: expected a number, got {v!r}")
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(Fraction(v.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            pass
    raise ScenarioError(f"{where}: expected a number or fraction, got {v!r}")


def _line_index(node, path=()):
    """Map key paths of a composed YAML document to 1-based line numbers."""
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (k.value,)
            out[p] = k.start_mark.line + 1
            out.update(_line_index(v, p))
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            p = path + (i,)
            out[p] = v.start_mark.line + 1
            out.update(_line_index(v, p))
    return out


def _network(raw: dict, base: NetworkConfig | None, where: str) -> NetworkConfig:
    if not isinstance(raw, dict):
        raise ScenarioError(f"{where}: expected a mapping")
    unknown = set(raw) - _NETWORK_KEYS
    if unknown:
        raise ScenarioError(f"{where}: unknown key(s) {sorted(unknown)}", key=min(unknown))
    kw: dict[str, Any] = {}
    try:
        for key in ("d0", "kappa"):
            if key in raw:
                kw[key] = tuple(_num(v, f"{where}.{key}") for v in raw[key])
        for key in _NETWORK_KEYS - {"d0", "kappa"}:
            if key in raw:
                kw[key] = _num(raw[key], f"{where}.{key}")
    except ScenarioError as exc:
        raise ScenarioError(str(exc), key=key) from None
    try:
        return base.with_changes(**kw) if base is not None else NetworkConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    """Build a :class:`Scenario` from YAML text.

    Errors are reported as ``source:line: message``.
    """
    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else "?"
        raise ScenarioError(f"{source}:{line}: {getattr(exc, 'problem', exc)}") from None
    lines = _line_index(node) if node is not None else {}

    def fail(path, msg):
        line = lines.get(tuple(path), "?")
        raise ScenarioError(f"{source}:{line}: {msg}")

    if not isinstance(raw, dict):
        raise ScenarioError(f"{source}:1: scenario must be a mapping")
    for key in raw:
        if key not in _TOP_KEYS:
            fail([key], f"unknown key {key!r}")
    if "network" not in raw:
        raise ScenarioError(f"{source}:?: missing 'network' section")

    def section(path, fn):
        try:
            return fn()
        except ScenarioError as exc:
            sub = list(path) + [exc.key]
            fail(sub if exc.key is not None and tuple(sub) in lines else path, str(exc))

    network = section(["network"], lambda: _network(raw["network"], None, "network"))

    pop_raw = raw.get("population") or {}
    for key in pop_raw:
        if key not in _POP_KEYS:
            fail(["population", key], f"unknown key {key!r}")

    def pop():
        kinit = pop_raw.get("karma_init", {})
        kref = pop_raw.get("k_ref", {})
        return PopulationSpec(
            M=int(pop_raw.get("M", 500)),
            karma_low=_num(kinit.get("low", 50), "karma_init.low"),
            karma_high=_num(kinit.get("high", 100), "karma_init.high"),
            k_ref_mean=_num(kref.get("mean", 50), "k_ref.mean"),
            k_ref_std=_num(kref.get("std", 10), "k_ref.std"),
            sensitivity_rate=_num(pop_raw.get("sensitivity_rate", 1.0), "sensitivity_rate"),
            T_horizon=int(pop_raw.get("T_horizon", 5)),
        )

    population = section(["population"], pop)
    if population.M < 1 or population.T_horizon < 1:
        fail(["population"], "M and T_horizon must be positive")

    learner = dict(raw.get("learner") or {})
    for key in learner:
        if key not in _LEARNER_KEYS:
            fail(["learner", key], f"unknown key {key!r}")

    events = []
    base = network
    for i, ev in enumerate(raw.get("change_events") or []):
        if not isinstance(ev, dict) or "day" not in ev or "network" not in ev:
            fail(["change_events", i], "each change event needs 'day' and 'network'")
        cfg = section(["change_events", i, "network"],
                      lambda: _network(ev["network"], base, f"change_events[{i}].network"))
        events.append((int(ev["day"]), cfg))
        base = cfg

    reference = []
    for i, ref in enumerate(raw.get("reference") or []):
        if not isinstance(ref, dict):
            fail(["reference", i], "reference entries must be mappings")
        reference.append({k: [float(v) for v in vals] for k, vals in ref.items()})

    try:
        return Scenario(
            name=str(raw.get("name", Path(source).stem)),
            network=network,
            population=population,
            learner=learner,
            episode_length=int(raw.get("episode_length", 100)),
            change_events=tuple(events),
            seed=int(raw.get("seed", 0)),
            reference=tuple(reference),
        )
    except ScenarioError as exc:
        fail(["change_events"], str(exc))


def bundled_scenarios() -> list[str]:
    root = resources.files("karma_pricing") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_scenario(name_or_path: str | Path) -> Scenario:
    """Load a scenario file, or a bundled scenario by name (e.g. ``three_arc``)."""
    path = Path(name_or_path)
    if path.is_file():
        return parse_scenario(path.read_text(), str(path))
    res = resources.files("karma_pricing") / "scenarios" / f"{name_or_path}.yaml"
    if res.is_file():
        return parse_scenario(res.read_text(), f"{name_or_path}.yaml")
    raise ScenarioError(f"no scenario file or bundled scenario named {name_or_path!r}")


# -- running ---------------------------------------------------------------------


@dataclass
class RunResult:
    scenario: Scenario
    seed: int
    log: EpisodeLog
    targets: list[tuple[int, FlowTarget]]
    summary: dict


def segment_targets(scenario: Scenario) -> list[tuple[int, FlowTarget]]:
    return [(start, flow_targets(cfg)) for start, cfg in scenario.configs()]


def run(scenario: Scenario, seed: int | None = None, days: int | None = None,
        out: str | Path | None = None, checkpoints: bool = False) -> RunResult:
    """Run one seeded learning episode and optionally write its CSV log and summary."""
    seed = scenario.seed if seed is None else seed
    days = scenario.episode_length if days is None else days
    rng = np.random.default_rng(seed)
    targets = segment_targets(scenario)
    env = RoutingEnv(scenario.network, scenario.population.sample(rng), rng)
    cfg = LearnerConfig.for_flows(targets[0][1].x_star, **scenario.learner)
    events = [ChangeEvent(d, c, t.x_star)
              for (d, c), (_, t) in zip(scenario.change_events, targets[1:])]
    out = Path(out) if out is not None else None
    ckpt = out / f"{scenario.name}_seed{seed}_checkpoints" if (out and checkpoints) else None
    log = run_episode(env, cfg, rng, days, events, checkpoint_dir=ckpt)
    summary = summarize(log, targets, t_init=cfg.t_init)
    summary.update({"scenario": scenario.name, "seed": seed, "days": days})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_log_csv(log, out / f"{scenario.name}_seed{seed}.csv")
        (out / f"{scenario.name}_seed{seed}_summary.json").write_text(
            json.dumps(summary, indent=2, default=_jsonable) + "\n")
    return RunResult(scenario, seed, log, targets, summary)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(type(v))


def log_header(n: int) -> list[str]:
    return (["t"] + [f"x_{j + 1}" for j in range(n)] + [f"p_{j + 1}" for j in range(n)]
            + ["K_mean", "K_std", "C", "C_MA5"])


def write_log_csv(log: EpisodeLog, path: str | Path):
    ma = log.cost_ma5
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(log_header(log.n))
        for i, t in enumerate(log.t):
            w.writerow([t, *map(repr, map(float, log.x[i])), *map(repr, map(float, log.prices[i])),
                        repr(float(log.K_mean[i])), repr(float(log.K_std[i])),
                        repr(float(log.cost[i])), "" if np.isnan(ma[i]) else repr(float(ma[i]))])


def read_log_csv(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) if r[k] != "" else np.nan for r in rows])
            for k in rows[0]}


# -- metrics -----------------------------------------------------------------------


def convergence_day(x: np.ndarray, x_star: np.ndarray, start: int = 0,
                    tol: float = CONVERGENCE_TOL, run: int = CONVERGENCE_RUN) -> int | None:
    """First index ``i >= start`` opening ``run`` consecutive days within ``tol`` of ``x_star``."""
    ok = np.all(np.abs(np.asarray(x) - x_star) <= tol, axis=1)
    streak = 0
    for i in range(start, len(ok)):
        streak = streak + 1 if ok[i] else 0
        if streak == run:
            return i - run + 1
    return None


def summarize(log: EpisodeLog, targets, t_init: int = 0) -> dict:
    """Per-segment convergence and cost metrics for an episode.

    ``targets`` is a :class:`FlowTarget` or a list of ``(first_day, FlowTarget)``
    for non-stationary runs. Days are 1-based in the output.
    """
    if isinstance(targets, FlowTarget):
        targets = [(1, targets)]
    L = len(log)
    x = np.asarray(log.x, dtype=float).reshape(L, log.n)
    cost = np.asarray(log.cost, dtype=float)
    ma = log.cost_ma5
    t = np.asarray(log.t, dtype=int)

    c_uc = np.empty(L)
    c_star = np.empty(L)
    for k, (start, tg) in enumerate(targets):
        sel = t >= start
        c_uc[sel] = tg.cost_uncontrolled
        c_star[sel] = tg.cost_at_optimum

    segments = []
    for k, (start, tg) in enumerate(targets):
        end = targets[k + 1][0] if k + 1 < len(targets) else L + 1
        idx = np.flatnonzero((t >= start) & (t < end))
        seg = {"first_day": int(start), "last_day": int(end - 1),
               "x_star": tg.x_star.tolist(), "x_uc": tg.x_uc.tolist(),
               "cost_optimum": tg.cost_at_optimum, "cost_uncontrolled": tg.cost_uncontrolled,
               "convergence_day": None, "days_to_convergence": None, "post_convergence_gap": None}
        if idx.size:
            ci = convergence_day(x[idx], tg.x_star)
            if ci is not None:
                day = int(t[idx[ci]])
                seg["convergence_day"] = day
                seg["days_to_convergence"] = day - int(start)
                post = cost[idx[ci]:idx[-1] + 1]
                seg["post_convergence_gap"] = float(
                    abs(post.mean() - tg.cost_at_optimum) / tg.cost_at_optimum)
        segments.append(seg)

    late = t >= t_init
    valid_ma = ~np.isnan(ma)
    return {
        "segments": segments,
        "convergence_day": segments[0]["convergence_day"],
        "post_convergence_gap": segments[0]["post_convergence_gap"],
        "days_cost_above_uc": int(np.sum(cost > c_uc)),
        "days_ma5_above_uc": int(np.sum(valid_ma & (ma > c_uc))),
        "days_ma5_above_uc_after_init": int(np.sum(valid_ma & late & (ma > c_uc))),
        "total_cost": float(cost.sum()),
        "total_uncontrolled_cost": float(c_uc.sum()),
        "total_saving": float(np.sum(c_uc - cost)),
        "nash_unconverged_days": int(np.sum(~np.asarray(log.nash_converged, dtype=bool))),
        "policy_updates": len(log.updates),
    }


def compare_solvers(scenario: Scenario) -> list[dict]:
    """Solve every network in the scenario and compare with declared reference flows."""
    report = []
    for k, (start, cfg) in enumerate(scenario.configs()):
        tg = flow_targets(cfg)
        row = {"segment": k, "first_day": start, "x_star": tg.x_star.tolist(),
               "x_uc": tg.x_uc.tolist(), "cost_optimum": tg.cost_at_optimum,
               "cost_uncontrolled": tg.cost_uncontrolled, "relative_gap": tg.relative_gap}
        if k < len(scenario.reference):
            ref = scenario.reference[k]
            for key, sol in (("x_star", tg.x_star), ("x_uc", tg.x_uc)):
                if key in ref:
                    row[f"{key}_reference"] = ref[key]
                    row[f"{key}_max_deviation"] = float(np.max(np.abs(sol - np.asarray(ref[key]))))
        report.append(row)
    return report
