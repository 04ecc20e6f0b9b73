"""Seeded batch execution, CSV persistence and learning-curve aggregation.

A run is one (agent, protocol, environment, seed) execution.  The runner
writes one raw CSV row per (run, x) point, where x is the episode index for
online runs and the rollout budget for offline runs.  The aggregator reduces
raw rows to curve points: mean, 95% confidence half-width and the 5th/95th
percentiles across runs.  Both stages are deterministic, and aggregation is a
pure function of the raw file.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adp import ADPConfig
from .agents import AgentConfig, run_agent
from .environments import make_env

__all__ = [
    "ExperimentConfig",
    "CurvePoint",
    "parse_config",
    "run_experiment",
    "aggregate",
]

RAW_COLUMNS = ["run_id", "seed", "protocol", "agent", "env", "x", "steps", "discounted_return", "wall_ms"]
CURVE_COLUMNS = ["protocol", "agent", "env", "x", "n_runs", "mean_steps", "ci95_half_width", "p5", "p95"]

DEFAULT_OFFLINE_SCHEDULE = [10, 20, 30, 40, 50, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000]


@dataclass
class ExperimentConfig:
    """Flat experiment description; every field maps to one config-file key."""

    protocol: str = "offline"
    agent: str = "ctbrl"
    env: str = "pendulum"
    runs: int = 20
    seed: int = 0
    episodes: int = 1000  # online only
    k_schedule: list = field(default_factory=lambda: list(DEFAULT_OFFLINE_SCHEDULE))
    eval_episodes: int = 10
    rollout_horizon: int = 40
    n_states: int = 3000
    api_iterations: int = 25
    k_lstd: int = 1
    ridge: float = 1e-6
    prior_scale: float = 1.0
    prior_input_scale: float = 1.0
    zoom: float = 2.0
    epsilon_decay: float = 0.997
    workers: int = 1
    out_dir: str = "results"

    def __post_init__(self):
        if self.protocol not in ("offline", "online"):
            raise ValueError(f"protocol must be offline or online, got {self.protocol!r}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.protocol == "offline" and not self.k_schedule:
            raise ValueError("offline protocol needs a non-empty k_schedule")

    def agent_config(self) -> AgentConfig:
        env = make_env(self.env)
        adp = ADPConfig(
            gamma=env.gamma,
            n_states=self.n_states,
            api_iterations=self.api_iterations,
            k_lstd=self.k_lstd,
            ridge=self.ridge,
        )
        return AgentConfig(
            env=env,
            adp=adp,
            prior_scale=self.prior_scale,
            prior_input_scale=self.prior_input_scale,
            zoom=self.zoom,
            epsilon_decay=self.epsilon_decay,
            eval_episodes=self.eval_episodes,
            rollout_horizon=self.rollout_horizon,
        )


_BOOL_KEYS: set = set()
_INT_KEYS = {"runs", "seed", "episodes", "eval_episodes", "rollout_horizon", "n_states",
             "api_iterations", "k_lstd", "workers"}
_FLOAT_KEYS = {"ridge", "prior_scale", "prior_input_scale", "zoom", "epsilon_decay"}


def parse_config(path) -> ExperimentConfig:
    """Parse the flat ``key = value`` experiment file.

    Lines starting with ``#`` and blank lines are skipped.  k_schedule is a
    comma-separated integer list.  Unknown keys and malformed values raise
    ValueError naming the offending line.
    """
    values = {}
    known = set(ExperimentConfig.__dataclass_fields__)
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key == "k_schedule":
                values[key] = [int(tok) for tok in val.split(",") if tok.strip()]
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {val!r}") from exc
    return ExperimentConfig(**values)


def _format_row(values) -> list:
    return [str(v) for v in values]


def _one_run(args):
    """Execute a single seeded run and return its raw rows."""
    exp, run_id = args
    rng = np.random.default_rng([exp.seed, run_id])
    cfg = exp.agent_config()
    rows = []
    if exp.protocol == "online":
        t0 = time.perf_counter()
        result = run_agent(exp.agent, "online", cfg, exp.episodes, rng)
        wall_ms = 1000.0 * (time.perf_counter() - t0) / max(len(result.episodes), 1)
        for episode_idx, ep in enumerate(result.episodes, start=1):
            rows.append([run_id, exp.seed, exp.protocol, exp.agent, exp.env,
                         episode_idx, ep.steps, ep.discounted_return, wall_ms])
    else:
        for k in exp.k_schedule:
            t0 = time.perf_counter()
            result = run_agent(exp.agent, "offline", cfg, k, rng)
            wall_ms = 1000.0 * (time.perf_counter() - t0)
            steps = float(np.mean([ep.steps for ep in result.episodes]))
            ret = float(np.mean([ep.discounted_return for ep in result.episodes]))
            rows.append([run_id, exp.seed, exp.protocol, exp.agent, exp.env,
                         k, steps, ret, wall_ms])
    return run_id, rows, None


def _one_run_guarded(args):
    try:
        return _one_run(args)
    except Exception as exc:  # a failed run must not sink the batch
        return args[1], [], f"run {args[1]}: {type(exc).__name__}: {exc}"


def run_experiment(exp: ExperimentConfig, out_dir=None):
    """Execute all runs and write raw.csv (plus failures.log on partial failure).

    Runs execute independently, optionally in parallel; rows are ordered by
    run id before writing so reruns are byte-identical.  Returns the raw path.
    """
    out = Path(out_dir if out_dir is not None else exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(exp, run_id) for run_id in range(exp.runs)]
    if exp.workers > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as pool:
            outcomes = list(pool.map(_one_run_guarded, tasks))
    else:
        outcomes = [_one_run_guarded(t) for t in tasks]
    outcomes.sort(key=lambda o: o[0])

    raw_path = out / "raw.csv"
    with open(raw_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RAW_COLUMNS)
        for _, rows, _ in outcomes:
            for row in rows:
                writer.writerow(_format_row(row))

    failures = [err for _, _, err in outcomes if err]
    if failures:
        (out / "failures.log").write_text("\n".join(failures) + "\n", encoding="utf-8")
    return raw_path


def _ci95_half_width(values: np.ndarray) -> float:
    if values.size < 2:
        return 0.0
    return 1.96 * float(values.std(ddof=1)) / float(np.sqrt(values.size))


@dataclass(frozen=True)
class CurvePoint:
    protocol: str
    agent: str
    env: str
    x: int
    n_runs: int
    mean_steps: float
    ci95_half_width: float
    p5: float
    p95: float


def aggregate_rows(raw_rows) -> list:
    """Reduce parsed raw rows to curve points, grouped on (protocol, agent, env, x)."""
    groups = {}
    for row in raw_rows:
        key = (row["protocol"], row["agent"], row["env"], int(row["x"]))
        groups.setdefault(key, []).append(float(row["steps"]))
    points = []
    for key in sorted(groups):
        vals = np.asarray(groups[key])
        points.append(CurvePoint(
            protocol=key[0], agent=key[1], env=key[2], x=key[3],
            n_runs=vals.size,
            mean_steps=float(vals.mean()),
            ci95_half_width=_ci95_half_width(vals),
            p5=float(np.percentile(vals, 5)),
            p95=float(np.percentile(vals, 95)),
        ))
    return points


def aggregate(raw_path, curve_path=None):
    """Aggregate a raw CSV into a curve CSV; percentile rule is linear interpolation."""
    raw_path = Path(raw_path)
    rows = []
    with open(raw_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RAW_COLUMNS:
            raise ValueError(f"{raw_path}: unexpected header {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                float(row["steps"]); int(row["x"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{raw_path}: malformed row {lineno}: {row}") from exc
            rows.append(row)
    points = aggregate_rows(rows)
    if curve_path is None:
        curve_path = raw_path.with_name("curve.csv")
    with open(curve_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for p in points:
            writer.writerow(_format_row([p.protocol, p.agent, p.env, p.x, p.n_runs,
                                         p.mean_steps, p.ci95_half_width, p.p5, p.p95]))
    return curve_path
