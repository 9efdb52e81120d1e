"""Experiment runner: seeded runs, metrics, CSV output, sweeps and the
uncertainty-vs-visits probe."""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from eve_rl.agent import Agent, ReplayBuffer, act_episode
from eve_rl.config import RunConfig, format_value
from eve_rl.envs import DeepSea, DeepSeaConfig
from eve_rl.errors import ConfigError
from eve_rl.posterior import sample_posterior_batch

log = logging.getLogger(__name__)

CSV_VERSION = "eve_rl-csv/1"
RUN_COLUMNS = ("episode", "return", "success", "cumulative_failure_fraction")
SWEEP_COLUMNS = ("parameter", "value", "runs", "solved_runs", "solved_fraction", "mean_success_fraction")
PROBE_COLUMNS = ("row", "col", "visits", "std")


@dataclass
class RunMetrics:
    returns: list[float] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)
    wall_clock: float = 0.0
    threshold: float = 0.2

    @property
    def episodes(self) -> int:
        return len(self.returns)

    @property
    def success_fraction(self) -> float:
        return sum(self.successes) / len(self.successes) if self.successes else 0.0

    @property
    def solved(self) -> bool:
        return bool(exploration_score(self, self.threshold))

    def cumulative_failure_fraction(self) -> np.ndarray:
        if not self.successes:
            return np.zeros(0)
        failures = np.cumsum(~np.asarray(self.successes, dtype=bool))
        return failures / np.arange(1, len(self.successes) + 1)


def exploration_score(metrics: RunMetrics, threshold: float = 0.2) -> int:
    """1 iff at least ``threshold`` of all episodes reached the treasure."""
    n = len(metrics.successes)
    if n == 0:
        return 0
    # integer comparison avoids float rounding at the boundary
    return int(sum(metrics.successes) >= threshold * n - 1e-9 * n)


def make_env(cfg: RunConfig) -> DeepSea:
    return DeepSea(
        DeepSeaConfig(
            size=cfg.size,
            randomize_actions=cfg.randomize_actions,
            reward_noise_std=cfg.noise_std,
            seed=cfg.seed_env,
        )
    )


def run(cfg: RunConfig, progress_every: int = 0) -> RunMetrics:
    """Train one agent on Deep Sea for ``cfg.episodes`` episodes.

    Raises :class:`~eve_rl.errors.DivergenceError` when q-values blow up.
    """
    cfg.validate()
    env = make_env(cfg)
    agent = Agent.create(cfg.agent, env.n_features, env.n_actions, cfg.seed_init, cfg.seed_run)
    replay = ReplayBuffer(env.n_features, cfg.agent.replay_capacity)
    metrics = RunMetrics(threshold=cfg.solve_threshold)
    start = time.perf_counter()
    for ep in range(cfg.episodes):
        traj = act_episode(agent, env, replay)
        metrics.returns.append(float(sum(t.reward for t in traj)))
        metrics.successes.append(bool(env.success))
        if progress_every and (ep + 1) % progress_every == 0:
            log.info("episode %d: success fraction %.3f", ep + 1, metrics.success_fraction)
    metrics.wall_clock = time.perf_counter() - start
    return metrics


def header_line(cfg: RunConfig, kind: str) -> str:
    items = "; ".join(f"{k}={format_value(v)}" for k, v in cfg.items() if k != "out")
    return f"# {CSV_VERSION} {kind} {items}\n"


def metrics_csv(cfg: RunConfig, metrics: RunMetrics) -> str:
    buf = io.StringIO()
    buf.write(header_line(cfg, "run"))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUN_COLUMNS)
    for i, (ret, ok, cff) in enumerate(
        zip(metrics.returns, metrics.successes, metrics.cumulative_failure_fraction()), 1
    ):
        w.writerow((i, repr(ret), int(ok), repr(float(cff))))
    return buf.getvalue()


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


# sweeps

SWEEPABLE = ("omega", "sigma_return", "fisher_beta", "fisher_eps", "lr", "gamma", "epsilon",
             "burnin_episodes", "batch_size", "batches_per_step", "target_period", "size", "episodes")


def _run_child(cfg: RunConfig) -> tuple[float, bool, bool]:
    from eve_rl.errors import DivergenceError

    try:
        m = run(cfg)
    except DivergenceError as exc:
        log.warning("child run diverged: %s", exc)
        return 0.0, False, True
    return m.success_fraction, m.solved, False


def sweep(cfg: RunConfig, parameter: str, values, seeds, jobs: int = 1) -> list[dict]:
    """One run per (value, seed); rows aggregated per value, sorted by value.

    Diverged child runs count as unsolved.
    """
    if parameter not in SWEEPABLE:
        raise ConfigError(f"cannot sweep {parameter!r}; choose one of {SWEEPABLE}")
    values = list(values)
    seeds = list(seeds)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    children = []
    for v in values:
        for s in seeds:
            children.append(cfg.replace(**{parameter: str(v), "seed_env": s, "seed_init": s, "seed_run": s}))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_child, children))
    else:
        results = [_run_child(c) for c in children]
    rows = []
    for i, child in enumerate(children[:: len(seeds)]):
        chunk = results[i * len(seeds) : (i + 1) * len(seeds)]
        value = getattr(child.agent, parameter, None) if hasattr(child.agent, parameter) else getattr(child, parameter)
        rows.append({
            "parameter": parameter,
            "value": value,
            "runs": len(chunk),
            "solved_runs": sum(r[1] for r in chunk),
            "solved_fraction": sum(r[1] for r in chunk) / len(chunk),
            "mean_success_fraction": float(np.mean([r[0] for r in chunk])),
        })
    rows.sort(key=lambda r: r["value"])
    return rows


def sweep_csv(cfg: RunConfig, rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(header_line(cfg, "sweep"))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([format_value(r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


# uncertainty probe


@dataclass
class ProbeResult:
    visits: np.ndarray  # (L, L)
    std: np.ndarray  # (L, L), max over actions

    def rows(self):
        L = self.visits.shape[0]
        for r in range(L):
            for c in range(L):
                yield r, c, int(self.visits[r, c]), float(self.std[r, c])

    def spearman(self) -> float:
        return float(stats.spearmanr(self.visits.ravel(), self.std.ravel())[0])


def probe_uncertainty(cfg: RunConfig, episodes: int = 100, n_samples: int = 200) -> ProbeResult:
    """Uniform-random acting with the EVE learner active, then the posterior
    std of q at every grid cell next to its visit count."""
    if cfg.agent.kind != "eve":
        raise ConfigError("the uncertainty probe needs an eve agent")
    agent_cfg = cfg.replace(acting="uniform").agent
    env = make_env(cfg)
    agent = Agent.create(agent_cfg, env.n_features, env.n_actions, cfg.seed_init, cfg.seed_run)
    replay = ReplayBuffer(env.n_features, agent_cfg.replay_capacity)
    L = cfg.size
    visits = np.zeros((L, L), dtype=np.int64)
    for _ in range(episodes):
        for t in act_episode(agent, env, replay):
            visits.flat[int(np.argmax(t.state))] += 1
    # the same draws for every cell; one forward pass per draw over all cells
    draws = sample_posterior_batch(agent.fisher, agent.target, n_samples, agent.rng)
    cells = np.eye(L * L)
    q = np.stack([agent.net.forward(cells, params=p) for p in draws])  # (S, L*L, A)
    std = q.std(axis=0, ddof=1).max(axis=1).reshape(L, L)
    return ProbeResult(visits, std)


def probe_csv(cfg: RunConfig, result: ProbeResult) -> str:
    buf = io.StringIO()
    buf.write(header_line(cfg, "probe"))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROBE_COLUMNS)
    for r, c, n, s in result.rows():
        w.writerow((r, c, n, repr(s)))
    return buf.getvalue()
