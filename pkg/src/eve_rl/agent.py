"""Q-learning agents: epsilon-greedy DQN and epistemic Q-learning (EVE).

Both agents share the network, replay buffer and Adam machinery. The EVE
agent additionally keeps a diagonal Fisher accumulator and draws parameter
samples from the resulting Gaussian posterior, both for acting (one draw per
episode) and for the bootstrap targets of every learner batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Literal

import numpy as np

from eve_rl.errors import ConfigError, ContractError, DivergenceError
from eve_rl.nn import Adam, BatchPass, MlpNetwork, mlp_init
from eve_rl.posterior import (
    FisherAccumulator,
    sample_posterior,
    sample_posterior_batch,
    sample_posterior_subset,
)

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Append-only transition store with uniform sampling (with replacement).

    ``capacity=None`` means unbounded; otherwise the oldest transitions are
    overwritten once full.
    """

    def __init__(self, n_features: int, capacity: int | None = None, initial: int = 1024):
        if capacity is not None and capacity <= 0:
            raise ConfigError(f"replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.n_features = n_features
        size = initial if capacity is None else min(initial, capacity)
        self._alloc(size)
        self._size = 0
        self._next = 0

    def _alloc(self, size: int):
        self.states = np.zeros((size, self.n_features))
        self.next_states = np.zeros((size, self.n_features))
        self.actions = np.zeros(size, dtype=np.intp)
        self.rewards = np.zeros(size)
        self.terminals = np.zeros(size, dtype=bool)

    def _grow(self):
        old = (self.states, self.next_states, self.actions, self.rewards, self.terminals)
        n = len(self.rewards)
        new_size = 2 * n if self.capacity is None else min(2 * n, self.capacity)
        self._alloc(new_size)
        for dst, src in zip(
            (self.states, self.next_states, self.actions, self.rewards, self.terminals), old
        ):
            dst[:n] = src

    def __len__(self) -> int:
        return self._size

    def add(self, t: Transition) -> None:
        if not np.isfinite(t.reward):
            raise ContractError(f"non-finite reward {t.reward!r}")
        if self._next == len(self.rewards) and (self.capacity is None or self._next < self.capacity):
            self._grow()
        i = self._next
        self.states[i] = t.state
        self.next_states[i] = t.next_state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.terminals[i] = t.terminal
        self._next += 1
        if self.capacity is not None and self._next == self.capacity:
            self._next = 0
        self._size = min(self._size + 1, self.capacity or self._size + 1)

    def __getitem__(self, i: int) -> Transition:
        if not 0 <= i < self._size:
            raise IndexError(i)
        return Transition(
            self.states[i].copy(), int(self.actions[i]), float(self.rewards[i]),
            self.next_states[i].copy(), bool(self.terminals[i]),
        )

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ContractError("cannot sample from an empty replay buffer")
        return rng.integers(0, self._size, size=batch_size)

    def batch(self, idx: np.ndarray):
        return (
            self.states[idx], self.actions[idx], self.rewards[idx],
            self.next_states[idx], self.terminals[idx],
        )


def greedy_action(q_values: np.ndarray, rng: np.random.Generator) -> int:
    """Argmax with ties broken uniformly at random."""
    q = np.asarray(q_values)
    if q.size == 0:
        raise ContractError("greedy_action needs at least one q-value")
    best = np.flatnonzero(q == q.max())
    if len(best) == 1:
        return int(best[0])
    return int(rng.choice(best))


def epsilon_greedy(q_values: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1], got {epsilon}")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(len(q_values)))
    return greedy_action(q_values, rng)


@dataclass
class AgentConfig:
    """Hyperparameters of both agents.

    Fields only one agent uses are ignored by the other (``epsilon`` by EVE
    when acting with Thompson sampling, the Fisher fields by DQN).
    """

    kind: Literal["eve", "dqn"] = "eve"
    hidden: tuple[int, ...] = (50, 50)
    activation: Literal["leaky", "relu"] = "leaky"
    slope: float = 0.01
    lr: float = 1e-3
    gamma: float = 0.99
    target_period: int = 4
    batch_size: int = 12
    batches_per_step: int = 10
    min_replay: int = 12
    replay_capacity: int | None = None
    epsilon: float = 0.05
    # EVE exploration parameters
    omega: float = 10.0
    sigma_return: float = 100.0
    fisher_beta: float = 1e-10
    fisher_eps: float = 1e-10
    burnin_episodes: int = 100
    # ablation and batching switches
    acting: Literal["thompson", "eps-greedy", "uniform"] = "thompson"
    bootstrap: Literal["posterior", "mle"] = "posterior"
    fisher: Literal["noisy", "variance-reduced", "mle-gradient"] = "noisy"
    per_example_fisher: bool = False
    per_transition_posterior: bool = False
    posterior_draw: Literal["update", "step"] = "update"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        choices = {
            "kind": ("eve", "dqn"),
            "activation": ("leaky", "relu"),
            "acting": ("thompson", "eps-greedy", "uniform"),
            "bootstrap": ("posterior", "mle"),
            "fisher": ("noisy", "variance-reduced", "mle-gradient"),
            "posterior_draw": ("update", "step"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        positive_int = ("target_period", "batch_size", "batches_per_step", "min_replay")
        for name in positive_int:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.burnin_episodes < 0:
            raise ConfigError(f"burnin_episodes must be >= 0, got {self.burnin_episodes}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.slope < 1.0:
            raise ConfigError(f"slope must lie in (0, 1), got {self.slope}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.sigma_return < 0:
            raise ConfigError(f"sigma_return must be >= 0, got {self.sigma_return}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")
        # remaining Fisher checks live in FisherAccumulator
        FisherAccumulator(np.zeros(0), beta=self.fisher_beta, eps=self.fisher_eps, omega=self.omega)

    @property
    def effective_slope(self) -> float:
        return 0.0 if self.activation == "relu" else self.slope

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Agent:
    """Shared state and learner of both agents.

    ``params`` is the online network (the maximum-likelihood estimate),
    ``target`` the periodically synchronized copy. For EVE the target is
    also the posterior mean.
    """

    cfg: AgentConfig
    net: MlpNetwork
    rng: np.random.Generator
    target: np.ndarray = field(init=False)
    adam: Adam = field(init=False)
    fisher: FisherAccumulator = field(init=False)
    learner_steps: int = field(init=False, default=0)
    env_steps: int = field(init=False, default=0)
    episodes: int = field(init=False, default=0)

    def __post_init__(self):
        self.target = self.net.params.copy()
        self.adam = Adam(self.net.n_params, lr=self.cfg.lr)
        self.fisher = FisherAccumulator.zeros(
            self.net.n_params, beta=self.cfg.fisher_beta, eps=self.cfg.fisher_eps, omega=self.cfg.omega
        )
        self._step_sample: np.ndarray | None = None

    @classmethod
    def create(
        cls, cfg: AgentConfig, n_features: int, n_actions: int, init_seed=0, run_seed=0
    ) -> Agent:
        net = mlp_init((n_features, *cfg.hidden, n_actions), slope=cfg.effective_slope, seed=init_seed)
        return cls(cfg, net, np.random.default_rng(run_seed))

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    @property
    def is_eve(self) -> bool:
        return self.cfg.kind == "eve"

    @property
    def in_burnin(self) -> bool:
        # no posterior sampling until the Fisher estimate has warmed up
        return self.is_eve and self.episodes < self.cfg.burnin_episodes

    def sample_params(self) -> np.ndarray:
        return sample_posterior(self.fisher, self.target, self.rng)

    # acting

    def episode_policy(self):
        """Return a ``q_values(obs) -> action`` closure for the next episode.

        EVE draws one posterior sample per episode and holds it fixed.
        """
        cfg = self.cfg
        rng = self.rng
        if self.in_burnin or (self.is_eve and cfg.acting == "uniform"):
            return lambda obs: int(rng.integers(self.net.n_actions))
        if self.is_eve and cfg.acting == "thompson":
            theta = self.sample_params()
            return lambda obs: greedy_action(self.net.forward(obs, params=theta), rng)
        return lambda obs: epsilon_greedy(self.net.forward(obs), cfg.epsilon, rng)

    def end_episode(self, length: int) -> None:
        self.episodes += 1
        self.fisher.observe(length)

    # learning

    def on_env_step(self, replay: ReplayBuffer) -> None:
        """Learner work attached to one environment step."""
        self.env_steps += 1
        if len(replay) < self.cfg.min_replay:
            return
        self._step_sample = None
        for _ in range(self.cfg.batches_per_step):
            self.learn_step(replay)

    def _bootstrap_params(self, next_states: np.ndarray) -> np.ndarray:
        """Parameters (one vector or one row per transition) for the targets."""
        cfg = self.cfg
        if not self.is_eve or cfg.bootstrap == "mle" or self.in_burnin:
            return self.target
        if cfg.per_transition_posterior:
            return sample_posterior_batch(self.fisher, self.target, len(next_states), self.rng)
        if cfg.posterior_draw == "step":
            if self._step_sample is None:
                self._step_sample = self.sample_params()
            return self._step_sample
        # only coordinates that touch these next states need noise
        idx = self.net.relevant_params(next_states)
        return sample_posterior_subset(self.fisher, self.target, idx, self.rng)

    def targets(self, rewards, next_states, terminals, theta) -> np.ndarray:
        """G = R + gamma * max_a q_theta(S', a), masked on terminal transitions."""
        if theta.ndim == 1:
            q_next = self.net.forward(next_states, params=theta)
        else:
            q_next = np.stack([self.net.forward(s, params=p) for s, p in zip(next_states, theta)])
        bootstrap = np.where(terminals, 0.0, q_next.max(axis=1))
        return rewards + self.cfg.gamma * bootstrap

    def learn_step(self, replay: ReplayBuffer) -> dict:
        cfg = self.cfg
        idx = replay.sample_indices(cfg.batch_size, self.rng)
        states, actions, rewards, next_states, terminals = replay.batch(idx)
        theta = self._bootstrap_params(next_states)
        G = self.targets(rewards, next_states, terminals, theta)
        bp = BatchPass(self.net, states, actions)
        self._check_finite(G, bp.q)
        td = G - bp.q
        # gradient of sum_t (G_t - q_t)^2
        g_mle = bp.weighted_grad(-2.0 * td)
        if self.is_eve:
            self._fisher_update(bp, td, g_mle)
        self.adam.step(self.net.params, g_mle)
        self.learner_steps += 1
        if self.learner_steps % cfg.target_period == 0:
            self.target = self.net.params.copy()
        return {"td": td, "targets": G}

    def _fisher_update(self, bp: BatchPass, td: np.ndarray, g_mle: np.ndarray) -> None:
        cfg = self.cfg
        noise_var = (cfg.gamma * cfg.sigma_return) ** 2
        if cfg.fisher == "noisy":
            resid = td + cfg.gamma * cfg.sigma_return * self.rng.standard_normal(len(td))
            if cfg.per_example_fisher:
                sq = bp.weighted_sq_grad(-2.0 * resid)
            else:
                g = bp.weighted_grad(-2.0 * resid)
                sq = g * g
        elif cfg.fisher == "variance-reduced":
            # E over the return noise of the squared loss-gradient, in closed form
            if cfg.per_example_fisher:
                sq = bp.weighted_sq_grad(2.0 * np.sqrt(td * td + noise_var))
            else:
                sq = g_mle * g_mle + 4.0 * noise_var * bp.weighted_sq_grad(np.ones_like(td))
        else:
            sq = bp.weighted_sq_grad(-2.0 * td) if cfg.per_example_fisher else g_mle * g_mle
        self.fisher.update_squared(sq)

    def _check_finite(self, targets: np.ndarray, q: np.ndarray) -> None:
        worst = max(np.max(np.abs(targets)), np.max(np.abs(q)))
        if not np.isfinite(worst) or worst > DIVERGENCE_LIMIT:
            raise DivergenceError(
                f"divergence after {self.learner_steps} learner steps: max |q|/|target| = {worst:.3g}"
            )


def act_episode(agent: Agent, env, replay: ReplayBuffer, learn: bool = True) -> list[Transition]:
    """Play one episode, store it in ``replay`` and run the attached learner steps."""
    policy = agent.episode_policy()
    ts = env.reset()
    obs = ts.observation
    trajectory = []
    while True:
        action = policy(obs)
        ts = env.step(action)
        t = Transition(obs, action, ts.reward, ts.observation, ts.terminal)
        replay.add(t)
        trajectory.append(t)
        if learn:
            agent.on_env_step(replay)
        obs = ts.observation
        if ts.terminal:
            break
    agent.end_episode(len(trajectory))
    return trajectory
