"""Deep Sea grid MDP and a single-state Gaussian bandit.

Observations are one-hot feature vectors. Deep Sea draws one random bit per
cell; the effective move is ``action XOR bit`` with 1 meaning "right".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from eve_rl.errors import ConfigError, ContractError

LEFT, RIGHT = 0, 1


@dataclass(frozen=True)
class TimeStep:
    observation: np.ndarray
    reward: float
    terminal: bool


@dataclass(frozen=True)
class DeepSeaConfig:
    size: int = 10
    move_cost: float | None = None
    treasure: float = 1.0
    randomize_actions: bool = True
    reward_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.size < 2:
            raise ConfigError(f"deep sea size must be >= 2, got {self.size}")
        if self.move_cost is not None and self.move_cost < 0:
            raise ConfigError(f"move cost must be >= 0, got {self.move_cost}")
        if self.reward_noise_std < 0:
            raise ConfigError(f"reward noise std must be >= 0, got {self.reward_noise_std}")

    @property
    def cost(self) -> float:
        """Penalty per right move; defaults to 0.01 / size."""
        return 0.01 / self.size if self.move_cost is None else self.move_cost


@dataclass
class DeepSea:
    """L x L Deep Sea. Every episode lasts exactly L steps.

    The diver starts at (0, 0); each step moves one row down and one column
    left (clamped at 0, free) or right (costs ``cfg.cost``). Ending the
    final step in the last column collects the treasure; 2 of the 2^L
    action sequences do so (all right, or a clamped left first).
    """

    cfg: DeepSeaConfig
    mapping: np.ndarray = field(init=False, repr=False)
    row: int = field(init=False, default=0)
    column: int = field(init=False, default=0)
    done: bool = field(init=False, default=True)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.cfg.seed)
        L = self.cfg.size
        if self.cfg.randomize_actions:
            self.mapping = self._rng.integers(0, 2, size=(L, L)).astype(np.int8)
        else:
            self.mapping = np.zeros((L, L), dtype=np.int8)
        self.success = False

    @property
    def n_features(self) -> int:
        return self.cfg.size**2

    n_actions = 2

    def observation(self) -> np.ndarray:
        obs = np.zeros(self.n_features)
        if self.row < self.cfg.size:
            obs[self.row * self.cfg.size + self.column] = 1.0
        return obs

    def reset(self) -> TimeStep:
        self.row = 0
        self.column = 0
        self.done = False
        self.success = False
        return TimeStep(self.observation(), 0.0, False)

    def step(self, action: int) -> TimeStep:
        if self.done:
            raise ContractError("step() called on a terminated episode; call reset()")
        if action not in (0, 1):
            raise ContractError(f"deep sea action must be 0 or 1, got {action}")
        L = self.cfg.size
        moves_right = (int(action) ^ int(self.mapping[self.row, self.column])) == RIGHT
        reward = 0.0
        if moves_right:
            reward -= self.cfg.cost
            self.column = min(self.column + 1, L - 1)
        else:
            self.column = max(self.column - 1, 0)
        self.row += 1
        # the last column is only reachable on the final row by a right move
        if self.row == L and self.column == L - 1:
            reward += self.cfg.treasure
            self.success = True
        if self.cfg.reward_noise_std > 0:
            reward += self.cfg.reward_noise_std * self._rng.standard_normal()
        self.done = self.row == L
        return TimeStep(self.observation(), reward, self.done)

    def cell(self) -> tuple[int, int]:
        return self.row, self.column

    def right_action(self, row: int, column: int) -> int:
        """The raw action that moves right at the given cell."""
        return RIGHT ^ int(self.mapping[row, column])


@dataclass
class GaussianBandit:
    """One state, one action, episodes of length 1, reward ~ N(mu, sigma^2)."""

    mu: float = 0.0
    sigma: float = 1.0
    seed: int | None = None
    done: bool = field(init=False, default=True)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        self.success = False

    n_features = 1
    n_actions = 1

    def reset(self) -> TimeStep:
        self.done = False
        return TimeStep(np.ones(1), 0.0, False)

    def step(self, action: int = 0) -> TimeStep:
        if self.done:
            raise ContractError("step() called on a terminated episode; call reset()")
        self.done = True
        return TimeStep(np.zeros(1), gaussian_bandit_step(self.mu, self.sigma, self._rng), True)


def gaussian_bandit_step(mu_true: float, sigma: float, rng: np.random.Generator) -> float:
    return float(mu_true + sigma * rng.standard_normal())
