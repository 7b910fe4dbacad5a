from __future__ import annotations
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .catalog import mlp_spec
from .env import CoreModel, EnergizeEnv, RemanentFlux, Transition, oracle_best_angle, sample_remanence
from .errors import ConfigError, DivergenceError, StateError, ValidationError
from .nn import PROB_FLOOR, Network, SgdConfig, sgd_step
from .record import ExperimentRecord, Summary, summarize
from .seeding import derive_seed
from .types import Activation, LossKind, ScheduleKind

log = logging.getLogger(__name__)

LOG_EVERY = 5000


@dataclass(frozen=True)
class ActionGrid:
    """Closing angle of bin k is k * 360 / n_bins degrees."""
    n_bins: int = 72

    def __post_init__(self) -> None:
        if self.n_bins < 8:
            raise ConfigError(f"action grid needs >= 8 bins, got {self.n_bins}")

    @property
    def step_deg(self) -> float:
        return 360.0 / self.n_bins

    def angle(self, k: int) -> float:
        if not 0 <= k < self.n_bins:
            raise ValidationError(f"action bin {k} outside [0, {self.n_bins})")
        return k * self.step_deg

    def bin_of(self, angle_deg: float) -> int:
        return int(round((angle_deg % 360.0) / self.step_deg)) % self.n_bins


@dataclass(frozen=True)
class EpsilonSchedule:
    kind: ScheduleKind = ScheduleKind.LINEAR
    eps0: float = 1.0
    eps_min: float = 0.05
    horizon: int = 20000
    tau: float = 5000.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not 0.0 <= self.eps_min <= self.eps0 <= 1.0:
            raise ConfigError(f"need 0 <= eps_min <= eps0 <= 1, got eps_min={self.eps_min}, eps0={self.eps0}")
        if self.horizon < 1 or not self.tau > 0:
            raise ConfigError(f"horizon and tau must be positive, got {self.horizon}, {self.tau}")


def epsilon_at(sched: EpsilonSchedule, t: int) -> float:
    if t < 0:
        raise ValidationError(f"step must be >= 0, got {t}")
    if sched.kind == ScheduleKind.LINEAR:
        return max(sched.eps_min, sched.eps0 - t * (sched.eps0 - sched.eps_min) / sched.horizon)
    return max(sched.eps_min, sched.eps0 * math.exp(-t / sched.tau))


class ReplayBuffer:
    """Ring buffer of transitions; the oldest entry is overwritten once full."""

    def __init__(self, capacity: int) -> None:
        if capacity < 1:
            raise ConfigError(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._items: List[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, tr: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tr)
        else:
            self._items[self._next] = tr
        self._next = (self._next + 1) % self.capacity

    def items(self) -> List[Transition]:
        """Oldest first."""
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._next:] + self._items[:self._next]

    def sample(self, rng: np.random.Generator, n: int) -> List[Transition]:
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]


def _obs(flux: RemanentFlux) -> np.ndarray:
    return flux.as_array()


# --------- DQN ---------

@dataclass
class DqnConfig:
    hidden: int = 64
    learning_rate: float = 1e-2
    momentum: float = 0.9
    replay_capacity: int = 10000
    batch: int = 64
    sync_every: int = 250
    schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)


class DqnAgent:
    """
    Q-network 3 -> hidden -> hidden -> n_bins (softplus hidden, linear out),
    target network of the same shape, replay ring buffer.
    """

    def __init__(self, grid: ActionGrid, cfg: DqnConfig, seed: int = 0) -> None:
        self.grid = grid
        self.cfg = cfg
        spec = mlp_spec([3, cfg.hidden, cfg.hidden, grid.n_bins], Activation.SOFTPLUS, Activation.LINEAR, LossKind.MSE)
        self.q_net = Network.from_spec(spec, derive_seed(seed, "q_net"))
        self.target_net = self.q_net.copy()
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.sgd = SgdConfig(cfg.learning_rate, cfg.momentum, cfg.batch, derive_seed(seed, "sgd"))
        self.rng = np.random.default_rng(derive_seed(seed, "replay"))
        self.updates = 0

    @property
    def schedule(self) -> EpsilonSchedule:
        return self.cfg.schedule

    def q_values(self, flux: RemanentFlux) -> np.ndarray:
        return self.q_net.forward(_obs(flux)[None])[0]


def dqn_select(
    agent: DqnAgent,
    state: RemanentFlux,
    t: int,
    rng: np.random.Generator,
    epsilon: Optional[float] = None,
) -> int:
    """epsilon-greedy; argmax ties go to the lowest bin."""
    eps = epsilon_at(agent.schedule, t) if epsilon is None else epsilon
    if rng.random() < eps:
        return int(rng.integers(agent.grid.n_bins))
    return int(np.argmax(agent.q_values(state)))


def dqn_targets(batch: Sequence[Transition]) -> np.ndarray:
    # every episode terminates after one step: y = r, no bootstrap from next_state
    return np.array([tr.reward for tr in batch], dtype=np.float64)


def dqn_update(agent: DqnAgent) -> float:
    """One SGD step on (Q(s)[a] - r)^2 over a replay batch; syncs the target net on schedule."""
    if len(agent.replay) < agent.cfg.batch:
        raise StateError(f"replay holds {len(agent.replay)} transitions, need {agent.cfg.batch} before updating")
    batch = agent.replay.sample(agent.rng, agent.cfg.batch)
    states = np.stack([_obs(tr.state) for tr in batch])
    actions = np.array([tr.action for tr in batch], dtype=np.int64)
    targets = dqn_targets(batch)

    q = agent.q_net.forward(states)
    rows = np.arange(len(batch))
    diff = q[rows, actions] - targets
    loss = float(np.mean(diff ** 2))
    if not math.isfinite(loss):
        raise DivergenceError(f"DQN loss became non-finite after {agent.updates} updates")
    grad = np.zeros_like(q)
    grad[rows, actions] = 2.0 * diff / len(batch)
    sgd_step(agent.q_net, agent.q_net.backward_output(grad), agent.sgd)

    agent.updates += 1
    if agent.updates % agent.cfg.sync_every == 0:
        agent.target_net.load_params(agent.q_net)
    return loss


# --------- PPO ---------

@dataclass
class PpoConfig:
    hidden: int = 64
    learning_rate: float = 1e-2
    momentum: float = 0.9
    clip_eps: float = 0.2
    epochs_per_iter: int = 8
    rollout_size: int = 256
    minibatch: int = 32
    entropy_coef: float = 0.05
    activation: Activation = Activation.RELU

    def __post_init__(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"clip_eps must be in (0, 1), got {self.clip_eps}")
        if self.rollout_size < 1 or self.minibatch < 1 or self.epochs_per_iter < 1:
            raise ConfigError("rollout_size, minibatch and epochs_per_iter must be >= 1")
        if self.activation not in (Activation.RELU, Activation.SOFTPLUS):
            raise ConfigError(f"PPO hidden activation must be relu or softplus, got {self.activation.value}")


class PpoAgent:
    """
    Categorical actor 3 -> hidden -> hidden -> n_bins (softmax) and critic
    3 -> hidden -> hidden -> 1. The actor head starts at zero, i.e. a uniform policy.
    Both use cfg.activation (ReLU by default) in He-initialised hidden layers.
    """

    def __init__(self, grid: ActionGrid, cfg: PpoConfig, seed: int = 0) -> None:
        self.grid = grid
        self.cfg = cfg
        h = cfg.hidden
        actor_spec = mlp_spec([3, h, h, grid.n_bins], cfg.activation, Activation.SOFTMAX, LossKind.CROSS_ENTROPY)
        critic_spec = mlp_spec([3, h, h, 1], cfg.activation, Activation.LINEAR, LossKind.MSE)
        self.actor = Network.from_spec(actor_spec, derive_seed(seed, "actor"))
        self.critic = Network.from_spec(critic_spec, derive_seed(seed, "critic"))
        for net in (self.actor, self.critic):
            for layer in net.layers[:-1]:
                # Glorot -> He uniform bound
                n_in, n_out = layer.weights.shape
                layer.weights *= np.sqrt((n_in + n_out) / n_in)
        head = self.actor.layers[-1]
        head.weights[...] = 0.0
        head.bias[...] = 0.0
        self.actor_sgd = SgdConfig(cfg.learning_rate, cfg.momentum, cfg.minibatch, derive_seed(seed, "actor_sgd"))
        self.critic_sgd = SgdConfig(cfg.learning_rate, cfg.momentum, cfg.minibatch, derive_seed(seed, "critic_sgd"))
        self.rng = np.random.default_rng(derive_seed(seed, "minibatch"))
        self.last_stats: Dict[str, float] = {}

    @property
    def clip_eps(self) -> float:
        return self.cfg.clip_eps

    def probs(self, flux: RemanentFlux) -> np.ndarray:
        return self.actor.forward(_obs(flux)[None])[0]


@dataclass
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    i_max: np.ndarray
    values: np.ndarray
    raw_advantages: np.ndarray
    advantages: np.ndarray

    def __len__(self) -> int:
        return self.actions.shape[0]


def sample_categorical(p: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(p)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(k, p.shape[0] - 1)


def ppo_collect(agent: PpoAgent, env: EnergizeEnv, n: int, rng: np.random.Generator) -> Rollout:
    """
    n one-step episodes under the current policy. Advantage = r - V(s), normalised
    per rollout unless its std is below 1e-8.
    """
    if n < 1:
        raise ValidationError(f"rollout size must be >= 1, got {n}")
    states, actions, rewards, currents = [], [], [], []
    for _ in range(n):
        flux = env.reset()
        a = sample_categorical(agent.probs(flux), rng)
        tr = env.step(agent.grid.angle(a), action=a)
        states.append(_obs(flux))
        actions.append(a)
        rewards.append(tr.reward)
        currents.append(tr.i_max)

    s = np.stack(states)
    a = np.array(actions, dtype=np.int64)
    r = np.array(rewards)
    p = agent.actor.forward(s)
    log_probs = np.log(np.clip(p[np.arange(n), a], PROB_FLOOR, 1.0))
    values = agent.critic.forward(s)[:, 0]
    raw = r - values
    std = raw.std()
    if std < 1e-8:
        log.warning("advantage std %.3g below 1e-8, skipping normalisation", std)
        adv = raw.copy()
    else:
        adv = (raw - raw.mean()) / std
    return Rollout(s, a, log_probs, r, np.array(currents), values, raw, adv)


def clipped_surrogate(ratio: np.ndarray, adv: np.ndarray, clip_eps: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-sample min(rho * A, clip(rho, 1 - eps, 1 + eps) * A) and a mask of samples
    where the unclipped term is the minimum (the only ones carrying gradient).
    """
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return np.minimum(unclipped, clipped), unclipped <= clipped


def ppo_policy_loss(
    probs: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float,
    entropy_coef: float,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    L = -mean(clipped surrogate) - entropy_coef * mean(H(pi)).
    Returns (loss, dL/dlogits, ratio).
    """
    m = actions.shape[0]
    rows = np.arange(m)
    logp_all = np.log(np.clip(probs, PROB_FLOOR, 1.0))
    ratio = np.exp(logp_all[rows, actions] - old_log_probs)
    if not np.all(np.isfinite(ratio)):
        raise DivergenceError("non-finite probability ratio in PPO update")
    terms, active = clipped_surrogate(ratio, advantages, clip_eps)
    entropy = -np.sum(probs * logp_all, axis=1)
    loss = float(-terms.mean() - entropy_coef * entropy.mean())

    onehot = np.zeros_like(probs)
    onehot[rows, actions] = 1.0
    d_surr = (active * advantages * ratio)[:, None] * (onehot - probs)
    d_entropy = -probs * (logp_all + entropy[:, None])
    grad = (-d_surr - entropy_coef * d_entropy) / m
    return loss, grad, ratio


def ppo_update(agent: PpoAgent, rollout: Rollout) -> Tuple[float, float]:
    """
    epochs_per_iter passes over the rollout in shuffled mini-batches, one sgd_step
    on actor and critic per mini-batch. Returns the last epoch's mean (policy, value) loss.
    """
    if len(rollout) == 0:
        raise ValidationError("empty rollout")
    cfg = agent.cfg
    n = len(rollout)
    ratios: List[np.ndarray] = []
    for _ in range(cfg.epochs_per_iter):
        order = agent.rng.permutation(n)
        p_losses, v_losses = [], []
        for start in range(0, n, cfg.minibatch):
            b = order[start:start + cfg.minibatch]
            probs = agent.actor.forward(rollout.states[b])
            p_loss, grad, ratio = ppo_policy_loss(
                probs, rollout.actions[b], rollout.log_probs[b], rollout.advantages[b], cfg.clip_eps, cfg.entropy_coef
            )
            sgd_step(agent.actor, agent.actor.backward_logits(grad), agent.actor_sgd)

            v = agent.critic.forward(rollout.states[b])[:, 0]
            diff = v - rollout.rewards[b]
            v_loss = float(np.mean(diff ** 2))
            if not math.isfinite(v_loss):
                raise DivergenceError("PPO value loss became non-finite")
            sgd_step(agent.critic, agent.critic.backward_output((2.0 * diff / b.size)[:, None]), agent.critic_sgd)

            p_losses.append(p_loss * b.size)
            v_losses.append(v_loss * b.size)
            ratios.append(ratio)
    all_ratios = np.concatenate(ratios)
    agent.last_stats = {
        "ratio_mean": float(all_ratios.mean()),
        "clip_fraction": float(np.mean(np.abs(all_ratios - 1.0) > cfg.clip_eps)),
    }
    return sum(p_losses) / n, sum(v_losses) / n


# --------- Policies ---------

class Policy(Protocol):
    def act(self, flux: RemanentFlux) -> float: ...


class GreedyQPolicy:
    def __init__(self, q_net: Network, grid: ActionGrid) -> None:
        self.q_net = q_net
        self.grid = grid

    def act_bin(self, flux: RemanentFlux) -> int:
        return int(np.argmax(self.q_net.forward(_obs(flux)[None])[0]))

    def act(self, flux: RemanentFlux) -> float:
        return self.grid.angle(self.act_bin(flux))


class GreedyActorPolicy:
    def __init__(self, actor: Network, grid: ActionGrid) -> None:
        self.actor = actor
        self.grid = grid

    def act_bin(self, flux: RemanentFlux) -> int:
        return int(np.argmax(self.actor.forward(_obs(flux)[None])[0]))

    def act(self, flux: RemanentFlux) -> float:
        return self.grid.angle(self.act_bin(flux))


class OraclePolicy:
    """Looks up the brute-force optimum; not restricted to the agents' action grid."""

    def __init__(self, core: CoreModel, grid_deg: float = 0.5) -> None:
        self.core = core
        self.grid_deg = grid_deg

    def act(self, flux: RemanentFlux) -> float:
        return oracle_best_angle(flux, self.core, self.grid_deg)[0]


class RandomPolicy:
    def __init__(self, grid: ActionGrid, seed: int = 0) -> None:
        self.grid = grid
        self.rng = np.random.default_rng(seed)

    def act(self, flux: RemanentFlux) -> float:
        return self.grid.angle(int(self.rng.integers(self.grid.n_bins)))


Agent = Union[DqnAgent, PpoAgent]


def greedy_policy(agent: Agent) -> Policy:
    if isinstance(agent, DqnAgent):
        return GreedyQPolicy(agent.q_net, agent.grid)
    return GreedyActorPolicy(agent.actor, agent.grid)


# --------- Training / evaluation ---------

def _train_dqn(agent: DqnAgent, env: EnergizeEnv, steps: int, seed: int, record: ExperimentRecord) -> None:
    explore = np.random.default_rng(derive_seed(seed, "explore"))
    for t in range(steps):
        flux = env.reset()
        a = dqn_select(agent, flux, t, explore)
        tr = env.step(agent.grid.angle(a), action=a)
        agent.replay.add(tr)
        record.log("reward", tr.reward)
        record.log("i_max", tr.i_max)
        record.log("epsilon", epsilon_at(agent.schedule, t))
        if len(agent.replay) >= agent.cfg.batch:
            record.log("loss", dqn_update(agent))
        if (t + 1) % LOG_EVERY == 0:
            recent = record.metrics["i_max"][-LOG_EVERY:]
            log.info("dqn step %d/%d eps=%.3f mean i_max=%.3f", t + 1, steps, epsilon_at(agent.schedule, t), float(np.mean(recent)))


def _train_ppo(agent: PpoAgent, env: EnergizeEnv, steps: int, seed: int, record: ExperimentRecord) -> None:
    sampler = np.random.default_rng(derive_seed(seed, "explore"))
    done = 0
    while done < steps:
        n = min(agent.cfg.rollout_size, steps - done)
        rollout = ppo_collect(agent, env, n, sampler)
        for r, i in zip(rollout.rewards, rollout.i_max):
            record.log("reward", r)
            record.log("i_max", i)
        p_loss, v_loss = ppo_update(agent, rollout)
        record.log("policy_loss", p_loss)
        record.log("value_loss", v_loss)
        record.log("ratio_mean", agent.last_stats["ratio_mean"])
        record.log("clip_fraction", agent.last_stats["clip_fraction"])
        done += n
        log.debug("ppo %d/%d policy_loss=%.4f value_loss=%.4f", done, steps, p_loss, v_loss)
        if done % LOG_EVERY < n:
            log.info("ppo step %d/%d mean i_max=%.3f", done, steps, float(rollout.i_max.mean()))


def train(agent: Agent, env: EnergizeEnv, steps: int, seed: int, name: str = "train") -> Tuple[Policy, ExperimentRecord]:
    """
    Train for `steps` environment steps, deterministic given seed. On divergence the
    DivergenceError carries the partial record.
    """
    if agent.grid.n_bins != env.n_bins:
        raise ConfigError(f"agent grid has {agent.grid.n_bins} bins, environment {env.n_bins}")
    if steps < 0:
        raise ValidationError(f"steps must be >= 0, got {steps}")
    env.reseed(derive_seed(seed, "env"))
    record = ExperimentRecord(name=name, seed=seed)
    try:
        if isinstance(agent, DqnAgent):
            _train_dqn(agent, env, steps, seed, record)
        else:
            _train_ppo(agent, env, steps, seed, record)
    except DivergenceError as e:
        record.status = "diverged"
        record.error = str(e)
        e.record = record.finish()
        log.error("%s diverged: %s", name, e)
        raise
    record.summary = {"steps": steps}
    if steps:
        record.summary["train_i_max"] = summarize(record.metrics["i_max"]).to_dict()
    return greedy_policy(agent), record.finish()


@dataclass
class EvalResult:
    i_max: np.ndarray
    rewards: np.ndarray
    summary: Summary
    frac_over_rated: float

    def to_dict(self) -> Dict[str, float]:
        d = self.summary.to_dict()
        d["frac_over_rated"] = self.frac_over_rated
        return d


def eval_fluxes(n_episodes: int, seed: int, env: EnergizeEnv) -> List[RemanentFlux]:
    """Evaluation states shared by every policy evaluated with the same seed."""
    return [
        sample_remanence(derive_seed(seed, "eval", i), env.config.flux_max, env.config.flux_limit)
        for i in range(n_episodes)
    ]


def evaluate(policy: Policy, env: EnergizeEnv, n_episodes: int, seed: int) -> EvalResult:
    currents, rewards = [], []
    for flux in eval_fluxes(n_episodes, seed, env):
        env.reset(flux=flux)
        tr = env.step(policy.act(flux))
        currents.append(tr.i_max)
        rewards.append(tr.reward)
    i_max = np.array(currents)
    return EvalResult(i_max, np.array(rewards), summarize(i_max), float(np.mean(i_max > 1.0)))
