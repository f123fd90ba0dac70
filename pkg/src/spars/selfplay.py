"""Two shared-parameter agents compete for classifier score; the policy is
optimised with a clipped-surrogate policy gradient on agent m's experience."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (Adam, clip, exp, log_softmax, minimum, pick, softmax,
                       trilinear_resize)
from .autodiff.tensor import mean, tsum
from .environment import (DEFAULT_STEP, N_ACTIONS, EnvState, WindowScorer, apply_action,
                          crop_window, initial_state, reward_from_scores)
from .errors import NumericalError, ParameterError
from .network import DEFAULT_CHANNELS, DEFAULT_FC, ConvNet

logger = logging.getLogger(__name__)

DEFAULT_POLICY_INPUT = (16, 16, 8)


@dataclass
class RLConfig:
    T: int = 32
    episodes_per_update: int = 16
    updates: int = 100
    gamma: float = 0.99
    clip_ratio: float = 0.2
    entropy_weight: float = 0.01
    learning_rate: float = 3e-4
    epochs_per_update: int = 4
    minibatch_size: int = 132
    step: int = DEFAULT_STEP
    extents: tuple = (32, 32, 16)
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(self.extents)
        for name in ("T", "episodes_per_update", "updates", "epochs_per_update", "minibatch_size", "step"):
            if getattr(self, name) < 1:
                raise ParameterError(f"RLConfig.{name} must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise ParameterError(f"RLConfig.gamma must lie in (0, 1), got {self.gamma}")
        if self.clip_ratio <= 0 or self.entropy_weight < 0 or self.learning_rate <= 0:
            raise ParameterError("RLConfig: clip_ratio and learning_rate must be positive, entropy_weight >= 0")


@dataclass
class Trajectory:
    """``T + 1`` (state, action, reward) triplets plus sampling log-probabilities."""
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    inputs: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)

    @property
    def terminal_score(self):
        return self.scores[-1]


class PolicyNet(ConvNet):
    """Same trunk as the classifier; the last layer emits six action logits."""

    def __init__(self, input_dims=DEFAULT_POLICY_INPUT, seed=0, channels=DEFAULT_CHANNELS,
                 fc_widths=DEFAULT_FC, dtype=np.float32):
        # small final layer so the initial policy is close to uniform
        super().__init__(input_dims, N_ACTIONS, channels, fc_widths, seed=seed, dtype=dtype,
                         final_scale=0.01)

    def distribution(self, inputs):
        """Action probabilities for a batch of resized crops (BN in eval mode)."""
        logits = self.forward(inputs, train=False)
        return softmax(logits, axis=1).data

    def calibrate_batchnorm(self, inputs):
        """Set BN statistics from a batch of observations; they stay fixed afterwards."""
        for k in self.buffers:
            self.buffers[k][...] = 0.0 if k.endswith("mean") else 1.0
        saved = {k: v.copy() for k, v in self.buffers.items()}
        # momentum-free estimate: run train mode once with momentum 1
        from .autodiff import nn as _nn
        old = _nn.BN_MOMENTUM
        _nn.BN_MOMENTUM = 1.0
        try:
            self.forward(inputs, train=True)
        finally:
            _nn.BN_MOMENTUM = old
        return saved


def observe(policy: PolicyNet, case, windows):
    """Crop and resize windows to the policy input resolution."""
    return np.stack([trilinear_resize(crop_window(case, w), policy.input_dims) for w in windows]).astype(np.float32)


class ObservationCache:
    """Memoised policy inputs keyed by (case id, window); crops never change."""

    def __init__(self, input_dims):
        self.input_dims = tuple(input_dims)
        self.store = {}

    def get(self, case, window):
        key = (case.id, window)
        obs = self.store.get(key)
        if obs is None:
            obs = trilinear_resize(crop_window(case, window), self.input_dims).astype(np.float32)
            self.store[key] = obs
        return obs


def sample_from(probs, rng):
    """Draw one action per row of ``probs`` by inverse CDF."""
    probs = np.atleast_2d(probs).astype(np.float64)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def sample_action(policy: PolicyNet, case, state: EnvState, rng):
    """Sample ``a ~ pi(.|s)``; returns ``(action, log_prob)``."""
    probs = policy.distribution(observe(policy, case, [state.window]))[0]
    a = int(sample_from(probs, rng)[0])
    return a, float(np.log(probs[a]))


def compute_returns(rewards, gamma):
    """Discounted returns-to-go ``G_t = R_t + gamma * G_{t+1}``."""
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"gamma must lie in [0, 1), got {gamma}")
    out = np.zeros(len(rewards))
    g = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        g = rewards[t] + gamma * g
        out[t] = g
    return out


def run_episodes(policies, scorers, cfg: RLConfig, rng, record_inputs=True, starts=None, obs_cache=None):
    """Play ``len(scorers)`` two-agent episodes in lockstep.

    ``policies`` is ``(policy_m, policy_n)``; ``None`` means the uniform
    random policy.  Returns a list of ``(tau_m, tau_n)`` pairs, each with
    ``cfg.T + 1`` triplets.
    """
    n_ep = len(scorers)
    cases = [s.case for s in scorers]
    dims = [c.volume.shape for c in cases]
    if starts is None:
        starts = [(initial_state(c, cfg.extents, "random", rng, grid=cfg.step),
                   initial_state(c, cfg.extents, "random", rng, grid=cfg.step)) for c in cases]
    trajs = [(Trajectory(), Trajectory()) for _ in range(n_ep)]
    current = [list(p) for p in starts]
    for t in range(cfg.T + 1):
        actions = np.zeros((n_ep, 2), dtype=int)
        logps = np.zeros((n_ep, 2))
        for agent, pol in enumerate(policies):
            windows = [current[e][agent].window for e in range(n_ep)]
            if pol is None:
                probs = np.full((n_ep, N_ACTIONS), 1.0 / N_ACTIONS)
                obs = None
            else:
                if obs_cache is None:
                    obs = np.concatenate([observe(pol, cases[e], [windows[e]]) for e in range(n_ep)])
                else:
                    obs = np.stack([obs_cache.get(cases[e], windows[e]) for e in range(n_ep)])
                probs = pol.distribution(obs)
            a = sample_from(probs, rng)
            actions[:, agent] = a
            logps[:, agent] = np.log(probs[np.arange(n_ep), a])
            if record_inputs and agent == 0 and obs is not None:
                for e in range(n_ep):
                    trajs[e][0].inputs.append(obs[e])
        for e in range(n_ep):
            s_m, s_n = current[e]
            f_m, f_n = scorers[e].scores([s_m.window, s_n.window])
            r = reward_from_scores(f_m, f_n)
            for agent, (traj, s, f, rew) in enumerate(zip(trajs[e], (s_m, s_n), (f_m, f_n), (r.r_m, r.r_n))):
                traj.states.append(s)
                traj.actions.append(int(actions[e, agent]))
                traj.rewards.append(rew)
                traj.log_probs.append(float(logps[e, agent]))
                traj.scores.append(float(f))
            if t < cfg.T:
                current[e] = [apply_action(s, actions[e, agent], dims[e], cfg.step)
                              for agent, s in enumerate((s_m, s_n))]
    return trajs


def collect_selfplay_episode(policy, scorer: WindowScorer, cfg: RLConfig, rng):
    """One episode: both agents share ``policy`` and start independently at random."""
    return run_episodes((policy, policy), [scorer], cfg, rng)[0]


def surrogate_terms(policy, inputs, actions, old_log_probs, advantages, clip_ratio):
    logits = policy.forward(inputs, train=False)
    logp_all = log_softmax(logits, axis=1)
    logp = pick(logp_all, actions)
    ratio = exp(logp - old_log_probs)
    adv = np.asarray(advantages, dtype=logits.dtype)
    surrogate = mean(minimum(ratio * adv, clip(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * adv))
    entropy = -mean(tsum(softmax(logits, axis=1) * logp_all, axis=1))
    return surrogate, entropy


def surrogate_objective(policy, batch, clip_ratio):
    s, _ = surrogate_terms(policy, batch["inputs"], batch["actions"], batch["old_log_probs"],
                           batch["advantages"], clip_ratio)
    return s.item()


def build_batch(trajectories, gamma):
    """Flatten agent-m trajectories into an update batch.

    Advantages are returns-to-go minus their batch mean.
    """
    if not trajectories:
        raise ParameterError("policy update needs at least one trajectory")
    returns = np.concatenate([compute_returns(t.rewards, gamma) for t in trajectories])
    return {
        "inputs": np.stack([x for t in trajectories for x in t.inputs]),
        "actions": np.array([a for t in trajectories for a in t.actions]),
        "old_log_probs": np.array([lp for t in trajectories for lp in t.log_probs], dtype=np.float32),
        "returns": returns,
        "advantages": (returns - returns.mean()).astype(np.float32),
    }


def policy_update(policy: PolicyNet, batch, cfg: RLConfig, optimizer: Adam, rng):
    """Clipped-surrogate ascent with an entropy bonus over ``cfg.epochs_per_update`` passes.

    Parameters are left untouched if any minibatch loss is non-finite.
    """
    snapshot = policy.params.arrays()
    snapshot = {k: v.copy() for k, v in snapshot.items()}
    n = len(batch["actions"])
    stats = {"policy_loss": 0.0, "entropy": 0.0, "steps": 0}
    for _ in range(cfg.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            if len(idx) == 0:
                continue
            optimizer.zero_grad()
            surrogate, entropy = surrogate_terms(
                policy, batch["inputs"][idx], batch["actions"][idx], batch["old_log_probs"][idx],
                batch["advantages"][idx], cfg.clip_ratio)
            loss = -(surrogate + entropy * cfg.entropy_weight) if cfg.entropy_weight else -surrogate
            if not np.isfinite(loss.item()):
                policy.params.load_arrays(snapshot)
                raise NumericalError(
                    f"non-finite policy loss (surrogate={surrogate.item()}, entropy={entropy.item()}, "
                    f"advantage range=[{batch['advantages'].min()}, {batch['advantages'].max()}]); update aborted")
            loss.backward()
            optimizer.step()
            stats["policy_loss"] += loss.item()
            stats["entropy"] += entropy.item()
            stats["steps"] += 1
    k = max(stats.pop("steps"), 1)
    return {key: v / k for key, v in stats.items()}


def calibration_inputs(policy, scorers, cfg, rng, n=64):
    obs = []
    for i in range(n):
        sc = scorers[i % len(scorers)]
        s = initial_state(sc.case, cfg.extents, "random", rng, grid=cfg.step)
        obs.append(observe(policy, sc.case, [s.window])[0])
    return np.stack(obs)


def train_policy(classifier, cases, cfg: RLConfig, policy: PolicyNet | None = None,
                 input_dims=DEFAULT_POLICY_INPUT, on_update=None, scorers=None, obs_cache=None):
    """Self-play training on ``cases``; returns ``(policy, history)``.

    ``history`` rows carry ``update, mean_return_m, mean_return_n, policy_loss, entropy``.
    """
    if not cases:
        raise ParameterError("policy training needs at least one case")
    rng = np.random.default_rng(cfg.seed)
    if policy is None:
        policy = PolicyNet(input_dims, seed=int(rng.integers(2 ** 31)))
    if scorers is None:
        scorers = {c.id: WindowScorer(classifier, c) for c in cases}
    pool = [scorers[c.id] for c in cases]
    if obs_cache is None:
        obs_cache = ObservationCache(policy.input_dims)
    policy.calibrate_batchnorm(calibration_inputs(policy, pool, cfg, rng))
    opt = Adam(policy.params, lr=cfg.learning_rate)
    history = []
    for u in range(cfg.updates):
        chosen = [pool[i] for i in rng.integers(0, len(pool), cfg.episodes_per_update)]
        pairs = run_episodes((policy, policy), chosen, cfg, rng, obs_cache=obs_cache)
        taus_m = [p[0] for p in pairs]
        batch = build_batch(taus_m, cfg.gamma)
        stats = policy_update(policy, batch, cfg, opt, rng)
        row = {
            "update": u,
            "mean_return_m": float(np.mean([compute_returns(p[0].rewards, cfg.gamma)[0] for p in pairs])),
            "mean_return_n": float(np.mean([compute_returns(p[1].rewards, cfg.gamma)[0] for p in pairs])),
            "policy_loss": stats["policy_loss"],
            "entropy": stats["entropy"],
            "mean_terminal_score": float(np.mean([p[0].terminal_score for p in pairs])),
        }
        history.append(row)
        logger.info("update %d: return_m %.3f terminal %.3f entropy %.3f", u, row["mean_return_m"],
                    row["mean_terminal_score"], row["entropy"])
        if on_update is not None:
            on_update(row)
    return policy, history


def evaluate_against_random(policy, scorers, cfg: RLConfig, n_episodes, seed, obs_cache=None):
    """Play ``policy`` (agent m; ``None`` for random) against a uniform-random agent n.

    Start states are drawn from ``seed`` alone so different policies face
    identical starts.  Returns arrays of m's terminal scores and returns.
    """
    start_rng = np.random.default_rng(seed)
    chosen = [scorers[i % len(scorers)] for i in range(n_episodes)]
    starts = [(initial_state(s.case, cfg.extents, "random", start_rng, grid=cfg.step),
               initial_state(s.case, cfg.extents, "random", start_rng, grid=cfg.step)) for s in chosen]
    rng = np.random.default_rng([seed, 1])
    pairs = run_episodes((policy, None), chosen, cfg, rng, record_inputs=False, starts=starts,
                         obs_cache=obs_cache)
    terminal = np.array([p[0].terminal_score for p in pairs])
    returns = np.array([compute_returns(p[0].rewards, cfg.gamma)[0] for p in pairs])
    return terminal, returns
