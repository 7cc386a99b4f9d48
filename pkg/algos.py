#!/usr/bin/python
# vim: set fileencoding=utf-8 :

"""Advantage estimators and losses.

   Token-level PPO with a step-level critic, the thought-weighted step-level PPO variant,
   leave-one-out advantages and a one-step TD actor-critic. Losses take diffcore Tensors for
   anything that must carry a gradient and plain numpy arrays for constants (advantages,
   frozen-policy quantities), so a constant can never leak a gradient.
"""

import dataclasses

import numpy as np

import diffcore as dc


ADV_EPS = 1e-8
KL_DIRECTIONS = ('forward', 'reverse')


class ConfigError(Exception):
    pass


@dataclasses.dataclass
class AdvantageSet:
    advantages: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.advantages.shape != self.targets.shape:
            raise dc.ShapeError("advantages and value targets differ in length")
        if not (np.isfinite(self.advantages).all() and np.isfinite(self.targets).all()):
            raise dc.NumericsError("non-finite advantage or value target")

    def __len__(self):
        return len(self.advantages)


@dataclasses.dataclass
class PPOConfig:
    clip_eps: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    kl_coef: float = 0.05
    value_coef: float = 0.15
    thought_coef: float = 0.35
    loo_k: int = 4
    normalize_advantages: bool = True
    kl_direction: str = 'forward'

    def validate(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ConfigError(f"ppo.clip_eps must be in (0, 1), got {self.clip_eps}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"ppo.gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError(f"ppo.gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if not 0.0 <= self.thought_coef <= 1.0:
            raise ConfigError(f"ppo.thought_coef must be in [0, 1], got {self.thought_coef}")
        if self.loo_k < 2:
            raise ConfigError(f"ppo.loo_k must be >= 2, got {self.loo_k}")
        if self.kl_coef < 0 or self.value_coef < 0:
            raise ConfigError("ppo.kl_coef and ppo.value_coef must be >= 0")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"ppo.kl_direction must be one of {KL_DIRECTIONS}, "
                              f"got {self.kl_direction!r}")


def _same_length(op, *arrays):
    lengths = {len(a) for a in arrays}
    if len(lengths) != 1:
        raise dc.ShapeError(f"{op}: length mismatch {[len(a) for a in arrays]}")


def compute_gae(rewards, values, dones, bootstrap_value, gamma, gae_lambda):
    """Generalized advantage estimates over one trajectory segment.

       values are V_old(s_t); bootstrap_value is V_old of the state after the last step and is
       ignored when that step is terminal.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    _same_length('compute_gae', rewards, values, dones)
    n = len(rewards)
    advantages = np.zeros(n)
    next_value = float(bootstrap_value)
    running = 0.0
    for t in reversed(range(n)):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * gae_lambda * live * running
        advantages[t] = running
        next_value = values[t]
    return AdvantageSet(advantages=advantages, targets=advantages + values)


def normalize_advantages(advantages):
    a = np.asarray(advantages, dtype=np.float64)
    if a.size < 2:
        raise dc.ShapeError(f"normalizing needs at least 2 advantages, got {a.size}")
    return (a - a.mean()) / (a.std() + ADV_EPS)


def token_ratios(new_logprobs, old_logprobs):
    """r_i = exp(log pi_theta - log pi_old) per token; old log-probs are constants."""
    old = np.asarray(old_logprobs, dtype=np.float64)
    if new_logprobs.shape != list(old.shape):
        raise dc.ShapeError(f"token_ratios: {new_logprobs.shape} vs {list(old.shape)}")
    return dc.exp(new_logprobs - old)


def _clipped_surrogate(ratio, advantage, clip_eps):
    surr = ratio * advantage
    clipped = dc.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage
    return dc.minimum(surr, clipped)


def step_mean(terms):
    """Unweighted mean of per-step scalar Tensors."""
    if not terms:
        raise dc.ShapeError("no steps to average")
    return dc.reduce_mean(dc.stack(terms))


def vldac_policy_loss(ratios, advantages, clip_eps):
    """Clipped surrogate applied to every token, step advantage broadcast to its tokens.

       ratios is a list with one 1-D Tensor of token ratios per step.
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    _same_length('vldac_policy_loss', ratios, advantages)
    terms = []
    for r, a in zip(ratios, advantages):
        if r.data.size == 0:
            raise dc.ShapeError("vldac_policy_loss: a step has no tokens")
        terms.append(dc.reduce_mean(_clipped_surrogate(r, float(a), clip_eps)))
    return -step_mean(terms)


def value_loss(values, targets):
    """Mean over steps of 0.5 (V - target)^2; values is a 1-D Tensor."""
    targets = np.asarray(targets, dtype=np.float64)
    if values.shape != list(targets.shape):
        raise dc.ShapeError(f"value_loss: {values.shape} values vs {list(targets.shape)} targets")
    residual = values - targets
    return dc.reduce_mean(residual * residual * 0.5)


def kl_penalty(new_logdists, old_dists, direction='forward', new_probs=None):
    """Mean over token positions of KL between frozen and live next-token distributions.

       forward is sum_v p_old (log p_old - log p_theta); reverse swaps the arguments.
    """
    new_logdists = dc.as_tensor(new_logdists)
    old = np.asarray(old_dists, dtype=np.float64)
    if new_logdists.shape != list(old.shape) or old.ndim != 2:
        raise dc.ShapeError(f"kl_penalty: {new_logdists.shape} vs {list(old.shape)}")
    old_log = np.log(np.maximum(old, dc.LOG_FLOOR))
    if direction == 'forward':
        entropy_term = (old * old_log).sum(axis=1)
        per_token = entropy_term - dc.reduce_sum(new_logdists * old, axis=1)
    elif direction == 'reverse':
        probs = dc.exp(new_logdists) if new_probs is None else new_probs
        per_token = dc.reduce_sum(probs * (new_logdists - old_log), axis=1)
    else:
        raise ConfigError(f"unknown KL direction {direction!r}")
    return dc.reduce_mean(per_token)


def total_loss(policy_loss, kl, value_loss, value_coef, kl_coef):
    return policy_loss + kl * kl_coef + value_loss * value_coef


def span_logprobs(logprobs, thought_span):
    """Split per-token log-probs into (thought sum, action sum).

       logprobs[j] belongs to tokens[j + 1]. The action sum covers SEP and everything after it;
       with no SEP it is zero.
    """
    n = logprobs.data.size if isinstance(logprobs, dc.Tensor) else len(logprobs)
    cut = thought_span.stop - 1

    def total(lo, hi):
        if hi <= lo:
            return dc.Tensor(0.0) if isinstance(logprobs, dc.Tensor) else 0.0
        if isinstance(logprobs, dc.Tensor):
            return dc.reduce_sum(dc.gather_index(logprobs, np.arange(lo, hi)))
        return float(np.sum(logprobs[lo:hi]))
    return total(0, cut), total(cut, n)


def rl4vlm_mixed_logprob(logp_thought, logp_action, thought_coef):
    """lambda * log p(thought) + log p(action)."""
    return thought_coef * logp_thought + logp_action


def rl4vlm_policy_loss(mixed_new, mixed_old, advantages, clip_eps):
    """Step-level PPO on exp(mixed_new - mixed_old): one clipped ratio per step."""
    mixed_old = np.asarray(mixed_old, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    _same_length('rl4vlm_policy_loss', mixed_new, mixed_old, advantages)
    ratios = dc.exp(dc.stack(mixed_new) - mixed_old)
    return -dc.reduce_mean(_clipped_surrogate(ratios, advantages, clip_eps))


def loo_advantages(returns):
    """K/(K-1) (R_i - mean R) over a group of K episodes from one initial state."""
    returns = np.asarray(returns, dtype=np.float64)
    k = len(returns)
    if k < 2:
        raise ConfigError(f"leave-one-out needs a group of at least 2 episodes, got {k}")
    return k / (k - 1) * (returns - returns.mean())


def discounted_return(rewards, gamma):
    total = 0.0
    for r in reversed(list(rewards)):
        total = r + gamma * total
    return total


def td0_update_targets(rewards, target_values, dones, gamma):
    """r + gamma V_target(s') for live transitions, r alone for terminal ones."""
    rewards = np.asarray(rewards, dtype=np.float64)
    target_values = np.asarray(target_values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    _same_length('td0_update_targets', rewards, target_values, dones)
    return np.where(dones, rewards, rewards + gamma * np.where(dones, 0.0, target_values))


def td_actor_loss(logprobs, advantages):
    """Policy gradient on every token of a step, weighted by the step's constant TD advantage."""
    advantages = np.asarray(advantages, dtype=np.float64)
    _same_length('td_actor_loss', logprobs, advantages)
    terms = []
    for lp, a in zip(logprobs, advantages):
        if lp.data.size == 0:
            raise dc.ShapeError("td_actor_loss: a step has no tokens")
        terms.append(dc.reduce_mean(lp * float(a)))
    return -step_mean(terms)


def polyak_update(target_params, live_params, tau):
    """Return target <- (1 - tau) target + tau live for every named array."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"Polyak tau must be in (0, 1], got {tau}")
    if set(target_params) != set(live_params):
        raise dc.ShapeError("target and live parameter names differ")
    updated = {}
    for name, target in target_params.items():
        live = np.asarray(live_params[name])
        if np.shape(target) != live.shape:
            raise dc.ShapeError(f"polyak_update: {name} has shape {list(np.shape(target))} "
                                f"vs {list(live.shape)}")
        updated[name] = (1.0 - tau) * np.asarray(target) + tau * live
    return updated
