#!/usr/bin/python
# vim: set fileencoding=utf-8 :

"""Training loop: rollouts under a frozen snapshot, advantages, minibatched PPO epochs with
   gradient accumulation, value warm-up, learning-rate schedule, periodic greedy evaluation and
   the replay-buffer path of the TD baseline. Also the finite-difference suite over every loss."""

import collections
import concurrent.futures
import configparser
import dataclasses
import difflib
import hashlib
import io
import json
import logging
import math
import os
import pickle
import time

import numpy as np
import pandas as pd

import algos
import diffcore as dc
import envs
import policy as pol


log = logging.getLogger(__name__)

ALGORITHMS = ('vldac', 'rl4vlm', 'loop', 'td_baseline')
SCHEDULES = ('cosine', 'linear', 'constant')
SEED_SPACE = 2 ** 31
EVAL_SEED_BASE = 2 ** 31
SECTIONS = ('train', 'env', 'ppo', 'model')


@dataclasses.dataclass
class ModelConfig:
    feature_dim: int = 128
    token_hidden: int = 64
    value_hidden: int = 64
    max_tokens: int = 12
    value_stop_grad: bool = True
    format_prior: float = 5.0


@dataclasses.dataclass
class TrainConfig:
    algorithm: str = 'vldac'
    seeds: list = dataclasses.field(default_factory=lambda: [0])
    total_env_steps: int = 51200
    rollout_size: int = 256
    rollout_workers: int = 1
    lr_init: float = 5e-5
    lr_final: float = 1e-7
    schedule: str = 'cosine'
    ppo_epochs: int = 2
    minibatch_size: int = 1
    grad_accum_steps: int = 1
    warmup_updates: int = 2
    max_grad_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_episodes: int = 50
    eval_interval: int = 1
    final_window: int = 1
    replay_capacity: int = 10000
    on_policy: bool = False
    tau: float = 0.1
    td_batch_size: int = 32
    td_steps_per_update: int = 8
    checkpoint_interval: int = 10
    record_wall_time: bool = False
    env: envs.EnvSpec = dataclasses.field(default_factory=envs.EnvSpec)
    ppo: algos.PPOConfig = dataclasses.field(default_factory=algos.PPOConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise algos.ConfigError(f"train.algorithm must be one of {ALGORITHMS}, "
                                    f"got {self.algorithm!r}")
        if self.schedule not in SCHEDULES:
            raise algos.ConfigError(f"train.schedule must be one of {SCHEDULES}, "
                                    f"got {self.schedule!r}")
        for name in ('total_env_steps', 'rollout_size', 'rollout_workers', 'ppo_epochs',
                     'minibatch_size', 'grad_accum_steps', 'eval_episodes', 'eval_interval',
                     'final_window', 'replay_capacity', 'td_batch_size', 'td_steps_per_update',
                     'checkpoint_interval'):
            if getattr(self, name) < 1:
                raise algos.ConfigError(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup_updates < 0:
            raise algos.ConfigError(f"train.warmup_updates must be >= 0, "
                                    f"got {self.warmup_updates}")
        if not self.lr_init >= self.lr_final > 0:
            raise algos.ConfigError(f"need lr_init >= lr_final > 0, got {self.lr_init} -> "
                                    f"{self.lr_final}")
        if not self.seeds:
            raise algos.ConfigError("train.seeds is empty")
        if not 0.0 < self.tau <= 1.0:
            raise algos.ConfigError(f"train.tau must be in (0, 1], got {self.tau}")
        if self.model.max_tokens < 3:
            raise algos.ConfigError(f"model.max_tokens must be >= 3, got {self.model.max_tokens}")
        if self.model.format_prior < 0:
            raise algos.ConfigError(f"model.format_prior must be >= 0, "
                                    f"got {self.model.format_prior}")
        self.ppo.validate()
        try:
            self.env.validate()
        except envs.SpecError as e:
            raise algos.ConfigError(f"env: {e}")
        group_steps = self.ppo.loo_k * self.env.horizon
        if self.algorithm == 'loop' and self.rollout_size < group_steps:
            raise algos.ConfigError(f"train.rollout_size {self.rollout_size} cannot hold one LOOP "
                                    f"group of {self.ppo.loo_k} x horizon {self.env.horizon}")
        return self

    @property
    def n_updates(self):
        return math.ceil(self.total_env_steps / self.rollout_size)

    @property
    def replay_size(self):
        """On-policy TD keeps exactly the latest rollout."""
        return self.rollout_size if self.on_policy else self.replay_capacity

    def optimizer_steps(self):
        """Optimizer steps over the whole run; the schedule's horizon."""
        if self.algorithm == 'td_baseline':
            return self.n_updates * self.td_steps_per_update
        minibatches = math.ceil(self.rollout_size / self.minibatch_size)
        return self.n_updates * self.ppo_epochs * math.ceil(minibatches / self.grad_accum_steps)

    def sections(self):
        top = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
               if f.name not in ('env', 'ppo', 'model')}
        return {'train': top, 'env': dataclasses.asdict(self.env),
                'ppo': dataclasses.asdict(self.ppo), 'model': dataclasses.asdict(self.model)}

    def to_text(self):
        """Resolved config: every value materialized, fixed order, floats in repr form."""
        out = io.StringIO()
        for section, values in self.sections().items():
            out.write(f"[{section}]\n")
            for key, value in values.items():
                out.write(f"{key} = {_format_value(value)}\n")
            out.write("\n")
        return out.getvalue()

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()

    @classmethod
    def from_text(cls, text, overrides=()):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise algos.ConfigError(f"config does not parse: {e}")
        values = {s: dict(parser[s]) for s in parser.sections()}
        for item in overrides:
            key, sep, value = item.partition('=')
            section, dot, name = key.strip().partition('.')
            if not sep or not dot:
                raise algos.ConfigError(f"override {item!r} is not section.key=value")
            values.setdefault(section, {})[name] = value.strip()
        return cls.from_sections(values)

    @classmethod
    def from_sections(cls, values):
        targets = {'train': cls, 'env': envs.EnvSpec, 'ppo': algos.PPOConfig,
                   'model': ModelConfig}
        kwargs = {}
        for section, items in values.items():
            if section not in targets:
                raise algos.ConfigError(f"unknown config section [{section}]" +
                                        _nearest(section, SECTIONS))
            fields = {f.name: f for f in dataclasses.fields(targets[section])
                      if f.name not in ('env', 'ppo', 'model')}
            parsed = {}
            for key, raw in items.items():
                if key not in fields:
                    raise algos.ConfigError(f"unknown key {section}.{key}" +
                                            _nearest(key, fields, prefix=f"{section}."))
                parsed[key] = _parse_value(fields[key], raw, f"{section}.{key}")
            kwargs[section] = parsed
        config = cls(**kwargs.get('train', {}))
        config.env = envs.EnvSpec(**kwargs.get('env', {}))
        config.ppo = algos.PPOConfig(**kwargs.get('ppo', {}))
        config.model = ModelConfig(**kwargs.get('model', {}))
        return config.validate()


def _nearest(word, candidates, prefix=''):
    match = difflib.get_close_matches(word, list(candidates), n=1, cutoff=0.0)
    return f" (did you mean {prefix}{match[0]}?)" if match else ""


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ', '.join(str(v) for v in value)
    return str(value)


def _parse_value(field, raw, name):
    raw = str(raw).strip()
    try:
        if field.type is bool:
            lowered = raw.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if field.type is int:
            return int(raw)
        if field.type is float:
            return float(raw)
        if field.type is list:
            return [int(v) for v in raw.replace(',', ' ').split()]
        return raw
    except ValueError:
        raise algos.ConfigError(f"{name}: cannot read {raw!r} as {field.type.__name__}")


def lr_schedule(t, total, lr_init, lr_final, kind='cosine'):
    """Learning rate at optimizer step t of total."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    frac = t / total if total else 1.0
    if kind == 'cosine':
        return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * frac))
    if kind == 'linear':
        return lr_init + (lr_final - lr_init) * frac
    if kind == 'constant':
        return lr_init
    raise algos.ConfigError(f"unknown schedule {kind!r}")


class Adam:
    """Adaptive-moment optimizer with per-parameter step counts and global-norm clipping.

       frozen names keep their parameters, moments and step counts untouched.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, max_grad_norm=1.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = {n: 0 for n in params}

    def step(self, params, lr, frozen=()):
        """Apply one update from the accumulated .grad; return the pre-clip gradient norm."""
        active = [n for n in params if not n.startswith(tuple(frozen))]
        grads = {n: np.zeros_like(params[n].data) if params[n].grad is None else params[n].grad
                 for n in active}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = 1.0
        if self.max_grad_norm and norm > self.max_grad_norm:
            scale = self.max_grad_norm / norm
        for n in active:
            g = grads[n] * scale
            self.t[n] += 1
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            m_hat = self.m[n] / (1.0 - self.beta1 ** self.t[n])
            v_hat = self.v[n] / (1.0 - self.beta2 ** self.t[n])
            params[n].data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm

    def state_arrays(self):
        arrays = {}
        for n in self.m:
            arrays[f"adam_m__{n}"] = self.m[n].astype('<f8')
            arrays[f"adam_v__{n}"] = self.v[n].astype('<f8')
            arrays[f"adam_t__{n}"] = np.array(self.t[n], dtype='<i8')
        return arrays

    def load_state(self, arrays):
        for n in self.m:
            self.m[n] = arrays[f"adam_m__{n}"].astype(np.float64)
            self.v[n] = arrays[f"adam_v__{n}"].astype(np.float64)
            self.t[n] = int(arrays[f"adam_t__{n}"])


@dataclasses.dataclass
class StepRecord:
    obs: pol.Observation
    emission: pol.ActionEmission
    old_logprobs: np.ndarray
    old_dists: np.ndarray
    value_old: float
    reward: float
    done: bool
    next_obs: pol.Observation
    episode_seed: int
    success: bool = False


@dataclasses.dataclass
class RolloutBatch:
    """Steps in collection order; segments are (start, stop, bootstrap_value) per episode piece."""
    steps: list = dataclasses.field(default_factory=list)
    segments: list = dataclasses.field(default_factory=list)
    episode_returns: list = dataclasses.field(default_factory=list)
    episode_successes: list = dataclasses.field(default_factory=list)
    groups: list = dataclasses.field(default_factory=list)
    dropped: int = 0
    advantages: np.ndarray = None
    targets: np.ndarray = None

    @property
    def n_steps(self):
        return len(self.steps)

    @property
    def env_steps(self):
        """Environment steps consumed, including steps of groups cut off by the budget."""
        return len(self.steps) + self.dropped

    def extend(self, other):
        offset = len(self.steps)
        self.steps.extend(other.steps)
        self.segments.extend((a + offset, b + offset, v) for a, b, v in other.segments)
        self.groups.extend([[a + offset for a in g] for g in other.groups])
        self.episode_returns.extend(other.episode_returns)
        self.episode_successes.extend(other.episode_successes)
        self.dropped += other.dropped


@dataclasses.dataclass
class MetricsRecord:
    update: int
    env_steps: int
    train_return: float
    train_success: float
    eval_success_rate: float
    eval_return: float
    policy_loss: float
    value_loss: float
    kl: float
    grad_norm: float
    lr: float
    wall_time: float = None

    def to_json(self):
        record = dataclasses.asdict(self)
        if record['wall_time'] is None:
            del record['wall_time']
        return json.dumps(record)


@dataclasses.dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    episodes: int


def _step(snapshot, env, obs, rng, episode_seed):
    features = snapshot.encode_state(obs)
    emission = snapshot.sample_action(obs, rng, features=features)
    value_old = snapshot.value(obs, features=features).item()
    try:
        outcome = env.step(env.parse_action(emission))
    except envs.EnvError as e:
        raise type(e)(f"{env.spec.kind} episode seed {episode_seed}, step {env.t}: {e}") from e
    return StepRecord(obs=obs, emission=emission, old_logprobs=emission.logprobs,
                      old_dists=emission.dists, value_old=value_old, reward=outcome.reward,
                      done=outcome.done, next_obs=outcome.next_obs, episode_seed=episode_seed,
                      success=outcome.info['success']), outcome


def _collect_worker(snapshot, spec, n_steps, seed):
    rng = np.random.default_rng(seed)
    env = envs.make_env(spec, snapshot.vocab)
    batch = RolloutBatch()
    start = 0
    while batch.n_steps < n_steps:
        episode_seed = int(rng.integers(SEED_SPACE))
        obs = env.reset(episode_seed)
        episode_return = 0.0
        while True:
            record, outcome = _step(snapshot, env, obs, rng, episode_seed)
            batch.steps.append(record)
            episode_return += record.reward
            obs = outcome.next_obs
            if outcome.done:
                batch.segments.append((start, batch.n_steps, 0.0))
                batch.episode_returns.append(episode_return)
                batch.episode_successes.append(record.success)
                break
            if batch.n_steps == n_steps:
                batch.segments.append((start, batch.n_steps, snapshot.value(obs).item()))
                break
        start = batch.n_steps
    return batch


def collect_rollouts(snapshot, spec, rollout_size, rng, workers=1):
    """Exactly rollout_size steps from `workers` environments, merged in worker order."""
    counts = [rollout_size // workers + (1 if w < rollout_size % workers else 0)
              for w in range(workers)]
    seeds = [int(s) for s in rng.integers(SEED_SPACE, size=workers)]
    jobs = [(c, s) for c, s in zip(counts, seeds) if c > 0]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda job: _collect_worker(snapshot, spec, *job), jobs))
    batch = RolloutBatch()
    for part in parts:
        batch.extend(part)
    return batch


def collect_groups(snapshot, spec, rollout_size, rng, k):
    """Groups of k episodes from a shared episode seed over exactly rollout_size env steps.

       The group running when the budget ends is dropped from the batch; its steps only count
       in batch.env_steps.
    """
    env = envs.make_env(spec, snapshot.vocab)
    batch = RolloutBatch()
    consumed = 0
    while consumed < rollout_size:
        episode_seed = int(rng.integers(SEED_SPACE))
        mark = (batch.n_steps, len(batch.segments))
        group = []
        for _ in range(k):
            start = batch.n_steps
            obs = env.reset(episode_seed)
            episode_return = 0.0
            done = False
            while not done and consumed < rollout_size:
                record, outcome = _step(snapshot, env, obs, rng, episode_seed)
                consumed += 1
                batch.steps.append(record)
                episode_return += record.reward
                obs, done = outcome.next_obs, outcome.done
            if not done:
                break
            group.append(len(batch.segments))
            batch.segments.append((start, batch.n_steps, 0.0))
            batch.episode_returns.append(episode_return)
            batch.episode_successes.append(record.success)
        if len(group) < k:
            batch.dropped += batch.n_steps - mark[0]
            del batch.steps[mark[0]:]
            del batch.segments[mark[1]:]
            del batch.episode_returns[mark[1]:]
            del batch.episode_successes[mark[1]:]
            break
        batch.groups.append(group)
    return batch


def compute_batch_advantages(batch, config):
    """Fill batch.advantages / batch.targets: GAE per segment, or leave-one-out per group."""
    ppo = config.ppo
    advantages = np.zeros(batch.n_steps)
    targets = np.zeros(batch.n_steps)
    if config.algorithm == 'loop':
        for group in batch.groups:
            returns = [algos.discounted_return([s.reward for s in
                                                batch.steps[batch.segments[i][0]:
                                                            batch.segments[i][1]]], ppo.gamma)
                       for i in group]
            for i, a in zip(group, algos.loo_advantages(returns)):
                lo, hi, _ = batch.segments[i]
                advantages[lo:hi] = a
                targets[lo:hi] = returns[group.index(i)]
    else:
        for lo, hi, bootstrap in batch.segments:
            steps = batch.steps[lo:hi]
            adv = algos.compute_gae([s.reward for s in steps], [s.value_old for s in steps],
                                    [s.done for s in steps], bootstrap, ppo.gamma, ppo.gae_lambda)
            advantages[lo:hi] = adv.advantages
            targets[lo:hi] = adv.targets
    if ppo.normalize_advantages and batch.n_steps >= 2:
        advantages = algos.normalize_advantages(advantages)
    batch.advantages = advantages
    batch.targets = targets
    return algos.AdvantageSet(advantages=advantages, targets=targets)


def minibatch_loss(policy, batch, indices, config):
    """Composite loss over the given steps plus its parts for logging."""
    ppo = config.ppo
    algorithm = config.algorithm
    with_value = ppo.value_coef > 0 and algorithm != 'loop'
    ratios, mixed_new, mixed_old, kls, values = [], [], [], [], []
    for idx in indices:
        rec = batch.steps[idx]
        features = policy.encode_state(rec.obs)
        ev = policy.action_logprob(rec.obs, rec.emission.tokens, features=features)
        if algorithm == 'rl4vlm':
            mixed_new.append(algos.rl4vlm_mixed_logprob(
                *algos.span_logprobs(ev.logprobs, rec.emission.thought_span), ppo.thought_coef))
            mixed_old.append(algos.rl4vlm_mixed_logprob(
                *algos.span_logprobs(rec.old_logprobs, rec.emission.thought_span),
                ppo.thought_coef))
        else:
            ratios.append(algos.token_ratios(ev.logprobs, rec.old_logprobs))
        kls.append(algos.kl_penalty(ev.logdists, rec.old_dists, direction=ppo.kl_direction,
                                    new_probs=ev.probs))
        if with_value:
            values.append(policy.value(rec.obs, features=features,
                                       stop_grad=config.model.value_stop_grad))
    advantages = batch.advantages[indices]
    if algorithm == 'rl4vlm':
        policy_loss = algos.rl4vlm_policy_loss(mixed_new, mixed_old, advantages, ppo.clip_eps)
    else:
        policy_loss = algos.vldac_policy_loss(ratios, advantages, ppo.clip_eps)
    kl = algos.step_mean(kls)
    if with_value:
        v_loss = algos.value_loss(dc.stack(values), batch.targets[indices])
    else:
        v_loss = dc.Tensor(0.0)
    loss = algos.total_loss(policy_loss, kl, v_loss, ppo.value_coef, ppo.kl_coef)
    if not np.isfinite(loss.data):
        raise dc.NumericsError(f"non-finite loss {float(loss.data)} on steps {list(indices)}")
    return loss, (policy_loss.item(), v_loss.item(), kl.item())


class OptimizerClock:
    """Optimizer step counter driving the learning-rate schedule."""

    def __init__(self, config, steps=0):
        self.config = config
        self.total = config.optimizer_steps()
        self.steps = steps

    def lr(self):
        c = self.config
        return lr_schedule(min(self.steps, self.total), self.total, c.lr_init, c.lr_final,
                           c.schedule)


def ppo_update(policy, batch, config, optimizer, clock, update_index, rng):
    """PPO epochs over shuffled minibatches; one optimizer step per accumulation window."""
    frozen = pol.BACKBONE_PREFIXES if update_index < config.warmup_updates else ()
    n = batch.n_steps
    size = config.minibatch_size
    parts, norms, lrs = [], [], []
    for epoch in range(config.ppo_epochs):
        order = rng.permutation(n)
        minibatches = [order[i:i + size] for i in range(0, n, size)]
        for start in range(0, len(minibatches), config.grad_accum_steps):
            window = minibatches[start:start + config.grad_accum_steps]
            window_steps = sum(len(m) for m in window)
            policy.zero_grad()
            for m in window:
                loss, part = minibatch_loss(policy, batch, m, config)
                dc.backward(loss * (len(m) / window_steps))
                parts.append(part)
            lr = clock.lr()
            norms.append(optimizer.step(policy.params, lr, frozen=frozen))
            lrs.append(lr)
            clock.steps += 1
    policy.zero_grad()
    policy_loss, value_loss, kl = np.mean(parts, axis=0)
    return dict(policy_loss=float(policy_loss), value_loss=float(value_loss), kl=float(kl),
                grad_norm=float(np.mean(norms)), lr=float(lrs[-1]))


class ReplayBuffer:
    """FIFO transition store with uniform sampling."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.transitions = collections.deque(maxlen=capacity)

    def __len__(self):
        return len(self.transitions)

    def extend(self, records):
        self.transitions.extend(records)

    def sample(self, n, rng):
        idx = rng.integers(len(self.transitions), size=n)
        return [self.transitions[i] for i in idx]


def replay_batches(buffer, config, rng):
    """Training batches of the TD baseline for one update round."""
    for _ in range(config.td_steps_per_update):
        yield buffer.sample(config.td_batch_size, rng)


def td_update(policy, target, buffer, config, optimizer, clock, update_index, rng):
    """One-step TD critic with a Polyak target plus a TD-advantage actor; returns (target, stats)."""
    ppo = config.ppo
    frozen = pol.BACKBONE_PREFIXES if update_index < config.warmup_updates else ()
    parts, norms, lrs = [], [], []
    for transitions in replay_batches(buffer, config, rng):
        policy.zero_grad()
        head = {n: dc.Tensor(a) for n, a in target.items()}
        features = [policy.encode_state(t.obs) for t in transitions]
        values = [policy.value(t.obs, features=f, stop_grad=config.model.value_stop_grad)
                  for t, f in zip(transitions, features)]
        target_values = [0.0 if t.done else policy.value(t.next_obs, head=head).item()
                         for t in transitions]
        td_targets = algos.td0_update_targets([t.reward for t in transitions], target_values,
                                              [t.done for t in transitions], ppo.gamma)
        advantages = td_targets - np.array([v.item() for v in values])
        logprobs, kls = [], []
        for t, f in zip(transitions, features):
            ev = policy.action_logprob(t.obs, t.emission.tokens, features=f)
            logprobs.append(ev.logprobs)
            kls.append(algos.kl_penalty(ev.logdists, t.old_dists, direction=ppo.kl_direction,
                                        new_probs=ev.probs))
        actor = algos.td_actor_loss(logprobs, advantages)
        critic = algos.value_loss(dc.stack(values), td_targets)
        kl = algos.step_mean(kls)
        loss = algos.total_loss(actor, kl, critic, ppo.value_coef, ppo.kl_coef)
        if not np.isfinite(loss.data):
            raise dc.NumericsError(f"non-finite TD loss {float(loss.data)}")
        dc.backward(loss)
        lr = clock.lr()
        norms.append(optimizer.step(policy.params, lr, frozen=frozen))
        lrs.append(lr)
        clock.steps += 1
        target = algos.polyak_update(
            target, {n: t.data for n, t in policy.value_params().items()}, config.tau)
        parts.append((actor.item(), critic.item(), kl.item()))
    policy.zero_grad()
    actor_loss, critic_loss, kl = np.mean(parts, axis=0)
    return target, dict(policy_loss=float(actor_loss), value_loss=float(critic_loss),
                        kl=float(kl), grad_norm=float(np.mean(norms)), lr=float(lrs[-1]))


def evaluate(policy, spec, episodes, rng=None, dump_path=None):
    """Greedy decoding on evaluation seeds EVAL_SEED_BASE + i."""
    if episodes < 1:
        raise algos.ConfigError(f"evaluation needs at least one episode, got {episodes}")
    rng = np.random.default_rng(0) if rng is None else rng
    env = envs.make_env(spec, policy.vocab)
    successes = 0
    returns = []
    for i in range(episodes):
        obs = env.reset(EVAL_SEED_BASE + i)
        total = 0.0
        records = []
        done = False
        while not done:
            emission = policy.sample_action(obs, rng, greedy=True)
            outcome = env.step(env.parse_action(emission))
            records.append({'t': env.t, 'obs': obs, 'reward': outcome.reward,
                            'done': outcome.done,
                            'tokens': policy.vocab.decode(emission.tokens)})
            total += outcome.reward
            obs, done = outcome.next_obs, outcome.done
        successes += bool(outcome.info['success'])
        returns.append(total)
        if dump_path:
            envs.dump_trajectory(records, dump_path)
    return EvalResult(success_rate=successes / episodes, mean_return=float(np.mean(returns)),
                      episodes=episodes)


class Trainer:
    """One (config, seed) run writing metrics.jsonl and checkpoint.npz into output_dir."""

    def __init__(self, config, seed, output_dir):
        self.config = config.validate()
        self.seed = int(seed)
        self.output_dir = output_dir
        self.rng = np.random.default_rng(self.seed)
        spec = config.env
        vocab = envs.build_vocabulary(spec)
        obs_shape = envs.make_env(spec, vocab).obs_shape
        m = config.model
        self.policy = pol.TokenPolicy(vocab, obs_shape, m.feature_dim, m.token_hidden,
                                      m.value_hidden, m.max_tokens, seed=self.seed,
                                      token_prior=envs.format_prior(spec, vocab, m.format_prior))
        self.optimizer = Adam(self.policy.params, config.adam_beta1, config.adam_beta2,
                              config.adam_eps, config.max_grad_norm)
        self.clock = OptimizerClock(config)
        self.update = 0
        self.env_steps = 0
        self.target = None
        self.buffer = None
        if config.algorithm == 'td_baseline':
            self.target = {n: t.data.copy() for n, t in self.policy.value_params().items()}
            self.buffer = ReplayBuffer(config.replay_size)

    @property
    def metrics_path(self):
        return os.path.join(self.output_dir, 'metrics.jsonl')

    @property
    def checkpoint_path(self):
        return os.path.join(self.output_dir, 'checkpoint.npz')

    @property
    def replay_path(self):
        return os.path.join(self.output_dir, 'replay.pkl')

    def save(self):
        c = self.config
        extras = {
            'config_text': np.array(c.to_text()),
            'config_hash': np.array(c.config_hash()),
            'rng_state': np.array(json.dumps(self.rng.bit_generator.state)),
            'counters': np.array([self.update, self.env_steps, self.clock.steps], dtype='<i8'),
        }
        extras.update(self.optimizer.state_arrays())
        if self.target is not None:
            extras.update({f"target__{n}": a.astype('<f8') for n, a in self.target.items()})
            with open(f"{self.replay_path}.tmp", 'wb') as f:
                pickle.dump(list(self.buffer.transitions), f)
            os.replace(f"{self.replay_path}.tmp", self.replay_path)
        pol.save_checkpoint(self.checkpoint_path, self.policy, extras)

    def load(self):
        policy, arrays = pol.load_checkpoint(self.checkpoint_path)
        if str(arrays['config_hash']) != self.config.config_hash():
            raise algos.ConfigError(f"{self.checkpoint_path} was written by a different config")
        self.policy = policy
        self.optimizer.load_state(arrays)
        self.rng.bit_generator.state = json.loads(str(arrays['rng_state']))
        self.update, self.env_steps, self.clock.steps = (int(n) for n in arrays['counters'])
        if self.target is not None:
            self.target = {n: arrays[f"target__{n}"].astype(np.float64) for n in self.target}
            with open(self.replay_path, 'rb') as f:
                self.buffer.extend(pickle.load(f))

    def _dump_numerics(self):
        np.savez(os.path.join(self.output_dir, 'numerics_dump.npz'),
                 **{f"param__{n}": a for n, a in self.policy.param_arrays().items()})

    def _truncate_metrics(self):
        """Drop metric lines written after the checkpoint being resumed."""
        if not os.path.exists(self.metrics_path):
            return
        with open(self.metrics_path) as f:
            lines = [l for l in f if l.strip() and json.loads(l)['update'] < self.update]
        with open(self.metrics_path, 'w') as f:
            f.writelines(lines)

    def run_update(self):
        c = self.config
        started = time.time()
        snapshot = self.policy.snapshot()
        if c.algorithm == 'loop':
            batch = collect_groups(snapshot, c.env, c.rollout_size, self.rng, c.ppo.loo_k)
        else:
            batch = collect_rollouts(snapshot, c.env, c.rollout_size, self.rng,
                                     c.rollout_workers)
        self.env_steps += batch.env_steps
        try:
            if c.algorithm == 'td_baseline':
                self.buffer.extend(batch.steps)
                self.target, stats = td_update(self.policy, self.target, self.buffer, c,
                                               self.optimizer, self.clock, self.update, self.rng)
            else:
                compute_batch_advantages(batch, c)
                stats = ppo_update(self.policy, batch, c, self.optimizer, self.clock,
                                   self.update, self.rng)
        except (FloatingPointError, dc.NumericsError) as e:
            self._dump_numerics()
            raise dc.NumericsError(f"update {self.update}: {e}") from e
        last = self.update + 1 == c.n_updates
        eval_sr = eval_return = None
        if (self.update + 1) % c.eval_interval == 0 or last:
            result = evaluate(self.policy, c.env, c.eval_episodes)
            eval_sr, eval_return = result.success_rate, result.mean_return
        record = MetricsRecord(
            update=self.update, env_steps=self.env_steps,
            train_return=float(np.mean(batch.episode_returns)) if batch.episode_returns else 0.0,
            train_success=(float(np.mean(batch.episode_successes))
                           if batch.episode_successes else 0.0),
            eval_success_rate=eval_sr, eval_return=eval_return,
            wall_time=time.time() - started if c.record_wall_time else None, **stats)
        self.update += 1
        return record

    def train(self, resume=False):
        """Run to total_env_steps; with resume, continue from the last checkpoint."""
        os.makedirs(self.output_dir, exist_ok=True)
        c = self.config
        if resume and os.path.exists(self.checkpoint_path):
            self.load()
            self._truncate_metrics()
            log.info("resumed %s at update %d", self.output_dir, self.update)
        elif os.path.exists(self.metrics_path):
            os.remove(self.metrics_path)
        records = []
        while self.update < c.n_updates:
            record = self.run_update()
            with open(self.metrics_path, 'a') as f:
                f.write(record.to_json() + '\n')
            records.append(record)
            log.info("update %d env_steps %d policy %.4f value %.4f kl %.5f lr %.3g eval_sr %s",
                     record.update, record.env_steps, record.policy_loss, record.value_loss,
                     record.kl, record.lr, record.eval_success_rate)
            if self.update % c.checkpoint_interval == 0 or self.update == c.n_updates:
                self.save()
        return records


def _random_dists(rng, n, v, scale=1.0):
    logits = rng.normal(0.0, scale, size=(n, v))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _token_instance(rng, max_steps=3, max_tokens=4, vocab=5):
    """Random logits-as-parameters instance: per step a [n, V] logit Tensor and sampled tokens."""
    steps = []
    for _ in range(rng.integers(1, max_steps + 1)):
        n = int(rng.integers(1, max_tokens + 1))
        logits = dc.Tensor(rng.normal(0.0, 1.0, size=(n, vocab)), requires_grad=True)
        tokens = rng.integers(vocab, size=n)
        steps.append((logits, tokens, _random_dists(rng, n, vocab)))
    return steps


def _token_logprobs(logits, tokens):
    logdist = dc.log(dc.softmax_rows(logits))
    return logdist, dc.gather_index(logdist, (np.arange(len(tokens)), tokens))


def _gradcheck_losses(rng):
    """One closure per loss over a fresh random instance: (name, f, params)."""
    steps = _token_instance(rng)
    params = [s[0] for s in steps]
    n = len(steps)
    advantages = rng.normal(size=n)
    old_logprobs = [_token_logprobs(dc.Tensor(l.data), t)[1].data + rng.normal(0, 0.2, len(t))
                    for l, t, _ in steps]
    eps = 0.2

    def vldac():
        ratios = [algos.token_ratios(_token_logprobs(l, t)[1], old)
                  for (l, t, _), old in zip(steps, old_logprobs)]
        return algos.vldac_policy_loss(ratios, advantages, eps)

    def kl(direction):
        return lambda: algos.step_mean([algos.kl_penalty(_token_logprobs(l, t)[0], d,
                                                         direction=direction)
                                        for l, t, d in steps])

    values = dc.Tensor(rng.normal(size=n), requires_grad=True)
    targets = rng.normal(size=n)

    def value():
        return algos.value_loss(values, targets)

    def composite():
        return algos.total_loss(vldac(), kl('forward')(), value(), 0.15, 0.05)

    thought_spans = [range(1, 1 + int(rng.integers(0, len(t) + 1))) for _, t, _ in steps]
    old_mixed = rng.normal(size=n)

    def rl4vlm():
        mixed = [algos.rl4vlm_mixed_logprob(
            *algos.span_logprobs(_token_logprobs(l, t)[1], span), 0.35)
            for (l, t, _), span in zip(steps, thought_spans)]
        return algos.rl4vlm_policy_loss(mixed, old_mixed, advantages, eps)

    returns = rng.integers(0, 2, size=max(n, 2)).astype(float)
    loo = algos.loo_advantages(returns)[:n]

    def loop():
        ratios = [algos.token_ratios(_token_logprobs(l, t)[1], old)
                  for (l, t, _), old in zip(steps, old_logprobs)]
        return algos.vldac_policy_loss(ratios, loo, eps)

    td_targets = algos.td0_update_targets(rng.normal(size=n), rng.normal(size=n),
                                          rng.random(n) < 0.3, 0.99)

    td_advantages = td_targets - values.data.copy()

    def td():
        actor = algos.td_actor_loss([_token_logprobs(l, t)[1] for l, t, _ in steps],
                                    td_advantages)
        return actor + algos.value_loss(values, td_targets) * 0.15

    return [('vldac_policy', vldac, params), ('value', value, [values]),
            ('kl_forward', kl('forward'), params), ('kl_reverse', kl('reverse'), params),
            ('total', composite, params + [values]), ('rl4vlm_policy', rl4vlm, params),
            ('loop_policy', loop, params), ('td', td, params + [values])]


def _network_instance(rng, seed):
    """VL-DAC composite loss through a tiny TokenPolicy on a HallwayNav observation."""
    spec = envs.EnvSpec(kind='HallwayNav', width=4, frame_stack=1)
    env = envs.make_env(spec)
    obs = env.reset(int(rng.integers(SEED_SPACE)))
    policy = pol.TokenPolicy(env.vocab, env.obs_shape, feature_dim=3, token_hidden=3,
                             value_hidden=2, max_tokens=5, seed=seed,
                             token_prior=envs.format_prior(spec, env.vocab, 1.0))
    # move the zero-initialized heads off zero so every path carries gradient
    for name in ('tok.out_w', 'tok.out_b', 'value.out_w', 'value.out_b'):
        policy.params[name].data += rng.normal(0.0, 0.5, size=policy.params[name].data.shape)
    emission = policy.snapshot().sample_action(obs, rng)
    advantage = np.array([rng.normal()])
    target = np.array([rng.normal()])

    def f():
        features = policy.encode_state(obs)
        ev = policy.action_logprob(obs, emission.tokens, features=features)
        ratios = [algos.token_ratios(ev.logprobs, emission.logprobs + 0.1)]
        v = policy.value(obs, features=features, stop_grad=False)
        return algos.total_loss(algos.vldac_policy_loss(ratios, advantage, 0.2),
                                algos.kl_penalty(ev.logdists, emission.dists),
                                algos.value_loss(dc.stack([v]), target), 0.15, 0.05)
    return f, list(policy.params.values())


def run_gradcheck(trials=100, network_trials=3, seed=0, tol=1e-4):
    """Finite-difference check of every loss; one row per loss with the worst error seen."""
    rng = np.random.default_rng(seed)
    worst = collections.OrderedDict()
    for _ in range(trials):
        for name, f, params in _gradcheck_losses(rng):
            report = dc.finite_diff_check(f, params, tol=tol)
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    for i in range(network_trials):
        f, params = _network_instance(rng, seed + i)
        report = dc.finite_diff_check(f, params, tol=tol)
        worst['network'] = max(worst.get('network', 0.0), report.max_rel_error)
    df = pd.DataFrame({'loss': list(worst), 'max_rel_error': list(worst.values())})
    df['trials'] = [network_trials if n == 'network' else trials for n in df['loss']]
    df['passed'] = df['max_rel_error'] <= tol
    return df
