import json
import math
import os

import numpy as np
import pytest

import algos
import diffcore as dc
import envs
import policy as pol
import trainer


def tiny_config(**train):
    text = """
[train]
rollout_size = 12
total_env_steps = 36
minibatch_size = 2
grad_accum_steps = 3
eval_episodes = 2
eval_interval = 1
checkpoint_interval = 1
lr_init = 1e-3
lr_final = 1e-4

[env]
kind = HallwayNav
width = 4
horizon = 6
frame_stack = 2

[model]
feature_dim = 6
token_hidden = 5
value_hidden = 4
max_tokens = 5
"""
    return trainer.TrainConfig.from_text(text, [f"train.{k}={v}" for k, v in train.items()])

def tiny_policy(config, seed=0, randomize=True):
    env = envs.make_env(config.env)
    m = config.model
    policy = pol.TokenPolicy(env.vocab, env.obs_shape, m.feature_dim, m.token_hidden,
                             m.value_hidden, m.max_tokens, seed=seed)
    if randomize:
        rng = np.random.default_rng(seed + 100)
        for t in policy.params.values():
            t.data += rng.normal(0.0, 0.3, size=t.data.shape)
    return policy


def test_lr_schedule():
    assert trainer.lr_schedule(0, 100, 5e-5, 1e-7) == pytest.approx(5e-5)
    assert trainer.lr_schedule(100, 100, 5e-5, 1e-7) == pytest.approx(1e-7)
    assert trainer.lr_schedule(50, 100, 5e-5, 1e-7) == pytest.approx(2.505e-5)
    lrs = [trainer.lr_schedule(t, 100, 5e-5, 1e-7) for t in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert trainer.lr_schedule(50, 100, 1.0, 0.5, 'linear') == pytest.approx(0.75)
    assert trainer.lr_schedule(50, 100, 1.0, 0.5, 'constant') == 1.0
    with pytest.raises(ValueError):
        trainer.lr_schedule(101, 100, 5e-5, 1e-7)

def test_config_defaults_resolved():
    config = trainer.TrainConfig().validate()
    text = config.to_text()
    assert 'lr_init = 5e-05' in text
    assert 'grad_accum_steps = 1\n' in text
    assert 'format_prior = 5.0' in text
    assert 'kl_coef = 0.05' in text and 'value_coef = 0.15' in text
    again = trainer.TrainConfig.from_text(text)
    assert again.to_text() == text
    assert again.config_hash() == config.config_hash()

def test_config_errors():
    with pytest.raises(algos.ConfigError, match='clip_eps'):
        trainer.TrainConfig.from_text("[ppo]\nclip_eps = 1.5\n")
    with pytest.raises(algos.ConfigError, match='train.rollout_size'):
        trainer.TrainConfig.from_text("[train]\nrollout_sise = 4\n")
    with pytest.raises(algos.ConfigError):
        trainer.TrainConfig.from_text("[train]\nlr_init = 1e-7\nlr_final = 1e-5\n")
    with pytest.raises(algos.ConfigError):
        trainer.TrainConfig.from_text("[env]\nkind = Maze\n")
    with pytest.raises(algos.ConfigError):
        trainer.TrainConfig.from_text("[train]\nppo_epochs = two\n")
    with pytest.raises(algos.ConfigError):
        trainer.TrainConfig.from_text("", ["ppo_epochs=2"])
    with pytest.raises(algos.ConfigError, match='format_prior'):
        trainer.TrainConfig.from_text("[model]\nformat_prior = -1\n")
    with pytest.raises(algos.ConfigError, match='LOOP group'):
        tiny_config(algorithm='loop')

def test_overrides():
    config = trainer.TrainConfig.from_text("", ["train.seeds=3, 4", "model.value_stop_grad=no",
                                                "env.kind=RoomsNav"])
    assert config.seeds == [3, 4]
    assert config.model.value_stop_grad is False
    assert config.env.horizon == 40

def test_collect_rollouts_exact_and_deterministic():
    config = tiny_config()
    snap = tiny_policy(config).snapshot()
    a = trainer.collect_rollouts(snap, config.env, 12, np.random.default_rng(0))
    b = trainer.collect_rollouts(snap, config.env, 12, np.random.default_rng(0))
    assert a.n_steps == 12
    assert [s.emission.tokens for s in a.steps] == [s.emission.tokens for s in b.steps]
    assert [s.reward for s in a.steps] == [s.reward for s in b.steps]
    assert len(a.segments) >= math.ceil(12 / 6)
    for lo, hi, bootstrap in a.segments:
        if a.steps[hi - 1].done:
            assert bootstrap == 0.0
        else:
            assert hi == a.n_steps

def test_collect_rollouts_workers():
    config = tiny_config()
    snap = tiny_policy(config).snapshot()
    one = trainer.collect_rollouts(snap, config.env, 13, np.random.default_rng(1), workers=3)
    two = trainer.collect_rollouts(snap, config.env, 13, np.random.default_rng(1), workers=3)
    assert one.n_steps == 13
    assert [s.emission.tokens for s in one.steps] == [s.emission.tokens for s in two.steps]

def test_recorded_logprobs_reverify():
    config = tiny_config()
    policy = tiny_policy(config)
    snap = policy.snapshot()
    batch = trainer.collect_rollouts(snap, config.env, 12, np.random.default_rng(2))
    for rec in batch.steps:
        ev = snap.action_logprob(rec.obs, rec.emission.tokens)
        assert np.array_equal(ev.logprobs.data, rec.old_logprobs)
        # live policy right after the snapshot: every ratio is 1
        live = policy.action_logprob(rec.obs, rec.emission.tokens)
        assert np.abs(np.exp(live.logprobs.data - rec.old_logprobs) - 1.0).max() <= 1e-12

def test_collect_groups_share_seed():
    config = tiny_config(algorithm='loop', rollout_size=24)
    snap = tiny_policy(config).snapshot()
    batch = trainer.collect_groups(snap, config.env, 24, np.random.default_rng(3), 4)
    assert batch.env_steps == 24
    assert batch.groups
    for group in batch.groups:
        assert len(group) == 4
        seeds = {batch.steps[batch.segments[i][0]].episode_seed for i in group}
        assert len(seeds) == 1
        firsts = [batch.steps[batch.segments[i][0]].obs.digest() for i in group]
        assert len(set(firsts)) == 1

def test_loop_advantages_per_episode():
    config = tiny_config(algorithm='loop', rollout_size=24)
    snap = tiny_policy(config).snapshot()
    batch = trainer.collect_groups(snap, config.env, 24, np.random.default_rng(3), 4)
    config.ppo.normalize_advantages = False
    trainer.compute_batch_advantages(batch, config)
    for group in batch.groups:
        firsts = [batch.advantages[batch.segments[i][0]] for i in group]
        assert abs(sum(firsts)) < 1e-12
        for i in group:
            lo, hi, _ = batch.segments[i]
            assert (batch.advantages[lo:hi] == batch.advantages[lo]).all()

def test_collect_groups_exact_budget():
    config = tiny_config(algorithm='loop', rollout_size=30)
    snap = tiny_policy(config).snapshot()
    for seed in range(5):
        batch = trainer.collect_groups(snap, config.env, 30, np.random.default_rng(seed), 4)
        assert batch.env_steps == 30
        assert batch.n_steps + batch.dropped == 30
        assert len(batch.segments) == 4 * len(batch.groups) == len(batch.episode_returns)
        assert batch.segments[-1][1] == batch.n_steps
        assert all(batch.steps[hi - 1].done for _, hi, _ in batch.segments)

def test_loop_env_steps_match_rollout_grid(tmp_path):
    config = tiny_config(algorithm='loop', rollout_size=24, total_env_steps=48)
    records = trainer.Trainer(config, 0, str(tmp_path)).train()
    assert [r.env_steps for r in records] == [24, 48]

def run_one_update(config, policy, update_index, seed=0):
    rng = np.random.default_rng(seed)
    batch = trainer.collect_rollouts(policy.snapshot(), config.env, config.rollout_size, rng)
    trainer.compute_batch_advantages(batch, config)
    optimizer = trainer.Adam(policy.params, max_grad_norm=config.max_grad_norm)
    clock = trainer.OptimizerClock(config)
    stats = trainer.ppo_update(policy, batch, config, optimizer, clock, update_index, rng)
    return batch, stats

def test_warmup_freezes_backbone():
    config = tiny_config()
    policy = tiny_policy(config)
    before = {n: a.copy() for n, a in policy.param_arrays().items()}
    run_one_update(config, policy, update_index=0)
    for name, t in policy.backbone_params().items():
        assert np.array_equal(t.data, before[name]), name
    assert any(not np.array_equal(t.data, before[n]) for n, t in policy.value_params().items())

def test_after_warmup_backbone_moves():
    config = tiny_config()
    policy = tiny_policy(config)
    before = {n: a.copy() for n, a in policy.param_arrays().items()}
    run_one_update(config, policy, update_index=config.warmup_updates)
    assert any(not np.array_equal(t.data, before[n])
               for n, t in policy.backbone_params().items())

def test_zero_objective_changes_nothing():
    config = tiny_config(warmup_updates=0)
    config.ppo.value_coef = 0.0
    config.ppo.kl_coef = 0.0
    config.ppo.normalize_advantages = False
    policy = tiny_policy(config)
    before = {n: a.copy() for n, a in policy.param_arrays().items()}
    rng = np.random.default_rng(0)
    batch = trainer.collect_rollouts(policy.snapshot(), config.env, 12, rng)
    batch.advantages = np.zeros(batch.n_steps)
    batch.targets = np.zeros(batch.n_steps)
    trainer.ppo_update(policy, batch, config, trainer.Adam(policy.params),
                       trainer.OptimizerClock(config), 5, rng)
    for name, a in policy.param_arrays().items():
        assert np.array_equal(a, before[name]), name

def test_value_head_fits_during_warmup():
    config = tiny_config(ppo_epochs=4, warmup_updates=10, grad_accum_steps=100,
                         schedule='constant')
    lower = 0
    for seed in range(20):
        policy = tiny_policy(config, seed=seed)
        rng = np.random.default_rng(seed)
        batch = trainer.collect_rollouts(policy.snapshot(), config.env, 12, rng)
        trainer.compute_batch_advantages(batch, config)
        idx = np.arange(batch.n_steps)
        first = trainer.minibatch_loss(policy, batch, idx, config)[1][1]
        policy.zero_grad()
        trainer.ppo_update(policy, batch, config, trainer.Adam(policy.params),
                           trainer.OptimizerClock(config), 0, rng)
        last = trainer.minibatch_loss(policy, batch, idx, config)[1][1]
        policy.zero_grad()
        lower += last < first
    assert lower >= 18

def test_accumulation_equivalence():
    config = tiny_config(warmup_updates=0)
    base = tiny_policy(config)
    rng = np.random.default_rng(9)
    batch = trainer.collect_rollouts(base.snapshot(), config.env, 12, rng)
    trainer.compute_batch_advantages(batch, config)
    chunks = [np.array([0, 1]), np.array([2, 3, 4]), np.array([5])]

    def step(parts):
        policy = pol.TokenPolicy(base.vocab, base.obs_shape, 6, 5, 4, 5,
                                 params={n: a.copy() for n, a in base.param_arrays().items()})
        total = sum(len(p) for p in parts)
        for p in parts:
            loss = trainer.minibatch_loss(policy, batch, p, config)[0]
            dc.backward(loss * (len(p) / total))
        trainer.Adam(policy.params).step(policy.params, 1e-3)
        return policy.param_arrays()

    accumulated = step(chunks)
    single = step([np.concatenate(chunks)])
    for name in accumulated:
        assert np.abs(accumulated[name] - single[name]).max() <= 1e-10, name

def test_adam_frozen_and_clipped():
    params = {'enc.w': dc.Tensor([1.0, 1.0], requires_grad=True),
              'value.w': dc.Tensor([1.0], requires_grad=True)}
    for t in params.values():
        t.grad = np.full(t.data.shape, 10.0)
    adam = trainer.Adam(params, max_grad_norm=1.0)
    norm = adam.step(params, 0.1, frozen=('enc.',))
    assert norm == pytest.approx(10.0)
    assert list(params['enc.w'].data) == [1.0, 1.0]
    assert adam.t == {'enc.w': 0, 'value.w': 1}
    assert params['value.w'].data[0] == pytest.approx(0.9)

def test_replay_buffer_fifo():
    config = tiny_config(algorithm='td_baseline', replay_capacity=10000, rollout_size=256)
    buffer = trainer.ReplayBuffer(config.replay_size)
    for update in range(40):
        buffer.extend(range(update * 256, (update + 1) * 256))
    assert len(buffer) == 10000
    assert buffer.transitions[0] == 40 * 256 - 10000

def test_replay_on_policy_is_latest_rollout():
    config = tiny_config(algorithm='td_baseline', on_policy='true')
    buffer = trainer.ReplayBuffer(config.replay_size)
    buffer.extend(range(12))
    buffer.extend(range(100, 112))
    sampled = [t for batch in trainer.replay_batches(buffer, config, np.random.default_rng(0))
               for t in batch]
    assert all(100 <= t < 112 for t in sampled)

def test_td_update_polyak_full():
    config = tiny_config(algorithm='td_baseline', tau=1.0, td_steps_per_update=2,
                         td_batch_size=4)
    policy = tiny_policy(config)
    rng = np.random.default_rng(0)
    batch = trainer.collect_rollouts(policy.snapshot(), config.env, 12, rng)
    buffer = trainer.ReplayBuffer(config.replay_size)
    buffer.extend(batch.steps)
    target = {n: t.data.copy() * 0.0 for n, t in policy.value_params().items()}
    target, stats = trainer.td_update(policy, target, buffer, config, trainer.Adam(policy.params),
                                      trainer.OptimizerClock(config), 5, rng)
    for name, t in policy.value_params().items():
        assert np.array_equal(target[name], t.data)
    assert np.isfinite(stats['value_loss'])

class HallwayOracle:
    """Turns right until facing east, then walks forward."""

    def __init__(self, vocab):
        self.vocab = vocab

    def sample_action(self, obs, rng, greedy=False):
        agent = obs.frames[-1, envs.NavEnv.AGENT:envs.NavEnv.AGENT + 4].sum(axis=(1, 2))
        command = 'forward' if agent[0] else 'right'
        tokens = [self.vocab.bos, self.vocab.sep] + self.vocab.encode([command]) + [self.vocab.eos]
        return pol.ActionEmission.from_tokens(tokens, np.zeros(3), np.zeros((3, self.vocab.size)),
                                              self.vocab)

def test_evaluate_oracle():
    spec = envs.EnvSpec(kind='HallwayNav')
    result = trainer.evaluate(HallwayOracle(envs.build_vocabulary(spec)), spec, 10)
    assert result.success_rate == 1.0
    assert result.mean_return == 1.0

def test_random_agent_rarely_succeeds():
    spec = envs.EnvSpec(kind='HallwayNav')
    rng = np.random.default_rng(0)
    successes = 0
    for i in range(50):
        env = envs.make_env(spec)
        env.reset(trainer.EVAL_SEED_BASE + i)
        while not env.done:
            out = env.step(envs.EnvAction(['turn_left', 'turn_right', 'forward'][rng.integers(3)]))
        successes += out.info['success']
    assert successes / 50 < 0.25

def test_evaluate_deterministic(tmp_path):
    config = tiny_config()
    policy = tiny_policy(config)
    dump = str(tmp_path / 'eval.jsonl')
    a = trainer.evaluate(policy, config.env, 3, dump_path=dump)
    b = trainer.evaluate(policy, config.env, 3)
    assert a == b
    with open(dump) as f:
        lines = [json.loads(l) for l in f]
    assert sum(l['done'] for l in lines) == 3

def read(path):
    with open(path) as f:
        return f.read()

def test_train_deterministic(tmp_path):
    config = tiny_config()
    trainer.Trainer(config, 0, str(tmp_path / 'a')).train()
    trainer.Trainer(config, 0, str(tmp_path / 'b')).train()
    a = read(tmp_path / 'a' / 'metrics.jsonl')
    assert a == read(tmp_path / 'b' / 'metrics.jsonl')
    records = [json.loads(l) for l in a.splitlines()]
    assert [r['update'] for r in records] == [0, 1, 2]
    assert all(0.0 <= r['eval_success_rate'] <= 1.0 for r in records)
    assert 'wall_time' not in records[0]

class Interrupted(Exception):
    pass

def _stop_after(fn, n):
    calls = []

    def wrapped():
        if len(calls) == n:
            raise Interrupted
        calls.append(1)
        return fn()
    return wrapped

def test_resume_matches_uninterrupted(tmp_path):
    config = tiny_config(algorithm='td_baseline', td_steps_per_update=2, td_batch_size=4)
    trainer.Trainer(config, 1, str(tmp_path / 'full')).train()
    partial = trainer.Trainer(config, 1, str(tmp_path / 'resumed'))
    partial.run_update = _stop_after(partial.run_update, 2)
    with pytest.raises(Interrupted):
        partial.train()
    assert len(read(tmp_path / 'resumed' / 'metrics.jsonl').splitlines()) == 2
    trainer.Trainer(config, 1, str(tmp_path / 'resumed')).train(resume=True)
    assert read(tmp_path / 'full' / 'metrics.jsonl') == read(tmp_path / 'resumed' /
                                                              'metrics.jsonl')

def test_resume_rejects_other_config(tmp_path):
    trainer.Trainer(tiny_config(), 0, str(tmp_path)).train()
    with pytest.raises(algos.ConfigError):
        trainer.Trainer(tiny_config(ppo_epochs=3), 0, str(tmp_path)).train(resume=True)

def test_numerics_error_dumps_state(tmp_path):
    config = tiny_config(warmup_updates=0)
    run = trainer.Trainer(config, 0, str(tmp_path))
    run.policy.params['tok.out_b'].data[:] = np.nan
    with pytest.raises(dc.NumericsError):
        run.train()
    assert os.path.exists(tmp_path / 'numerics_dump.npz')

def test_gradcheck_suite():
    df = trainer.run_gradcheck(trials=5, network_trials=1)
    assert set(df['loss']) >= {'vldac_policy', 'value', 'kl_forward', 'kl_reverse', 'total',
                               'rl4vlm_policy', 'loop_policy', 'td', 'network'}
    assert df['passed'].all(), df

SHORT_HALLWAY = """
[train]
rollout_size = 48
total_env_steps = 1152
minibatch_size = 4
grad_accum_steps = 1
ppo_epochs = 4
warmup_updates = 1
lr_init = 1e-2
lr_final = 1e-3
eval_episodes = 20
eval_interval = 4
checkpoint_interval = 24

[env]
kind = HallwayNav
width = 3
horizon = 6
frame_stack = 1

[model]
feature_dim = 16
token_hidden = 12
value_hidden = 8
max_tokens = 5
"""

def test_vldac_improves_on_short_hallway(tmp_path):
    config = trainer.TrainConfig.from_text(SHORT_HALLWAY)
    improved = 0
    for seed in range(3):
        run = trainer.Trainer(config, seed, str(tmp_path / f"seed_{seed}"))
        before = trainer.evaluate(run.policy, config.env, config.eval_episodes).success_rate
        records = run.train()
        evals = [r.eval_success_rate for r in records if r.eval_success_rate is not None]
        assert len(evals) == 6
        improved += evals[-1] >= before + 0.2
    assert improved >= 2

@pytest.mark.skip(reason='minutes-long learning run; use expcli sweep with configs/hallway_vldac.ini')
def test_vldac_learns_hallway(tmp_path):
    config = trainer.TrainConfig.from_text(read('configs/hallway_vldac.ini'), ['train.seeds=0'])
    records = trainer.Trainer(config, 0, str(tmp_path)).train()
    evals = [r.eval_success_rate for r in records if r.eval_success_rate is not None]
    assert np.mean(evals[-5:]) >= 0.9
