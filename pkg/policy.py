#!/usr/bin/python
# vim: set fileencoding=utf-8 :

"""The agent: a shared backbone over (frames, context tokens), an autoregressive token head and a
   step-level value head reading gradient-blocked backbone features."""

import dataclasses
import hashlib
import os

import numpy as np

import diffcore as dc
import token_names


MASKED_LOGIT = -1e9
BACKBONE_PREFIXES = ('enc.', 'tok.')
VALUE_PREFIX = 'value.'


class PolicyError(Exception):
    pass


class ObservationError(PolicyError):
    pass


class VocabError(PolicyError):
    pass


class SequenceError(PolicyError):
    pass


class Vocabulary:
    """Ordered token strings with the four structural ids looked up by name."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise VocabError("duplicate token strings in vocabulary")
        try:
            self.pad = self.ids['<pad>']
            self.bos = self.ids['<bos>']
            self.eos = self.ids['<eos>']
            self.sep = self.ids['<sep>']
        except KeyError as e:
            raise VocabError(f"vocabulary lacks special token {e}")

    @property
    def size(self):
        return len(self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, names):
        try:
            return [self.ids[n] for n in names]
        except KeyError as e:
            raise VocabError(f"unknown token {e}")

    def decode(self, ids):
        for i in ids:
            if not 0 <= i < self.size:
                raise VocabError(f"token id {i} outside vocabulary of size {self.size}")
        return [self.tokens[i] for i in ids]


@dataclasses.dataclass(frozen=True, eq=False)
class Observation:
    frames: np.ndarray         # [L, C, H, W], one-hot over C in every cell
    context_tokens: tuple

    def validate(self, frame_stack=None):
        if self.frames.ndim != 4:
            raise ObservationError(f"frames must be [L, C, H, W], got {list(self.frames.shape)}")
        if frame_stack is not None and self.frames.shape[0] != frame_stack:
            raise ObservationError(f"frame stack {self.frames.shape[0]} != {frame_stack}")
        if not np.array_equal(self.frames.sum(axis=1), np.ones_like(self.frames[:, 0])):
            raise ObservationError("a cell is not one-hot over its channels")

    def digest(self):
        h = hashlib.sha1(np.ascontiguousarray(self.frames, dtype=np.float64).tobytes())
        h.update(np.asarray(self.context_tokens, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def emission_spans(tokens, sep):
    """Thought span (before SEP) and action span (after SEP) over positions of tokens[1:]."""
    n = len(tokens)
    for i in range(1, n):
        if tokens[i] == sep:
            return range(1, i), range(i + 1, n)
    return range(1, n), range(n, n)


@dataclasses.dataclass
class ActionEmission:
    tokens: list               # BOS first
    logprobs: np.ndarray       # one per generated token
    dists: np.ndarray          # [n_generated, V] sampling distributions
    truncated: bool
    thought_span: range
    action_span: range

    @classmethod
    def from_tokens(cls, tokens, logprobs, dists, vocab):
        thought, action = emission_spans(tokens, vocab.sep)
        return cls(tokens=list(tokens), logprobs=np.asarray(logprobs, dtype=np.float64),
                   dists=np.asarray(dists, dtype=np.float64).reshape(len(logprobs), vocab.size),
                   truncated=tokens[-1] != vocab.eos, thought_span=thought, action_span=action)

    def action_tokens(self, vocab):
        """Tokens of the action span without the terminating EOS."""
        span = [self.tokens[i] for i in self.action_span]
        if span and span[-1] == vocab.eos:
            span = span[:-1]
        return span

    @property
    def has_sep(self):
        return self.thought_span.stop < len(self.tokens)


@dataclasses.dataclass
class TokenEvaluation:
    """Teacher-forced evaluation of one emission."""
    logprobs: dc.Tensor        # [n]
    probs: dc.Tensor           # [n, V]
    logdists: dc.Tensor        # [n, V]


def _draw(probs, rng):
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side='right')), len(probs) - 1)


def init_params(vocab_size, obs_shape, feature_dim, token_hidden, value_hidden, max_tokens,
                seed, token_prior=None):
    """Scaled-normal weights, zero biases; token and value output layers start at zero.

       token_prior seeds tok.prior, the [V, V] logit offsets indexed by the previous token.
    """
    rng = np.random.default_rng(seed)
    n_in = int(np.prod(obs_shape))

    def dense(rows, cols):
        return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

    D, Ht, Hv, V = feature_dim, token_hidden, value_hidden, vocab_size
    if token_prior is None:
        token_prior = np.zeros((V, V))
    token_prior = np.asarray(token_prior, dtype=np.float64)
    if token_prior.shape != (V, V):
        raise PolicyError(f"token prior must be {V} x {V}, got {list(token_prior.shape)}")
    return {
        'enc.frames_w': dense(D, n_in),
        'enc.frames_b': np.zeros(D),
        'enc.context_emb': rng.normal(0.0, 1.0, size=(V, D)),
        'enc.mix_frames_w': dense(D, D),
        'enc.mix_context_w': dense(D, D),
        'enc.mix_b': np.zeros(D),
        'tok.emb': rng.normal(0.0, 1.0, size=(V, Ht)),
        'tok.pos': rng.normal(0.0, 1.0, size=(max_tokens, Ht)),
        'tok.cond_w': dense(Ht, D),
        'tok.rec_w': dense(Ht, Ht),
        'tok.rec_b': np.zeros(Ht),
        'tok.out_w': np.zeros((V, Ht)),
        'tok.out_b': np.zeros(V),
        'tok.prior': token_prior.copy(),
        'value.hidden_w': dense(Hv, D),
        'value.hidden_b': np.zeros(Hv),
        'value.out_w': np.zeros(Hv),
        'value.out_b': np.zeros(()),
    }


class TokenPolicy:
    """pi_theta(a_t | s_t) as a product over tokens, plus V_phi(s_t) once per step.

       Backbone (encoder + token head) parameters are prefixed 'enc.' and 'tok.', value head
       parameters 'value.'. Next-token logits add a learnable offset row picked by the previous
       token (tok.prior, zero unless seeded). A frozen policy holds no grad-requiring tensors, so
       its forward passes record nothing.
    """

    def __init__(self, vocab, obs_shape, feature_dim=128, token_hidden=64, value_hidden=64,
                 max_tokens=12, seed=0, params=None, frozen=False, token_prior=None):
        self.vocab = vocab
        self.obs_shape = tuple(int(n) for n in obs_shape)
        self.feature_dim = feature_dim
        self.token_hidden = token_hidden
        self.value_hidden = value_hidden
        self.max_tokens = max_tokens
        self.frozen = frozen
        if params is None:
            params = init_params(vocab.size, self.obs_shape, feature_dim, token_hidden,
                                 value_hidden, max_tokens, seed, token_prior)
        self.params = {name: dc.Tensor(arr, requires_grad=not frozen)
                       for name, arr in params.items()}
        self._open_mask = np.zeros(vocab.size)
        self._sep_mask = np.zeros(vocab.size)
        self._sep_mask[vocab.sep] = MASKED_LOGIT

    def backbone_params(self):
        return {n: t for n, t in self.params.items() if n.startswith(BACKBONE_PREFIXES)}

    def value_params(self):
        return {n: t for n, t in self.params.items() if n.startswith(VALUE_PREFIX)}

    def param_arrays(self):
        return {n: t.data for n, t in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def snapshot(self):
        """Deep, frozen copy (pi_old)."""
        return TokenPolicy(self.vocab, self.obs_shape, self.feature_dim, self.token_hidden,
                           self.value_hidden, self.max_tokens,
                           params={n: t.data.copy() for n, t in self.params.items()},
                           frozen=True)

    def _check_ids(self, ids):
        for i in ids:
            if not 0 <= int(i) < self.vocab.size:
                raise VocabError(f"token id {i} outside vocabulary of size {self.vocab.size}")

    def encode_state(self, obs):
        """F(s_t): flatten(frames) -> linear -> tanh, mixed with mean context embedding."""
        if tuple(obs.frames.shape) != self.obs_shape:
            raise ObservationError(f"observation shape {list(obs.frames.shape)} does not match "
                                   f"configured {list(self.obs_shape)}")
        self._check_ids(obs.context_tokens)
        p = self.params
        x = dc.Tensor(obs.frames.reshape(-1))
        h = dc.tanh(dc.matmul(p['enc.frames_w'], x) + p['enc.frames_b'])
        if len(obs.context_tokens):
            ids = np.asarray(obs.context_tokens, dtype=np.int64)
            ctx = dc.reduce_mean(dc.gather_index(p['enc.context_emb'], ids), axis=0)
        else:
            ctx = dc.Tensor(np.zeros(self.feature_dim))
        mixed = dc.matmul(p['enc.mix_frames_w'], h) + dc.matmul(p['enc.mix_context_w'], ctx)
        return dc.tanh(mixed + p['enc.mix_b'])

    def _condition(self, features):
        return dc.matmul(self.params['tok.cond_w'], features)

    def _advance(self, h, token, pos, cond):
        p = self.params
        z = dc.matmul(p['tok.rec_w'], h) + dc.gather_index(p['tok.emb'], int(token))
        z = z + dc.gather_index(p['tok.pos'], pos) + cond
        return dc.tanh(z + p['tok.rec_b'])

    def _logits(self, h, sep_seen, prev):
        p = self.params
        logits = dc.matmul(p['tok.out_w'], h) + p['tok.out_b']
        logits = logits + dc.gather_index(p['tok.prior'], int(prev))
        return logits + (self._sep_mask if sep_seen else self._open_mask)

    def _start(self):
        return dc.Tensor(np.zeros(self.token_hidden))

    def _check_prefix(self, prefix):
        if not len(prefix) or prefix[0] != self.vocab.bos:
            raise SequenceError("token sequence must begin with BOS")
        if len(prefix) > self.max_tokens:
            raise SequenceError(f"sequence length {len(prefix)} exceeds max_tokens "
                                f"{self.max_tokens}")
        self._check_ids(prefix)

    def token_step(self, features, prefix):
        """Next-token logits given features and the full prefix (causal recurrence)."""
        self._check_prefix(prefix)
        if len(prefix) >= self.max_tokens:
            raise SequenceError("prefix leaves no room for another token")
        cond = self._condition(features)
        h = self._start()
        sep_seen = False
        for pos, tok in enumerate(prefix):
            h = self._advance(h, tok, pos, cond)
            sep_seen = sep_seen or (pos > 0 and tok == self.vocab.sep)
        return self._logits(h, sep_seen, prefix[-1])

    def sample_action(self, obs, rng, max_tokens=None, greedy=False, features=None):
        """Draw a_t token by token at temperature 1 (argmax when greedy)."""
        max_tokens = self.max_tokens if max_tokens is None else max_tokens
        if max_tokens < 3 or max_tokens > self.max_tokens:
            raise SequenceError(f"max_tokens must be in [3, {self.max_tokens}], got {max_tokens}")
        vocab = self.vocab
        if features is None:
            features = self.encode_state(obs)
        cond = self._condition(features)
        h = self._start()
        tokens = [vocab.bos]
        logprobs = []
        dists = []
        sep_seen = False
        while len(tokens) < max_tokens:
            h = self._advance(h, tokens[-1], len(tokens) - 1, cond)
            probs = dc.softmax_rows(self._logits(h, sep_seen, tokens[-1]))
            logdist = dc.log(probs)
            if greedy:
                tok = int(np.argmax(probs.data))
            else:
                tok = _draw(probs.data, rng)
            logprobs.append(float(dc.gather_index(logdist, tok).data))
            dists.append(probs.data)
            tokens.append(tok)
            sep_seen = sep_seen or tok == vocab.sep
            if tok == vocab.eos:
                break
        return ActionEmission.from_tokens(tokens, logprobs, dists, vocab)

    def action_logprob(self, obs, tokens, features=None):
        """Teacher-forced per-token log-probs and full distributions of an emission."""
        tokens = list(tokens)
        if len(tokens) < 2:
            raise SequenceError("emission has no generated tokens")
        try:
            self._check_prefix(tokens)
        except VocabError as e:
            raise SequenceError(str(e))
        if features is None:
            features = self.encode_state(obs)
        cond = self._condition(features)
        h = self._start()
        sep_seen = False
        logprobs, probs, logdists = [], [], []
        for pos in range(len(tokens) - 1):
            h = self._advance(h, tokens[pos], pos, cond)
            sep_seen = sep_seen or (pos > 0 and tokens[pos] == self.vocab.sep)
            p = dc.softmax_rows(self._logits(h, sep_seen, tokens[pos]))
            logdist = dc.log(p)
            logprobs.append(dc.gather_index(logdist, tokens[pos + 1]))
            probs.append(p)
            logdists.append(logdist)
        return TokenEvaluation(logprobs=dc.stack(logprobs), probs=dc.stack(probs),
                               logdists=dc.stack(logdists))

    def value(self, obs, features=None, head=None, stop_grad=True):
        """V_phi(s_t) = MLP_phi(stopgrad(F(s_t))); head swaps in e.g. a target network."""
        if features is None:
            features = self.encode_state(obs)
        if stop_grad:
            features = dc.stop_grad(features)
        head = self.params if head is None else head
        hidden = dc.tanh(dc.matmul(head['value.hidden_w'], features) + head['value.hidden_b'])
        return dc.matmul(head['value.out_w'], hidden) + head['value.out_b']


def save_checkpoint(path, policy, extras=None):
    """Write vocabulary, shapes and parameters (little-endian float64) plus caller extras."""
    arrays = {
        'vocab': np.array(policy.vocab.tokens),
        'obs_shape': np.array(policy.obs_shape, dtype='<i8'),
        'dims': np.array([policy.feature_dim, policy.token_hidden, policy.value_hidden,
                          policy.max_tokens], dtype='<i8'),
    }
    for name, t in policy.params.items():
        arrays[f"param__{name}"] = t.data.astype('<f8')
    arrays.update(extras or {})
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return (live policy, dict of the remaining arrays)."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    vocab = Vocabulary([str(t) for t in arrays.pop('vocab')])
    obs_shape = tuple(int(n) for n in arrays.pop('obs_shape'))
    feature_dim, token_hidden, value_hidden, max_tokens = (int(n) for n in arrays.pop('dims'))
    params = {k[len('param__'):]: arrays.pop(k) for k in list(arrays) if k.startswith('param__')}
    policy = TokenPolicy(vocab, obs_shape, feature_dim, token_hidden, value_hidden, max_tokens,
                         params=params)
    return policy, arrays


def vocabulary_for(kind, **sizes):
    return Vocabulary(token_names.tokens_for(kind, **sizes))
