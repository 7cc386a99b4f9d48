#!/usr/bin/python
# vim: set fileencoding=utf-8 :

"""Miniature finite-horizon environments driven by the action span of a token emission.

   HallwayNav and RoomsNav are grid navigation with egocentric turn/forward commands,
   CardPoints is card arithmetic towards a target value and TinyShop is a search/click/buy
   task over a small item catalogue. Every instance is owned by a single rollout worker.
"""

import collections
import dataclasses
import json
import re

import numpy as np

import policy
import token_names


KINDS = ('HallwayNav', 'RoomsNav', 'CardPoints', 'TinyShop')
LAYOUTS = ('oneroom', 'wallgap', 'fourrooms')
REWARD_SCHEMES = ('sparse_terminal', 'shaped')
DEFAULT_HORIZON = {'HallwayNav': 20, 'RoomsNav': 40, 'CardPoints': 6, 'TinyShop': 8}
PARSE_PENALTY = -0.01
# single-digit slot and value in TinyShop attribute tokens
MAX_SHOP_SIZE = 10
# logit gaps of the emission-format prior
THOUGHT_GAP = 2.0
FORWARD_LEAN = 2.0


class EnvError(Exception):
    pass


class SpecError(EnvError):
    pass


class EpisodeDoneError(EnvError):
    pass


@dataclasses.dataclass
class EnvSpec:
    kind: str = 'HallwayNav'
    layout: str = 'wallgap'
    height: int = 0
    width: int = 0
    horizon: int = 0
    frame_stack: int = 4
    reward_scheme: str = 'sparse_terminal'
    partial_obs: bool = False
    view_radius: int = 2
    n_cards: int = 3
    max_card: int = 9
    n_items: int = 6
    n_attrs: int = 3
    n_values: int = 3
    seed: int = 0

    def __post_init__(self):
        """Zero grid sizes and horizon mean 'the default for this kind'."""
        if self.kind == 'HallwayNav':
            self.height = self.height or 1
            self.width = self.width or 8
        elif self.kind == 'RoomsNav':
            self.height = self.height or 7
            self.width = self.width or 7
        elif self.kind == 'CardPoints':
            self.height, self.width = 1, self.n_cards
        elif self.kind == 'TinyShop':
            self.height, self.width = self.n_items, self.n_attrs
        if not self.horizon and self.kind in DEFAULT_HORIZON:
            self.horizon = DEFAULT_HORIZON[self.kind]

    def validate(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown environment kind {self.kind!r}, expected one of {KINDS}")
        if self.horizon < 1:
            raise SpecError(f"horizon must be >= 1, got {self.horizon}")
        if self.frame_stack < 1:
            raise SpecError(f"frame_stack must be >= 1, got {self.frame_stack}")
        if self.reward_scheme not in REWARD_SCHEMES:
            raise SpecError(f"unknown reward scheme {self.reward_scheme!r}")
        if self.kind == 'HallwayNav' and (self.height != 1 or self.width < 2):
            raise SpecError(f"HallwayNav needs a 1 x N corridor with N >= 2, "
                            f"got {self.height} x {self.width}")
        if self.kind == 'RoomsNav':
            if self.layout not in LAYOUTS:
                raise SpecError(f"unknown RoomsNav layout {self.layout!r}")
            if self.height < 3 or self.width < 3:
                raise SpecError(f"RoomsNav grid must be at least 3 x 3, "
                                f"got {self.height} x {self.width}")
        if self.kind == 'CardPoints' and (self.n_cards < 1 or not 1 <= self.max_card <= 9):
            raise SpecError("CardPoints needs n_cards >= 1 and card values within 1..9")
        if self.kind == 'TinyShop':
            if min(self.n_items, self.n_attrs, self.n_values) < 1:
                raise SpecError("TinyShop sizes must be >= 1")
            if max(self.n_attrs, self.n_values) > MAX_SHOP_SIZE:
                raise SpecError(f"TinyShop n_attrs and n_values must be <= {MAX_SHOP_SIZE}, "
                                f"got {self.n_attrs} and {self.n_values}")

    def vocab_sizes(self):
        return dict(n_cards=self.n_cards, max_card=self.max_card, n_items=self.n_items,
                    n_attrs=self.n_attrs, n_values=self.n_values)


@dataclasses.dataclass(frozen=True)
class EnvAction:
    command: str
    arg: object = None


@dataclasses.dataclass(frozen=True)
class ParseFailure:
    reason: str


@dataclasses.dataclass
class StepOutcome:
    next_obs: policy.Observation
    reward: float
    done: bool
    info: dict


def build_vocabulary(spec):
    return policy.vocabulary_for(spec.kind, **spec.vocab_sizes())


def parse_action(emission, vocab, kind):
    """Map the action span of an emission to an EnvAction; thought tokens are never read."""
    if not emission.has_sep:
        return ParseFailure('missing separator')
    span = vocab.decode(emission.action_tokens(vocab))
    if not span:
        return ParseFailure('empty action span')
    if kind in ('HallwayNav', 'RoomsNav'):
        command = token_names.lookup_nav(span[0]) if len(span) == 1 else None
        if command is not None:
            return EnvAction(command)
    elif kind == 'CardPoints':
        commands = token_names.card_commands(sum(t.startswith('pick') for t in vocab.tokens))
        if len(span) == 1 and span[0] in commands:
            return EnvAction(*commands[span[0]])
    elif kind == 'TinyShop':
        commands = token_names.shop_commands(sum(t.startswith('item') for t in vocab.tokens))
        if span == ['buy']:
            return EnvAction('buy')
        if len(span) == 2 and span[0] == 'click' and span[1] in commands:
            command, index = commands[span[1]]
            if command == 'item':
                return EnvAction('click', index)
        if len(span) == 2 and span[0] == 'search':
            m = re.fullmatch(r'a(\d)(\d)', span[1])
            if m:
                return EnvAction('search', (int(m.group(1)), int(m.group(2))))
    return ParseFailure(f"outside {kind} grammar: {' '.join(span)}")


def action_phrases(spec):
    """Every well-formed action span of a kind as (token names, opening logit bonus)."""
    if spec.kind in ('HallwayNav', 'RoomsNav'):
        return [([t], FORWARD_LEAN if c == 'forward' else 0.0)
                for t, c in token_names.nav_commands.items()]
    if spec.kind == 'CardPoints':
        return [([t], 0.0) for t in token_names.card_commands(spec.n_cards)]
    phrases = [(['buy'], 0.0)]
    phrases += [(['click', f"item{i}"], 0.0) for i in range(spec.n_items)]
    phrases += [(['search', token_names.shop_attribute(s, v)], 0.0)
                for s in range(spec.n_attrs) for v in range(spec.n_values)]
    return phrases


def format_prior(spec, vocab, strength):
    """[V, V] next-token logit offsets, indexed by the previous token, favouring
       BOS thoughts* SEP <action phrase> EOS. Zero strength gives all zeros.
    """
    prior = np.zeros((vocab.size, vocab.size))
    if not strength:
        return prior
    thoughts = vocab.encode(token_names.THOUGHT_TOKENS)
    for prev in [vocab.bos] + thoughts:
        prior[prev, vocab.sep] = strength
        prior[prev, thoughts] = strength - THOUGHT_GAP
    for names, bonus in action_phrases(spec):
        ids = [vocab.sep] + vocab.encode(names) + [vocab.eos]
        prior[ids[0], ids[1]] = strength + bonus
        for prev, nxt in zip(ids[1:], ids[2:]):
            prior[prev, nxt] = strength
    return prior


class Env:
    """Shared episode bookkeeping: horizon, frame stack, parse penalty, reward shaping."""
    n_channels = 1

    def __init__(self, spec, vocab=None):
        spec.validate()
        self.spec = spec
        self.vocab = build_vocabulary(spec) if vocab is None else vocab
        self.t = 0
        self.done = True
        self.success = False
        self._frames = None

    @property
    def obs_shape(self):
        return (self.spec.frame_stack, self.n_channels, self.spec.height, self.spec.width)

    def reset(self, episode_seed):
        """Deterministic initial state for (spec.seed, episode_seed); the first frame repeated L times."""
        rng = np.random.default_rng([self.spec.seed, int(episode_seed)])
        self._generate(rng)
        self._frames = collections.deque([self._render()] * self.spec.frame_stack,
                                         maxlen=self.spec.frame_stack)
        self.t = 0
        self.done = False
        self.success = False
        return self.observation()

    def observation(self):
        return policy.Observation(frames=np.stack(self._frames),
                                  context_tokens=tuple(self.vocab.encode(self._context())))

    def parse_action(self, emission):
        return parse_action(emission, self.vocab, self.spec.kind)

    def step(self, action):
        if self.done:
            raise EpisodeDoneError(f"{self.spec.kind}: step after the episode finished")
        self.t += 1
        if isinstance(action, ParseFailure):
            reward, terminal, success = PARSE_PENALTY, False, False
        else:
            reward, terminal, success = self._apply(action)
        if self.spec.reward_scheme == 'shaped':
            reward -= 1.0 / self.spec.horizon
        self.done = terminal or self.t >= self.spec.horizon
        self.success = success
        self._frames.append(self._render())
        info = {'parsed': not isinstance(action, ParseFailure), 'success': success}
        if isinstance(action, ParseFailure):
            info['reason'] = action.reason
        return StepOutcome(next_obs=self.observation(), reward=float(np.clip(reward, -1.0, 1.0)),
                           done=self.done, info=info)

    def _one_hot(self, grid):
        return np.eye(self.n_channels)[grid].transpose(2, 0, 1)


class NavEnv(Env):
    EMPTY, WALL, GOAL, AGENT, UNSEEN = 0, 1, 2, 3, 7
    n_channels = 8
    # east, south, west, north
    moves = [(0, 1), (1, 0), (0, -1), (-1, 0)]

    def _generate(self, rng):
        self.walls, self.agent, self.heading, self.goal = self._layout(rng)

    def _render(self):
        grid = np.full((self.spec.height, self.spec.width), self.EMPTY, dtype=np.int64)
        grid[self.walls] = self.WALL
        grid[self.goal] = self.GOAL
        grid[self.agent] = self.AGENT + self.heading
        if self.spec.partial_obs:
            rows, cols = np.indices(grid.shape)
            far = np.maximum(abs(rows - self.agent[0]), abs(cols - self.agent[1]))
            grid[far > self.spec.view_radius] = self.UNSEEN
        return self._one_hot(grid)

    def _context(self):
        return token_names.nav_context

    def _free(self, cell):
        r, c = cell
        return (0 <= r < self.spec.height and 0 <= c < self.spec.width
                and not self.walls[r, c])

    def _apply(self, action):
        if action.command == 'turn_left':
            self.heading = (self.heading + 3) % 4
        elif action.command == 'turn_right':
            self.heading = (self.heading + 1) % 4
        elif action.command == 'forward':
            dr, dc = self.moves[self.heading]
            ahead = (self.agent[0] + dr, self.agent[1] + dc)
            if self._free(ahead):
                self.agent = ahead
        if self.agent == self.goal:
            return 1.0, True, True
        return 0.0, False, False


class HallwayNav(NavEnv):
    """1 x N corridor: agent at cell 0, goal at cell N-1, heading drawn per episode."""

    def _layout(self, rng):
        walls = np.zeros((1, self.spec.width), dtype=bool)
        return walls, (0, 0), int(rng.integers(4)), (0, self.spec.width - 1)


class RoomsNav(NavEnv):
    """Open room, two rooms joined by a gap, or four rooms joined by four gaps."""

    def _layout(self, rng):
        H, W = self.spec.height, self.spec.width
        walls = np.zeros((H, W), dtype=bool)
        rooms = np.zeros((H, W), dtype=np.int64)
        mid_r, mid_c = H // 2, W // 2
        if self.spec.layout == 'wallgap':
            walls[:, mid_c] = True
            walls[rng.integers(H), mid_c] = False
            rooms[:, mid_c + 1:] = 1
        elif self.spec.layout == 'fourrooms':
            walls[mid_r, :] = True
            walls[:, mid_c] = True
            walls[mid_r, rng.integers(mid_c)] = False
            walls[mid_r, mid_c + 1 + rng.integers(W - mid_c - 1)] = False
            walls[rng.integers(mid_r), mid_c] = False
            walls[mid_r + 1 + rng.integers(H - mid_r - 1), mid_c] = False
            rooms[:mid_r, mid_c + 1:] = 1
            rooms[mid_r + 1:, :mid_c] = 2
            rooms[mid_r + 1:, mid_c + 1:] = 3
        free = [(int(r), int(c)) for r, c in zip(*np.nonzero(~walls))]
        if self.spec.layout == 'oneroom':
            a, g = rng.choice(len(free), size=2, replace=False)
            agent, goal = free[a], free[g]
        else:
            # agent and goal in different rooms; gap cells belong to no room
            inside = [cell for cell in free if not self._on_wall_line(cell, mid_r, mid_c)]
            agent = inside[rng.integers(len(inside))]
            others = [cell for cell in inside if rooms[cell] != rooms[agent]]
            goal = others[rng.integers(len(others))]
        return walls, agent, int(rng.integers(4)), goal

    def _on_wall_line(self, cell, mid_r, mid_c):
        if self.spec.layout == 'wallgap':
            return cell[1] == mid_c
        return cell[0] == mid_r or cell[1] == mid_c


class CardPoints(Env):
    """Combine cards with + or * towards a target equal to the sum of a random card subset."""

    def __init__(self, spec, vocab=None):
        super().__init__(spec, vocab)
        self.n_channels = 2 * spec.max_card

    def _generate(self, rng):
        n = self.spec.n_cards
        self.cards = rng.integers(1, self.spec.max_card + 1, size=n)
        subset = int(rng.integers(1, 2 ** n))
        self.target = int(sum(self.cards[i] for i in range(n) if subset & (1 << i)))
        self.used = np.zeros(n, dtype=bool)
        self.total = None
        self.op = '+'

    def _render(self):
        grid = (self.cards - 1) + self.spec.max_card * self.used
        return self._one_hot(grid.reshape(1, -1))

    def _context(self):
        top = self.spec.n_cards * self.spec.max_card
        return [f"goal{self.target}", token_names.sum_token(self.total, top),
                'op_plus' if self.op == '+' else 'op_times']

    def _apply(self, action):
        if action.command == 'pick':
            i = action.arg
            if i < len(self.cards) and not self.used[i]:
                self.used[i] = True
                v = int(self.cards[i])
                if self.total is None:
                    self.total = v
                elif self.op == '+':
                    self.total += v
                else:
                    self.total *= v
        elif action.command == 'op':
            self.op = action.arg
        elif action.command == 'submit':
            success = self.total == self.target
            return (1.0 if success else 0.0), True, success
        return 0.0, False, False


class TinyShop(Env):
    """Find and buy the item whose attributes match the instruction."""
    LISTED, SELECTED, HIDDEN = 0, 1, 2

    def __init__(self, spec, vocab=None):
        super().__init__(spec, vocab)
        self.n_channels = 3 * spec.n_values

    def _generate(self, rng):
        self.items = rng.integers(self.spec.n_values, size=(self.spec.n_items, self.spec.n_attrs))
        self.target = self.items[rng.integers(self.spec.n_items)].copy()
        self.hidden = np.zeros(self.spec.n_items, dtype=bool)
        self.selected = None

    def _render(self):
        state = np.where(self.hidden, self.HIDDEN, self.LISTED)
        if self.selected is not None:
            state[self.selected] = self.SELECTED
        grid = state[:, None] * self.spec.n_values + self.items
        return self._one_hot(grid)

    def _context(self):
        return [token_names.shop_attribute(s, int(v)) for s, v in enumerate(self.target)]

    def _apply(self, action):
        if action.command == 'search':
            slot, value = action.arg
            if slot < self.spec.n_attrs:
                self.hidden |= self.items[:, slot] != value
        elif action.command == 'click':
            i = action.arg
            if i < self.spec.n_items and not self.hidden[i]:
                self.selected = i
        elif action.command == 'buy' and self.selected is not None:
            success = bool(np.array_equal(self.items[self.selected], self.target))
            return (1.0 if success else 0.0), True, success
        return 0.0, False, False


_ENV_CLASSES = {
    'HallwayNav': HallwayNav,
    'RoomsNav': RoomsNav,
    'CardPoints': CardPoints,
    'TinyShop': TinyShop,
}


def make_env(spec, vocab=None):
    spec.validate()
    return _ENV_CLASSES[spec.kind](spec, vocab)


def reset(spec, episode_seed):
    """Initial Observation of a fresh environment for (spec, episode_seed)."""
    return make_env(spec).reset(episode_seed)


def shortest_path(env):
    """Breadth-first search over (cell, heading) from the env's current state; list of commands."""
    start = (env.agent, env.heading)
    parents = {start: None}
    queue = collections.deque([start])
    while queue:
        state = queue.popleft()
        cell, heading = state
        if cell == env.goal:
            path = []
            while parents[state] is not None:
                state, command = parents[state]
                path.append(command)
            return path[::-1]
        dr, dc = env.moves[heading]
        ahead = (cell[0] + dr, cell[1] + dc)
        successors = [((cell, (heading + 3) % 4), 'turn_left'),
                      ((cell, (heading + 1) % 4), 'turn_right'),
                      ((ahead if env._free(ahead) else cell, heading), 'forward')]
        for nxt, command in successors:
            if nxt not in parents:
                parents[nxt] = (state, command)
                queue.append(nxt)
    raise SpecError(f"goal {env.goal} unreachable from {env.agent} in {env.spec.kind}")


def success_oracle(spec, episode_seed):
    """Optimal number of steps to the goal for a navigation episode."""
    if spec.kind not in ('HallwayNav', 'RoomsNav'):
        raise SpecError(f"no navigation oracle for {spec.kind}")
    env = make_env(spec)
    env.reset(episode_seed)
    return len(shortest_path(env))


def dump_trajectory(records, path):
    """Append step records as JSON lines: obs digest, token strings, reward, done."""
    with open(path, 'a') as f:
        for rec in records:
            f.write(json.dumps({'t': rec['t'], 'obs': rec['obs'].digest(),
                                'tokens': rec['tokens'], 'reward': rec['reward'],
                                'done': rec['done']}) + '\n')
