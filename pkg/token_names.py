"""Token tables for each environment kind and the grammar mapping action tokens to commands."""


SPECIAL_TOKENS = ['<pad>', '<bos>', '<eos>', '<sep>']

THOUGHT_TOKENS = ['think0', 'think1', 'think2', 'think3']


# single-token navigation commands
nav_commands = {
        'left': 'turn_left',
        'right': 'turn_right',
        'forward': 'forward',
        }

nav_context = ['goto', 'goal']


def card_commands(n_cards):
    commands = {f"pick{i}": ('pick', i) for i in range(n_cards)}
    commands['plus'] = ('op', '+')
    commands['times'] = ('op', '*')
    commands['submit'] = ('submit', None)
    return commands


def card_context(n_cards, max_card):
    top = n_cards * max_card
    tokens = [f"goal{v}" for v in range(1, top + 1)]
    tokens += [f"sum{v}" for v in range(0, top + 1)] + ['sum_big', 'sum_none']
    tokens += ['op_plus', 'op_times']
    return tokens


def shop_attribute(slot, value):
    return f"a{slot}{value}"


def shop_commands(n_items):
    commands = {'buy': ('buy', None)}
    commands.update({f"item{i}": ('item', i) for i in range(n_items)})
    return commands


def shop_tokens(n_items, n_attrs, n_values):
    tokens = ['search', 'click', 'buy'] + [f"item{i}" for i in range(n_items)]
    tokens += [shop_attribute(s, v) for s in range(n_attrs) for v in range(n_values)]
    return tokens


def tokens_for(kind, n_cards=3, max_card=9, n_items=6, n_attrs=3, n_values=3):
    """Return the full ordered token list for an environment kind, specials first."""
    if kind in ('HallwayNav', 'RoomsNav'):
        kind_tokens = list(nav_commands.keys()) + nav_context
    elif kind == 'CardPoints':
        kind_tokens = list(card_commands(n_cards).keys()) + card_context(n_cards, max_card)
    elif kind == 'TinyShop':
        kind_tokens = shop_tokens(n_items, n_attrs, n_values)
    else:
        raise KeyError(f"no token table for environment kind {kind!r}")
    return SPECIAL_TOKENS + THOUGHT_TOKENS + kind_tokens


def lookup_nav(token):
    """Map a navigation token to its command, None when the token is not a command."""
    return nav_commands.get(token)


def sum_token(total, top):
    if total is None:
        return 'sum_none'
    if 0 <= total <= top:
        return f"sum{total}"
    return 'sum_big'
