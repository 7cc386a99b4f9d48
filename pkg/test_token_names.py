import pytest

import token_names

def test_lookup_nav():
    assert token_names.lookup_nav('left') == 'turn_left'
    assert token_names.lookup_nav('forward') == 'forward'
    assert token_names.lookup_nav('goal') is None

def test_specials_first():
    tokens = token_names.tokens_for('HallwayNav')
    assert tokens[:4] == ['<pad>', '<bos>', '<eos>', '<sep>']
    assert len(tokens) == len(set(tokens))

def test_card_tables():
    commands = token_names.card_commands(3)
    assert commands['pick2'] == ('pick', 2)
    assert commands['times'] == ('op', '*')
    tokens = token_names.tokens_for('CardPoints', n_cards=3, max_card=9)
    assert 'goal27' in tokens and 'goal28' not in tokens
    assert token_names.sum_token(None, 27) == 'sum_none'
    assert token_names.sum_token(28, 27) == 'sum_big'

def test_shop_tables():
    assert token_names.shop_attribute(1, 2) == 'a12'
    assert token_names.shop_commands(6)['item5'] == ('item', 5)
    tokens = token_names.tokens_for('TinyShop', n_items=2, n_attrs=2, n_values=2)
    assert {'search', 'click', 'buy', 'item1', 'a11'} <= set(tokens)

def test_unknown_kind():
    with pytest.raises(KeyError):
        token_names.tokens_for('Minecraft')
