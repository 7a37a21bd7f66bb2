import pytest
from hypothesis import given
from hypothesis import strategies as st

from gti_lab.rq import SemanticID
from gti_lab.vocab import N_BYTES, SPECIALS, Vocabulary

V = Vocabulary(levels=4, size=8, n_suffix=2)


def test_layout():
    assert V.n_text == N_BYTES + len(SPECIALS)
    assert len(V) == V.n_text + 32 + 2
    assert V.sid_token(0, 0) == V.n_text
    assert V.sid_token(3, 7) == V.n_text + 31
    assert V.suffix_token(1) == V.n_text + 32
    assert list(V.new_range) == list(range(V.n_text, len(V)))


def test_token_strings():
    assert V.token_str(V.sid_token(0, 3)) == "<a_3>"
    assert V.token_str(V.sid_token(2, 5)) == "<c_5>"
    assert V.token_str(V.suffix_token(2)) == "<x_2>"
    assert V.token_str(V.bos) == "<bos>"


def test_sid_tokens_with_suffix():
    ids = V.sid_tokens(SemanticID((1, 2, 3, 4), suffix=1))
    assert [V.level_of(t) for t in ids] == [0, 1, 2, 3, None]
    assert V.decode(ids) == "<a_1><b_2><c_3><d_4><x_1>"


@pytest.mark.parametrize("call", [lambda: V.sid_token(4, 0), lambda: V.sid_token(0, 8),
                                  lambda: V.suffix_token(0), lambda: V.suffix_token(3)])
def test_out_of_range_tokens(call):
    with pytest.raises(KeyError):
        call()


@given(st.lists(st.integers(0, len(V) - 1), max_size=30))
def test_encode_inverts_decode(ids):
    text = V.decode(ids)
    # a literal '<a_1>' typed as bytes re-encodes as the SID token, so only check markup-free runs
    if "<" in "".join(chr(t) for t in ids if t < N_BYTES):
        return
    assert V.encode(text) == ids


def test_unknown_markup_stays_bytes():
    assert V.encode("<z_1>") == list(b"<z_1>")
