import numpy as np
import pytest

from dirlcc import autodiff as ad
from dirlcc.autodiff import Tensor, grad_check
from dirlcc.decoder import (
    decode_stack,
    embed_words,
    greedy_decode,
    init_decoder,
    self_attention_mask,
    vocab_logits,
    vocab_probs,
)
from dirlcc.losses import caption_nll
from dirlcc.scenes import BOS_ID, EOS_ID, PAD_ID

D, V, HW, H = 8, 11, 4, 2


def _params(seed=0, vocab=V, d=D, word_dim=6, layers=2):
    return init_decoder(np.random.default_rng(seed), vocab, d, word_dim, layers, 12)


def _fd(seed=1, b=2):
    return Tensor(np.random.default_rng(seed).normal(size=(b, HW, D)))


def test_same_token_shares_table_row():
    p = _params()
    e = embed_words(np.array([5, 5]), p).data
    pos = p["pos.word"].data
    np.testing.assert_allclose(e[0] - pos[0], e[1] - pos[1], atol=1e-14)
    assert not np.allclose(e[0], e[1])


def test_embedding_shapes_and_range():
    p = init_decoder(np.random.default_rng(0), 20, 512, 300, 1, 12)
    assert embed_words(np.arange(7), p).shape == (7, 512)
    with pytest.raises(IndexError):
        embed_words(np.array([20]), p)


def test_single_token_self_attention_is_one():
    states = decode_stack(np.array([[BOS_ID]]), _fd(b=1), _params(), H)
    assert np.array_equal(states[0].self_weights, np.ones((1, H, 1, 1)))


def test_causal_prefix_unaffected_by_future_tokens():
    p, fd = _params(), _fd()
    a = np.array([[1, 4, 5, 6, 2], [1, 7, 8, 2, 0]])
    b = a.copy()
    b[:, 3:] = [[9, 9], [9, 9]]
    sa, sb = decode_stack(a, fd, p, H), decode_stack(b, fd, p, H)
    for la, lb in zip(sa, sb):
        np.testing.assert_array_equal(la.e_hat.data[:, :3], lb.e_hat.data[:, :3])
        np.testing.assert_array_equal(la.v_prime.data[:, :3], lb.v_prime.data[:, :3])


def test_pad_keys_get_zero_weight():
    tokens = np.array([[1, 4, 5, PAD_ID, PAD_ID]])
    states = decode_stack(tokens, _fd(b=1), _params(), H)
    w = states[0].self_weights[0]
    assert (w[:, :3, 3:] == 0).all()


def test_softmax_rows_sum_to_one():
    p, fd = _params(), _fd()
    states = decode_stack(np.array([[1, 4, 5], [1, 6, 7]]), fd, p, H)
    for st in states:
        np.testing.assert_allclose(st.cross_weights.sum(-1), 1, atol=1e-12)
        np.testing.assert_allclose(st.self_weights.sum(-1), 1, atol=1e-12)
        assert st.cross_weights.shape == (2, H, 3, HW)
    probs = vocab_probs(states[-1].v_prime, p).data
    assert probs.shape[-1] == V
    np.testing.assert_allclose(probs.sum(-1), 1, atol=1e-12)


def test_zero_features_give_uniform_vocab():
    p = _params()
    p["out.bias"].data[:] = 0
    np.testing.assert_allclose(vocab_probs(Tensor(np.zeros((3, D))), p).data, 1 / V, atol=1e-15)


def test_teacher_forcing_does_not_leak():
    p, fd = _params(), _fd()
    tokens = np.array([[1, 4, 5, 6, 7, 2]])
    for t in range(1, 5):
        other = tokens.copy()
        other[0, t + 1:] = 3
        lp = vocab_probs(decode_stack(tokens, Tensor(fd.data[:1]), p, H)[-1].v_prime, p).data
        lq = vocab_probs(decode_stack(other, Tensor(fd.data[:1]), p, H)[-1].v_prime, p).data
        np.testing.assert_array_equal(lp[0, : t + 1], lq[0, : t + 1])


def _eos_always(p):
    p["out.weight"].data[:] = 0
    p["out.bias"].data[:] = 0
    p["out.bias"].data[EOS_ID] = 5.0
    return p


def test_greedy_stops_on_eos():
    res = greedy_decode(_fd(), _eos_always(_params()), H, 12)
    assert res.tokens == [[BOS_ID, EOS_ID]] * 2
    assert res.truncated == [False, False]
    assert res.attention[0].shape == (1, HW)


def test_greedy_budget_and_ties():
    p = _params()
    p["out.weight"].data[:] = 0
    p["out.bias"].data[:] = 0
    # all logits tie, so the lowest id (PAD) wins and decoding never ends
    res = greedy_decode(_fd(b=1), p, H, 2)
    assert len(res.tokens[0]) <= 2 and res.truncated == [True]
    p["out.bias"].data[:4] = -1
    res = greedy_decode(_fd(b=1), p, H, 5)
    assert res.tokens[0] == [BOS_ID, 4, 4, 4, 4]
    with pytest.raises(ValueError):
        greedy_decode(_fd(), p, H, 1)


def test_greedy_is_deterministic_and_batch_independent():
    p, fd = _params(3), _fd(4, b=3)
    a = greedy_decode(fd, p, H, 8)
    b = greedy_decode(fd, p, H, 8)
    assert a.tokens == b.tokens
    single = greedy_decode(Tensor(fd.data[1:2]), p, H, 8)
    assert single.tokens[0] == a.tokens[1]
    np.testing.assert_allclose(single.attention[0], a.attention[1], atol=1e-12)


def test_self_attention_mask():
    m = self_attention_mask(np.array([[True, True, False]]))
    assert m[0].tolist() == [[True, False, False], [True, True, False], [True, True, False]]


@pytest.mark.parametrize("seed", range(2))
def test_decoder_gradient(seed):
    rng = np.random.default_rng(seed)
    p = _params(seed)
    fd = Tensor(rng.normal(size=(2, HW, D)), requires_grad=True)
    tokens = np.array([[1, 4, 5, 6, 2], [1, 7, 2, 0, 0]])
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    mask = targets != PAD_ID
    names = sorted(p)

    def f(fd, *ws):
        q = dict(zip(names, ws))
        states = decode_stack(inputs, fd, q, H, valid=mask)
        return caption_nll(vocab_logits(states[-1].v_prime, q), targets, mask)

    assert grad_check(f, [fd, *[p[n] for n in names]]) < 1e-4


def test_pad_rows_do_not_move_the_loss():
    p, fd = _params(), _fd()
    tokens = np.array([[1, 4, 5, 2, 0, 0], [1, 6, 7, 8, 9, 2]])
    inputs, targets = tokens[:, :-1], tokens[:, 1:]
    mask = targets != PAD_ID
    base = caption_nll(vocab_logits(decode_stack(inputs, fd, p, H, mask)[-1].v_prime, p), targets, mask).item()
    swapped = tokens.copy()
    swapped[0, 4:] = [3, 3]  # garbage in PAD slots (still masked)
    inputs2, targets2 = swapped[:, :-1], swapped[:, 1:]
    with ad.no_grad():
        other = caption_nll(vocab_logits(decode_stack(inputs2, fd, p, H, mask)[-1].v_prime, p), targets2, mask).item()
    assert other == pytest.approx(base, abs=1e-12)
