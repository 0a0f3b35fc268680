import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inkdiff import autograd as ag
from inkdiff.denoiser import (
    IDENTIFIER,
    NULL,
    PAD,
    UNK,
    Denoiser,
    DenoiserConfig,
    TokenVocabulary,
    attention_targets,
    cross_attention,
    drop_conditioning,
    embed_tokens,
    null_ids,
    time_embedding,
    tokenize,
)
from inkdiff.rng import RandomStream

from .conftest import CHINESE, MODERN, tiny_config


def test_reserved_ids(vocab):
    assert vocab.tokens[:4] == ["<pad>", "<unk>", "<null>", "[V]"]
    assert vocab.id("[V]") == IDENTIFIER == 3
    assert vocab.id("[v]") == IDENTIFIER
    assert vocab.id("zebra") == UNK


def test_tokenize_lowercases_and_pads(vocab):
    ids = tokenize("A picture of CHINESE landscape painting", vocab, 8)
    assert np.array_equal(ids, tokenize(CHINESE, vocab, 8))
    assert ids[6] == PAD and ids[7] == PAD
    assert ids[0] != UNK
    assert tokenize("a [V] landscape painting", vocab, 8)[1] == IDENTIFIER


def test_tokenize_rejects_empty(vocab):
    with pytest.raises(ValueError):
        tokenize("   ", vocab)


def test_vocabulary_must_start_with_reserved():
    with pytest.raises(ValueError):
        TokenVocabulary(["a", "b"])


def test_time_embedding_hand_values():
    # dim 4: w_0 = 1, w_1 = 10000^(-1/2) = 0.01
    e = time_embedding(np.array([1]), 4)
    np.testing.assert_allclose(e[0], [np.sin(1), np.cos(1), np.sin(0.01), np.cos(0.01)], rtol=1e-6)
    np.testing.assert_allclose(time_embedding(np.array([0]), 6)[0], [0, 1, 0, 1, 0, 1])


def test_time_embedding_range_check():
    with pytest.raises(ValueError):
        time_embedding(np.array([0]), 8, T=10)
    with pytest.raises(ValueError):
        time_embedding(np.array([11]), 8, T=10)


@given(st.integers(1, 1000), st.integers(1, 1000))
@settings(max_examples=30, deadline=None)
def test_time_embedding_distinguishes_steps(a, b):
    ea, eb = time_embedding(np.array([a, b]), 32)
    assert np.array_equal(ea, eb) == (a == b)


def test_drop_conditioning_extremes_and_rate():
    ids = np.tile(np.arange(1, 9), (10_000, 1))
    same, dropped = drop_conditioning(ids, RandomStream(0), 0.0)
    assert np.array_equal(same, ids) and not dropped.any()
    null, dropped = drop_conditioning(ids, RandomStream(0), 1.0)
    assert dropped.all() and np.all(null == null_ids(8))
    out, dropped = drop_conditioning(ids, RandomStream(0), 0.1)
    assert abs(dropped.mean() - 0.1) < 0.01
    assert np.all(out[dropped, 0] == NULL)
    with pytest.raises(ValueError):
        drop_conditioning(ids, RandomStream(0), 1.5)


def test_forward_shape_and_determinism(tiny_model):
    x = np.random.default_rng(0).normal(size=(3, 1, 8, 8)).astype(np.float32)
    ids = tiny_model.tokenize([CHINESE, MODERN, CHINESE])
    y1 = tiny_model(x, np.array([1, 5, 20]), ids).data
    y2 = tiny_model(x, np.array([1, 5, 20]), ids).data
    assert y1.shape == x.shape
    assert np.array_equal(y1, y2)


def test_forward_rejects_wrong_shape_and_step(tiny_model):
    ids = tiny_model.tokenize(CHINESE)
    with pytest.raises(ValueError):
        tiny_model(np.zeros((1, 1, 4, 4)), 1, ids)
    with pytest.raises(ValueError):
        tiny_model(np.zeros((1, 1, 8, 8)), 21, ids)


def test_padding_tokens_have_no_influence(tiny_model):
    x = np.random.default_rng(1).normal(size=(1, 1, 8, 8)).astype(np.float32)
    ids = tiny_model.tokenize(CHINESE)
    before = tiny_model(x, 3, ids).data
    tiny_model.params["embed.tokens"].data[PAD] += 5.0
    after = tiny_model(x, 3, ids).data
    assert np.array_equal(before, after)


def test_prompt_changes_output(tiny_model):
    x = np.random.default_rng(1).normal(size=(1, 1, 8, 8)).astype(np.float32)
    a = tiny_model(x, 3, tiny_model.tokenize(CHINESE)).data
    b = tiny_model(x, 3, tiny_model.tokenize(MODERN)).data
    assert not np.allclose(a, b)


def test_attention_weights_are_distributions_over_real_tokens(tiny_model):
    cfg = tiny_model.config
    ids = tiny_model.tokenize(["a landscape painting", CHINESE])
    ctx = embed_tokens(ids, tiny_model.params)
    h = ag.Tensor(np.random.default_rng(2).normal(size=(2, cfg.channels[-1], 4, 4)))
    _, w = cross_attention(h, ctx, tiny_model.params, cfg, return_weights=True)
    w = w.data
    np.testing.assert_allclose(w.sum(-1), 1.0, rtol=1e-5)
    assert np.all(w[0][:, 3:] == 0)  # three real tokens in the first prompt


def test_attention_targets_are_bottleneck_matrices(tiny_model):
    targets = attention_targets(tiny_model.params)
    assert {"mid.attn.q.w", "mid.attn.k.w", "mid.attn.v.w", "mid.attn.o.w"} <= set(targets)
    assert all(t.startswith("mid.") and tiny_model.params[t].ndim == 2 for t in targets)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(image_size=10, channels=(8, 16, 32))
    with pytest.raises(ValueError):
        DenoiserConfig(channels=(6, 16), groups=4)
    cfg = tiny_config()
    assert DenoiserConfig.from_dict(cfg.to_dict()) == cfg


def test_same_seed_same_parameters(vocab):
    a = Denoiser.fresh(tiny_config(), vocab, RandomStream(5))
    b = Denoiser.fresh(tiny_config(), vocab, RandomStream(5))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert a.params["embed.tokens"].shape == (len(vocab), 16)
