import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from itdd import nn
from itdd import tensor as T
from itdd.gradcheck import TINY, tiny_batch
from itdd.model import (ITE_CKAD, ITE_DD, KAT, VARIANTS, ContextState, ITDDModel, ModelConfig,
                        expected_parameter_count)
from itdd.nn import ConfigError
from itdd.tensor import Tensor
from itdd.train import batch_loss


def tiny(variant=ITE_DD, **kw):
    return ITDDModel(ModelConfig(**{**TINY, **kw}, variant=variant))


def ids(rng, n, lo=4, hi=11):
    return rng.integers(lo, hi, size=(1, n))


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shapes(variant):
    model = tiny(variant)
    batch = tiny_batch(np.random.default_rng(0))
    out = model(batch)
    assert out.logits1.shape == batch.tgt_in.shape + (11,)
    assert (out.logits2 is not None) == (variant == ITE_DD)
    if variant == ITE_DD:
        assert out.draft.shape == batch.tgt_out.shape
        assert ((out.draft == 0) == (batch.tgt_out == 0)).all()


def _independent_count(v, d, f, nx, nu, ny, variant):
    # count by listing weight matrices one by one
    attn = [d * d] * 4 + [d, d]          # four projections + one layer norm
    ffn = [d * f, f, f * d, d, d, d]      # w1 b1 w2 b2 + layer norm
    layer = lambda n_cross: sum(attn) * (1 + n_cross) + sum(ffn)
    emb, out = v * d, d * v + v
    if variant == ITE_DD:
        return emb + out + 2 * nx * layer(0) + nu * layer(2) + 2 * ny * layer(2)
    if variant == ITE_CKAD:
        return emb + out + nx * layer(0) + nu * layer(2) + ny * layer(2)
    return emb + out + nx * layer(0) + nu * layer(1) + ny * layer(1)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("dims", [(11, 8, 16, 1, 1, 1), (68, 32, 64, 2, 1, 3)])
def test_parameter_count(variant, dims):
    v, d, f, nx, nu, ny = dims
    cfg = ModelConfig(vocab_size=v, d_model=d, heads=2, d_ff=f, n_x=nx, n_u=nu, n_y=ny, variant=variant)
    model = ITDDModel(cfg)
    assert model.parameter_count() == expected_parameter_count(cfg) == _independent_count(*dims, variant)


def test_document_and_utterance_encoders_differ():
    model = tiny()
    x = ids(np.random.default_rng(1), 5)
    assert not np.allclose(model.sa_encode(x, "document").states.data, model.sa_encode(x, "utterance").states.data)


def test_variants_lack_unused_components():
    with pytest.raises(ConfigError):
        tiny(KAT).encode_incremental(ContextState.empty(), None, [[4, 5]])
    with pytest.raises(ConfigError):
        tiny(ITE_CKAD).sa_encode([[4, 5]], "utterance")


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=11, d_model=8, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=11, variant="nope")
    cfg = ModelConfig(**TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_encode_dialogue_requires_one_document_per_turn():
    with pytest.raises(ConfigError):
        tiny().encode_dialogue([[[4, 5]], [[6]]], [[[7, 8]]])


def test_encoder_layer_matches_hand_composition():
    model = tiny()
    rng = np.random.default_rng(2)
    x = ids(rng, 4)
    layer = model.sa_s[0]
    h = model.embedding(x)
    m = np.ones((1, 1, 4), dtype=bool)
    h = T.layer_norm(T.add(h, layer.self_attn(h, h, h, m)), layer.self_norm.gain, layer.self_norm.bias)
    f = T.add(T.matmul(T.relu(T.add(T.matmul(h, layer.ffn.w1), layer.ffn.b1)), layer.ffn.w2), layer.ffn.b2)
    expected = T.layer_norm(T.add(h, f), layer.ffn_norm.gain, layer.ffn_norm.bias)
    np.testing.assert_array_equal(model.sa_encode(x, "document").states.data, expected.data)


def test_empty_context_bypasses_context_attention_bitwise():
    model = tiny()
    rng = np.random.default_rng(3)
    doc = model.sa_encode(ids(rng, 6), "document")
    utt = ids(rng, 4)
    got = model.encode_incremental(ContextState.empty(), doc, utt).states.data
    # same weights, context sublayer deleted
    layer = model.ite[0]
    h = model.embedding(utt)
    mask = np.ones((1, 1, 4), dtype=bool)
    h = nn.sublayer(h, lambda t: layer.self_attn(t, t, t, mask), layer.self_norm)
    h = nn.sublayer(h, lambda t: layer.cross["knowledge"](t, doc.states, doc.states, doc.mask[:, None, :]),
                    layer.cross_norm["knowledge"])
    h = nn.sublayer(h, layer.ffn, layer.ffn_norm)
    assert np.array_equal(got, h.data)


def test_context_changes_state_when_present():
    model = tiny()
    rng = np.random.default_rng(4)
    doc = model.sa_encode(ids(rng, 6), "document")
    utt = ids(rng, 3)
    prev = model.encode_incremental(ContextState.empty(), doc, ids(rng, 5))
    a = model.encode_incremental(ContextState.empty(), doc, utt).states.data
    b = model.encode_incremental(prev, doc, utt).states.data
    assert not np.allclose(a, b)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 3))
def test_turn_causality(seed, k):
    model = tiny()
    rng = np.random.default_rng(seed)
    utts = [ids(rng, int(rng.integers(1, 5))) for _ in range(4)]
    docs = [ids(rng, int(rng.integers(1, 6))) for _ in range(4)]
    state = ContextState.empty()
    for j in range(4):
        state = model.encode_incremental(state, model.sa_encode(docs[j], "document"), utts[j])
        if j == k - 1:
            kept = state.states.data.copy()
    assert np.array_equal(model.encode_dialogue(utts[:k], docs[:k]).states.data, kept)


@pytest.mark.parametrize("variant", VARIANTS)
def test_decoder_causality(variant):
    model = tiny(variant)
    rng = np.random.default_rng(5)
    batch = tiny_batch(rng)
    draft = model(batch).draft
    base = model(batch, draft=draft).final.data
    length = batch.tgt_in.shape[1]
    for i in range(length - 1):
        changed = batch.tgt_in.copy()
        changed[:, i + 1:] = rng.integers(4, 11, size=changed[:, i + 1:].shape)
        batch2 = type(batch)(**{**vars(batch), "tgt_in": changed})
        out = model(batch2, draft=draft).final.data
        assert np.array_equal(out[:, : i + 1], base[:, : i + 1])


def test_kat_invariant_to_turn_segmentation():
    model = tiny(KAT)
    rng = np.random.default_rng(6)
    stream = ids(rng, 7)[0]
    doc = model.sa_encode(ids(rng, 5), "document")
    prefix = np.array([[2, 5, 6]])
    outs = []
    for cut in ([2, 5], [1], [3, 4, 6]):
        turns = np.split(stream, cut)
        enc = model.encode_concatenated(np.concatenate(turns)[None], doc)
        outs.append(model.decode_kat(prefix, enc).data)
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_parameter_receives_gradient(variant):
    model = tiny(variant)
    batch = tiny_batch(np.random.default_rng(7))
    batch_loss(model, batch).total.backward()
    for path, p in model.parameters().items():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, path


def test_draft_choice_carries_no_gradient_to_first_pass():
    # L_mle2 alone must not reach the first-pass decoder
    model = tiny()
    batch = tiny_batch(np.random.default_rng(8))
    rep = batch_loss(model, batch)
    rep.pass2.backward()
    for path, p in model.parameters().items():
        if path.startswith("decoder1") or path.startswith("ite"):
            assert p.grad is None or not p.grad.any(), path


def test_pad_positions_do_not_change_valid_outputs():
    model = tiny(ITE_CKAD)
    rng = np.random.default_rng(9)
    batch = tiny_batch(rng)
    base = model(batch).final.data
    grown = {k: v for k, v in vars(batch).items()}
    grown["tgt_in"] = np.pad(batch.tgt_in, ((0, 0), (0, 2)))
    grown["tgt_out"] = np.pad(batch.tgt_out, ((0, 0), (0, 2)))
    out = model(type(batch)(**grown)).final.data
    valid = batch.tgt_out != 0
    np.testing.assert_allclose(out[:, : base.shape[1]][valid], base[valid], rtol=1e-12, atol=1e-12)


def test_dropout_only_in_training_mode():
    model = tiny(dropout=0.3)
    batch = tiny_batch(np.random.default_rng(10))
    a = model(batch).final.data
    model.set_training(np.random.default_rng(0))
    b = model(batch).final.data
    model.set_training(None)
    assert not np.allclose(a, b)
    assert np.array_equal(a, model(batch).final.data)


def test_tied_output_uses_embedding():
    model = tiny(tie_output=True)
    assert "out_w" not in model.parameters()
    h = Tensor(np.ones((1, 1, 8)))
    np.testing.assert_allclose(model.project(h).data[0, 0], model.embedding.table.data.sum(axis=1))
