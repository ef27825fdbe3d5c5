import math

import numpy as np
import pytest

from adept_lab import autograd as ag
from adept_lab.autograd import Tensor
from adept_lab.backbone import BackboneConfig, BackboneModel, attend, pad_batch, pretrain
from adept_lab.errors import ContractError, LengthError
from adept_lab.tasks import TaskSpec, generate

SMALL = BackboneConfig(vocab_size=16, embed_dim=8, heads=2, head_dim=4, layers=2, classes=2,
                       max_content_len=12, max_prompt_len=4, ffn_dim=8)


@pytest.fixture
def model():
    return BackboneModel.init(SMALL, seed=3)


# -- naive oracles ------------------------------------------------------------


def naive_attention(Q, K, W_Q, W_K, W_V, scaled=True):
    """Step-by-step re-computation with python loops."""
    q, k, v = Q @ W_Q, K @ W_K, K @ W_V
    c = 1 / math.sqrt(W_Q.shape[1]) if scaled else 1.0
    out = np.zeros((Q.shape[0], W_V.shape[1]))
    for i in range(Q.shape[0]):
        logits = [c * sum(q[i, a] * k[j, a] for a in range(q.shape[1])) for j in range(K.shape[0])]
        top = max(logits)
        w = [math.exp(x - top) for x in logits]
        total = sum(w)
        for j in range(K.shape[0]):
            out[i] += (w[j] / total) * v[j]
    return out


def naive_layer_norm(x, gain, bias, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((a - mu) ** 2 for a in x) / len(x)
    return np.array([(a - mu) / math.sqrt(var + eps) for a in x]) * gain + bias


def naive_forward(params, ids):
    """One layer, one head, no prompt, straight-line numpy."""
    E = params["embedding"][ids]
    h = np.array([naive_layer_norm(r, params["layer.0.ln1.gain"], params["layer.0.ln1.bias"]) for r in E])
    att = naive_attention(h, h, params["layer.0.head.0.W_Q"], params["layer.0.head.0.W_K"],
                          params["layer.0.head.0.W_V"])
    x = E + att @ params["layer.0.W_O"]
    h = np.array([naive_layer_norm(r, params["layer.0.ln2.gain"], params["layer.0.ln2.bias"]) for r in x])
    f = np.maximum(h @ params["layer.0.ffn.W_in"] + params["layer.0.ffn.b_in"], 0)
    x = x + f @ params["layer.0.ffn.W_out"] + params["layer.0.ffn.b_out"]
    x = np.array([naive_layer_norm(r, params["ln_f.gain"], params["ln_f.bias"]) for r in x])
    return x.mean(axis=0) @ params["W_cls"]


# -- embedding ------------------------------------------------------------------


def test_embed_reads_table_rows(model):
    table = model["embedding"].data
    np.testing.assert_array_equal(model.embed([0, 1, 2, 3, 4]).data, table[:5])
    twice = model.embed([7, 7]).data
    np.testing.assert_array_equal(twice[0], twice[1])


def test_embed_rejects_empty_and_long(model):
    with pytest.raises(LengthError):
        model.embed([])
    with pytest.raises(LengthError):
        model.embed([1] * (SMALL.max_content_len + 1))


# -- attention ------------------------------------------------------------------


def test_single_key_returns_its_value(model):
    rng = np.random.default_rng(0)
    kv = Tensor(rng.standard_normal((1, 8)))
    out = model.attention_head(Tensor(rng.standard_normal((3, 8))), kv)
    expected = kv.data @ model["layer.0.head.0.W_V"].data
    np.testing.assert_allclose(out.data, np.repeat(expected, 3, axis=0), rtol=0, atol=1e-15)


def test_identical_keys_give_uniform_weights(model):
    row = np.random.default_rng(1).standard_normal((1, 8))
    out, w = model.attention(Tensor(np.random.default_rng(2).standard_normal((2, 8))),
                             Tensor(np.repeat(row, 4, axis=0)))
    np.testing.assert_allclose(w.data, 0.25, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.data[0], (row @ model["layer.0.head.0.W_V"].data)[0], atol=1e-14)


@pytest.mark.parametrize("scaled", [True, False])
def test_attention_matches_naive(scaled):
    rng = np.random.default_rng(4)
    Q, K = rng.standard_normal((2, 6)), rng.standard_normal((3, 6))
    W = [rng.standard_normal((6, 3)) for _ in range(3)]
    out, _ = attend(Tensor(Q), Tensor(K), *(Tensor(w) for w in W), scaled=scaled)
    np.testing.assert_allclose(out.data, naive_attention(Q, K, *W, scaled=scaled), rtol=0, atol=1e-13)


def test_scaling_is_identity_at_head_dim_one():
    rng = np.random.default_rng(5)
    Q, K = Tensor(rng.standard_normal((2, 4))), Tensor(rng.standard_normal((5, 4)))
    W = [Tensor(rng.standard_normal((4, 1))) for _ in range(3)]
    a, _ = attend(Q, K, *W, scaled=True)
    b, _ = attend(Q, K, *W, scaled=False)
    np.testing.assert_array_equal(a.data, b.data)


# -- forward --------------------------------------------------------------------


def test_zero_classifier_gives_uniform_prediction(model):
    model["W_cls"].data[:] = 0
    logits = model.forward(model.embed([3, 4, 5]))
    np.testing.assert_array_equal(logits.data, [[0.0, 0.0]])
    probs = ag.row_softmax(logits).data
    np.testing.assert_array_equal(probs, [[0.5, 0.5]])


def test_micro_model_matches_straight_line_oracle():
    cfg = BackboneConfig(vocab_size=10, embed_dim=4, heads=1, head_dim=4, layers=1, classes=2,
                         max_content_len=8, max_prompt_len=2, ffn_dim=6)
    m = BackboneModel.init(cfg, seed=11)
    rng = np.random.default_rng(12)
    for name in ("layer.0.ln1.gain", "layer.0.ln1.bias", "layer.0.ffn.b_in", "ln_f.bias"):
        m[name].data[:] = rng.uniform(-1, 1, size=m[name].shape)
    ids = [1, 5, 2, 9, 5]
    params = {n: t.data for n, t in m.params.items()}
    np.testing.assert_allclose(m.forward(m.embed(ids)).data[0], naive_forward(params, ids),
                               rtol=0, atol=1e-12)


def test_padding_positions_are_ignored(model):
    seqs = [(3, 4, 5), (6, 7, 8, 9, 10)]
    ids, mask = pad_batch(seqs)
    base = model.forward(model.embed(ids), mask).data
    # fill the padded slots of row 0 with other tokens: still masked out
    ids2 = ids.copy()
    ids2[0, 3:] = [14, 15]
    np.testing.assert_array_equal(model.forward(model.embed(ids2), mask).data, base)
    # permute padding-only positions together with their (False) mask entries
    ids3, mask3 = ids2.copy(), mask.copy()
    ids3[0, 3], ids3[0, 4] = ids2[0, 4], ids2[0, 3]
    np.testing.assert_array_equal(model.forward(model.embed(ids3), mask3).data, base)
    alone = model.forward(model.embed([3, 4, 5])).data
    np.testing.assert_allclose(base[0], alone[0], rtol=0, atol=1e-14)


def test_content_permutation_invariance(model):
    ids = [3, 9, 4, 12, 5, 7]
    base = model.forward(model.embed(ids)).data
    rng = np.random.default_rng(0)
    for _ in range(10):
        perm = rng.permutation(len(ids))
        out = model.forward(model.embed([ids[i] for i in perm])).data
        # summation order changes with the permutation, so allow fp64 reassociation
        np.testing.assert_allclose(out, base, rtol=0, atol=1e-12)


def test_learned_positions_break_permutation_invariance():
    cfg = BackboneConfig(**{**SMALL.__dict__, "positional_mode": "learned-absolute"})
    m = BackboneModel.init(cfg, seed=3)
    a = m.forward(m.embed([3, 9, 4])).data
    b = m.forward(m.embed([4, 9, 3])).data
    assert np.abs(a - b).max() > 1e-6


def test_prompt_plus_content_length_limit(model):
    E = model.embed([3, 4, 5])
    P = Tensor(np.random.default_rng(0).standard_normal((2, 8)))
    assert model.classify(P, E, np.ones(3, dtype=bool)).shape == (1, 2)
    long_prompt = Tensor(np.zeros((SMALL.max_prompt_len + 1, 8)))
    with pytest.raises(LengthError):
        model.classify(long_prompt, model.embed([1] * SMALL.max_content_len), None)


def test_config_validation():
    with pytest.raises(ContractError):
        BackboneConfig(embed_dim=0)
    with pytest.raises(ContractError):
        BackboneConfig(positional_mode="rotary")


# -- pretraining ----------------------------------------------------------------


def _suite(n=60):
    spec = TaskSpec(kind="keyed-presence", key=9, vocab_size=16, content_start=8, min_len=3,
                    max_len=8, marker=2)
    return [(2, generate(spec, n).train)]


def test_pretrain_zero_steps_is_identity(model):
    before = model.checksum()
    pretrain(model, _suite(), steps=0)
    assert model.checksum() == before


def test_pretrain_loss_decreases_and_freeze_holds():
    m = BackboneModel.init(SMALL, seed=1)
    history: list[float] = []
    pretrain(m, _suite(200), steps=300, lr=0.1, batch_size=16, seed=0, history=history)
    assert len(history) == 300
    assert np.mean(history[-100:]) < np.mean(history[:100])
    m.freeze()
    assert m.frozen
    frozen_sum = m.checksum()
    x = Tensor(np.zeros((1, 8)), requires_grad=True)
    ag.backward(ag.sum(m.classify(x, m.embed([9, 10]), None)))
    assert all(t.grad is None for t in m.tensors())
    assert m.checksum() == frozen_sum


def test_checkpoint_round_trip(tmp_path, model):
    path = tmp_path / "bb.json"
    model.save(path)
    back = BackboneModel.load(path)
    assert back.config == model.config
    assert back.checksum() == model.checksum()
    ids, mask = pad_batch([(3, 4), (5, 6, 7)])
    np.testing.assert_array_equal(back.forward(back.embed(ids), mask).data,
                                  model.forward(model.embed(ids), mask).data)


def test_init_is_deterministic():
    assert BackboneModel.init(SMALL, 7).checksum() == BackboneModel.init(SMALL, 7).checksum()
    assert BackboneModel.init(SMALL, 7).checksum() != BackboneModel.init(SMALL, 8).checksum()
