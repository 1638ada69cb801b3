import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import model_gradient_errors
from quantsel.confidence import maxprob
from quantsel.errors import ValidationError
from quantsel.mbq import EqualizationPlan
from quantsel.model import (
    MMInput, Model, ModelConfig, backprop, forward, greedy_decode, greedy_decode_batch, init_model,
    kl_divergence_logits, param_count, quantize_model, quantize_weights, softmax,
)
from quantsel.tensor_quant import Method, QuantSpec

CFG = ModelConfig(d_model=16, n_layers=2, n_heads=4, vocab_size=20, max_seq=12, seed=7)


def naive_forward(model, tokens):
    """Position-by-position reference for a single sequence."""
    p, cfg = model.params, model.cfg
    dh = cfg.d_model // cfg.n_heads

    def ln(x, g, b):
        mu = sum(x) / len(x)
        var = sum((xi - mu) ** 2 for xi in x) / len(x)
        return np.array([(xi - mu) / math.sqrt(var + 1e-5) * gi + bi for xi, gi, bi in zip(x, g, b)])

    def gelu(u):
        return 0.5 * u * (1 + math.tanh(math.sqrt(2 / math.pi) * (u + 0.044715 * u**3)))

    xs = [p["tok_emb"][t] + p["pos_emb"][i] for i, t in enumerate(tokens)]
    for layer in range(cfg.n_layers):
        b = f"blocks.{layer}."
        hs = [ln(x, p[b + "ln1.g"], p[b + "ln1.b"]) for x in xs]
        qs = [p[b + "attn.wq"] @ h for h in hs]
        ks = [p[b + "attn.wk"] @ h for h in hs]
        vs = [p[b + "attn.wv"] @ h for h in hs]
        new = []
        for i in range(len(xs)):
            o = np.zeros(cfg.d_model)
            for hd in range(cfg.n_heads):
                sl = slice(hd * dh, (hd + 1) * dh)
                scores = [float(qs[i][sl] @ ks[j][sl]) / math.sqrt(dh) for j in range(i + 1)]
                m = max(scores)
                w = [math.exp(s - m) for s in scores]
                z = sum(w)
                for j in range(i + 1):
                    o[sl] += w[j] / z * vs[j][sl]
            x = xs[i] + p[b + "attn.wo"] @ o
            h2 = ln(x, p[b + "ln2.g"], p[b + "ln2.b"])
            u = p[b + "mlp.w1"] @ h2
            x = x + p[b + "mlp.w2"] @ np.array([gelu(v) for v in u])
            new.append(x)
        xs = new
    return np.array([p["head"] @ ln(x, p["ln_f.g"], p["ln_f.b"]) for x in xs])


# --- construction ---------------------------------------------------------------


def test_same_seed_same_bytes():
    assert init_model(CFG).weight_bytes() == init_model(CFG).weight_bytes()
    assert init_model(CFG).weight_bytes() != init_model(ModelConfig(**{**CFG.__dict__, "seed": 8})).weight_bytes()


def test_config_validation():
    with pytest.raises(ValidationError, match="divisible"):
        ModelConfig(d_model=8, n_heads=3)
    with pytest.raises(ValidationError):
        ModelConfig(n_layers=0)


@pytest.mark.parametrize("cfg", [CFG, ModelConfig(), ModelConfig(d_model=6, n_layers=3, n_heads=2, vocab_size=5, max_seq=4)])
def test_param_count(cfg):
    m = init_model(cfg)
    assert sum(v.size for v in m.params.values()) == param_count(cfg)
    d, v = cfg.d_model, cfg.vocab_size
    # embeddings + head, positions, per block (4 attn + 2 mlp mats + 2 norms), final norm
    assert param_count(cfg) == v * d + cfg.max_seq * d + cfg.n_layers * (4 * d * d + 8 * d * d + 4 * d) + 2 * d + v * d


# --- forward ----------------------------------------------------------------------


def test_forward_matches_naive_reference(rng):
    model = init_model(CFG)
    toks = rng.integers(0, CFG.vocab_size, 9)
    assert np.max(np.abs(forward(model, toks)[0] - naive_forward(model, toks))) < 1e-10


def test_forward_batch_rows_independent(rng):
    model = init_model(CFG)
    toks = rng.integers(0, CFG.vocab_size, (3, 7))
    batch = forward(model, toks)
    for i in range(3):
        assert np.allclose(batch[i], forward(model, toks[i])[0], atol=1e-13, rtol=0)


@given(st.integers(0, 2**32 - 1))
def test_causality(seed):
    rng = np.random.default_rng(seed)
    model = init_model(CFG)
    n = int(rng.integers(2, CFG.max_seq + 1))
    toks = rng.integers(0, CFG.vocab_size, n)
    k = int(rng.integers(0, n - 1))
    other = toks.copy()
    other[k + 1:] = rng.integers(0, CFG.vocab_size, n - k - 1)
    a, b = forward(model, toks)[0], forward(model, other)[0]
    assert np.array_equal(a[: k + 1], b[: k + 1])


@given(st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    logits = forward(init_model(CFG), rng.integers(0, CFG.vocab_size, (2, 8)))
    assert np.all(np.abs(softmax(logits).sum(axis=-1) - 1) < 1e-6)


def test_forward_validation():
    model = init_model(CFG)
    with pytest.raises(ValidationError, match="out of range"):
        forward(model, [1, CFG.vocab_size])
    with pytest.raises(ValidationError, match="max_seq"):
        forward(model, [1] * (CFG.max_seq + 1))


# --- greedy decoding --------------------------------------------------------------


def hand_model():
    cfg = ModelConfig(d_model=2, n_layers=1, n_heads=1, vocab_size=2, max_seq=8, seed=0)
    p = {k: np.zeros_like(v) for k, v in init_model(cfg).params.items()}
    for k in p:
        if k.endswith(".g"):
            p[k] = np.ones_like(p[k])
    p["tok_emb"] = np.eye(2)
    p["head"] = np.array([[0.0, 1.0], [1.0, 0.0]])
    return Model(cfg, p)


def test_hand_weighted_decode():
    # blocks add nothing; final norm maps e0 -> (s, -s), the head swaps, so the
    # next token is always the other one with probability sigmoid(2s)
    s = 0.5 / math.sqrt(0.25 + 1e-5)
    prob = 1 / (1 + math.exp(-2 * s))
    g = greedy_decode(hand_model(), MMInput((), (0,)), max_new=5)
    assert g.answer_tokens == (1, 0, 1, 0, 1)
    assert g.step_probs == pytest.approx([prob] * 5, abs=1e-15)
    assert g.features.p == pytest.approx(prob**5, abs=1e-15)
    assert np.allclose(g.features.o1, [s, -s])


def test_decode_stops_at_eos():
    g = greedy_decode(hand_model(), MMInput((1,), (0,)), max_new=5, eos_id=0)
    assert g.answer_tokens == (1, 0)


def test_argmax_ties_to_lowest_id():
    m = hand_model()
    m.params["head"] = np.zeros((2, 2))
    g = greedy_decode(m, MMInput((), (1,)), max_new=2)
    assert g.answer_tokens == (0, 0) and g.step_probs == (0.5, 0.5)


def test_greedy_deterministic_and_p_is_product(rng):
    model = init_model(CFG)
    xs = [MMInput(tuple(rng.integers(0, 20, 3)), tuple(rng.integers(0, 20, int(rng.integers(1, 4))))) for _ in range(8)]
    a = greedy_decode_batch(model, xs, 4)
    b = [greedy_decode(model, x, 4) for x in xs]
    for g1, g2 in zip(a, b):
        assert g1.answer_tokens == g2.answer_tokens and g1.features == g2.features
        assert len(g1.step_probs) == len(g1.answer_tokens)
        assert all(0 < q <= 1 for q in g1.step_probs)
        assert abs(g1.features.p - math.prod(g1.step_probs)) <= 1e-12
        assert g1.features.p == maxprob(g1)
        assert np.all(np.isfinite(g1.features.as_array()))


def test_features_pool_the_right_positions(rng):
    from quantsel.model import forward_with_cache
    model = init_model(CFG)
    x = MMInput((3, 4, 5), (6, 7))
    g = greedy_decode(model, x, 2)
    _, cache = forward_with_cache(model, list(x.prompt))
    hid = cache["hidden"][0]
    assert np.array_equal(g.features.v, hid[:3].max(axis=0))
    assert np.array_equal(g.features.q, hid[3:5].max(axis=0))
    assert np.array_equal(g.features.o1, hid[4])


def test_text_only_input_allowed_empty_question_rejected():
    model = init_model(CFG)
    assert np.array_equal(greedy_decode(model, MMInput((), (1, 2)), 2).features.v, np.zeros(CFG.d_model))
    with pytest.raises(ValidationError, match="question"):
        greedy_decode(model, MMInput((1, 2), ()), 2)
    with pytest.raises(ValidationError, match="max_seq"):
        greedy_decode(model, MMInput((1,) * 8, (2,) * 3), 2)


# --- quantization -----------------------------------------------------------------


def probe_inputs(rng, n=40):
    return [MMInput(tuple(rng.integers(0, 20, 4)), tuple(rng.integers(0, 20, 3))) for _ in range(n)]


def test_noop_spec_identity(rng):
    model = init_model(CFG)
    xs = probe_inputs(rng)
    same = quantize_model(model, None)
    assert same.weight_bytes() == model.weight_bytes()
    for g1, g2 in zip(greedy_decode_batch(model, xs, 3), greedy_decode_batch(same, xs, 3)):
        assert g1.answer_tokens == g2.answer_tokens and g1.step_probs == g2.step_probs


def test_weight_only_contract(rng):
    model = init_model(CFG)
    q = quantize_model(model, QuantSpec(bits=3, group_size=16))
    for name, v in model.params.items():
        if name in model.linear_names():
            assert not np.array_equal(v, q.params[name])
        else:
            assert v.tobytes() == q.params[name].tobytes()


def test_kl_ordering_and_answer_changes(rng):
    model = init_model(CFG)
    toks = rng.integers(0, 20, (40, 10))
    ref = forward(model, toks)
    kl = {b: kl_divergence_logits(ref, forward(quantize_model(model, QuantSpec(bits=b, group_size=16)), toks))
          for b in (3, 4, 8)}
    assert kl[8] <= kl[4] <= kl[3]
    xs = probe_inputs(rng)
    q3 = quantize_model(model, QuantSpec(bits=3, group_size=16))
    a = [g.answer_tokens for g in greedy_decode_batch(model, xs, 3)]
    b = [g.answer_tokens for g in greedy_decode_batch(q3, xs, 3)]
    assert a != b


def test_kl_is_zero_for_identical_and_positive_otherwise(rng):
    logits = rng.normal(size=(2, 5, 7))
    assert kl_divergence_logits(logits, logits) == 0.0
    assert kl_divergence_logits(logits, logits + rng.normal(size=logits.shape)) > 0


def test_plan_dimension_mismatch_rejected():
    model = init_model(CFG)
    name = model.linear_names()[0]
    with pytest.raises(ValidationError, match="input channels"):
        quantize_weights(model, QuantSpec(bits=4, group_size=16), {name: EqualizationPlan(np.ones(3), 0.0)})
    with pytest.raises(ValidationError, match="unknown"):
        quantize_weights(model, QuantSpec(bits=4, group_size=16), {"nope": EqualizationPlan(np.ones(3), 0.0)})


def test_equalized_quantization_is_undone(rng):
    model = init_model(CFG)
    name = "blocks.0.mlp.w1"
    s = rng.uniform(0.5, 2.0, CFG.d_model)
    qw = quantize_weights(model, QuantSpec(bits=8, group_size=16, method=Method.RTN), {name: EqualizationPlan(s, 0.5)})
    from quantsel.model import model_from_quantized
    qm = model_from_quantized(model, qw)
    assert np.max(np.abs(qm.params[name] - model.params[name])) < 0.05


# --- backprop ---------------------------------------------------------------------


def test_backprop_matches_finite_differences(rng):
    model = init_model(ModelConfig(d_model=8, n_layers=2, n_heads=2, vocab_size=11, max_seq=8, seed=3))
    errs = model_gradient_errors(model, rng.integers(0, 11, (2, 6)), rng)
    assert max(errs.values()) < 1e-4, errs


def test_backprop_masked_targets_match_finite_differences(rng):
    model = init_model(ModelConfig(d_model=8, n_layers=1, n_heads=4, vocab_size=9, max_seq=8, seed=4))
    toks = rng.integers(0, 9, (3, 5))
    targets = rng.integers(0, 9, (3, 5))
    mask = rng.random((3, 5)) < 0.6
    mask[0, 0] = True
    errs = model_gradient_errors(model, toks, rng, targets, mask)
    assert max(errs.values()) < 1e-4, errs


def test_duplicated_batch_doubles_gradient(rng):
    model = init_model(CFG)
    toks = rng.integers(0, 20, (2, 6))
    l1, g1, _ = backprop(model, toks)
    l2, g2, _ = backprop(model, np.concatenate([toks, toks]))
    assert l2 == pytest.approx(2 * l1, rel=1e-12)
    for k in g1:
        assert np.allclose(g2[k], 2 * g1[k], rtol=1e-10, atol=1e-13)


def test_saturated_targets_give_near_zero_gradient():
    m = hand_model()
    m.params["head"] *= 200  # logits +-200s: the alternating target is certain
    toks = np.array([[0, 1, 0, 1, 0, 1]])
    loss, grads, dx = backprop(m, toks)
    assert loss < 1e-100
    assert max(np.max(np.abs(g)) for g in grads.values()) < 1e-100
