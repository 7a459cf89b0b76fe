import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import attention_reference, numeric_grad, rel_error, softmax_reference
from shalrt.errors import AlignmentError, ConfigError
from shalrt.nn.modules import MultiHeadAttention
from shalrt.nn.tensor import Tensor, no_grad
from shalrt.sha import HistoryEmbeddings, SalientHistoryAttention, ShaConfig, sha_forward


def ln_ref(x, norm):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + norm.eps) * norm.gain.data + norm.bias.data


def mha_ref(attn, q_src, k_src, v_src, key_mask=None):
    q, k, v = q_src @ attn.wq.data.T, k_src @ attn.wk.data.T, v_src @ attn.wv.data.T
    return attention_reference(q, k, v, attn.heads, key_mask) @ attn.wo.data.T


def ffn_ref(ffn, x):
    h = np.maximum(x @ ffn.inner.weight.data.T + ffn.inner.bias.data, 0)
    return h @ ffn.outer.weight.data.T + ffn.outer.bias.data


def layer_ref(layer, x, E_u, E_r, hmask, variant, ablation="full"):
    """One history layer on a single unbatched example."""
    H_c = ln_ref(x + mha_ref(layer.self_attn, x, x, x), layer.norm_c)
    has = hmask.any()
    res_keys = E_r if ablation == "result_only" else E_u
    if variant == "sequential":
        H = H_c
        if has and ablation in ("full", "utterance_only"):
            H = ln_ref(H + mha_ref(layer.hist_utt_attn, H, E_u, E_u, hmask), layer.norm_u)
        if has and ablation != "utterance_only":
            H = ln_ref(H + mha_ref(layer.hist_res_attn, H, res_keys, E_r, hmask), layer.norm_r)
    else:
        merged = H_c
        if has and ablation in ("full", "utterance_only"):
            merged = merged + mha_ref(layer.hist_utt_attn, H_c, E_u, E_u, hmask)
        if has and ablation != "utterance_only":
            merged = merged + mha_ref(layer.hist_res_attn, H_c, res_keys, E_r, hmask)
        H = ln_ref(merged, layer.norm_u)
    return ln_ref(H + ffn_ref(layer.ffn, H), layer.norm_out)


def sha_ref(module, e, E_u, E_r, hmask):
    out = []
    for b in range(e.shape[0]):
        x = e[b]
        for layer in module.layers:
            x = layer_ref(layer, x, E_u[b], E_r[b], hmask[b], module.cfg.variant, module.cfg.ablation)
        out.append(x + e[b])
    return np.stack(out)


def build(variant="sequential", ablation="full", n_layers=1, d=8, heads=2, seed=0):
    cfg = ShaConfig(n_layers=n_layers, d_model=d, heads=heads, variant=variant, ablation=ablation)
    return SalientHistoryAttention(cfg, 3, 5, np.random.default_rng(seed))


def inputs(B=2, n=4, L_h=6, d=8, seed=1, empty_rows=()):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(B, n, d))
    E_u = rng.normal(size=(B, L_h, d))
    E_r = rng.normal(size=(B, L_h, d))
    mask = np.ones((B, L_h), bool)
    mask[:, L_h - 2:] = False
    for r in empty_rows:
        mask[r] = False
    return e, E_u, E_r, mask


def run(module, e, E_u, E_r, mask):
    with no_grad():
        return sha_forward(module, Tensor(e), HistoryEmbeddings(Tensor(E_u), Tensor(E_r), mask)).data


def test_attention_closed_form():
    attn = MultiHeadAttention(2, 1, np.random.default_rng(0))
    for w in (attn.wq, attn.wk, attn.wv, attn.wo):
        w.data[...] = np.eye(2)
    q = Tensor(np.array([[[1.0, 0.0]]]))
    kv = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    w = np.exp(1 / np.sqrt(2)) / (np.exp(1 / np.sqrt(2)) + 1)
    out = attn(q, kv, kv).data[0, 0]
    assert np.allclose(out, [w, 1 - w], atol=1e-12)


def test_attention_matches_brute_force():
    rng = np.random.default_rng(2)
    attn = MultiHeadAttention(8, 2, rng)
    q, k = rng.normal(size=(1, 3, 8)), rng.normal(size=(1, 5, 8))
    mask = np.array([True, True, False, True, False])
    got = attn(Tensor(q), Tensor(k), Tensor(k), mask[None, None, None, :]).data[0]
    assert np.allclose(got, mha_ref(attn, q[0], k[0], k[0], mask), atol=1e-12)


@pytest.mark.parametrize("variant", ["sequential", "parallel"])
@pytest.mark.parametrize("ablation", ["full", "utterance_only", "result_only", "result_attention_only"])
def test_layer_matches_reference(variant, ablation):
    module = build(variant, ablation, n_layers=2)
    e, E_u, E_r, mask = inputs(B=3, empty_rows=(2,))
    assert np.allclose(run(module, e, E_u, E_r, mask), sha_ref(module, e, E_u, E_r, mask), atol=1e-10)


@pytest.mark.parametrize("variant", ["sequential", "parallel"])
def test_empty_history_row_equals_no_history(variant):
    module = build(variant)
    e, E_u, E_r, mask = inputs(empty_rows=(1,))
    batched = run(module, e, E_u, E_r, mask)
    with no_grad():
        alone = sha_forward(module, Tensor(e[1:2]), None).data
    assert np.allclose(batched[1], alone[0], atol=1e-12)


def test_sequential_empty_history_skips_history_norms():
    module = build("sequential")
    layer = module.layers[0]
    e, *_ = inputs(B=1)
    H_c = ln_ref(e[0] + mha_ref(layer.self_attn, e[0], e[0], e[0]), layer.norm_c)
    expected = ln_ref(H_c + ffn_ref(layer.ffn, H_c), layer.norm_out) + e[0]
    with no_grad():
        got = sha_forward(module, Tensor(e), None).data[0]
    assert np.allclose(got, expected, atol=1e-12)


def test_zero_results_reduce_to_norm_of_utterance_branch():
    module = build("sequential")
    layer = module.layers[0]
    e, E_u, _, mask = inputs(B=1)
    E_r = np.zeros_like(E_u)
    x = e[0]
    H_c = ln_ref(x + mha_ref(layer.self_attn, x, x, x), layer.norm_c)
    H_u = ln_ref(H_c + mha_ref(layer.hist_utt_attn, H_c, E_u[0], E_u[0], mask[0]), layer.norm_u)
    H_r = ln_ref(H_u, layer.norm_r)
    expected = ln_ref(H_r + ffn_ref(layer.ffn, H_r), layer.norm_out) + x
    assert np.allclose(run(module, e, E_u, E_r, mask)[0], expected, atol=1e-12)


def test_shapes():
    module = build(d=16, heads=4)
    e, E_u, E_r, mask = inputs(B=2, n=4, L_h=7, d=16)
    assert run(module, e, E_u, E_r, mask).shape == (2, 4, 16)


def test_layer_count():
    one, three = build(n_layers=1), build(n_layers=3)
    assert len(three.layers) == 3
    per_layer = len(one.layers[0].parameters())
    assert len(three.parameters()) - len(one.parameters()) == 2 * per_layer
    e, E_u, E_r, mask = inputs()
    assert not np.allclose(run(one, e, E_u, E_r, mask), run(three, e, E_u, E_r, mask))


@pytest.mark.parametrize("variant", ["sequential", "parallel"])
def test_masked_history_is_ignored(variant):
    module = build(variant)
    e, E_u, E_r, mask = inputs()
    base = run(module, e, E_u, E_r, mask)
    E_u2, E_r2 = E_u.copy(), E_r.copy()
    E_u2[~mask] = 1e3
    E_r2[~mask] = -1e3
    assert np.array_equal(base, run(module, e, E_u2, E_r2, mask))


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_salience_grows_with_key_alignment(a, b):
    """A history key more aligned with the query gets more attention mass."""
    attn = MultiHeadAttention(4, 1, np.random.default_rng(0))
    for w in (attn.wq, attn.wk):
        w.data[...] = np.eye(4)
    q = np.array([[[1.0, 0.0, 0.0, 0.0]]])
    others = np.array([[0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])

    def weight(scale):
        keys = np.vstack([[scale, 0.0, 0.0, 0.0], others])[None]
        return attn.weights(Tensor(q), Tensor(keys))[0, 0, 0, 0]

    lo, hi = sorted((a, b))
    assert weight(lo) <= weight(hi) + 1e-15
    assert np.isclose(weight(lo), softmax_reference(np.array([lo, 0.0, 0.0]) / 2.0)[0])


@pytest.mark.parametrize("variant", ["sequential", "parallel"])
def test_gradients_match_finite_differences(variant):
    module = build(variant, d=4, heads=2)
    e, E_u, E_r, mask = inputs(B=2, n=3, L_h=4, d=4, empty_rows=(1,))
    weights = np.random.default_rng(5).normal(size=e.shape)
    e_t, u_t, r_t = Tensor(e, requires_grad=True), Tensor(E_u, requires_grad=True), Tensor(E_r, requires_grad=True)

    def loss():
        return (sha_forward(module, e_t, HistoryEmbeddings(u_t, r_t, mask)) * Tensor(weights)).sum()

    out = loss()
    module.zero_grad()
    out.backward()
    checks = [(e_t, e), (u_t, E_u), (r_t, E_r)] + [(p, p.data) for p in module.parameters()]
    analytic = [t.grad.copy() for t, _ in checks]
    for (t, arr), g in zip(checks, analytic):
        assert rel_error(g, numeric_grad(loss, arr)) < 1e-6


def test_output_is_residual_over_input():
    module = build()
    e, E_u, E_r, mask = inputs()
    hist = HistoryEmbeddings(Tensor(E_u), Tensor(E_r), mask)
    with no_grad():
        x = Tensor(e)
        for layer in module.layers:
            x = layer(x, hist, np.ones(e.shape[:2], bool))
    assert np.allclose(run(module, e, E_u, E_r, mask), x.data + e, atol=1e-14)


def test_off_is_identity():
    module = build(ablation="off")
    e, E_u, E_r, mask = inputs()
    assert np.array_equal(run(module, e, E_u, E_r, mask), e)
    assert module.parameters() == []


def test_parallel_parameters_are_subset_of_sequential():
    seq = {n for n, _ in build("sequential").named_parameters()}
    par = {n for n, _ in build("parallel").named_parameters()}
    assert par < seq


def test_unknown_ablation_and_variant():
    with pytest.raises(ConfigError):
        ShaConfig(ablation="both")
    with pytest.raises(ConfigError):
        ShaConfig(variant="diagonal")


def test_misaligned_history_sides():
    with pytest.raises(AlignmentError):
        HistoryEmbeddings(Tensor(np.zeros((1, 3, 4))), Tensor(np.zeros((1, 4, 4))), np.ones((1, 3), bool))


def test_embed_history_offsets_slot_results():
    module = build()
    table = Tensor(np.random.default_rng(0).normal(size=(12, 8)))
    toks = np.array([[2, 5, 6]])
    res = np.array([[1, 4, 0]])
    is_int = np.array([[True, False, False]])
    hist = module.embed_history(table, toks, res, is_int, np.ones((1, 3), bool))
    assert np.array_equal(hist.E_r.data[0, 0], module.intent_results.data[1])
    assert np.array_equal(hist.E_r.data[0, 1], module.slot_results.data[4])
    assert np.array_equal(hist.E_u.data[0, 2], table.data[6])
    with pytest.raises(AlignmentError):
        module.embed_history(table, toks, res[:, :2], is_int, np.ones((1, 3), bool))
