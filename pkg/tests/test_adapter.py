import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from idkit.adapter import (
    AdapterConfig,
    AttentionContext,
    CrossAttentionWeights,
    FaceTokens,
    decoupled_cross_attention,
    encode_face,
    init_adapter,
    mix_identities,
)
from idkit.errors import ConfigurationError, NumericsError, ShapeError
from idkit.features import ImageFeatures

from conftest import tiny_spec


# ---------------------------------------------------------------------------
# Independent brute-force oracle for the decoupled attention rule.


def oracle_softmax_attention(q, k, v):
    scores = q @ k.T / math.sqrt(q.shape[-1])
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    return w @ v


def oracle_decoupled(z, text, image, lam, w_q, w_kt, w_vt, w_ki, w_vi):
    out = oracle_softmax_attention(z @ w_q, text @ w_kt, text @ w_vt)
    if image is not None and lam != 0:
        out = out + lam * oracle_softmax_attention(z @ w_q, image @ w_ki, image @ w_vi)
    return out


def random_instance(rng, with_image=True, dtype=torch.float64):
    n_q = int(rng.integers(1, 5))
    n_text = int(rng.integers(1, 5))
    n_img = int(rng.integers(1, 5))
    d_attn = int(rng.integers(1, 9))
    d_ctx = int(rng.integers(1, 9))
    t = lambda *shape: torch.tensor(rng.standard_normal(shape), dtype=dtype)
    z = t(n_q, d_attn)
    weights = CrossAttentionWeights(
        w_q=t(d_attn, d_attn), w_k_text=t(d_ctx, d_attn), w_v_text=t(d_ctx, d_attn),
        w_k_image=t(d_ctx, d_attn), w_v_image=t(d_ctx, d_attn),
    )
    image = FaceTokens(tokens=t(n_img, d_ctx)) if with_image else None
    ctx = AttentionContext(text_ctx=t(n_text, d_ctx), image_ctx=image,
                           lam=float(rng.uniform(0, 3)) if with_image else 0.0)
    return z, ctx, weights


def test_matches_brute_force_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(50):
        z, ctx, w = random_instance(rng)
        got = decoupled_cross_attention(z, ctx, w).numpy()
        want = oracle_decoupled(
            z.numpy(), ctx.text_ctx.numpy(),
            ctx.image_ctx.tokens.numpy() if ctx.image_ctx else None, ctx.lam,
            w.w_q.numpy(), w.w_k_text.numpy(), w.w_v_text.numpy(),
            w.w_k_image.numpy(), w.w_v_image.numpy(),
        )
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)


def test_lambda_zero_is_bitwise_text_only():
    rng = np.random.default_rng(1)
    z, ctx, w = random_instance(rng)
    ctx.lam = 0.0
    with_image = decoupled_cross_attention(z, ctx, w)
    text_only = decoupled_cross_attention(
        z, AttentionContext(text_ctx=ctx.text_ctx, image_ctx=None, lam=0.0),
        CrossAttentionWeights(w.w_q, w.w_k_text, w.w_v_text, None, None),
    )
    assert torch.equal(with_image, text_only)


@pytest.mark.parametrize("lam", [0.25, 0.5, 2.0])
def test_affine_in_lambda(lam):
    rng = np.random.default_rng(2)
    z, ctx, w = random_instance(rng)

    def at(lv):
        ctx_l = AttentionContext(text_ctx=ctx.text_ctx, image_ctx=ctx.image_ctx, lam=lv)
        return decoupled_cross_attention(z, ctx_l, w)

    z0, z1, zl = at(0.0), at(1.0), at(lam)
    expected = z0 + lam * (z1 - z0)
    np.testing.assert_allclose(zl.numpy(), expected.numpy(), rtol=1e-6, atol=1e-12)


def test_scalar_instance_matches_hand_softmax():
    # 1 query token, 2 text tokens, 1 image token, d = 1, small integers.
    one = lambda v: torch.tensor(v, dtype=torch.float64)
    z = one([[2.0]])
    ctx = AttentionContext(text_ctx=one([[1.0], [3.0]]),
                           image_ctx=FaceTokens(tokens=one([[2.0]])), lam=2.0)
    w = CrossAttentionWeights(w_q=one([[1.0]]), w_k_text=one([[1.0]]), w_v_text=one([[2.0]]),
                              w_k_image=one([[1.0]]), w_v_image=one([[3.0]]))
    # By hand: q=2; text scores (2*1, 2*3) -> softmax(2, 6); values (2, 6).
    e2, e6 = math.exp(2.0), math.exp(6.0)
    text_term = (e2 * 2.0 + e6 * 6.0) / (e2 + e6)
    image_term = 6.0  # single key -> weight 1, value 2*3
    expected = text_term + 2.0 * image_term
    got = float(decoupled_cross_attention(z, ctx, w))
    assert got == pytest.approx(expected, rel=1e-12)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    z, ctx, w = random_instance(rng)
    w.w_k_image.requires_grad_(True)
    w.w_v_image.requires_grad_(True)
    loss = (decoupled_cross_attention(z, ctx, w) ** 2).sum()
    loss.backward()

    h = 1e-6
    for param in (w.w_k_image, w.w_v_image):
        flat = param.detach().reshape(-1)
        grad = param.grad.reshape(-1)
        for idx in range(flat.numel()):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up = float((decoupled_cross_attention(z, ctx, w) ** 2).sum())
                flat[idx] = orig - h
                down = float((decoupled_cross_attention(z, ctx, w) ** 2).sum())
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            assert float(grad[idx]) == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_nan_operand_fails_fast():
    rng = np.random.default_rng(4)
    z, ctx, w = random_instance(rng)
    z[0, 0] = float("nan")
    with pytest.raises(NumericsError):
        decoupled_cross_attention(z, ctx, w)
    z[0, 0] = float("inf")
    with pytest.raises(NumericsError):
        decoupled_cross_attention(z, ctx, w)


def test_shape_mismatch_names_dimensions():
    rng = np.random.default_rng(5)
    z, ctx, w = random_instance(rng)
    bad = torch.zeros(z.shape[0], z.shape[1] + 1, dtype=z.dtype)
    with pytest.raises(ShapeError, match="width"):
        decoupled_cross_attention(bad, ctx, w)


def test_image_context_without_projections_is_config_error():
    rng = np.random.default_rng(6)
    z, ctx, w = random_instance(rng)
    w.w_k_image = None
    w.w_v_image = None
    with pytest.raises(ConfigurationError):
        decoupled_cross_attention(z, ctx, w)


# ---------------------------------------------------------------------------
# Query encoder


def test_zero_output_projection_gives_zero_tokens():
    spec = tiny_spec()
    adapter = init_adapter(spec, seed=0)
    with torch.no_grad():
        adapter.proj.zero_()
    feats = ImageFeatures(tokens=np.random.default_rng(0)
                          .standard_normal((5, adapter.config.d_image)).astype(np.float32))
    out = encode_face(feats, adapter)
    assert out.tokens.shape == (adapter.config.n_queries, spec.d_ctx)
    assert torch.all(out.tokens == 0.0)


def test_encode_face_deterministic_and_tracks_provenance():
    spec = tiny_spec()
    adapter = init_adapter(spec, seed=1)
    feats = ImageFeatures(tokens=np.random.default_rng(1)
                          .standard_normal((4, adapter.config.d_image)).astype(np.float32),
                          source_id="vid7/crop002")
    a = encode_face(feats, adapter)
    b = encode_face(feats, adapter)
    assert torch.equal(a.tokens, b.tokens)
    assert a.provenance == [("vid7/crop002", 1.0)]


def test_single_query_scalar_encoder_matches_hand_softmax():
    spec = tiny_spec(d_ctx=1)
    adapter = init_adapter(spec, n_queries=1, d_query=1, d_image=1, encoder_norm=False, seed=0)
    with torch.no_grad():
        adapter.latent_queries.fill_(2.0)
        adapter.to_q.fill_(1.0)
        adapter.to_k.fill_(1.0)
        adapter.to_v.fill_(1.0)
        adapter.proj.fill_(1.0)
    feats = ImageFeatures(tokens=np.array([[1.0], [3.0]], dtype=np.float32))
    out = float(encode_face(feats, adapter).tokens.detach())
    # q=2, keys (1,3) -> softmax over (2,6), values (1,3)
    e2, e6 = math.exp(2.0), math.exp(6.0)
    expected = (e2 * 1.0 + e6 * 3.0) / (e2 + e6)
    assert out == pytest.approx(expected, rel=1e-6)


def test_encode_face_dimension_mismatch_names_both():
    spec = tiny_spec()
    adapter = init_adapter(spec, d_image=8, seed=0)
    feats = ImageFeatures(tokens=np.zeros((3, 5), dtype=np.float32))
    with pytest.raises(ShapeError, match="5.*8"):
        encode_face(feats, adapter)


def test_encoder_is_differentiable():
    spec = tiny_spec()
    adapter = init_adapter(spec, seed=2)
    feats = torch.randn(4, adapter.config.d_image)
    loss = (adapter.encode(feats) ** 2).sum()
    loss.backward()
    assert adapter.latent_queries.grad is not None
    assert adapter.to_q.grad is not None
    assert adapter.proj.grad is not None


# ---------------------------------------------------------------------------
# Identity mixing


def _tokens(arr, src="a"):
    return FaceTokens(tokens=torch.tensor(arr, dtype=torch.float32), provenance=[(src, 1.0)])


def test_one_hot_mix_is_exact_copy():
    a = _tokens([[1.0, 2.0], [3.0, 4.0]], "a")
    b = _tokens([[5.0, 6.0], [7.0, 8.0]], "b")
    out = mix_identities([a, b], [1.0, 0.0])
    assert torch.equal(out.tokens, a.tokens)
    assert out.provenance == [("a", 1.0)]


def test_mix_same_tokens_is_identity():
    a = _tokens([[1.0, 2.0], [3.0, 4.0]], "a")
    out = mix_identities([a, _tokens([[1.0, 2.0], [3.0, 4.0]], "a2")], [0.5, 0.5])
    assert torch.equal(out.tokens, a.tokens)


def test_mix_weights_arithmetic():
    a = _tokens([[1.0, 2.0], [3.0, 4.0]], "a")
    b = _tokens([[5.0, 6.0], [7.0, 8.0]], "b")
    out = mix_identities([a, b], [0.3, 0.7])
    np.testing.assert_allclose(out.tokens.numpy(),
                               0.3 * a.tokens.numpy() + 0.7 * b.tokens.numpy(), rtol=1e-6)
    assert out.provenance == [("a", pytest.approx(0.3)), ("b", pytest.approx(0.7))]


def test_mix_normalizes_weights_and_rejects_junk():
    a = _tokens([[1.0]], "a")
    b = _tokens([[3.0]], "b")
    out = mix_identities([a, b], [2.0, 2.0])
    assert float(out.tokens) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        mix_identities([], [])
    with pytest.raises(ValueError):
        mix_identities([a, b], [0.0, 0.0])
    with pytest.raises(ValueError):
        mix_identities([a, b], [1.0, -0.5])
    with pytest.raises(ShapeError):
        mix_identities([a, _tokens([[1.0, 2.0]])], [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(
    data=st.lists(st.lists(st.floats(-100, 100), min_size=4, max_size=4), min_size=2, max_size=4),
    raw_weights=st.lists(st.floats(0.01, 10.0), min_size=4, max_size=4),
)
def test_mix_output_lies_within_input_envelope(data, raw_weights):
    tokens = [_tokens([row], f"s{i}") for i, row in enumerate(data)]
    weights = raw_weights[: len(tokens)]
    out = mix_identities(tokens, weights).tokens.numpy()
    stack = np.stack([t.tokens.numpy() for t in tokens])
    lo, hi = stack.min(axis=0), stack.max(axis=0)
    assert np.all(out >= lo - 1e-4) and np.all(out <= hi + 1e-4)


# ---------------------------------------------------------------------------
# Initialization


def test_init_without_donor_is_seeded_and_reproducible():
    spec = tiny_spec()
    a = init_adapter(spec, seed=9)
    b = init_adapter(spec, seed=9)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = init_adapter(spec, seed=10)
    assert not torch.equal(a.latent_queries, c.latent_queries)
    for lid in a.layer_widths:
        assert torch.all(a.to_v_image[lid] == 0.0)
        assert not torch.all(a.to_k_image[lid] == 0.0)


def test_full_donor_is_copied_bitwise():
    spec = tiny_spec()
    rng = np.random.default_rng(11)
    donor = {}
    for lid, w in spec.cross_attention_widths().items():
        donor[f"{lid}.k"] = rng.standard_normal((spec.d_ctx, w)).astype(np.float32)
        donor[f"{lid}.v"] = rng.standard_normal((spec.d_ctx, w)).astype(np.float32)
    adapter = init_adapter(spec, seed=0, donor=donor)
    for lid in spec.cross_attention_widths():
        assert np.array_equal(adapter.to_k_image[lid].detach().numpy(), donor[f"{lid}.k"])
        assert np.array_equal(adapter.to_v_image[lid].detach().numpy(), donor[f"{lid}.v"])


def test_partial_donor_covers_some_layers_and_rest_passes_init_stats():
    spec = tiny_spec()
    widths = spec.cross_attention_widths()
    first = next(iter(widths))
    rng = np.random.default_rng(12)
    donor = {f"{first}.k": rng.standard_normal((spec.d_ctx, widths[first])).astype(np.float32),
             f"{first}.v": rng.standard_normal((spec.d_ctx, widths[first])).astype(np.float32)}
    adapter = init_adapter(spec, seed=0, donor=donor)
    assert np.array_equal(adapter.to_k_image[first].detach().numpy(), donor[f"{first}.k"])
    for lid, w in widths.items():
        if lid == first:
            continue
        k = adapter.to_k_image[lid].detach().numpy()
        n = k.size
        # Sample mean of N(0, 0.02) entries stays within 3 sigma of zero.
        assert abs(k.mean()) <= 3 * 0.02 / math.sqrt(n)
        assert np.all(adapter.to_v_image[lid].detach().numpy() == 0.0)


def test_donor_shape_mismatch_lists_offending_keys():
    spec = tiny_spec()
    donor = {"cross0.k": np.zeros((3, 3), dtype=np.float32)}
    with pytest.raises(ConfigurationError, match="cross0.k"):
        init_adapter(spec, seed=0, donor=donor)
    with pytest.raises(ConfigurationError, match="nope.k"):
        init_adapter(spec, seed=0, donor={"nope.k": np.zeros((1, 1), dtype=np.float32)})


def test_adapter_config_roundtrip():
    c = AdapterConfig(n_queries=4, d_query=8, d_image=3, d_ctx=6, encoder_norm=False,
                      lambda_default=0.5, seed=3)
    assert AdapterConfig.from_dict(c.to_dict()) == c
