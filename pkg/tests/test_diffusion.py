import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from idkit.backbone import ConditionBundle, TextEmbedder
from idkit.diffusion import (
    GenerationConfig,
    LatentVideo,
    NoiseSchedule,
    TrainSample,
    cfg_sample,
    decode_latent,
    encode_frames,
    forward_diffuse,
    sampling_timesteps,
    training_loss,
)
from idkit.errors import ShapeError
from idkit.rng import normal32, substream

from conftest import tiny_spec


# ---------------------------------------------------------------------------
# Schedule


def test_linear_schedule_invariants():
    sched = NoiseSchedule.linear(1000)
    ab = sched.alpha_bars
    assert sched.n_steps == 1000
    assert ab[0] == 1.0
    assert np.all((sched.betas > 0) & (sched.betas < 1))
    assert np.all((ab > 0) & (ab <= 1.0))
    assert np.all(np.diff(ab) <= 0)
    assert ab[0] > ab[-1]
    assert ab[-1] < 1e-3  # end of the schedule is effectively pure noise


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        NoiseSchedule(betas=np.array([0.5]))
    with pytest.raises(ValueError):
        NoiseSchedule(betas=np.array([0.1, 1.2]))
    with pytest.raises(ValueError):
        NoiseSchedule(betas=np.array([0.0, 0.1]))


# ---------------------------------------------------------------------------
# Forward process


def test_t_zero_is_clean_latent():
    sched = NoiseSchedule.linear(100)
    z = torch.randn(2, 3, 4, 4)
    eps = torch.randn_like(z)
    out = forward_diffuse(z, 0, eps, sched)
    np.testing.assert_allclose(out.numpy(), z.numpy(), atol=1e-6, rtol=0)


def test_zero_noise_scales_exactly():
    sched = NoiseSchedule.linear(100)
    z = torch.randn(2, 3, 4, 4)
    t = 42
    out = forward_diffuse(z, t, torch.zeros_like(z), sched)
    assert torch.equal(out, np.sqrt(float(sched.alpha_bars[t])) * z)


def test_alpha_bar_three_quarters_arithmetic():
    # betas = [0.25, ...] puts alpha_bar[1] at exactly 0.75.
    sched = NoiseSchedule(betas=np.array([0.25, 0.1]))
    assert sched.alpha_bars[1] == 0.75
    z = torch.zeros(1, 2, 2, 2)
    eps = torch.ones_like(z)
    out = forward_diffuse(z, 1, eps, sched)
    assert torch.all(out == 0.5)


def test_forward_diffuse_validates():
    sched = NoiseSchedule.linear(10)
    z = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ShapeError):
        forward_diffuse(z, 1, torch.zeros(1, 1, 2, 3), sched)
    with pytest.raises(ValueError):
        forward_diffuse(z, 10, torch.zeros_like(z), sched)
    out = forward_diffuse(LatentVideo(z=z), 1, torch.zeros_like(z), sched)
    assert out.shape == z.shape


def test_variance_preservation_every_t():
    sched = NoiseSchedule.linear(1000)
    rng = np.random.default_rng(0)
    n = 10_000
    z = rng.standard_normal(n)
    eps = rng.standard_normal(n)
    ab = sched.alpha_bars[:, None]
    z_t = np.sqrt(ab) * z[None, :] + np.sqrt(1 - ab) * eps[None, :]
    var = z_t.var(axis=1)
    assert var.shape == (1000,)
    assert np.all(np.abs(var - 1.0) < 0.05)


# ---------------------------------------------------------------------------
# Training loss


def _bundle(spec):
    return ConditionBundle(text_embedding=TextEmbedder(spec).embed("x"))


def test_perfect_prediction_gives_zero_loss():
    spec = tiny_spec()
    sched = NoiseSchedule.linear(spec.n_steps)
    rng = np.random.default_rng(0)
    batch = []
    eps_store = {}
    for i in range(3):
        z = torch.from_numpy(normal32(rng, (2, 3, 4, 4)))
        eps = torch.from_numpy(normal32(rng, (2, 3, 4, 4)))
        batch.append(TrainSample(z=z, t=int(rng.integers(spec.n_steps)), eps=eps,
                                 cond=_bundle(spec), record_id=str(i)))
        eps_store[id(batch[-1].cond)] = eps

    def stub(z_t, t, cond):
        return eps_store[id(cond)]

    assert float(training_loss(batch, stub, sched)) == 0.0


def test_unit_error_gives_unit_loss():
    spec = tiny_spec()
    sched = NoiseSchedule.linear(spec.n_steps)
    z = torch.zeros(2, 3, 4, 4)
    batch = [TrainSample(z=z, t=3, eps=torch.zeros_like(z), cond=_bundle(spec))]
    assert float(training_loss(batch, lambda *_: torch.ones_like(z), sched)) == pytest.approx(1.0)


def test_loss_matches_hand_summed_oracle():
    spec = tiny_spec()
    sched = NoiseSchedule.linear(spec.n_steps)
    rng = np.random.default_rng(1)
    batch = []
    preds = []
    for _ in range(4):
        z = torch.from_numpy(normal32(rng, (2, 2, 2, 2)))
        eps = torch.from_numpy(normal32(rng, (2, 2, 2, 2)))
        batch.append(TrainSample(z=z, t=int(rng.integers(spec.n_steps)), eps=eps, cond=_bundle(spec)))
        preds.append(torch.from_numpy(normal32(rng, (2, 2, 2, 2))))
    it = iter(preds)
    got = float(training_loss(batch, lambda *_: next(it), sched))
    want = sum(float(((p - s.eps) ** 2).sum()) for p, s in zip(preds, batch))
    want /= sum(s.eps.numel() for s in batch)
    assert got == pytest.approx(want, rel=1e-6)


def test_loss_is_order_invariant():
    spec = tiny_spec()
    sched = NoiseSchedule.linear(spec.n_steps)
    rng = np.random.default_rng(2)
    batch = []
    for _ in range(4):
        z = torch.from_numpy(normal32(rng, (2, 3, 4, 4)))
        eps = torch.from_numpy(normal32(rng, (2, 3, 4, 4)))
        batch.append(TrainSample(z=z, t=int(rng.integers(spec.n_steps)), eps=eps, cond=_bundle(spec)))
    predictor = lambda z_t, t, cond: 0.5 * z_t
    a = float(training_loss(batch, predictor, sched))
    b = float(training_loss(batch[::-1], predictor, sched))
    assert a == pytest.approx(b, rel=1e-6)
    with pytest.raises(ValueError):
        training_loss([], predictor, sched)


# ---------------------------------------------------------------------------
# Sampler


def test_sampling_timesteps_contract():
    taus = sampling_timesteps(1000, 10)
    assert taus[0] == 999 and taus[-1] == 0
    assert len(taus) == 10 and np.all(np.diff(taus) < 0)
    with pytest.raises(ValueError, match="< requested"):
        sampling_timesteps(10, 11)
    with pytest.raises(ValueError):
        sampling_timesteps(10, 1)


def _sample_setup(spec, steps, guidance, seed=0, n_steps=None):
    sched = NoiseSchedule.linear(n_steps or spec.n_steps)
    emb = TextEmbedder(spec)
    cond = ConditionBundle(text_embedding=emb.embed("a person"))
    uncond = ConditionBundle.null(emb)
    config = GenerationConfig(prompt="a person", frames=spec.frames, steps=steps,
                              guidance_scale=guidance, seed=seed)
    return sched, config, cond, uncond


def test_constant_eps_matches_closed_form_update_rule():
    # 3-step schedule, stub predictor returning a constant; the trajectory is
    # two applications of the posterior update, written out by hand.
    spec = tiny_spec()
    sched = NoiseSchedule(betas=np.array([0.2, 0.3, 0.4]))
    emb = TextEmbedder(spec)
    config = GenerationConfig(prompt="p", frames=2, steps=3, guidance_scale=1.0, seed=5)
    const = 0.7

    def stub(z_t, t, cond):
        return torch.full_like(z_t, const)

    cond = ConditionBundle(text_embedding=emb.embed("p"))
    out = cfg_sample(config, sched, spec, stub, cond, ConditionBundle.null(emb)).z.numpy()

    ab = sched.alpha_bars  # [1.0, 0.8, 0.8*0.7]
    shape = (2, spec.latent_channels, spec.latent_size, spec.latent_size)
    z = normal32(substream(5, "sample_init"), shape).astype(np.float64)
    for i, (tc, tp) in enumerate([(2, 1), (1, 0)]):
        alpha = ab[tc] / ab[tp]
        mean = (z - (1 - alpha) / np.sqrt(1 - ab[tc]) * const) / np.sqrt(alpha)
        sigma = np.sqrt((1 - ab[tp]) / (1 - ab[tc]) * (1 - alpha))
        noise = normal32(substream(5, "sample_noise", i), shape)
        z = mean + sigma * noise
    np.testing.assert_allclose(out, z, rtol=1e-5, atol=1e-6)


def test_guidance_one_never_evaluates_unconditional_branch():
    spec = tiny_spec()
    sched, config, cond, uncond = _sample_setup(spec, steps=5, guidance=1.0)

    def explode(z_t, t, bundle):
        raise AssertionError("unconditional branch evaluated")

    def predictor(z_t, t, bundle):
        if bundle is uncond:
            return explode(z_t, t, bundle)
        return 0.1 * z_t

    out = cfg_sample(config, sched, spec, predictor, cond, uncond)
    assert out.z.shape == (spec.frames, spec.latent_channels, spec.latent_size, spec.latent_size)


def test_guidance_zero_never_evaluates_conditional_branch():
    spec = tiny_spec()
    sched, config, cond, uncond = _sample_setup(spec, steps=5, guidance=0.0)

    def predictor(z_t, t, bundle):
        assert bundle is uncond, "conditional branch evaluated"
        return 0.1 * z_t

    cfg_sample(config, sched, spec, predictor, cond, uncond)


def test_guidance_collapse_identities_are_bitwise():
    # s=1 must equal a conditional-only sampler, s=0 an unconditional-only
    # one; the reference loops below re-run the exact update arithmetic.
    spec = tiny_spec()
    emb = TextEmbedder(spec)
    cond = ConditionBundle(text_embedding=emb.embed("somebody dancing"))
    uncond = ConditionBundle.null(emb)
    sched = NoiseSchedule.linear(spec.n_steps)

    def predictor(z_t, t, bundle):
        scale = 0.3 if bundle is cond else -0.2
        return scale * z_t + 0.01 * t

    def manual_single_branch(bundle, seed, steps):
        taus = sampling_timesteps(sched.n_steps, steps)
        shape = (spec.frames, spec.latent_channels, spec.latent_size, spec.latent_size)
        z = torch.from_numpy(normal32(substream(seed, "sample_init"), shape))
        for i in range(len(taus) - 1):
            t_cur, t_prev = int(taus[i]), int(taus[i + 1])
            eps_hat = predictor(z, t_cur, bundle)
            ab_cur = float(sched.alpha_bars[t_cur])
            ab_prev = float(sched.alpha_bars[t_prev])
            alpha = ab_cur / ab_prev
            mean = (z - (1.0 - alpha) / np.sqrt(1.0 - ab_cur) * eps_hat) / np.sqrt(alpha)
            sigma = np.sqrt((1.0 - ab_prev) / (1.0 - ab_cur) * (1.0 - alpha))
            noise = torch.from_numpy(normal32(substream(seed, "sample_noise", i), shape))
            z = mean + sigma * noise
        return z

    for s, branch in [(1.0, cond), (0.0, uncond)]:
        config = GenerationConfig(prompt="somebody dancing", frames=spec.frames, steps=6,
                                  guidance_scale=s, seed=11)
        got = cfg_sample(config, sched, spec, predictor, cond, uncond).z
        want = manual_single_branch(branch, 11, 6)
        assert torch.equal(got, want), f"s={s}"


def test_sampling_is_seed_deterministic():
    spec = tiny_spec()
    sched, config, cond, uncond = _sample_setup(spec, steps=4, guidance=2.0, seed=3)
    predictor = lambda z_t, t, bundle: 0.05 * z_t
    a = cfg_sample(config, sched, spec, predictor, cond, uncond).z
    b = cfg_sample(config, sched, spec, predictor, cond, uncond).z
    assert torch.equal(a, b)


def test_more_sampling_steps_than_schedule_is_an_error():
    spec = tiny_spec(n_steps=8)
    sched, config, cond, uncond = _sample_setup(spec, steps=9, guidance=1.0, n_steps=8)
    with pytest.raises(ValueError, match="< requested"):
        cfg_sample(config, sched, spec, lambda z, t, c: z, cond, uncond)


# ---------------------------------------------------------------------------
# Latent codec


def test_encode_decode_identity_within_tolerance():
    spec = tiny_spec()
    rng = np.random.default_rng(4)
    z = torch.from_numpy((rng.uniform(-2, 2, size=(3, 3, 8, 8))).astype(np.float32))
    frames = decode_latent(z, spec)
    z2 = encode_frames(frames, spec)
    assert float((z2 - z).abs().max()) < 1e-6


def test_decode_zero_is_mid_gray():
    spec = tiny_spec()
    out = decode_latent(torch.zeros(1, 3, 8, 8), spec)
    assert np.all(out == 0.5)
    assert out.shape == (1, 64, 64, 3)


def test_decode_clamps_to_unit_range():
    spec = tiny_spec()
    out = decode_latent(10.0 * torch.ones(1, 3, 8, 8), spec)
    assert out.max() == 1.0
    out = decode_latent(-10.0 * torch.ones(1, 3, 8, 8), spec)
    assert out.min() == 0.0


def test_codec_shape_validation():
    spec = tiny_spec()
    with pytest.raises(ShapeError):
        encode_frames(np.zeros((2, 63, 64, 3), dtype=np.float32), spec)
    with pytest.raises(ShapeError):
        decode_latent(torch.zeros(1, 4, 8, 8), spec)


# ---------------------------------------------------------------------------
# GenerationConfig


def test_generation_config_json_uses_lambda_key():
    config = GenerationConfig(prompt="hi", reference_images=["a.png"], mix_weights=[1.0],
                              lambda_scale=0.7, guidance_scale=2.0, frames=4, steps=5, seed=9)
    d = config.to_dict()
    assert d["lambda"] == 0.7 and "lambda_scale" not in d
    back = GenerationConfig.from_json(config.to_json())
    assert back == config


def test_generation_config_validation():
    with pytest.raises(ValueError):
        GenerationConfig(prompt="x", guidance_scale=-1.0)
    with pytest.raises(ValueError):
        GenerationConfig(prompt="x", reference_images=["a", "b"], mix_weights=[1.0])


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 6), scale=st.floats(-1.9, 1.9))
def test_latent_video_accepts_finite_4d(t, scale):
    lv = LatentVideo(z=torch.full((t, 3, 4, 4), float(scale)))
    assert lv.z.shape[0] == t
